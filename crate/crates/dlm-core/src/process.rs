//! The absorbing forward process and its closed-form distributions.
//!
//! Corruption replaces each token independently by MASK; a token that has
//! been absorbed never leaves. Every distribution that arises (marginal,
//! transition, backward posterior) is therefore supported on at most two
//! atoms, one ordinary token and MASK, captured by [`Categorical2`]. The
//! full K x K transition matrices are never materialized.
//!
//! All probability arithmetic here is `f64` regardless of model precision;
//! the identity tests demand 1e-12 agreement.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::seq::{TokenId, TokenSeq, MASK_ID};

/// A two-atom distribution: `stay_prob` on `token`, `mask_prob` on MASK.
/// When `token` is itself MASK the two atoms coincide and the whole mass
/// sits on MASK.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Categorical2 {
    pub token: TokenId,
    pub stay_prob: f64,
    pub mask_prob: f64,
}

impl Categorical2 {
    fn new(token: TokenId, stay_prob: f64, mask_prob: f64) -> Self {
        debug_assert!((stay_prob + mask_prob - 1.0).abs() <= 1e-12);
        debug_assert!(stay_prob >= 0.0 && mask_prob >= 0.0);
        Self { token, stay_prob, mask_prob }
    }

    /// Total probability mass on `id`.
    pub fn prob_of(&self, id: TokenId) -> f64 {
        let mut p = 0.0;
        if id == self.token {
            p += self.stay_prob;
        }
        if id == MASK_ID {
            p += self.mask_prob;
        }
        p
    }

    /// Draws one token given a uniform variate `u` in `[0, 1)`.
    pub fn sample_with(&self, u: f64) -> TokenId {
        if u < self.stay_prob {
            self.token
        } else {
            MASK_ID
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> TokenId {
        self.sample_with(rng.gen::<f64>())
    }
}

/// Marginal of the forward process at time `t` given clean token `x0_id`:
/// survive with probability `alpha(t)`, otherwise MASK.
pub fn forward_marginal(
    schedule: &NoiseSchedule,
    x0_id: TokenId,
    t: f64,
) -> Result<Categorical2> {
    if x0_id == MASK_ID {
        return Err(Error::domain("forward_marginal: x0 must not be MASK"));
    }
    let a = schedule.alpha(t)?;
    Ok(Categorical2::new(x0_id, a, 1.0 - a))
}

/// Transition from state `xs_id` at time `s` to time `t > s`: MASK is
/// absorbing; a live token survives with probability `alpha(t)/alpha(s)`.
pub fn forward_transition(
    schedule: &NoiseSchedule,
    xs_id: TokenId,
    s: f64,
    t: f64,
) -> Result<Categorical2> {
    let a_s = schedule.alpha(s)?;
    let a_t = schedule.alpha(t)?;
    if s >= t {
        return Err(Error::domain(format!(
            "forward_transition: need s < t, got s = {s}, t = {t}"
        )));
    }
    if xs_id == MASK_ID {
        return Ok(Categorical2::new(MASK_ID, 0.0, 1.0));
    }
    if a_s == 0.0 {
        return Err(Error::domain(
            "forward_transition: live token at a time where alpha = 0",
        ));
    }
    let stay = a_t / a_s;
    Ok(Categorical2::new(xs_id, stay, 1.0 - stay))
}

/// Backward posterior over the state at time `s` given the state at time
/// `t` and the clean token. A non-MASK observation pins the past to the
/// clean token; a MASK observation jumps back to it with probability
/// `(alpha(s) - alpha(t)) / (1 - alpha(t))`.
pub fn backward_posterior(
    schedule: &NoiseSchedule,
    xt_id: TokenId,
    x0_id: TokenId,
    s: f64,
    t: f64,
) -> Result<Categorical2> {
    if x0_id == MASK_ID {
        return Err(Error::domain("backward_posterior: x0 must not be MASK"));
    }
    if t == 0.0 {
        return Err(Error::domain("backward_posterior: t = 0 is degenerate"));
    }
    let a_s = schedule.alpha(s)?;
    let a_t = schedule.alpha(t)?;
    if s >= t {
        return Err(Error::domain(format!(
            "backward_posterior: need s < t, got s = {s}, t = {t}"
        )));
    }
    if xt_id != MASK_ID {
        return Ok(Categorical2::new(x0_id, 1.0, 0.0));
    }
    let jump = (a_s - a_t) / (1.0 - a_t);
    Ok(Categorical2::new(x0_id, jump, 1.0 - jump))
}

/// One corrupted sequence: the noisy ids, which positions were absorbed,
/// the time drawn for the item, and the clean labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptedSeq {
    pub noisy: TokenSeq,
    pub mask_indicator: Vec<bool>,
    pub t: f64,
    pub labels: TokenSeq,
}

impl CorruptedSeq {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Internal-consistency check used by tests and debug assertions.
    pub fn validate(&self) -> Result<()> {
        if self.noisy.len() != self.labels.len() || self.mask_indicator.len() != self.labels.len()
        {
            return Err(Error::shape("CorruptedSeq: field lengths disagree"));
        }
        for (n, &masked) in self.mask_indicator.iter().enumerate() {
            let id = self.noisy.ids[n];
            if masked != (id == MASK_ID) {
                return Err(Error::domain("mask_indicator inconsistent with noisy ids"));
            }
            if !masked && id != self.labels.ids[n] {
                return Err(Error::domain("unmasked position disagrees with label"));
            }
        }
        Ok(())
    }
}

/// A batch of independently corrupted sequences; each item carries its own
/// time draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptedBatch {
    pub items: Vec<CorruptedSeq>,
}

impl CorruptedBatch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Draws one forward-process sample at time `t`: every position is
/// independently absorbed with probability `1 - alpha(t)`.
pub fn corrupt_sequence(
    schedule: &NoiseSchedule,
    x0: &TokenSeq,
    t: f64,
    rng: &mut impl Rng,
) -> Result<CorruptedSeq> {
    if !x0.is_clean() {
        return Err(Error::domain("corrupt_sequence: x0 contains MASK"));
    }
    if t < schedule.eps || t > 1.0 {
        return Err(Error::domain(format!(
            "corrupt_sequence: t = {t} outside [{}, 1]",
            schedule.eps
        )));
    }
    let mask_prob = 1.0 - schedule.alpha(t)?;
    let n = x0.len();
    let mut noisy = Vec::with_capacity(n);
    let mut mask_indicator = Vec::with_capacity(n);
    for &id in &x0.ids {
        let masked = rng.gen::<f64>() < mask_prob;
        noisy.push(if masked { MASK_ID } else { id });
        mask_indicator.push(masked);
    }
    Ok(CorruptedSeq {
        noisy: TokenSeq { ids: noisy },
        mask_indicator,
        t,
        labels: x0.clone(),
    })
}

/// One reverse-KL step term in nats, with a saturation flag for the
/// `model_prob_on_x0 = 0` case (the term is then +inf).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlTerm {
    pub nats: f64,
    pub saturated: bool,
}

/// The per-position KL between the true backward posterior and the model's
/// parameterized reverse step, reduced to its closed form: zero when the
/// observed state is not MASK, otherwise the jump probability times the
/// negative log of the model's mass on the clean token.
pub fn kl_step_term(
    schedule: &NoiseSchedule,
    x0_id: TokenId,
    xt_id: TokenId,
    model_prob_on_x0: f64,
    s: f64,
    t: f64,
) -> Result<KlTerm> {
    if x0_id == MASK_ID {
        return Err(Error::domain("kl_step_term: x0 must not be MASK"));
    }
    if !(0.0..=1.0).contains(&model_prob_on_x0) {
        return Err(Error::domain(format!(
            "kl_step_term: model probability {model_prob_on_x0} outside [0, 1]"
        )));
    }
    if xt_id != MASK_ID {
        return Ok(KlTerm { nats: 0.0, saturated: false });
    }
    let post = backward_posterior(schedule, xt_id, x0_id, s, t)?;
    if model_prob_on_x0 == 0.0 {
        return Ok(KlTerm { nats: f64::INFINITY, saturated: true });
    }
    Ok(KlTerm {
        nats: -post.stay_prob * model_prob_on_x0.ln(),
        saturated: false,
    })
}

/// Log-softmax of one logits row, evaluated at `label`, in f64.
pub(crate) fn log_softmax_at(row: &[f64], label: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    row[label] - lse
}

/// Per-sequence diffusion loss: `weight(t)` times the summed cross-entropy
/// of the shifted logits against the clean labels at masked positions.
/// Position 0 is always excluded (its shifted slot has no left context),
/// and unmasked positions contribute exactly zero, so their logits are
/// never read. `shifted_logits` is row-major `[n, vocab_size]`.
pub fn diffusion_loss_item(
    shifted_logits: &[f64],
    vocab_size: usize,
    item: &CorruptedSeq,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let n = item.len();
    if shifted_logits.len() != n * vocab_size {
        return Err(Error::shape(format!(
            "diffusion_loss: logits are {} values, want {} x {}",
            shifted_logits.len(),
            n,
            vocab_size
        )));
    }
    let mut ce_sum = 0.0;
    for pos in 1..n {
        if !item.mask_indicator[pos] {
            continue;
        }
        let label = item.labels.ids[pos] as usize;
        if label >= vocab_size {
            return Err(Error::shape(format!(
                "diffusion_loss: label {label} outside vocab of {vocab_size}"
            )));
        }
        let row = &shifted_logits[pos * vocab_size..(pos + 1) * vocab_size];
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "diffusion_loss: non-finite logits at position {pos}"
            )));
        }
        ce_sum -= log_softmax_at(row, label);
    }
    if ce_sum == 0.0 {
        return Ok(0.0);
    }
    Ok(schedule.loss_weight(item.t)? * ce_sum)
}

/// Batch diffusion loss: the mean over items of [`diffusion_loss_item`].
pub fn diffusion_loss(
    shifted_logits: &[Vec<f64>],
    vocab_size: usize,
    batch: &CorruptedBatch,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    if shifted_logits.len() != batch.len() {
        return Err(Error::shape(format!(
            "diffusion_loss: {} logit blocks for {} batch items",
            shifted_logits.len(),
            batch.len()
        )));
    }
    if batch.is_empty() {
        return Err(Error::shape("diffusion_loss: empty batch"));
    }
    let mut total = 0.0;
    for (logits, item) in shifted_logits.iter().zip(&batch.items) {
        total += diffusion_loss_item(logits, vocab_size, item, schedule)?;
    }
    Ok(total / batch.len() as f64)
}
