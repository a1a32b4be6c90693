//! Iterative denoising generation and infilling.
//!
//! A generation run keeps a fixed-length buffer with BOS pinned at slot 0
//! and all free positions initialized to MASK, then walks the time grid
//! t_i = i/T down to zero. Each step forwards the buffer with full
//! attention, samples a clean-token candidate for every position p from
//! logits row p-1 (the model is shift-trained: row p-1 scores token p),
//! and unmasks positions either by the backward posterior's jump coin or
//! by taking the highest-confidence candidates. Non-MASK positions are
//! never altered, so prefix/suffix constraints are preserved bit-exact.
//!
//! The buffer formulation is the fixed-point of the textbook loop that
//! right-shifts the buffer and re-prepends the start token every step:
//! instead of physically shifting, the candidate for position p is read
//! from row p-1 and BOS stays pinned. Slot 0 is reserved; the returned
//! sequence is slots 1.. of the buffer.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::full_mask;
use crate::error::{Error, Result};
use crate::linalg::to_f64;
use crate::model::{forward, ModelParams};
use crate::process::backward_posterior;
use crate::schedule::NoiseSchedule;
use crate::seq::{TokenId, TokenSeq, BOS_ID, MASK_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnmaskStrategy {
    /// Per-position independent jump coin from the backward posterior.
    Posterior,
    /// Unmask the expected number of positions, highest candidate
    /// probability first.
    Confidence,
}

/// Generation settings. `steps` is the diffusion step count (T) and
/// `buffer_len` the buffer length (N); the output has `buffer_len - 1`
/// tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub buffer_len: usize,
    pub strategy: UnmaskStrategy,
    pub top_k: Option<usize>,
    pub top_p: Option<f64>,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 16,
            buffer_len: 40,
            strategy: UnmaskStrategy::Posterior,
            top_k: None,
            top_p: None,
            temperature: 1.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::config("steps must be >= 1"));
        }
        if self.buffer_len < 2 {
            return Err(Error::config("buffer_len must be >= 2"));
        }
        // NaN must fail this check too, hence the explicit comparison.
        if self.temperature.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::config("temperature must be positive"));
        }
        if let Some(p) = self.top_p {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::config(format!("top_p {p} outside (0, 1]")));
            }
        }
        if self.top_k == Some(0) {
            return Err(Error::config("top_k must be >= 1 when set"));
        }
        Ok(())
    }
}

/// Positions clamped to fixed ids for the whole run. Empty means
/// unconditional; a prefix gives completion; prefix plus suffix with an
/// interior hole gives infilling.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationConstraint {
    pub fixed: BTreeMap<usize, TokenId>,
}

impl GenerationConstraint {
    pub fn none() -> Self {
        Self::default()
    }

    /// Builds from (position, id) pairs. Slot 0 belongs to BOS and may
    /// not be constrained; MASK may not be pinned; conflicting duplicates
    /// are rejected.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, TokenId)>) -> Result<Self> {
        let mut fixed = BTreeMap::new();
        for (pos, id) in pairs {
            if pos == 0 {
                return Err(Error::config("constraint conflicts with the reserved BOS slot 0"));
            }
            if id == MASK_ID {
                return Err(Error::config(format!("constraint at {pos} pins the MASK token")));
            }
            if let Some(&prev) = fixed.get(&pos) {
                if prev != id {
                    return Err(Error::config(format!(
                        "conflicting constraints at position {pos}: {prev} vs {id}"
                    )));
                }
            }
            fixed.insert(pos, id);
        }
        Ok(Self { fixed })
    }

    pub fn validate_for(&self, buffer_len: usize, vocab_size: usize) -> Result<()> {
        for (&pos, &id) in &self.fixed {
            if pos == 0 || pos >= buffer_len {
                return Err(Error::config(format!(
                    "constraint position {pos} outside [1, {buffer_len})"
                )));
            }
            if id == MASK_ID {
                return Err(Error::config(format!("constraint at {pos} pins the MASK token")));
            }
            if id as usize >= vocab_size {
                return Err(Error::config(format!(
                    "constraint id {id} outside vocab of {vocab_size}"
                )));
            }
        }
        Ok(())
    }
}

/// One generation step as recorded in the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub t: f64,
    pub s: f64,
    pub masked_before: usize,
    pub newly_unmasked: Vec<usize>,
    pub buffer: TokenSeq,
}

/// Full audit trail of a generation run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleTrace {
    pub steps: Vec<TraceStep>,
    /// For each buffer position, the step index at which it left MASK
    /// (constrained and BOS slots never enter MASK, so stay None).
    pub unmask_step: Vec<Option<usize>>,
}

impl SampleTrace {
    /// A position, once non-MASK, must keep its id for the rest of the
    /// run, and the per-step unmask sets must be disjoint.
    pub fn validate(&self) -> Result<()> {
        let mut seen: BTreeMap<usize, TokenId> = BTreeMap::new();
        for step in &self.steps {
            for (p, &id) in step.buffer.ids.iter().enumerate() {
                if let Some(&prev) = seen.get(&p) {
                    if id != prev {
                        return Err(Error::domain(format!(
                            "position {p} changed from {prev} to {id} after unmasking"
                        )));
                    }
                } else if id != MASK_ID {
                    seen.insert(p, id);
                }
            }
        }
        let mut unmasked_once: Vec<usize> =
            self.steps.iter().flat_map(|s| s.newly_unmasked.iter().copied()).collect();
        let before = unmasked_once.len();
        unmasked_once.sort_unstable();
        unmasked_once.dedup();
        if unmasked_once.len() != before {
            return Err(Error::domain("a position was unmasked twice"));
        }
        Ok(())
    }

    /// One structured-text record per step: step index, times, masked
    /// count before the step, and the newly unmasked positions.
    pub fn export_lines(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Line<'a> {
            step: usize,
            t: f64,
            s: f64,
            masked_before: usize,
            newly_unmasked: &'a [usize],
        }
        let mut out = String::new();
        for st in &self.steps {
            out.push_str(&serde_json::to_string(&Line {
                step: st.step,
                t: st.t,
                s: st.s,
                masked_before: st.masked_before,
                newly_unmasked: &st.newly_unmasked,
            })?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Filtered sampling distribution over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub probs: Vec<f64>,
    /// True when filtering removed all probability mass (e.g. MASK held
    /// essentially all of it) and the distribution fell back to a one-hot
    /// on the best non-MASK score.
    pub argmax_fallback: bool,
}

/// Temperature-scaled softmax restricted to the top-k set and the
/// smallest nucleus reaching `top_p`, renormalized; MASK always gets
/// probability zero.
pub fn logits_filter(scores: &[f64], cfg: &SamplerConfig) -> Result<FilterOutcome> {
    cfg.validate()?;
    let k = scores.len();
    if k < 2 {
        return Err(Error::shape("logits_filter needs at least two scores"));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("logits_filter: non-finite score"));
    }
    let scaled: Vec<f64> = scores.iter().map(|&v| v / cfg.temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = scaled.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= z;
    }
    if (MASK_ID as usize) < k {
        probs[MASK_ID as usize] = 0.0;
    }

    // Order once, most probable first; ties broken by lower id.
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));

    if let Some(top_k) = cfg.top_k {
        for &i in order.iter().skip(top_k) {
            probs[i] = 0.0;
        }
    }
    if let Some(top_p) = cfg.top_p {
        let mut cum = 0.0;
        let mut done = false;
        for &i in &order {
            if done {
                probs[i] = 0.0;
            } else {
                cum += probs[i];
                // The crossing element stays in the nucleus.
                done = cum >= top_p;
            }
        }
    }

    let total: f64 = probs.iter().sum();
    if total <= 0.0 {
        // All mass filtered out; fall back to the best non-MASK score.
        let best = (0..k)
            .filter(|&i| i != MASK_ID as usize)
            .max_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(b.cmp(&a)))
            .expect("k >= 2 leaves a non-MASK id");
        let mut one_hot = vec![0.0; k];
        one_hot[best] = 1.0;
        return Ok(FilterOutcome { probs: one_hot, argmax_fallback: true });
    }
    for p in &mut probs {
        *p /= total;
    }
    Ok(FilterOutcome { probs, argmax_fallback: false })
}

fn sample_index(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
            cum += p;
            if u < cum {
                return i;
            }
        }
    }
    last_positive
}

/// One reverse-process step from time `t` to time `s`: forward with full
/// attention, candidate per position from the row before it, then unmask
/// per the strategy. Constrained and already-unmasked positions pass
/// through untouched.
pub fn denoise_step(
    params: &ModelParams<f32>,
    buffer: &TokenSeq,
    t: f64,
    s: f64,
    constraint: &GenerationConstraint,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TokenSeq> {
    let n = buffer.len();
    if buffer.ids[0] != BOS_ID {
        return Err(Error::domain("denoise_step: buffer[0] must be BOS"));
    }
    if s >= t {
        return Err(Error::domain(format!("denoise_step: need s < t, got s = {s}, t = {t}")));
    }
    constraint.validate_for(n, params.config.vocab_size)?;
    let schedule = NoiseSchedule::linear();
    let mask = full_mask(n);
    let logits = forward(params, buffer, &mask)?;

    // Candidate clean token for every position, drawn in position order
    // so runs are reproducible; unused candidates still consume draws,
    // matching the all-positions sampling of the reverse process.
    let mut candidates = vec![(0 as TokenId, 0.0f64); n];
    for (p, slot) in candidates.iter_mut().enumerate().skip(1) {
        let row: Vec<f64> = logits.row(p - 1).iter().map(|&v| to_f64(v)).collect();
        let filtered = logits_filter(&row, cfg)?;
        let idx = sample_index(&filtered.probs, rng);
        *slot = (idx as TokenId, filtered.probs[idx]);
    }

    let mut out = buffer.clone();
    let masked: Vec<usize> = (1..n).filter(|&p| buffer.ids[p] == MASK_ID).collect();
    match cfg.strategy {
        UnmaskStrategy::Posterior => {
            for &p in &masked {
                let (cand, _) = candidates[p];
                let posterior = backward_posterior(&schedule, MASK_ID, cand, s, t)?;
                let u: f64 = rng.gen();
                if u < posterior.stay_prob {
                    out.ids[p] = cand;
                }
            }
        }
        UnmaskStrategy::Confidence => {
            let a_s = schedule.alpha(s)?;
            let a_t = schedule.alpha(t)?;
            let frac = (a_s - a_t) / (1.0 - a_t);
            let k = ((masked.len() as f64) * frac).round() as usize;
            let mut ranked = masked.clone();
            ranked.sort_by(|&a, &b| {
                candidates[b].1.partial_cmp(&candidates[a].1).unwrap().then(a.cmp(&b))
            });
            for &p in ranked.iter().take(k) {
                out.ids[p] = candidates[p].0;
            }
        }
    }
    Ok(out)
}

/// Runs the reverse process over the grid t_i = i/T down to zero and
/// returns buffer slots 1.. (slot 0 is the reserved BOS anchor) plus the
/// full trace. Same config and seed give identical output and trace.
pub fn generate(
    params: &ModelParams<f32>,
    cfg: &SamplerConfig,
    constraint: &GenerationConstraint,
) -> Result<(TokenSeq, SampleTrace)> {
    cfg.validate()?;
    let n = cfg.buffer_len;
    if n > params.config.max_seq_len {
        return Err(Error::shape(format!(
            "buffer_len {n} exceeds max_seq_len {}",
            params.config.max_seq_len
        )));
    }
    constraint.validate_for(n, params.config.vocab_size)?;

    let mut buffer = TokenSeq { ids: vec![MASK_ID; n] };
    buffer.ids[0] = BOS_ID;
    for (&pos, &id) in &constraint.fixed {
        buffer.ids[pos] = id;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace =
        SampleTrace { steps: Vec::with_capacity(cfg.steps), unmask_step: vec![None; n] };
    let big_t = cfg.steps;
    for (step, i) in (1..=big_t).rev().enumerate() {
        let t = i as f64 / big_t as f64;
        let s = (i - 1) as f64 / big_t as f64;
        let masked_before = buffer.ids.iter().filter(|&&id| id == MASK_ID).count();
        let next = denoise_step(params, &buffer, t, s, constraint, cfg, &mut rng)?;
        let newly: Vec<usize> = (1..n)
            .filter(|&p| buffer.ids[p] == MASK_ID && next.ids[p] != MASK_ID)
            .collect();
        for &p in &newly {
            trace.unmask_step[p] = Some(step);
        }
        buffer = next;
        trace.steps.push(TraceStep {
            step,
            t,
            s,
            masked_before,
            newly_unmasked: newly,
            buffer: buffer.clone(),
        });
    }
    if buffer.ids[1..].contains(&MASK_ID) {
        return Err(Error::domain(
            "internal invariant violation: MASK remained after the final step",
        ));
    }
    Ok((TokenSeq { ids: buffer.ids[1..].to_vec() }, trace))
}

/// Fills a hole between a clamped prefix and suffix; returns only the
/// hole tokens. A zero-length hole returns empty without touching the
/// model.
pub fn infill(
    params: &ModelParams<f32>,
    prefix: &TokenSeq,
    suffix: &TokenSeq,
    hole_len: usize,
    cfg: &SamplerConfig,
) -> Result<TokenSeq> {
    if hole_len == 0 {
        return Ok(TokenSeq { ids: Vec::new() });
    }
    let p = prefix.len();
    let s = suffix.len();
    if 1 + p + hole_len + s > cfg.buffer_len {
        return Err(Error::shape(format!(
            "prefix {p} + hole {hole_len} + suffix {s} + BOS exceed buffer_len {}",
            cfg.buffer_len
        )));
    }
    let pairs = prefix
        .ids
        .iter()
        .enumerate()
        .map(|(i, &id)| (1 + i, id))
        .chain(suffix.ids.iter().enumerate().map(|(j, &id)| (1 + p + hole_len + j, id)));
    let constraint = GenerationConstraint::from_pairs(pairs)?;
    let (out, _) = generate(params, cfg, &constraint)?;
    Ok(TokenSeq { ids: out.ids[p..p + hole_len].to_vec() })
}
