//! Training objectives: next-token AR loss and the reweighted masked
//! cross-entropy of the diffusion process, both with exact gradients.
//!
//! Both objectives score token `n` with logits row `n - 1` (the shift);
//! the diffusion objective restricts the sum to absorbed positions and
//! multiplies by the schedule weight of the item's time draw. The
//! `shift: false` ablation scores token `n` with its own row instead,
//! which breaks the AR convention on purpose.

use crate::attention::{build_attention_mask, causal_mask, AttentionMaskSpec};
use crate::error::{Error, Result};
use crate::linalg::{num, Scalar, Tensor};
use crate::parallel;
use crate::process::CorruptedBatch;
use crate::schedule::NoiseSchedule;
use crate::seq::TokenSeq;

use super::backward::{backward_with, TransposedWeights};
use super::forward::forward_with_cache;
use super::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Ar,
    Diffusion,
}

pub enum TrainBatch<'a> {
    Diffusion(&'a CorruptedBatch),
    Ar(&'a [TokenSeq]),
}

#[derive(Debug, Clone, Copy)]
pub struct LossOpts {
    /// Score token n with row n-1 (true) or with its own row (false).
    /// Applies to the diffusion objective only; AR is next-token by
    /// definition.
    pub shift: bool,
    pub want_grads: bool,
}

impl Default for LossOpts {
    fn default() -> Self {
        Self { shift: true, want_grads: true }
    }
}

pub struct LossGrad<T> {
    /// The training objective: mean over items of the per-item loss
    /// (schedule-weighted masked CE sum for diffusion, mean next-token
    /// CE for AR).
    pub loss: f64,
    /// Unweighted mean CE over the counted positions; comparable across
    /// time draws, logged for monitoring.
    pub per_token_nats: f64,
    pub counted_tokens: usize,
    pub grads: Option<ModelParams<T>>,
}

pub fn loss_and_grad<T: Scalar>(
    params: &ModelParams<T>,
    batch: &TrainBatch,
    mask_spec: &AttentionMaskSpec,
    objective: Objective,
) -> Result<LossGrad<T>> {
    loss_and_grad_opts(params, batch, mask_spec, objective, &LossOpts::default())
}

struct ItemOut<T> {
    grads: Option<ModelParams<T>>,
    loss: f64,
    ce_sum: f64,
    counted: usize,
}

pub fn loss_and_grad_opts<T: Scalar>(
    params: &ModelParams<T>,
    batch: &TrainBatch,
    mask_spec: &AttentionMaskSpec,
    objective: Objective,
    opts: &LossOpts,
) -> Result<LossGrad<T>> {
    let schedule = NoiseSchedule::linear();
    let (n_items, n) = match (objective, batch) {
        (Objective::Diffusion, TrainBatch::Diffusion(b)) => {
            if b.is_empty() {
                return Err(Error::shape("empty batch"));
            }
            (b.len(), b.items[0].len())
        }
        (Objective::Ar, TrainBatch::Ar(seqs)) => {
            if seqs.is_empty() {
                return Err(Error::shape("empty batch"));
            }
            (seqs.len(), seqs[0].len())
        }
        _ => return Err(Error::config("objective does not match batch kind")),
    };
    if n < 2 {
        return Err(Error::shape("sequences must have length >= 2"));
    }
    match batch {
        TrainBatch::Diffusion(b) => {
            if b.items.iter().any(|it| it.len() != n) {
                return Err(Error::shape("batch items differ in length"));
            }
        }
        TrainBatch::Ar(seqs) => {
            if seqs.iter().any(|s| s.len() != n) {
                return Err(Error::shape("batch items differ in length"));
            }
            if seqs.iter().any(|s| !s.is_clean()) {
                return Err(Error::domain("AR batch contains MASK tokens"));
            }
        }
    }

    // One mask per call, shared across items: the AR objective is causal
    // by definition, diffusion draws from the anneal spec.
    let mask = match objective {
        Objective::Ar => causal_mask(n),
        Objective::Diffusion => build_attention_mask(n, mask_spec),
    };
    let tw = if opts.want_grads { Some(TransposedWeights::new(params)) } else { None };
    let k = params.config.vocab_size;
    let inv_items = 1.0 / n_items as f64;

    let per_item: Vec<Result<ItemOut<T>>> = parallel::map_indexed(n_items, |bi| {
        let (tokens, item) = match batch {
            TrainBatch::Diffusion(b) => (&b.items[bi].noisy, Some(&b.items[bi])),
            TrainBatch::Ar(seqs) => (&seqs[bi], None),
        };
        let (logits, cache) = forward_with_cache(params, tokens, &mask)?;
        let mut dlogits = Tensor::<T>::zeros(n, k);
        let mut loss = 0.0;
        let mut ce_sum = 0.0;
        let mut counted = 0usize;

        // Per-position coefficient on the CE term, already including the
        // 1/batch factor so item gradients just sum.
        let coeff = match item {
            Some(it) => schedule.loss_weight(it.t)? * inv_items,
            None => inv_items / (n - 1) as f64,
        };
        for p in 1..n {
            let (src, label) = match item {
                Some(it) => {
                    if !it.mask_indicator[p] {
                        continue;
                    }
                    (if opts.shift { p - 1 } else { p }, it.labels.ids[p] as usize)
                }
                None => (p - 1, tokens.ids[p] as usize),
            };
            let row = logits.row(src);
            let max = row.iter().map(|&v| crate::linalg::to_f64(v)).fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> =
                row.iter().map(|&v| (crate::linalg::to_f64(v) - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            let ce = -(exps[label] / sum).ln();
            loss += coeff * ce;
            ce_sum += ce;
            counted += 1;
            if opts.want_grads {
                let drow = dlogits.row_mut(src);
                for (kk, &e) in exps.iter().enumerate() {
                    let mut g = e / sum;
                    if kk == label {
                        g -= 1.0;
                    }
                    drow[kk] += num::<T>(coeff * g);
                }
            }
        }

        let grads = match (&tw, opts.want_grads) {
            (Some(tw), true) => {
                let mut g = params.zeros_like();
                backward_with(params, tw, tokens, &cache, &dlogits, &mut g)?;
                Some(g)
            }
            _ => None,
        };
        Ok(ItemOut { grads, loss, ce_sum, counted })
    });

    // Fixed-order reduction keeps results independent of thread count.
    let mut loss = 0.0;
    let mut ce_sum = 0.0;
    let mut counted = 0usize;
    let mut grads: Option<ModelParams<T>> = None;
    for out in per_item {
        let out = out?;
        loss += out.loss;
        ce_sum += out.ce_sum;
        counted += out.counted;
        if let Some(g) = out.grads {
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => acc.axpy(T::one(), &g),
            }
        }
    }
    if opts.want_grads && grads.is_none() {
        grads = Some(params.zeros_like());
    }
    if !loss.is_finite() {
        return Err(Error::numeric(format!(
            "non-finite loss {loss} ({objective:?}, {n_items} items, n = {n})"
        )));
    }
    Ok(LossGrad {
        loss,
        per_token_nats: if counted > 0 { ce_sum / counted as f64 } else { 0.0 },
        counted_tokens: counted,
        grads,
    })
}
