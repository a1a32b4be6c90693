//! Forward pass, with the activation cache the backward pass consumes.
//!
//! Attention is computed head by head through contiguous per-head copies
//! so every matrix product runs the vectorized i-k-j kernel; disallowed
//! scores are set to -inf before the softmax, which makes masked
//! probabilities exactly zero (causality tests rely on exact zeros, not
//! small numbers).

use crate::attention::AttnMask;
use crate::error::{Error, Result};
use crate::linalg::{matmul_acc, num, softmax_row, Scalar, Tensor};
use crate::seq::TokenSeq;

use super::ModelParams;

const LN_EPS: f64 = 1e-5;

pub(super) struct LnCache<T> {
    pub rstd: Vec<T>,
    /// Normalized pre-gain activations, `(x - mean) * rstd`, row-major.
    pub xhat: Vec<T>,
}

pub(super) struct LayerCache<T> {
    pub ln1: LnCache<T>,
    pub a: Vec<T>,
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    /// Post-softmax attention, `n_heads` stacked `n x n` blocks.
    pub probs: Vec<T>,
    pub ctx: Vec<T>,
    pub ln2: LnCache<T>,
    pub b: Vec<T>,
    pub u: Vec<T>,
    pub g: Vec<T>,
}

/// Everything the backward pass needs besides the inputs themselves.
pub struct FwdCache<T> {
    pub(super) n: usize,
    pub(super) layers: Vec<LayerCache<T>>,
    pub(super) lnf: LnCache<T>,
    pub(super) y: Vec<T>,
}

pub(super) fn layernorm_fwd<T: Scalar>(
    x: &[T],
    gain: &[T],
    bias: &[T],
    n: usize,
    d: usize,
) -> (Vec<T>, LnCache<T>) {
    let mut out = vec![T::zero(); n * d];
    let mut rstd = Vec::with_capacity(n);
    let mut xhat = vec![T::zero(); n * d];
    let dd = num::<T>(d as f64);
    let eps = num::<T>(LN_EPS);
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().cloned().sum::<T>() / dd;
        let mut var = T::zero();
        for &v in row {
            let c = v - mean;
            var += c * c;
        }
        var = var / dd;
        let r = (var + eps).sqrt().recip();
        rstd.push(r);
        let xh = &mut xhat[i * d..(i + 1) * d];
        let o = &mut out[i * d..(i + 1) * d];
        for j in 0..d {
            xh[j] = (row[j] - mean) * r;
            o[j] = xh[j] * gain[j] + bias[j];
        }
    }
    (out, LnCache { rstd, xhat })
}

pub(super) fn gelu<T: Scalar>(x: T) -> T {
    // tanh approximation; the derivative in backward.rs matches it term
    // for term, which is what the gradient checks verify.
    let c0 = num::<T>(0.7978845608028654);
    let c1 = num::<T>(0.044715);
    let half = num::<T>(0.5);
    let inner = c0 * (x + c1 * x * x * x);
    half * x * (T::one() + inner.tanh())
}

fn validate_inputs<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &TokenSeq,
    mask: &AttnMask,
) -> Result<usize> {
    let n = tokens.len();
    if n == 0 || n > params.config.max_seq_len {
        return Err(Error::shape(format!(
            "sequence length {n} outside [1, {}]",
            params.config.max_seq_len
        )));
    }
    if mask.n != n {
        return Err(Error::shape(format!(
            "mask is {}x{} but sequence has {n} tokens",
            mask.n, mask.n
        )));
    }
    if let Some(&id) = tokens.ids.iter().find(|&&id| id as usize >= params.config.vocab_size) {
        return Err(Error::shape(format!(
            "token id {id} outside vocab of {}",
            params.config.vocab_size
        )));
    }
    Ok(n)
}

/// Runs the network and keeps every intermediate needed for gradients.
pub fn forward_with_cache<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &TokenSeq,
    mask: &AttnMask,
) -> Result<(Tensor<T>, FwdCache<T>)> {
    let n = validate_inputs(params, tokens, mask)?;
    let cfg = &params.config;
    let d = cfg.d_model;
    let h = cfg.n_heads;
    let dh = cfg.head_dim();
    let f = cfg.d_ff;
    let k = cfg.vocab_size;
    let scale = num::<T>(1.0 / (dh as f64).sqrt());

    // Embedding sum; the residual stream lives in `x` throughout.
    let mut x = vec![T::zero(); n * d];
    for (pos, &id) in tokens.ids.iter().enumerate() {
        let te = params.tok_emb.row(id as usize);
        let pe = params.pos_emb.row(pos);
        let row = &mut x[pos * d..(pos + 1) * d];
        for j in 0..d {
            row[j] = te[j] + pe[j];
        }
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    let mut qh = vec![T::zero(); n * dh];
    let mut kht = vec![T::zero(); dh * n];
    let mut vh = vec![T::zero(); n * dh];

    for lp in &params.layers {
        let (a, ln1) = layernorm_fwd(&x, &lp.ln1_g.data, &lp.ln1_b.data, n, d);
        let mut q = vec![T::zero(); n * d];
        let mut kk = vec![T::zero(); n * d];
        let mut v = vec![T::zero(); n * d];
        matmul_acc(&a, &lp.wq.data, &mut q, n, d, d);
        matmul_acc(&a, &lp.wk.data, &mut kk, n, d, d);
        matmul_acc(&a, &lp.wv.data, &mut v, n, d, d);

        let mut probs = vec![T::zero(); h * n * n];
        let mut ctx = vec![T::zero(); n * d];
        for head in 0..h {
            let off = head * dh;
            for i in 0..n {
                qh[i * dh..(i + 1) * dh].copy_from_slice(&q[i * d + off..i * d + off + dh]);
                vh[i * dh..(i + 1) * dh].copy_from_slice(&v[i * d + off..i * d + off + dh]);
                for j in 0..dh {
                    kht[j * n + i] = kk[i * d + off + j];
                }
            }
            let scores = &mut probs[head * n * n..(head + 1) * n * n];
            matmul_acc(&qh, &kht, scores, n, dh, n);
            for i in 0..n {
                let row = &mut scores[i * n..(i + 1) * n];
                let mrow = mask.row(i);
                for j in 0..n {
                    if mrow[j] {
                        row[j] *= scale;
                    } else {
                        row[j] = T::neg_infinity();
                    }
                }
                softmax_row(row);
            }
            // ctx head block = probs . v_head, scattered back by column.
            let mut ctx_h = vec![T::zero(); n * dh];
            matmul_acc(scores, &vh, &mut ctx_h, n, n, dh);
            for i in 0..n {
                ctx[i * d + off..i * d + off + dh]
                    .copy_from_slice(&ctx_h[i * dh..(i + 1) * dh]);
            }
        }

        let mut o = vec![T::zero(); n * d];
        matmul_acc(&ctx, &lp.wo.data, &mut o, n, d, d);
        for (xv, ov) in x.iter_mut().zip(&o) {
            *xv += *ov;
        }

        let (b, ln2) = layernorm_fwd(&x, &lp.ln2_g.data, &lp.ln2_b.data, n, d);
        let mut u = vec![T::zero(); n * f];
        matmul_acc(&b, &lp.w1.data, &mut u, n, d, f);
        let g: Vec<T> = u.iter().map(|&z| gelu(z)).collect();
        let mut ff = vec![T::zero(); n * d];
        matmul_acc(&g, &lp.w2.data, &mut ff, n, f, d);
        for (xv, fv) in x.iter_mut().zip(&ff) {
            *xv += *fv;
        }

        layers.push(LayerCache { ln1, a, q, k: kk, v, probs, ctx, ln2, b, u, g });
    }

    let (y, lnf) = layernorm_fwd(&x, &params.lnf_g.data, &params.lnf_b.data, n, d);
    let mut logits = Tensor::zeros(n, k);
    matmul_acc(&y, &params.w_out.data, &mut logits.data, n, d, k);

    Ok((logits, FwdCache { n, layers, lnf, y }))
}

/// Logits only; the common inference entry point.
pub fn forward<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &TokenSeq,
    mask: &AttnMask,
) -> Result<Tensor<T>> {
    forward_with_cache(params, tokens, mask).map(|(logits, _)| logits)
}
