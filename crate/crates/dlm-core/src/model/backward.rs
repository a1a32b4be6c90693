//! Reverse-mode gradients, written out by hand layer by layer.
//!
//! Accumulation order is fixed (items, then layers in reverse, then
//! heads), so gradients are bitwise reproducible. Weight transposes are
//! hoisted into [`TransposedWeights`] and shared across a batch; products
//! against a transpose would otherwise fall off the fast kernel path.

use crate::error::Result;
use crate::linalg::{matmul_acc, matmul_at_b_acc, num, transpose, Scalar, Tensor};
use crate::seq::TokenSeq;

use super::forward::{FwdCache, LnCache};
use super::ModelParams;

struct LayerT<T> {
    wq_t: Vec<T>,
    wk_t: Vec<T>,
    wv_t: Vec<T>,
    wo_t: Vec<T>,
    w1_t: Vec<T>,
    w2_t: Vec<T>,
}

/// Per-batch cache of transposed weights.
pub(super) struct TransposedWeights<T> {
    wout_t: Vec<T>,
    layers: Vec<LayerT<T>>,
}

impl<T: Scalar> TransposedWeights<T> {
    pub(super) fn new(params: &ModelParams<T>) -> Self {
        let d = params.config.d_model;
        let f = params.config.d_ff;
        let k = params.config.vocab_size;
        Self {
            wout_t: transpose(&params.w_out.data, d, k),
            layers: params
                .layers
                .iter()
                .map(|l| LayerT {
                    wq_t: transpose(&l.wq.data, d, d),
                    wk_t: transpose(&l.wk.data, d, d),
                    wv_t: transpose(&l.wv.data, d, d),
                    wo_t: transpose(&l.wo.data, d, d),
                    w1_t: transpose(&l.w1.data, d, f),
                    w2_t: transpose(&l.w2.data, f, d),
                })
                .collect(),
        }
    }
}

/// Derivative of the tanh-approximated GELU in forward.rs.
fn dgelu<T: Scalar>(x: T) -> T {
    let c0 = num::<T>(0.7978845608028654);
    let c1 = num::<T>(0.044715);
    let half = num::<T>(0.5);
    let three = num::<T>(3.0);
    let inner = c0 * (x + c1 * x * x * x);
    let th = inner.tanh();
    let sech2 = T::one() - th * th;
    half * (T::one() + th) + half * x * sech2 * c0 * (T::one() + three * c1 * x * x)
}

/// Layer-norm backward; accumulates gain/bias gradients, returns dx.
fn layernorm_bwd<T: Scalar>(
    dy: &[T],
    gain: &[T],
    cache: &LnCache<T>,
    n: usize,
    d: usize,
    dgain: &mut [T],
    dbias: &mut [T],
) -> Vec<T> {
    let mut dx = vec![T::zero(); n * d];
    let dd = num::<T>(d as f64);
    for i in 0..n {
        let dyr = &dy[i * d..(i + 1) * d];
        let xh = &cache.xhat[i * d..(i + 1) * d];
        let mut sum_dxh = T::zero();
        let mut sum_dxh_xh = T::zero();
        for j in 0..d {
            let dxh = dyr[j] * gain[j];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh[j];
        }
        let m1 = sum_dxh / dd;
        let m2 = sum_dxh_xh / dd;
        let r = cache.rstd[i];
        let dxr = &mut dx[i * d..(i + 1) * d];
        for j in 0..d {
            let dxh = dyr[j] * gain[j];
            dxr[j] = r * (dxh - m1 - xh[j] * m2);
            dgain[j] += dyr[j] * xh[j];
            dbias[j] += dyr[j];
        }
    }
    dx
}

/// Accumulates the gradients of all parameters for one sequence into
/// `grads`, given the upstream gradient on the logits.
pub fn backward<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &TokenSeq,
    cache: &FwdCache<T>,
    dlogits: &Tensor<T>,
    grads: &mut ModelParams<T>,
) -> Result<()> {
    let tw = TransposedWeights::new(params);
    backward_with(params, &tw, tokens, cache, dlogits, grads)
}

pub(super) fn backward_with<T: Scalar>(
    params: &ModelParams<T>,
    tw: &TransposedWeights<T>,
    tokens: &TokenSeq,
    cache: &FwdCache<T>,
    dlogits: &Tensor<T>,
    grads: &mut ModelParams<T>,
) -> Result<()> {
    let cfg = &params.config;
    let n = cache.n;
    let d = cfg.d_model;
    let h = cfg.n_heads;
    let dh = cfg.head_dim();
    let f = cfg.d_ff;
    let k = cfg.vocab_size;
    let scale = num::<T>(1.0 / (dh as f64).sqrt());

    // Vocabulary projection and final norm.
    matmul_at_b_acc(&cache.y, &dlogits.data, &mut grads.w_out.data, n, d, k);
    let mut dy = vec![T::zero(); n * d];
    matmul_acc(&dlogits.data, &tw.wout_t, &mut dy, n, k, d);
    let mut dx = layernorm_bwd(
        &dy,
        &params.lnf_g.data,
        &cache.lnf,
        n,
        d,
        &mut grads.lnf_g.data,
        &mut grads.lnf_b.data,
    );

    let mut dctx_h = vec![T::zero(); n * dh];
    let mut qh = vec![T::zero(); n * dh];
    let mut kh = vec![T::zero(); n * dh];
    let mut vht = vec![T::zero(); dh * n];

    for (l, lp) in params.layers.iter().enumerate().rev() {
        let lc = &cache.layers[l];
        let lt = &tw.layers[l];
        let lg = &mut grads.layers[l];

        // MLP branch: dx is the gradient on the layer output; the skip
        // connection passes it through unchanged, the branch adds more.
        matmul_at_b_acc(&lc.g, &dx, &mut lg.w2.data, n, f, d);
        let mut dg = vec![T::zero(); n * f];
        matmul_acc(&dx, &lt.w2_t, &mut dg, n, d, f);
        let mut du = dg;
        for (duv, &uv) in du.iter_mut().zip(&lc.u) {
            *duv *= dgelu(uv);
        }
        matmul_at_b_acc(&lc.b, &du, &mut lg.w1.data, n, d, f);
        let mut db = vec![T::zero(); n * d];
        matmul_acc(&du, &lt.w1_t, &mut db, n, f, d);
        let dx_ln2 = layernorm_bwd(
            &db,
            &lp.ln2_g.data,
            &lc.ln2,
            n,
            d,
            &mut lg.ln2_g.data,
            &mut lg.ln2_b.data,
        );
        for (a, b) in dx.iter_mut().zip(&dx_ln2) {
            *a += *b;
        }

        // Attention branch.
        matmul_at_b_acc(&lc.ctx, &dx, &mut lg.wo.data, n, d, d);
        let mut dctx = vec![T::zero(); n * d];
        matmul_acc(&dx, &lt.wo_t, &mut dctx, n, d, d);

        let mut dq = vec![T::zero(); n * d];
        let mut dk = vec![T::zero(); n * d];
        let mut dv = vec![T::zero(); n * d];
        for head in 0..h {
            let off = head * dh;
            for i in 0..n {
                dctx_h[i * dh..(i + 1) * dh]
                    .copy_from_slice(&dctx[i * d + off..i * d + off + dh]);
                qh[i * dh..(i + 1) * dh].copy_from_slice(&lc.q[i * d + off..i * d + off + dh]);
                kh[i * dh..(i + 1) * dh].copy_from_slice(&lc.k[i * d + off..i * d + off + dh]);
                for j in 0..dh {
                    vht[j * n + i] = lc.v[i * d + off + j];
                }
            }
            let p = &lc.probs[head * n * n..(head + 1) * n * n];

            let mut dp = vec![T::zero(); n * n];
            matmul_acc(&dctx_h, &vht, &mut dp, n, dh, n);
            let mut dvh = vec![T::zero(); n * dh];
            matmul_at_b_acc(p, &dctx_h, &mut dvh, n, n, dh);

            // Softmax backward; masked entries have p = 0 and drop out.
            let mut ds = dp;
            for i in 0..n {
                let pr = &p[i * n..(i + 1) * n];
                let dsr = &mut ds[i * n..(i + 1) * n];
                let mut dot = T::zero();
                for j in 0..n {
                    dot += dsr[j] * pr[j];
                }
                for j in 0..n {
                    dsr[j] = pr[j] * (dsr[j] - dot) * scale;
                }
            }

            let mut dqh = vec![T::zero(); n * dh];
            matmul_acc(&ds, &kh, &mut dqh, n, n, dh);
            let mut dkh = vec![T::zero(); n * dh];
            matmul_at_b_acc(&ds, &qh, &mut dkh, n, n, dh);

            for i in 0..n {
                dq[i * d + off..i * d + off + dh]
                    .copy_from_slice(&dqh[i * dh..(i + 1) * dh]);
                dk[i * d + off..i * d + off + dh]
                    .copy_from_slice(&dkh[i * dh..(i + 1) * dh]);
                dv[i * d + off..i * d + off + dh]
                    .copy_from_slice(&dvh[i * dh..(i + 1) * dh]);
            }
        }

        matmul_at_b_acc(&lc.a, &dq, &mut lg.wq.data, n, d, d);
        matmul_at_b_acc(&lc.a, &dk, &mut lg.wk.data, n, d, d);
        matmul_at_b_acc(&lc.a, &dv, &mut lg.wv.data, n, d, d);
        let mut da = vec![T::zero(); n * d];
        matmul_acc(&dq, &lt.wq_t, &mut da, n, d, d);
        matmul_acc(&dk, &lt.wk_t, &mut da, n, d, d);
        matmul_acc(&dv, &lt.wv_t, &mut da, n, d, d);
        let dx_ln1 = layernorm_bwd(
            &da,
            &lp.ln1_g.data,
            &lc.ln1,
            n,
            d,
            &mut lg.ln1_g.data,
            &mut lg.ln1_b.data,
        );
        for (a, b) in dx.iter_mut().zip(&dx_ln1) {
            *a += *b;
        }
    }

    // Embedding scatter.
    for (pos, &id) in tokens.ids.iter().enumerate() {
        let src = &dx[pos * d..(pos + 1) * d];
        for (gv, &sv) in grads.tok_emb.row_mut(id as usize).iter_mut().zip(src) {
            *gv += sv;
        }
        for (gv, &sv) in grads.pos_emb.row_mut(pos).iter_mut().zip(src) {
            *gv += sv;
        }
    }
    Ok(())
}
