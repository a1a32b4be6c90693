//! A small pre-norm transformer with exact hand-written gradients.
//!
//! The same network serves as the AR base model and the diffusion
//! denoiser. It deliberately has no notion of time: the only inputs are
//! token ids and an attention mask. Adaptation changes what the model is
//! fed (corrupted tokens, wider masks, shifted targets), never its
//! architecture, so AR weights load unchanged.
//!
//! Blocks are pre-norm: `x += attn(ln(x))`, `x += mlp(ln(x))`, with
//! learned absolute positional embeddings, GELU activations, bias-free
//! linear maps, and a final layer norm before the vocabulary projection.

mod backward;
mod forward;
mod loss;

pub use backward::backward;
pub use forward::{forward, forward_with_cache, FwdCache};
pub use loss::{loss_and_grad, loss_and_grad_opts, LossGrad, LossOpts, Objective, TrainBatch};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{num, Scalar, Tensor};

/// Attention regime the checkpoint was trained for. `forward` always takes
/// an explicit mask; this flag records which mask the owner should build
/// (causal for AR models, full for adapted ones, annealed mid-training).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    Causal,
    Annealed { ratio: f64 },
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub mode: AttentionMode,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 4 {
            return Err(Error::config("vocab needs BOS, MASK, DOCSEP plus content"));
        }
        if self.max_seq_len < 2 {
            return Err(Error::config("max_seq_len must be at least 2"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_g: Tensor<T>,
    pub ln1_b: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ln2_g: Tensor<T>,
    pub ln2_b: Tensor<T>,
    pub w1: Tensor<T>,
    pub w2: Tensor<T>,
}

/// All learnable tensors. Doubles as the gradient container: gradients of
/// a parameter set have exactly its shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub lnf_g: Tensor<T>,
    pub lnf_b: Tensor<T>,
    pub w_out: Tensor<T>,
}

impl<T: Scalar> ModelParams<T> {
    /// Gaussian init at `std = 0.02`, residual-path projections scaled by
    /// `1/sqrt(2 * n_layers)`, layer-norm gains at one. Deterministic in
    /// the seed.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 0.02;
        let resid_std = std / ((2 * config.n_layers) as f64).sqrt();
        let mut ones = Tensor::zeros(1, d);
        ones.fill(T::one());

        let tok_emb = Tensor::randn(config.vocab_size, d, std, &mut rng);
        let pos_emb = Tensor::randn(config.max_seq_len, d, std, &mut rng);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerParams {
                ln1_g: ones.clone(),
                ln1_b: Tensor::zeros(1, d),
                wq: Tensor::randn(d, d, std, &mut rng),
                wk: Tensor::randn(d, d, std, &mut rng),
                wv: Tensor::randn(d, d, std, &mut rng),
                wo: Tensor::randn(d, d, resid_std, &mut rng),
                ln2_g: ones.clone(),
                ln2_b: Tensor::zeros(1, d),
                w1: Tensor::randn(d, config.d_ff, std, &mut rng),
                w2: Tensor::randn(config.d_ff, d, resid_std, &mut rng),
            });
        }
        Ok(Self {
            config: config.clone(),
            tok_emb,
            pos_emb,
            layers,
            lnf_g: ones,
            lnf_b: Tensor::zeros(1, d),
            w_out: Tensor::randn(d, config.vocab_size, std, &mut rng),
        })
    }

    /// Same shapes, all zeros; the gradient container.
    pub fn zeros_like(&self) -> Self {
        let z = |t: &Tensor<T>| Tensor::zeros(t.rows, t.cols);
        Self {
            config: self.config.clone(),
            tok_emb: z(&self.tok_emb),
            pos_emb: z(&self.pos_emb),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_g: z(&l.ln1_g),
                    ln1_b: z(&l.ln1_b),
                    wq: z(&l.wq),
                    wk: z(&l.wk),
                    wv: z(&l.wv),
                    wo: z(&l.wo),
                    ln2_g: z(&l.ln2_g),
                    ln2_b: z(&l.ln2_b),
                    w1: z(&l.w1),
                    w2: z(&l.w2),
                })
                .collect(),
            lnf_g: z(&self.lnf_g),
            lnf_b: z(&self.lnf_b),
            w_out: z(&self.w_out),
        }
    }

    /// Stable tensor enumeration. The order defines the layouts of
    /// checkpoints, optimizer state, and flat parameter indexing; all of
    /// those break if it changes.
    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.ln1_g"), &l.ln1_g));
            out.push((format!("layers.{i}.ln1_b"), &l.ln1_b));
            out.push((format!("layers.{i}.wq"), &l.wq));
            out.push((format!("layers.{i}.wk"), &l.wk));
            out.push((format!("layers.{i}.wv"), &l.wv));
            out.push((format!("layers.{i}.wo"), &l.wo));
            out.push((format!("layers.{i}.ln2_g"), &l.ln2_g));
            out.push((format!("layers.{i}.ln2_b"), &l.ln2_b));
            out.push((format!("layers.{i}.w1"), &l.w1));
            out.push((format!("layers.{i}.w2"), &l.w2));
        }
        out.push(("lnf_g".into(), &self.lnf_g));
        out.push(("lnf_b".into(), &self.lnf_b));
        out.push(("w_out".into(), &self.w_out));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = vec![
            ("tok_emb".into(), &mut self.tok_emb),
            ("pos_emb".into(), &mut self.pos_emb),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{i}.ln1_g"), &mut l.ln1_g));
            out.push((format!("layers.{i}.ln1_b"), &mut l.ln1_b));
            out.push((format!("layers.{i}.wq"), &mut l.wq));
            out.push((format!("layers.{i}.wk"), &mut l.wk));
            out.push((format!("layers.{i}.wv"), &mut l.wv));
            out.push((format!("layers.{i}.wo"), &mut l.wo));
            out.push((format!("layers.{i}.ln2_g"), &mut l.ln2_g));
            out.push((format!("layers.{i}.ln2_b"), &mut l.ln2_b));
            out.push((format!("layers.{i}.w1"), &mut l.w1));
            out.push((format!("layers.{i}.w2"), &mut l.w2));
        }
        out.push(("lnf_g".into(), &mut self.lnf_g));
        out.push(("lnf_b".into(), &mut self.lnf_b));
        out.push(("w_out".into(), &mut self.w_out));
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.all_finite())
    }

    /// Accumulates `other` scaled by `c` into `self`, tensor by tensor.
    pub fn axpy(&mut self, c: T, other: &Self) {
        for ((_, dst), (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, &s) in dst.data.iter_mut().zip(&src.data) {
                *d += c * s;
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_g: l.ln1_g.cast(),
                    ln1_b: l.ln1_b.cast(),
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    ln2_g: l.ln2_g.cast(),
                    ln2_b: l.ln2_b.cast(),
                    w1: l.w1.cast(),
                    w2: l.w2.cast(),
                })
                .collect(),
            lnf_g: self.lnf_g.cast(),
            lnf_b: self.lnf_b.cast(),
            w_out: self.w_out.cast(),
        }
    }
}

/// Realigns logits so the row scoring token `n` sits at slot `n`: output
/// row `n` is input row `n - 1`, and row 0 is a NaN sentinel that every
/// loss excludes. Carries over the AR convention that the model's output
/// at a position predicts the token to its right.
pub fn shift_logits<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.rows < 2 {
        return Err(Error::shape("shift_logits needs at least 2 rows"));
    }
    let mut out = Tensor::zeros(logits.rows, logits.cols);
    for v in out.row_mut(0) {
        *v = num::<T>(f64::NAN);
    }
    for r in 1..logits.rows {
        let src = logits.row(r - 1).to_vec();
        out.row_mut(r).copy_from_slice(&src);
    }
    Ok(out)
}
