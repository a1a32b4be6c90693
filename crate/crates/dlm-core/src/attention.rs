//! Attention mask construction, including the causal-to-full anneal.
//!
//! During adaptation the mask interpolates between causal and full
//! attention: every row always sees itself and everything to its left,
//! and is granted a sampled amount of right context that grows with the
//! anneal ratio. Row `i` of an `n x n` mask additionally admits columns
//! `i+1 ..= i+w` where `w = round(r * (n-1-i))` and `r` is uniform on
//! `[0, ratio]`. At `ratio >= 1` the mask is forced to all-ones so the
//! endpoint is exact rather than attained only in expectation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Recipe for a mask draw: the anneal position and the seed that makes
/// the right-context sampling reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionMaskSpec {
    /// 0 = causal, 1 = full; clamped to [0, 1] on construction.
    pub anneal_ratio: f64,
    pub seed: u64,
}

impl AttentionMaskSpec {
    pub fn new(anneal_ratio: f64, seed: u64) -> Self {
        Self { anneal_ratio: anneal_ratio.clamp(0.0, 1.0), seed }
    }

    pub fn causal() -> Self {
        Self { anneal_ratio: 0.0, seed: 0 }
    }

    pub fn full() -> Self {
        Self { anneal_ratio: 1.0, seed: 0 }
    }
}

/// Boolean `n x n` matrix; `true` means row `i` may attend to column `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnMask {
    pub n: usize,
    allow: Vec<bool>,
}

impl AttnMask {
    #[inline]
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allow[i * self.n..(i + 1) * self.n]
    }

    pub fn count_allowed(&self) -> usize {
        self.allow.iter().filter(|&&b| b).count()
    }

    pub fn is_causal(&self) -> bool {
        (0..self.n).all(|i| (0..self.n).all(|j| self.allowed(i, j) == (j <= i)))
    }

    pub fn is_full(&self) -> bool {
        self.allow.iter().all(|&b| b)
    }
}

pub fn causal_mask(n: usize) -> AttnMask {
    build_attention_mask(n, &AttentionMaskSpec::causal())
}

pub fn full_mask(n: usize) -> AttnMask {
    build_attention_mask(n, &AttentionMaskSpec::full())
}

/// Draws the mask for the given spec. Deterministic in `(n, spec)`; for a
/// fixed seed the permitted-entry count is non-decreasing in the ratio,
/// because each row's uniform draw is shared across ratios and only
/// scaled.
pub fn build_attention_mask(n: usize, spec: &AttentionMaskSpec) -> AttnMask {
    assert!(n >= 1, "mask needs n >= 1");
    let mut allow = vec![false; n * n];
    if spec.anneal_ratio >= 1.0 {
        allow.fill(true);
        return AttnMask { n, allow };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for i in 0..n {
        let row = &mut allow[i * n..(i + 1) * n];
        for slot in row[..=i].iter_mut() {
            *slot = true;
        }
        let u: f64 = rng.gen();
        if spec.anneal_ratio > 0.0 {
            let r = spec.anneal_ratio * u;
            let w = (r * (n - 1 - i) as f64).round() as usize;
            for slot in row[i + 1..(i + 1 + w).min(n)].iter_mut() {
                *slot = true;
            }
        }
    }
    AttnMask { n, allow }
}
