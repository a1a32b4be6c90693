//! Absorbing-state discrete diffusion for character-level language models.
//!
//! The crate turns a small autoregressive transformer into an iterative
//! denoiser: tokens are independently replaced by a MASK symbol under a
//! noise schedule, the model learns to predict the clean sequence from the
//! corrupted one, and generation runs the learned reverse process. The
//! AR starting point and the diffusion model share one architecture; the
//! only differences are the attention mask, the input corruption, and a
//! one-slot shift of the output logits.
//!
//! Modules, in dependency order:
//!
//! * [`seq`], [`error`]: token ids, sequences, result types.
//! * [`schedule`], [`process`]: the forward corruption process and its
//!   closed-form marginals, transitions, and posteriors.
//! * [`linalg`], [`attention`], [`model`]: the transformer with exact
//!   hand-written gradients and configurable attention masking.
//! * [`train`]: AR pretraining, diffusion adaptation, from-scratch
//!   baseline, optimizer, run logging.
//! * [`sampler`]: iterative denoising generation and infilling.
//! * [`eval`]: ELBO estimation, brute-force oracles, quality metrics.
//! * [`data`]: character vocabulary, packing, corpus handling.
//! * [`checkpoint`]: binary model serialization.
//! * [`verify`]: the self-check suite behind the `verify` subcommand.

pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod parallel;
pub mod process;
pub mod sampler;
pub mod schedule;
pub mod seq;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use seq::{TokenId, TokenSeq, BOS_ID, DOCSEP_ID, MASK_ID};
