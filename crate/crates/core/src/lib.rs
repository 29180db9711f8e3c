//! Attention-smoothing unlearning on a small decoder-only transformer.
//!
//! The crate trains a toy causal transformer on a synthetic fictitious-entity
//! corpus, builds a frozen *forget-teacher* by raising the softmax
//! temperature inside self-attention, and distills the model toward that
//! teacher on the forget split while a retain loss preserves everything
//! else. Baseline forget/retain losses, the evaluation metric suite and a
//! numeric verification harness for the temperature calculus live alongside.
//!
//! Module map:
//!
//! - [`tensor`], [`autodiff`], [`gradcheck`]: fp64 tensors, a reverse-mode
//!   tape and finite-difference checking.
//! - [`model`]: the transformer, temperature-scaled attention, greedy
//!   decoding and the checkpoint format.
//! - [`teacher`]: frozen forget-teacher and temperature selection.
//! - [`losses`]: every forget and retain objective.
//! - [`metrics`]: ROUGE-L, probability, truth ratio, token entropy, proxies,
//!   MU/FE, VerbMem/KnowMem/PrivLeak.
//! - [`datagen`]: deterministic synthetic corpus.
//! - [`runner`]: training, unlearning, continual runs, sweeps.
//! - [`analysis`]: lemma checks and token-role diagnostics.
//! - [`cli`]: argument handling behind the `asu` binary.

pub mod analysis;
pub mod autodiff;
pub mod cli;
pub mod datagen;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod runner;
pub mod teacher;
pub mod tensor;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
