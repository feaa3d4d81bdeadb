//! Dual-stream shared/private knowledge fusion for retrieval-augmented
//! generation, hosted on a small self-contained decoder-only transformer.
//!
//! The pieces, bottom-up:
//!
//! - [`numeric`]: matrices, deterministic kernels, a reverse-mode tape and a
//!   finite-difference gradient oracle, plus the checkpoint container.
//! - [`divergence`]: KL, Jensen–Shannon, Shannon and semantic entropy.
//! - [`model`]: the host transformer, exposing per-layer hidden states and
//!   attention, logit-lens readouts and seeded sampling.
//! - [`detect`]: paraphrase-divergence hallucination detection and
//!   insertion-layer selection.
//! - [`filter`]: layer-pruning entropy sweeps, key/offset layer
//!   classification, Energy Quotient weighting and the entropy gate.
//! - [`dssp`]: the shared/private mixed-attention fusion module.
//! - [`training`]: the regularised objective, training loop and grid search.
//! - [`harness`]: synthetic decompositions, the conflict corpus, the planted
//!   fixture model, the end-to-end pipeline and evaluation.

pub mod detect;
pub mod divergence;
pub mod dssp;
mod error;
pub mod filter;
pub mod harness;
pub mod model;
pub mod numeric;
pub mod par;
pub mod training;

pub use error::{Error, Result};
pub use numeric::Matrix;
pub use par::ExecMode;
