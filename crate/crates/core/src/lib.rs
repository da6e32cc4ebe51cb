//! Dynamic prototype updating (DPU) for multimodal out-of-distribution
//! detection.
//!
//! The crate is organised bottom-up:
//!
//! * [`numkit`]: dense vectors/matrices, softmax, Hellinger distance, entropy.
//! * [`datagen`]: seeded synthetic multimodal benchmarks with near/far OOD splits.
//! * [`netcore`]: per-modality MLP encoders, modality heads, joint head,
//!   exact reverse-mode gradients and AdamW.
//! * [`protolab`]: class prototypes, variance-weighted prototype updates and
//!   prototype-fusion outlier synthesis.
//! * [`dpuloss`]: every training objective and its gradient.
//! * [`scorers`]: nine post-hoc OOD scorers.
//! * [`evalkit`]: AUROC, FPR@95TPR and ID accuracy.
//! * [`runner`]: the training loop, evaluation, and experiment sweeps.

// `!(x >= 0.0)` is used on purpose: unlike `x < 0.0` it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops read closer to the formulas in numeric kernels.
#![allow(clippy::needless_range_loop)]

pub mod datagen;
pub mod dpuloss;
pub mod error;
pub mod evalkit;
pub mod jsonio;
pub mod netcore;
pub mod numkit;
pub mod protolab;
pub mod rng;
pub mod runner;
pub mod scorers;

pub use datagen::{Dataset, MultimodalBatch, SynthConfig, OOD_LABEL};
pub use dpuloss::{LossBreakdown, LossWeights};
pub use error::{Error, Result};
pub use evalkit::EvalReport;
pub use netcore::{AdamWState, ForwardCache, GradBuffer, ModelDims, ModelParams};
pub use numkit::{Mat64, ProbDist};
pub use protolab::{PrototypeStore, UpdateMode};
pub use runner::{RunConfig, Variant};
pub use scorers::{Method, ScorerModel, ScorerSpec};
