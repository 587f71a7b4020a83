//! Gradient compression over a simulated multi-worker collective layer.
//!
//! The crate implements three compression families and the evaluation
//! machinery needed to compare them end to end:
//!
//! - chunked TopK sparsification ([`compressors::topkc_select_chunks`]) next to
//!   classic per-worker TopK gathered with all-gather,
//! - Hadamard-rotated stochastic quantization aggregated with a saturating
//!   integer all-reduce ([`transforms`], [`compressors::thc_quantize`]),
//! - PowerSGD-style low-rank decomposition ([`compressors::powersgd_compress`]),
//! - dense FP16 / FP32 baselines.
//!
//! Every scheme runs over the deterministic ring collectives in
//! [`collectives`], which account for every bit a worker sends. The
//! [`metrics`] module turns those ledgers into simulated wall-clock time and
//! [`trainbench`] produces time-to-accuracy curves on a small synthetic task.
//!
//! The `gradcomp` binary wraps [`cli`] with three subcommands
//! (`nmse-sweep`, `train`, `collective-check`); the `examples/` directory has
//! one runnable program per capability.

pub mod cli;
pub mod collectives;
pub mod compressors;
pub mod error;
pub mod metrics;
pub mod pipelines;
pub mod trainbench;
pub mod transforms;
pub mod vectorcore;

pub use error::{Error, Result};
