//! Desk-scale masked-diffusion language model inference engine.
//!
//! A masked-diffusion LM decodes a fixed-length response by iteratively
//! replacing mask tokens, re-running a bidirectional transformer over the
//! sequence at every denoising step. This crate implements that loop
//! together with a saliency-aware sparse decoder: per-layer activation
//! caches (K, V, attention context, FFN output), selection of the tokens
//! whose attention context drifted between steps, exact recomputation for
//! those rows, a column-sparse approximate context update for the rest, and
//! a scheduler that presents only the response tokens at most steps.
//!
//! Everything is plain `f64` on the CPU: small enough to check against
//! exact oracles, deterministic enough that runs are byte-reproducible.
//!
//! The `examples/` directory has one runnable program per capability;
//! the `mdlm` binary wraps the same entry points behind subcommands.

pub mod analysis;
pub mod cache;
pub mod cli;
pub mod engine;
pub mod error;
pub mod model;
pub mod numerics;
pub mod sampler;

pub use analysis::{FlopCounts, RunReport, StepMetrics};
pub use cache::{CacheSet, SaliencyIndex};
pub use engine::{generate, generate_oracle, EngineConfig, ForceMode, GenerationResult};
pub use error::{Error, Result};
pub use model::{init_weights, ModelConfig, ModelWeights, ResidualMode};
pub use numerics::{Matrix, Rng};
pub use sampler::{DecodeState, SamplerConfig};
