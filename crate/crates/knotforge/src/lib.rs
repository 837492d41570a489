//! Streaming chunked video-diffusion inference engine.
//!
//! The engine rolls out latent video frames chunk by chunk with a few-step
//! denoiser whose attention context is bounded: a sliding window of recent
//! frames held in a KV cache, plus a single reference frame cached as a
//! global anchor. Chunk boundaries are smoothed by a temporal knot (adjacent
//! chunks overlap by `k` frames, denoised twice and fused by averaging), and
//! the reference frame's rotary position index is periodically pushed ahead
//! of the rollout and re-cached so it always sits in the generated video's
//! future.
//!
//! Modules:
//! - [`tensor`] / [`rng`] — dense f32 numerics and a counter-based RNG; all
//!   randomness is a pure function of `(seed, counter)`.
//! - [`rope`] — rotary positional encoding over explicit frame indices.
//! - [`topology`] — frame-level attention masks for three causal designs,
//!   the context-IoU diagnostic, and frame-contribution ablation.
//! - [`model`] — a tiny diffusion transformer with deterministic random
//!   weights, KV-emitting forward passes, and a dense masked oracle.
//! - [`cache`] — the bounded sliding-window cache and the re-cacheable
//!   reference cache.
//! - [`scheduler`] — the chunked rollout loop: noising, chunk denoising,
//!   knot fusion, window updates, and running ahead.
//! - [`trace`] — CSV / JSON-lines / flat-binary output formats.

pub mod cache;
pub mod model;
pub mod rng;
pub mod rope;
pub mod scheduler;
pub mod tensor;
pub mod topology;
pub mod trace;

use thiserror::Error;

/// Errors shared across the engine.
#[derive(Debug, Error)]
pub enum KnotError {
    /// Tensor shapes do not line up for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A configuration value violates its invariants.
    #[error("invalid configuration: {0}")]
    Config(String),
    /// A timestep falls outside the noise schedule's range.
    #[error("timestep {0} outside schedule range [0, 1000]")]
    Schedule(f32),
    /// A softmax row has no unmasked entries left.
    #[error("row {0} is fully masked")]
    DegenerateRow(usize),
    /// Cache positions arrived out of order.
    #[error("cache ordering violation: {0}")]
    Ordering(String),
    /// Two attention entries claim the same rotary position.
    #[error("rotary position collision: {0}")]
    Position(String),
    /// An index is out of range.
    #[error("index out of range: {0}")]
    Index(String),
    /// An operation produced NaN or infinity.
    #[error("non-finite values in {0}")]
    NonFinite(String),
    /// A rollout produced non-finite values; carries the offending chunk.
    #[error("numeric abort in chunk {chunk}")]
    NumericAbort { chunk: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, KnotError>;

/// Frame-level parallelism cap from `KNOTFORGE_THREADS` (default 1). Work
/// splits across frames only; per-frame reduction order is unchanged, so
/// results are bit-identical for any cap.
pub fn thread_cap() -> usize {
    use std::sync::OnceLock;
    static CAP: OnceLock<usize> = OnceLock::new();
    *CAP.get_or_init(|| {
        std::env::var("KNOTFORGE_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .unwrap_or(1)
    })
}
