//! Rotary positional encoding over explicit per-frame temporal indices.
//!
//! Positions are carried explicitly (not implied by sequence order) so the
//! reference frame can be encoded at an index ahead of the rollout and moved
//! later. Only the temporal axis is rotated; attention logits depend on
//! relative offsets only, which is what makes repositioning meaningful.

use crate::tensor::Tensor;
use crate::{KnotError, Result};

/// Rotation parameters: pair `j` of the head dimension turns by
/// `pos * base^(-2j / head_dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeConfig {
    head_dim: usize,
    base: f64,
}

impl RopeConfig {
    pub fn new(head_dim: usize, base: f64) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(2) {
            return Err(KnotError::Config(format!(
                "rope head_dim {head_dim} must be even and positive"
            )));
        }
        if !base.is_finite() || base <= 1.0 {
            return Err(KnotError::Config(format!("rope base {base} must exceed 1")));
        }
        Ok(Self { head_dim, base })
    }

    /// Standard base 10000.
    pub fn with_head_dim(head_dim: usize) -> Result<Self> {
        Self::new(head_dim, 10_000.0)
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// (cos, sin) per dimension pair for a signed position offset.
    fn angles(&self, delta: f64) -> Vec<(f32, f32)> {
        let half = self.head_dim / 2;
        (0..half)
            .map(|j| {
                let inv_freq = self.base.powf(-2.0 * j as f64 / self.head_dim as f64);
                let theta = delta * inv_freq;
                (theta.cos() as f32, theta.sin() as f32)
            })
            .collect()
    }
}

/// Temporal frame index (the `n` / `i` of the rollout).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PositionIndex(pub u64);

/// Rotate consecutive dimension pairs of `x` ([tokens × head_dim]) by the
/// angles for `pos`. Zero rotation returns the input bit-exactly.
pub fn rope_apply(x: &Tensor, pos: PositionIndex, cfg: &RopeConfig) -> Result<Tensor> {
    rotate(x, pos.0 as f64, cfg)
}

/// Re-rotate a tensor encoded at `from` so it reads as encoded at `to`
/// (rotation by the signed delta). Used by the fast-path reference re-cache.
pub fn rope_rotate_between(
    x: &Tensor,
    from: PositionIndex,
    to: PositionIndex,
    cfg: &RopeConfig,
) -> Result<Tensor> {
    let delta = to.0 as f64 - from.0 as f64;
    rotate(x, delta, cfg)
}

fn rotate(x: &Tensor, delta: f64, cfg: &RopeConfig) -> Result<Tensor> {
    if x.shape().len() != 2 || x.cols() != cfg.head_dim {
        return Err(KnotError::Shape(format!(
            "rope expects [tokens x {}], got {:?}",
            cfg.head_dim,
            x.shape()
        )));
    }
    if delta == 0.0 {
        return Ok(x.clone());
    }
    let angles = cfg.angles(delta);
    let tokens = x.rows();
    let mut data = Vec::with_capacity(x.len());
    for t in 0..tokens {
        let row = x.row(t);
        for (j, &(c, s)) in angles.iter().enumerate() {
            let x0 = row[2 * j];
            let x1 = row[2 * j + 1];
            data.push(x0 * c - x1 * s);
            data.push(x0 * s + x1 * c);
        }
    }
    Tensor::from_vec(x.shape(), data)
}
