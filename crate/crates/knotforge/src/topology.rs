//! Frame-level attention masks for three causal designs, the context-IoU
//! diagnostic, and frame-contribution ablation.
//!
//! Masks are frame-granular: all tokens of a frame share visibility, and all
//! frames of a chunk share one context row (joint chunk denoising). Column
//! `-1` denotes the reference frame, drawn as a separate always-on column in
//! the knot-forcing design.

use crate::tensor::Tensor;
use crate::{KnotError, Result};

/// The three causal context designs under comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskVariant {
    /// Unbounded prefix: every frame attends to everything up to its chunk.
    GrowingCache,
    /// A fixed set of sink frames plus a trailing window plus the own chunk.
    SinkWindow,
    /// Reference column plus trailing window plus the own chunk extended by
    /// the temporal knot.
    KnotForcing,
}

impl MaskVariant {
    pub fn name(&self) -> &'static str {
        match self {
            MaskVariant::GrowingCache => "growing-cache",
            MaskVariant::SinkWindow => "sink-window",
            MaskVariant::KnotForcing => "knot-forcing",
        }
    }
}

/// Parameters of one causal design.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskDesign {
    pub variant: MaskVariant,
    /// Chunk size c (frames denoised jointly).
    pub chunk: usize,
    /// Window length L (frames kept before the chunk).
    pub window: usize,
    /// Knot length k (overlap frames; knot-forcing only).
    pub knot: usize,
    /// Sink frame count (sink-window only).
    pub sink: usize,
}

impl MaskDesign {
    pub fn growing_cache(chunk: usize) -> Self {
        Self {
            variant: MaskVariant::GrowingCache,
            chunk,
            window: chunk,
            knot: 0,
            sink: 0,
        }
    }

    /// Sink defaults to the first chunk when callers pass `sink == chunk`.
    pub fn sink_window(chunk: usize, window: usize, sink: usize) -> Self {
        Self {
            variant: MaskVariant::SinkWindow,
            chunk,
            window,
            knot: 0,
            sink,
        }
    }

    pub fn knot_forcing(chunk: usize, window: usize, knot: usize) -> Self {
        Self {
            variant: MaskVariant::KnotForcing,
            chunk,
            window,
            knot,
            sink: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.chunk == 0 {
            return Err(KnotError::Config("chunk size must be >= 1".into()));
        }
        if self.window < self.chunk {
            return Err(KnotError::Config(format!(
                "window {} shorter than chunk {}",
                self.window, self.chunk
            )));
        }
        if self.knot >= self.chunk {
            return Err(KnotError::Config(format!(
                "knot {} must be smaller than chunk {}",
                self.knot, self.chunk
            )));
        }
        Ok(())
    }
}

/// Boolean frame-level context matrix. Row `q` lists the context of frame
/// `q`; columns run over `-1` (reference) and frames `0..num_frames`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    num_frames: usize,
    /// Row-major `num_frames x (num_frames + 1)`; column 0 is the reference.
    allow: Vec<bool>,
}

impl AttentionMask {
    fn blank(num_frames: usize) -> Self {
        Self {
            num_frames,
            allow: vec![false; num_frames * (num_frames + 1)],
        }
    }

    /// Build from explicit context rows (columns as `-1..num_frames-1`).
    pub fn from_rows(num_frames: usize, rows: &[Vec<i64>]) -> Result<Self> {
        if rows.len() != num_frames {
            return Err(KnotError::Shape(format!(
                "{} rows for {num_frames} frames",
                rows.len()
            )));
        }
        let mut m = Self::blank(num_frames);
        for (q, row) in rows.iter().enumerate() {
            for &c in row {
                m.set(q, c)?;
            }
        }
        m.check_rows_nonempty()?;
        Ok(m)
    }

    /// Full bidirectional mask over the frames (no reference column).
    pub fn full(num_frames: usize) -> Self {
        let mut m = Self::blank(num_frames);
        for q in 0..num_frames {
            for c in 0..num_frames {
                m.allow[q * (num_frames + 1) + c + 1] = true;
            }
        }
        m
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    fn col(&self, ctx: i64) -> Result<usize> {
        if ctx < -1 || ctx >= self.num_frames as i64 {
            return Err(KnotError::Index(format!(
                "context column {ctx} for {} frames",
                self.num_frames
            )));
        }
        Ok((ctx + 1) as usize)
    }

    fn set(&mut self, q: usize, ctx: i64) -> Result<()> {
        let c = self.col(ctx)?;
        self.allow[q * (self.num_frames + 1) + c] = true;
        Ok(())
    }

    pub fn allows(&self, q: usize, ctx: i64) -> bool {
        match self.col(ctx) {
            Ok(c) if q < self.num_frames => self.allow[q * (self.num_frames + 1) + c],
            _ => false,
        }
    }

    /// True when any row attends to the reference column.
    pub fn uses_reference(&self) -> bool {
        (0..self.num_frames).any(|q| self.allows(q, -1))
    }

    /// Context of frame `q` as sorted indices, `-1` first when present.
    pub fn context_set(&self, q: usize) -> Vec<i64> {
        (-1..self.num_frames as i64)
            .filter(|&c| self.allows(q, c))
            .collect()
    }

    fn check_rows_nonempty(&self) -> Result<()> {
        for q in 0..self.num_frames {
            if self.context_set(q).is_empty() {
                return Err(KnotError::Config(format!(
                    "frame {q} has an empty context row"
                )));
            }
        }
        Ok(())
    }
}

/// Materialize the frame-level mask of a causal design over `num_frames`.
///
/// Context per frame, with `start` its chunk's first frame:
/// - growing-cache: all frames up to the chunk's last index;
/// - sink-window: sink frames, the trailing `L` frames before `start`, and
///   the own chunk;
/// - knot-forcing: the reference column, the trailing `L` frames before
///   `start`, and the own chunk extended to `c + k` frames.
pub fn build_mask(design: &MaskDesign, num_frames: usize) -> Result<AttentionMask> {
    design.validate()?;
    if num_frames < design.chunk {
        return Err(KnotError::Config(format!(
            "num_frames {num_frames} below chunk size {}",
            design.chunk
        )));
    }
    let mut m = AttentionMask::blank(num_frames);
    let last = num_frames as i64 - 1;
    for q in 0..num_frames {
        let start = (q / design.chunk * design.chunk) as i64;
        match design.variant {
            MaskVariant::GrowingCache => {
                let end = (start + design.chunk as i64 - 1).min(last);
                for c in 0..=end {
                    m.set(q, c)?;
                }
            }
            MaskVariant::SinkWindow => {
                let sink_end = (design.sink as i64 - 1).min(last);
                for c in 0..=sink_end {
                    m.set(q, c)?;
                }
                for c in (start - design.window as i64).max(0)..start {
                    m.set(q, c)?;
                }
                let end = (start + design.chunk as i64 - 1).min(last);
                for c in start..=end {
                    m.set(q, c)?;
                }
            }
            MaskVariant::KnotForcing => {
                m.set(q, -1)?;
                for c in (start - design.window as i64).max(0)..start {
                    m.set(q, c)?;
                }
                let end = (start + (design.chunk + design.knot) as i64 - 1).min(last);
                for c in start..=end {
                    m.set(q, c)?;
                }
            }
        }
    }
    m.check_rows_nonempty()?;
    Ok(m)
}

/// Intersection-over-union of the context sets of frames `t` and `t+1`.
pub fn context_iou(mask: &AttentionMask, t: usize) -> Result<f64> {
    if t + 1 >= mask.num_frames() {
        return Err(KnotError::Index(format!(
            "iou needs t+1 < {}, got t = {t}",
            mask.num_frames()
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for c in -1..mask.num_frames() as i64 {
        let a = mask.allows(t, c);
        let b = mask.allows(t + 1, c);
        if a && b {
            inter += 1;
        }
        if a || b {
            union += 1;
        }
    }
    Ok(inter as f64 / union as f64)
}

// ---------------------------------------------------------------------------
// Frame-contribution ablation
// ---------------------------------------------------------------------------

/// Relative L2 change of the anchor's attention output when one context
/// frame is ablated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContributionScore {
    /// Context frame index; -1 is the reference.
    pub frame: i64,
    pub score: f32,
}

/// Per-frame query/key/value blocks for one attention computation. Keys are
/// expected to be rotary-rotated at their frame positions already, so
/// ablation has pure set semantics at fixed positions.
#[derive(Debug, Clone)]
pub struct AttentionProbe {
    pub heads: usize,
    pub head_dim: usize,
    pub tokens_per_frame: usize,
    /// Per frame, each `[tokens_per_frame x heads*head_dim]`.
    pub q: Vec<Tensor>,
    pub k: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Reference keys/values for the -1 column, when the mask uses it.
    pub ref_kv: Option<(Tensor, Tensor)>,
}

impl AttentionProbe {
    fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    fn validate(&self) -> Result<()> {
        let w = self.width();
        if self.q.len() != self.k.len() || self.k.len() != self.v.len() {
            return Err(KnotError::Shape("probe q/k/v frame counts differ".into()));
        }
        for t in self.q.iter().chain(&self.k).chain(&self.v) {
            if t.shape() != [self.tokens_per_frame, w] {
                return Err(KnotError::Shape(format!(
                    "probe block shape {:?}, want [{} x {w}]",
                    t.shape(),
                    self.tokens_per_frame
                )));
            }
        }
        if let Some((k, v)) = &self.ref_kv {
            if k.shape() != [self.tokens_per_frame, w] || v.shape() != [self.tokens_per_frame, w] {
                return Err(KnotError::Shape(
                    "probe reference block shape mismatch".into(),
                ));
            }
        }
        Ok(())
    }

    fn kv_for(&self, col: i64) -> (&Tensor, &Tensor) {
        if col == -1 {
            let (k, v) = self.ref_kv.as_ref().expect("checked by caller");
            (k, v)
        } else {
            (&self.k[col as usize], &self.v[col as usize])
        }
    }
}

/// Multi-head attention output of the anchor's token block over the given
/// context columns (canonical order: reference first, frames ascending).
fn anchor_attention(probe: &AttentionProbe, anchor: usize, ctx: &[i64]) -> Result<Tensor> {
    let blocks: Vec<(&Tensor, &Tensor)> = ctx.iter().map(|&c| probe.kv_for(c)).collect();
    let keys = Tensor::concat_rows(&blocks.iter().map(|(k, _)| *k).collect::<Vec<_>>())?;
    let values = Tensor::concat_rows(&blocks.iter().map(|(_, v)| *v).collect::<Vec<_>>())?;
    let scale = 1.0 / (probe.head_dim as f32).sqrt();
    let mut per_head = Vec::with_capacity(probe.heads);
    for h in 0..probe.heads {
        let lo = h * probe.head_dim;
        let hi = lo + probe.head_dim;
        let qh = probe.q[anchor].slice_cols(lo, hi)?;
        let kh = keys.slice_cols(lo, hi)?;
        let vh = values.slice_cols(lo, hi)?;
        let logits = qh.matmul(&kh.transpose2()?)?.scale(scale)?;
        let weights = logits.softmax_rows(&vec![true; logits.len()])?;
        per_head.push(weights.matmul(&vh)?);
    }
    Tensor::concat_cols(&per_head.iter().collect::<Vec<_>>())
}

/// Ablation diagnostic: for every context column `f`, the relative L2
/// change of the anchor frame's attention output when `f`'s keys/values are
/// removed from the context. Columns outside the anchor's context score
/// exactly zero.
pub fn frame_contribution(
    probe: &AttentionProbe,
    anchor: usize,
    mask: &AttentionMask,
) -> Result<Vec<ContributionScore>> {
    probe.validate()?;
    if anchor >= mask.num_frames() || anchor >= probe.q.len() {
        return Err(KnotError::Index(format!("anchor {anchor} out of range")));
    }
    if mask.num_frames() != probe.q.len() {
        return Err(KnotError::Shape(format!(
            "mask covers {} frames, probe {}",
            mask.num_frames(),
            probe.q.len()
        )));
    }
    let ctx = mask.context_set(anchor);
    if ctx.contains(&-1) && probe.ref_kv.is_none() {
        return Err(KnotError::Config(
            "mask uses the reference column but the probe has no reference block".into(),
        ));
    }
    let full = anchor_attention(probe, anchor, &ctx)?;
    let full_norm = full.l2_norm();
    let mut scores = Vec::with_capacity(mask.num_frames() + 1);
    for col in -1..mask.num_frames() as i64 {
        if col == -1 && probe.ref_kv.is_none() {
            continue;
        }
        if !ctx.contains(&col) {
            scores.push(ContributionScore {
                frame: col,
                score: 0.0,
            });
            continue;
        }
        let reduced: Vec<i64> = ctx.iter().copied().filter(|&c| c != col).collect();
        if reduced.is_empty() {
            return Err(KnotError::DegenerateRow(anchor));
        }
        let without = anchor_attention(probe, anchor, &reduced)?;
        let score = full.sub(&without)?.l2_norm() / full_norm;
        scores.push(ContributionScore { frame: col, score });
    }
    Ok(scores)
}
