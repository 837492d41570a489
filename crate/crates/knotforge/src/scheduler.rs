//! The chunked rollout: few-step denoising with temporal-knot overlap,
//! fused boundary predictions, sliding-window KV updates, and the
//! running-ahead reference schedule.
//!
//! Each loop iteration denoises `c + k` frames (the chunk plus the draft of
//! the next chunk's first `k` frames), emits frames `i .. i+c`, fuses the
//! knot slots with the previous chunk's drafts by averaging, refreshes the
//! window cache from the newest clean predictions, and bumps the reference
//! index ahead when the rollout would catch up with it.
//!
//! All noise draws are pure functions of `(seed, chunk, step, slot)` over
//! disjoint counter ranges, so toggling features never shifts the draws of
//! unrelated chunks.

use std::collections::BTreeSet;
use std::time::Instant;

use crate::cache::{rotated_reference, ReferenceCache, SlidingCache};
use crate::model::{DrivingSignal, ForwardStats, FrameKv, FrameLatent, ModelConfig, ToyDit};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::{KnotError, Result};

const TAG_NOISE: u64 = 0x6b66_4e53; // "kfNS"
const CHUNK_STRIDE: u64 = 1 << 32;
const STEP_STRIDE: u64 = 1 << 24;
const SLOT_STRIDE: u64 = 1 << 16;

/// Descending denoise timestep ladder; the final state t = 0 is implicit.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: Vec<f32>,
}

impl NoiseSchedule {
    pub fn new(steps: Vec<f32>) -> Result<Self> {
        if steps.is_empty() {
            return Err(KnotError::Config("schedule needs at least one step".into()));
        }
        if steps[0] != 1000.0 {
            return Err(KnotError::Config(format!(
                "schedule must start at 1000, got {}",
                steps[0]
            )));
        }
        for w in steps.windows(2) {
            if w[1] >= w[0] {
                return Err(KnotError::Config(
                    "schedule must be strictly decreasing".into(),
                ));
            }
        }
        if steps.iter().any(|&t| !(0.0 < t && t <= 1000.0)) {
            return Err(KnotError::Config(
                "schedule steps must lie in (0, 1000]".into(),
            ));
        }
        Ok(Self { steps })
    }

    /// The default 4-step ladder {1000, 750, 500, 250}.
    pub fn default_four() -> Self {
        Self::new(vec![1000.0, 750.0, 500.0, 250.0]).expect("valid default")
    }

    pub fn steps(&self) -> &[f32] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::default_four()
    }
}

/// Rectified-flow interpolation `x_t = (1 - t/1000) x0 + (t/1000) eps`.
/// The endpoints return their operand bit-exactly.
pub fn forward_noise(x0: &Tensor, eps: &Tensor, t: f32) -> Result<Tensor> {
    if x0.shape() != eps.shape() {
        return Err(KnotError::Shape(format!(
            "forward_noise shapes {:?} vs {:?}",
            x0.shape(),
            eps.shape()
        )));
    }
    if !(0.0..=1000.0).contains(&t) {
        return Err(KnotError::Schedule(t));
    }
    if t == 0.0 {
        return Ok(x0.clone());
    }
    if t == 1000.0 {
        return Ok(eps.clone());
    }
    let w = t / 1000.0;
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(a, b)| (1.0 - w) * a + w * b)
        .collect();
    Tensor::from_vec(x0.shape(), data)
}

/// Elementwise mean of the two knot predictions (the fused boundary output).
pub fn fuse_knot(prefix_pred: &Tensor, suffix_pred: &Tensor) -> Result<Tensor> {
    if prefix_pred.shape() != suffix_pred.shape() {
        return Err(KnotError::Shape(format!(
            "fuse shapes {:?} vs {:?}",
            prefix_pred.shape(),
            suffix_pred.shape()
        )));
    }
    let data = prefix_pred
        .data()
        .iter()
        .zip(suffix_pred.data())
        .map(|(a, b)| (a + b) / 2.0)
        .collect();
    Tensor::from_vec(prefix_pred.shape(), data)
}

/// Rollout parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutConfig {
    /// Total frames to emit (M); must be a positive multiple of `chunk`.
    pub frames: usize,
    /// Chunk size c.
    pub chunk: usize,
    /// Window length L (frames kept in the sliding cache).
    pub window: usize,
    /// Knot length k (overlap frames, k < c).
    pub knot: usize,
    /// Running-ahead interleave s; `None` pins the reference at `ref_start`.
    pub ahead_interleave: Option<u64>,
    /// Initial reference index n0.
    pub ref_start: u64,
    pub seed: u64,
    pub schedule: NoiseSchedule,
    /// Re-cache by rotating cached keys instead of a full forward pass.
    pub recache_rotate: bool,
}

impl RolloutConfig {
    /// Stock defaults: c = 3, L = 6, k = 1, s = 2c, n0 = c + k + 1.
    pub fn defaults(frames: usize, seed: u64) -> Self {
        Self {
            frames,
            chunk: 3,
            window: 6,
            knot: 1,
            ahead_interleave: Some(6),
            ref_start: 5,
            seed,
            schedule: NoiseSchedule::default_four(),
            recache_rotate: false,
        }
    }

    pub fn validate(&self, mcfg: &ModelConfig) -> Result<()> {
        if self.chunk == 0 {
            return Err(KnotError::Config("chunk size must be >= 1".into()));
        }
        if self.knot >= self.chunk {
            return Err(KnotError::Config(format!(
                "knot {} must be smaller than chunk {}",
                self.knot, self.chunk
            )));
        }
        if self.window < self.chunk {
            return Err(KnotError::Config(format!(
                "window {} must be at least the chunk size {}",
                self.window, self.chunk
            )));
        }
        if self.frames == 0 || !self.frames.is_multiple_of(self.chunk) {
            return Err(KnotError::Config(format!(
                "frame count {} must be a positive multiple of chunk {}",
                self.frames, self.chunk
            )));
        }
        match self.ahead_interleave {
            Some(s) => {
                if s < (self.chunk + self.knot) as u64 {
                    return Err(KnotError::Config(format!(
                        "interleave {s} below chunk + knot = {}; one bump could not restore the \
                         reference-ahead invariant",
                        self.chunk + self.knot
                    )));
                }
            }
            None => {
                // Pinned reference: it must sit beyond every position the
                // rollout will ever denoise, or its rotary index collides.
                let horizon = (self.frames + self.knot) as u64;
                if self.ref_start < horizon {
                    return Err(KnotError::Config(format!(
                        "pinned reference at {} inside the rollout horizon {horizon}; \
                         raise ref_start or enable running ahead",
                        self.ref_start
                    )));
                }
            }
        }
        // Counter-range capacity for the per-(chunk, step, slot) noise plan.
        let draws = mcfg.tokens_per_frame * mcfg.latent_channels + 1;
        if draws as u64 > SLOT_STRIDE {
            return Err(KnotError::Config(
                "frame too large for the per-slot counter range".into(),
            ));
        }
        if (self.chunk + self.knot) as u64 > STEP_STRIDE / SLOT_STRIDE {
            return Err(KnotError::Config(
                "too many slots for the per-step counter range".into(),
            ));
        }
        if (self.schedule.len() + 1) as u64 > CHUNK_STRIDE / STEP_STRIDE {
            return Err(KnotError::Config(
                "schedule too long for the per-chunk counter range".into(),
            ));
        }
        if (self.frames / self.chunk) as u64 > u32::MAX as u64 {
            return Err(KnotError::Config(
                "chunk count exceeds the counter plan".into(),
            ));
        }
        Ok(())
    }
}

/// Pure noise plan: every tensor is a function of (seed, chunk, step, slot).
/// Step 0 is the initial chunk noise; step j > 0 re-noises after step j.
#[derive(Debug, Clone, Copy)]
pub struct NoiseSource {
    seed: u64,
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        Self {
            seed: Rng::derive_seed(seed, TAG_NOISE),
        }
    }

    pub fn eps(&self, chunk: u64, step: u64, slot: u64, shape: &[usize]) -> Tensor {
        let base = chunk * CHUNK_STRIDE + step * STEP_STRIDE + slot * SLOT_STRIDE;
        Rng::with_counter(self.seed, base).gaussian(shape)
    }
}

/// One carried knot frame: the previous chunk's clean draft at `pos`.
#[derive(Debug, Clone)]
pub struct KnotSlot {
    pub pos: u64,
    pub latent: Tensor,
}

/// The temporal knot carried between chunks; empty before the first chunk.
#[derive(Debug, Clone, Default)]
pub struct KnotState {
    pub slots: Vec<KnotSlot>,
}

/// Fusion record for one knot position (criterion: the emitted frame is the
/// exact mean of the two predictions, each knot denoised exactly twice).
#[derive(Debug, Clone)]
pub struct KnotRecord {
    pub pos: u64,
    /// Prediction as prefix of the current chunk.
    pub prefix_pred: Tensor,
    /// Prediction as suffix of the preceding chunk (the carried draft).
    pub suffix_pred: Tensor,
    pub fused: Tensor,
}

/// Per-chunk rollout diagnostics. The serialized JSON-lines trace carries
/// `{chunk, t_wall_ms, ref_pos, recache, cache_frames, knot_fused_l2}`; the
/// remaining fields are in-memory diagnostics.
#[derive(Debug, Clone)]
pub struct ChunkTrace {
    pub chunk: usize,
    pub wall_ms: f64,
    pub ref_pos: u64,
    pub recache: bool,
    pub cache_frames: usize,
    /// L2 norm of (prefix - suffix) over this chunk's fused knot slots.
    pub knot_fused_l2: f32,
    /// IoU of this chunk's frame-level context set against the previous
    /// chunk's; `None` for the first chunk.
    pub boundary_iou: Option<f64>,
    /// Attention score elements of the chunk's stream work (denoise steps
    /// plus the window KV refresh). Reference re-caching is counted apart in
    /// `recache_score_elems` since it only runs on trigger chunks.
    pub score_elems: u64,
    pub recache_score_elems: u64,
    pub span_start: u64,
    pub span_len: usize,
    /// Window cache contents after this chunk's refresh.
    pub cache_positions: Vec<u64>,
    pub knots: Vec<KnotRecord>,
}

/// Finished rollout: M clean frames plus the per-chunk trace.
#[derive(Debug, Clone)]
pub struct RolloutResult {
    pub frames: Vec<Tensor>,
    pub trace: Vec<ChunkTrace>,
}

/// Multi-step denoising of one chunk (spanning `initial.len()` slots at
/// positions `start_pos..`): predict clean frames at each ladder step,
/// re-noise to the next step with fresh eps, return the final predictions.
#[allow(clippy::too_many_arguments)]
pub fn denoise_chunk(
    model: &ToyDit,
    initial: Vec<Tensor>,
    start_pos: u64,
    schedule: &NoiseSchedule,
    knot: &KnotState,
    kv_pre: &[&FrameKv],
    kv_ref: Option<&FrameKv>,
    drive: Option<&DrivingSignal>,
    noise: &NoiseSource,
    chunk_index: u64,
    stats: &mut ForwardStats,
) -> Result<Vec<Tensor>> {
    let slots = initial.len();
    if slots == 0 {
        return Err(KnotError::Shape("empty chunk".into()));
    }
    let mut knot_conds = Vec::with_capacity(knot.slots.len());
    for (s, ks) in knot.slots.iter().enumerate() {
        if ks.pos != start_pos + s as u64 {
            return Err(KnotError::Ordering(format!(
                "knot slot {s} at {} does not align with chunk start {start_pos}",
                ks.pos
            )));
        }
        knot_conds.push(FrameLatent::condition(ks.latent.clone(), ks.pos));
    }
    let steps = schedule.steps();
    let mut x_t = initial;
    for (si, &t) in steps.iter().enumerate() {
        let chunk_frames: Vec<FrameLatent> = x_t
            .iter()
            .enumerate()
            .map(|(s, x)| FrameLatent::generated(x.clone(), start_pos + s as u64, t))
            .collect();
        let preds = model.forward_denoise_counted(
            &chunk_frames,
            t,
            &knot_conds,
            kv_pre,
            kv_ref,
            drive,
            stats,
        )?;
        if si + 1 == steps.len() {
            return Ok(preds);
        }
        let t_next = steps[si + 1];
        for (s, x) in x_t.iter_mut().enumerate() {
            let eps = noise.eps(chunk_index, (si + 1) as u64, s as u64, preds[s].shape());
            *x = forward_noise(&preds[s], &eps, t_next)?;
        }
    }
    unreachable!("loop returns on the final step");
}

/// Full knot-forcing rollout per the configured schedule.
pub fn generate_stream(
    cfg: &RolloutConfig,
    model: &ToyDit,
    reference: &Tensor,
    drive: Option<&DrivingSignal>,
) -> Result<RolloutResult> {
    run_rollout(cfg, model, reference, drive)
}

/// The knot-free baseline: requires `knot == 0` and running ahead disabled
/// (reference pinned at `ref_start`), then runs the same engine — the
/// degenerate path the knot-enabled rollout must reduce to bit-exactly.
pub fn generate_baseline(
    cfg: &RolloutConfig,
    model: &ToyDit,
    reference: &Tensor,
    drive: Option<&DrivingSignal>,
) -> Result<RolloutResult> {
    if cfg.knot != 0 {
        return Err(KnotError::Config(format!(
            "baseline requires knot = 0, got {}",
            cfg.knot
        )));
    }
    if cfg.ahead_interleave.is_some() {
        return Err(KnotError::Config(
            "baseline requires running ahead disabled".into(),
        ));
    }
    run_rollout(cfg, model, reference, drive)
}

fn numeric_abort(chunk: usize) -> impl Fn(KnotError) -> KnotError {
    move |e| match e {
        KnotError::NonFinite(_) => KnotError::NumericAbort { chunk },
        other => other,
    }
}

fn run_rollout(
    cfg: &RolloutConfig,
    model: &ToyDit,
    reference: &Tensor,
    drive: Option<&DrivingSignal>,
) -> Result<RolloutResult> {
    let mcfg = model.config().clone();
    cfg.validate(&mcfg)?;
    if reference.shape() != [mcfg.tokens_per_frame, mcfg.latent_channels] {
        return Err(KnotError::Shape(format!(
            "reference latent {:?}, want [{} x {}]",
            reference.shape(),
            mcfg.tokens_per_frame,
            mcfg.latent_channels
        )));
    }
    if let Some(d) = drive {
        if d.dim() != mcfg.drive_dim {
            return Err(KnotError::Config(format!(
                "driving signal dim {} vs model drive_dim {}",
                d.dim(),
                mcfg.drive_dim
            )));
        }
        if d.frames() < cfg.frames + cfg.knot {
            return Err(KnotError::Config(format!(
                "driving signal covers {} frames, rollout denoises up to {}",
                d.frames(),
                cfg.frames + cfg.knot
            )));
        }
    }

    let noise = NoiseSource::new(cfg.seed);
    let slots = cfg.chunk + cfg.knot;
    let chunks = cfg.frames / cfg.chunk;
    let frame_shape = [mcfg.tokens_per_frame, mcfg.latent_channels];

    let ref_latent = FrameLatent::condition(reference.clone(), cfg.ref_start);
    let mut refcache =
        ReferenceCache::new(model.forward_kv(&[ref_latent], &[], None, None)?.remove(0));
    let mut cache = SlidingCache::new(cfg.window, mcfg.layers)?;
    let mut knot_state = KnotState::default();
    let mut output: Vec<Tensor> = Vec::with_capacity(cfg.frames);
    let mut trace: Vec<ChunkTrace> = Vec::with_capacity(chunks);
    let mut prev_ctx: Option<BTreeSet<i64>> = None;

    for q in 0..chunks {
        let i = (q * cfg.chunk) as u64;
        let started = Instant::now();
        let mut stats = ForwardStats::default();
        let mut recache_stats = ForwardStats::default();

        let mut recached = false;
        if let Some(s) = cfg.ahead_interleave {
            recached = refcache.running_ahead(i, cfg.chunk, cfg.knot, s, &mut |pos, old| {
                if cfg.recache_rotate {
                    rotated_reference(old, pos, mcfg.heads, model.rope())
                } else {
                    let fresh_ref = FrameLatent::condition(reference.clone(), pos);
                    Ok(model
                        .forward_kv_counted(&[fresh_ref], &[], None, None, &mut recache_stats)?
                        .remove(0))
                }
            })?;
        }
        debug_assert!(refcache.position() >= i + slots as u64 || cfg.ahead_interleave.is_none());

        // Frame-level context set of this chunk's denoise calls.
        let mut ctx_set: BTreeSet<i64> = cache.positions().iter().map(|&p| p as i64).collect();
        for s in 0..slots {
            ctx_set.insert((i + s as u64) as i64);
        }
        ctx_set.insert(-1);
        let boundary_iou = prev_ctx.as_ref().map(|prev| {
            let inter = prev.intersection(&ctx_set).count();
            let union = prev.union(&ctx_set).count();
            inter as f64 / union as f64
        });

        let initial: Vec<Tensor> = (0..slots)
            .map(|s| noise.eps(q as u64, 0, s as u64, &frame_shape))
            .collect();
        let mut preds = denoise_chunk(
            model,
            initial,
            i,
            &cfg.schedule,
            &knot_state,
            &cache.context(),
            Some(refcache.group()),
            drive,
            &noise,
            q as u64,
            &mut stats,
        )
        .map_err(numeric_abort(q))?;

        // Fused boundary prediction for the carried knot slots.
        let mut knots = Vec::with_capacity(cfg.knot);
        let mut knot_l2_sq = 0.0f64;
        if cfg.knot > 0 && q > 0 {
            for (s, carried) in knot_state.slots.iter().enumerate() {
                let fused = fuse_knot(&preds[s], &carried.latent)?;
                let gap = preds[s].sub(&carried.latent)?.l2_norm();
                knot_l2_sq += (gap as f64) * (gap as f64);
                knots.push(KnotRecord {
                    pos: carried.pos,
                    prefix_pred: preds[s].clone(),
                    suffix_pred: carried.latent.clone(),
                    fused: fused.clone(),
                });
                preds[s] = fused;
            }
        }

        // Carry the next knot: the pre-fusion drafts of the next chunk's
        // first k frames.
        knot_state = KnotState {
            slots: (0..cfg.knot)
                .map(|s| KnotSlot {
                    pos: i + (cfg.chunk + s) as u64,
                    latent: preds[cfg.chunk + s].clone(),
                })
                .collect(),
        };

        for pred in preds.iter().take(cfg.chunk) {
            output.push(pred.clone());
        }

        // Window refresh from the newest clean frames: positions
        // [i + 2c - L, i + c). Overlapped cache entries are recomputed with
        // fresh context and overwritten.
        let lo = (q * cfg.chunk + 2 * cfg.chunk).saturating_sub(cfg.window);
        let hi = q * cfg.chunk + cfg.chunk;
        if lo < hi {
            let slice_pos: Vec<u64> = (lo..hi).map(|p| p as u64).collect();
            let slice_frames: Vec<FrameLatent> = slice_pos
                .iter()
                .map(|&p| FrameLatent::generated(output[p as usize].clone(), p, 0.0))
                .collect();
            let ctx = cache.context_excluding(&slice_pos);
            let fresh = model
                .forward_kv_counted(
                    &slice_frames,
                    &ctx,
                    Some(refcache.group()),
                    drive,
                    &mut stats,
                )
                .map_err(numeric_abort(q))?;
            cache.refresh(fresh)?;
        }
        debug_assert!(cache.len() <= cfg.window);

        trace.push(ChunkTrace {
            chunk: q,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            ref_pos: refcache.position(),
            recache: recached,
            cache_frames: cache.len(),
            knot_fused_l2: (knot_l2_sq.sqrt()) as f32,
            boundary_iou,
            score_elems: stats.score_elems,
            recache_score_elems: recache_stats.score_elems,
            span_start: i,
            span_len: slots,
            cache_positions: cache.positions(),
            knots,
        });
        prev_ctx = Some(ctx_set);
    }

    Ok(RolloutResult {
        frames: output,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn small_model(seed: u64) -> ToyDit {
        let cfg = ModelConfig {
            layers: 2,
            heads: 2,
            head_dim: 8,
            tokens_per_frame: 2,
            latent_channels: 4,
            drive_dim: 4,
        };
        ToyDit::new(cfg, seed).unwrap()
    }

    fn reference(model: &ToyDit, seed: u64) -> Tensor {
        let c = model.config();
        Rng::new(seed).gaussian(&[c.tokens_per_frame, c.latent_channels])
    }

    fn small_cfg(frames: usize) -> RolloutConfig {
        RolloutConfig {
            frames,
            chunk: 3,
            window: 6,
            knot: 1,
            ahead_interleave: Some(6),
            ref_start: 5,
            seed: 3,
            schedule: NoiseSchedule::default_four(),
            recache_rotate: false,
        }
    }

    #[test]
    fn forward_noise_endpoints_are_bit_exact() {
        let mut rng = Rng::new(1);
        let x0 = rng.gaussian(&[2, 4]);
        let eps = rng.gaussian(&[2, 4]);
        assert!(forward_noise(&x0, &eps, 0.0).unwrap().bits_eq(&x0));
        assert!(forward_noise(&x0, &eps, 1000.0).unwrap().bits_eq(&eps));
        let mid = forward_noise(&x0, &eps, 500.0).unwrap();
        for ((m, a), b) in mid.data().iter().zip(x0.data()).zip(eps.data()) {
            assert!((m - (0.5 * a + 0.5 * b)).abs() < 1e-6);
        }
        assert!(matches!(
            forward_noise(&x0, &eps, 1200.0),
            Err(KnotError::Schedule(_))
        ));
    }

    #[test]
    fn fuse_knot_examples() {
        let a = Rng::new(2).gaussian(&[2, 4]);
        assert!(fuse_knot(&a, &a).unwrap().bits_eq(&a));
        let neg = a.scale(-1.0).unwrap();
        assert_eq!(fuse_knot(&a, &neg).unwrap().data().iter().sum::<f32>(), 0.0);
        let b = Rng::new(3).gaussian(&[2, 4]);
        let f = fuse_knot(&a, &b).unwrap();
        for ((x, p), s) in f.data().iter().zip(a.data()).zip(b.data()) {
            assert_eq!(x.to_bits(), ((p + s) / 2.0).to_bits());
        }
        assert!(fuse_knot(&a, &Rng::new(4).gaussian(&[4, 2])).is_err());
    }

    #[test]
    fn schedule_validation() {
        assert!(NoiseSchedule::new(vec![]).is_err());
        assert!(NoiseSchedule::new(vec![900.0]).is_err());
        assert!(NoiseSchedule::new(vec![1000.0, 1000.0]).is_err());
        assert!(NoiseSchedule::new(vec![1000.0, 0.0]).is_err());
        assert!(NoiseSchedule::new(vec![1000.0]).is_ok());
    }

    #[test]
    fn single_step_schedule_is_one_forward_call() {
        let model = small_model(5);
        let mcfg = model.config();
        let noise = NoiseSource::new(9);
        let shape = [mcfg.tokens_per_frame, mcfg.latent_channels];
        let initial: Vec<Tensor> = (0..3).map(|s| noise.eps(0, 0, s, &shape)).collect();
        let schedule = NoiseSchedule::new(vec![1000.0]).unwrap();
        let mut stats = ForwardStats::default();
        let preds = denoise_chunk(
            &model,
            initial.clone(),
            0,
            &schedule,
            &KnotState::default(),
            &[],
            None,
            None,
            &noise,
            0,
            &mut stats,
        )
        .unwrap();
        let frames: Vec<FrameLatent> = initial
            .iter()
            .enumerate()
            .map(|(s, x)| FrameLatent::generated(x.clone(), s as u64, 1000.0))
            .collect();
        let direct = model
            .forward_denoise(&frames, 1000.0, &[], &[], None, None)
            .unwrap();
        for (a, b) in preds.iter().zip(&direct) {
            assert!(a.bits_eq(b));
        }
    }

    #[test]
    fn single_chunk_rollout_emits_c_frames() {
        let model = small_model(6);
        let cfg = small_cfg(3);
        let out = generate_stream(&cfg, &model, &reference(&model, 1), None).unwrap();
        assert_eq!(out.frames.len(), 3);
        assert_eq!(out.trace.len(), 1);
        assert!(
            !out.trace[0].knots.iter().any(|_| true),
            "no fusion in chunk 0"
        );
    }

    #[test]
    fn output_positions_have_no_gaps_and_caches_stay_bounded() {
        let model = small_model(7);
        let cfg = small_cfg(30);
        let out = generate_stream(&cfg, &model, &reference(&model, 2), None).unwrap();
        assert_eq!(out.frames.len(), 30);
        for tr in &out.trace {
            assert!(tr.cache_frames <= cfg.window);
            assert!(tr.ref_pos > tr.span_start + tr.span_len as u64 - 1);
        }
    }

    #[test]
    fn rollout_is_bit_deterministic() {
        let model = small_model(8);
        let cfg = small_cfg(12);
        let r = reference(&model, 3);
        let drive = DrivingSignal::synth(13, model.config().drive_dim, 4);
        let a = generate_stream(&cfg, &model, &r, Some(&drive)).unwrap();
        let b = generate_stream(&cfg, &model, &r, Some(&drive)).unwrap();
        for (x, y) in a.frames.iter().zip(&b.frames) {
            assert!(x.bits_eq(y));
        }
    }

    #[test]
    fn recache_trace_matches_trigger_arithmetic() {
        let model = small_model(9);
        let cfg = small_cfg(12); // chunks at i = 0, 3, 6, 9; n0 = 5, s = 6
        let out = generate_stream(&cfg, &model, &reference(&model, 4), None).unwrap();
        let flags: Vec<bool> = out.trace.iter().map(|t| t.recache).collect();
        // i=0: 0+4 > 5 no; i=3: 7 > 5 yes -> n=11; i=6: 10 > 11 no; i=9: 13 > 11 yes.
        assert_eq!(flags, vec![false, true, false, true]);
        assert_eq!(out.trace[3].ref_pos, 17);
    }

    #[test]
    fn knot_zero_stream_equals_baseline_bits() {
        let model = small_model(10);
        let mut cfg = small_cfg(12);
        cfg.knot = 0;
        cfg.ahead_interleave = None;
        cfg.ref_start = 12;
        let r = reference(&model, 5);
        let a = generate_stream(&cfg, &model, &r, None).unwrap();
        let b = generate_baseline(&cfg, &model, &r, None).unwrap();
        for (x, y) in a.frames.iter().zip(&b.frames) {
            assert!(x.bits_eq(y));
        }
    }

    #[test]
    fn baseline_rejects_knots_or_running_ahead() {
        let model = small_model(11);
        let r = reference(&model, 6);
        let cfg = small_cfg(12);
        assert!(matches!(
            generate_baseline(&cfg, &model, &r, None),
            Err(KnotError::Config(_))
        ));
        let mut pinned_low = small_cfg(12);
        pinned_low.knot = 0;
        pinned_low.ahead_interleave = None;
        pinned_low.ref_start = 5; // collides with the rollout horizon
        assert!(matches!(
            generate_baseline(&pinned_low, &model, &r, None),
            Err(KnotError::Config(_))
        ));
    }

    #[test]
    fn knot_enabled_run_differs_from_baseline_at_boundaries() {
        let model = small_model(12);
        let r = reference(&model, 7);
        let mut knotless = small_cfg(12);
        knotless.knot = 0;
        knotless.ahead_interleave = None;
        knotless.ref_start = 13;
        let mut knotted = knotless.clone();
        knotted.knot = 1;
        let a = generate_baseline(&knotless, &model, &r, None).unwrap();
        let b = generate_stream(&knotted, &model, &r, None).unwrap();
        let boundary = 3; // first fused position
        assert!(a.frames[boundary].max_abs_diff(&b.frames[boundary]) > 0.0);
    }

    #[test]
    fn rotate_recache_tracks_full_recache() {
        let model = small_model(13);
        let r = reference(&model, 8);
        let mut full = small_cfg(30);
        let mut fast = full.clone();
        fast.recache_rotate = true;
        let a = generate_stream(&full, &model, &r, None).unwrap();
        let b = generate_stream(&fast, &model, &r, None).unwrap();
        let mut worst = 0.0f32;
        for (x, y) in a.frames.iter().zip(&b.frames) {
            worst = worst.max(x.max_abs_diff(y));
        }
        full.recache_rotate = false;
        assert!(worst < 1e-3, "fast-path recache drifted by {worst}");
    }

    #[test]
    fn rotated_reference_keys_match_full_reencode() {
        let model = small_model(15);
        let r = reference(&model, 10);
        let at_n = model
            .forward_kv(&[FrameLatent::condition(r.clone(), 5)], &[], None, None)
            .unwrap()
            .remove(0);
        let full = model
            .forward_kv(&[FrameLatent::condition(r, 11)], &[], None, None)
            .unwrap()
            .remove(0);
        let rotated = rotated_reference(&at_n, 11, model.config().heads, model.rope()).unwrap();
        for (a, b) in full.entries.iter().zip(&rotated.entries) {
            assert!(
                a.values.max_abs_diff(&b.values) < 1e-6,
                "values are position-independent"
            );
            assert!(
                a.keys.max_abs_diff(&b.keys) < 1e-6,
                "keys differ only by the delta rotation"
            );
        }
    }

    #[test]
    fn stream_attention_work_is_constant_after_warmup() {
        let model = small_model(14);
        let cfg = small_cfg(30);
        let out = generate_stream(&cfg, &model, &reference(&model, 9), None).unwrap();
        let warm: Vec<u64> = out
            .trace
            .iter()
            .filter(|t| t.span_start >= cfg.window as u64)
            .map(|t| t.score_elems)
            .collect();
        assert!(warm.len() > 2);
        assert!(warm.windows(2).all(|w| w[0] == w[1]), "{warm:?}");
    }

    #[test]
    fn baseline_context_size_settles_at_one_plus_window_plus_chunk() {
        let model = small_model(16);
        let mut cfg = small_cfg(30);
        cfg.knot = 0;
        cfg.ahead_interleave = None;
        cfg.ref_start = 30;
        let out = generate_baseline(&cfg, &model, &reference(&model, 11), None).unwrap();
        for tr in out
            .trace
            .iter()
            .filter(|t| t.span_start >= cfg.window as u64)
        {
            // Denoise context frames: reference + window + own chunk.
            assert_eq!(1 + tr.cache_frames + cfg.chunk, 1 + cfg.window + cfg.chunk);
        }
    }

    #[test]
    fn perturbing_drive_at_a_knot_position_reaches_back_one_chunk_only() {
        // Frame 6 is the first frame of chunk 2 but is already denoised as
        // chunk 1's knot suffix, so chunk 1's output may shift; chunk 0 must
        // stay bit-identical.
        let model = small_model(17);
        let r = reference(&model, 12);
        let cfg = small_cfg(12);
        let drive = DrivingSignal::synth(13, model.config().drive_dim, 9);
        let bumped = drive.with_perturbed_frame(6, &[0.25; 4]).unwrap();
        let a = generate_stream(&cfg, &model, &r, Some(&drive)).unwrap();
        let b = generate_stream(&cfg, &model, &r, Some(&bumped)).unwrap();
        for f in 0..3 {
            assert!(
                a.frames[f].bits_eq(&b.frames[f]),
                "frame {f} leaked backwards"
            );
        }
        let knot_chunk_changed = (3..6).any(|f| !a.frames[f].bits_eq(&b.frames[f]));
        assert!(
            knot_chunk_changed,
            "the knot-carrying chunk should feel the perturbation"
        );
    }

    #[test]
    fn synth_driving_is_seed_deterministic_and_bounded() {
        let a = DrivingSignal::synth(24, 6, 5);
        let b = DrivingSignal::synth(24, 6, 5);
        let c = DrivingSignal::synth(24, 6, 6);
        assert!(a.per_frame().bits_eq(b.per_frame()));
        assert!(!a.per_frame().bits_eq(c.per_frame()));
        assert!(a.per_frame().data().iter().all(|v| v.abs() <= 1.0));
        let distinct_rows = (1..24).any(|f| a.per_frame().row(f) != a.per_frame().row(0));
        assert!(distinct_rows, "sinusoid features should vary across frames");
        let zeros = DrivingSignal::zeros(4, 6);
        assert!(zeros.per_frame().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_drive_rollout_equals_driveless_with_zero_projection() {
        let mut model = small_model(18);
        model.zero_cross_output();
        let r = reference(&model, 13);
        let cfg = small_cfg(12);
        let zeros = DrivingSignal::zeros(13, model.config().drive_dim);
        let with = generate_stream(&cfg, &model, &r, Some(&zeros)).unwrap();
        let without = generate_stream(&cfg, &model, &r, None).unwrap();
        for (a, b) in with.frames.iter().zip(&without.frames) {
            assert!(a.bits_eq(b));
        }
    }

    mod geometry {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn rollout_invariants_hold_for_random_geometries(
                chunk in 1usize..4,
                extra in 0usize..5,
                chunks in 1usize..4,
                seed in 0u64..1000,
                knotted in proptest::bool::ANY,
            ) {
                let knot = if knotted && chunk > 1 { 1 } else { 0 };
                let window = chunk + extra;
                let frames = chunks * chunk;
                let model = small_model(seed);
                let cfg = RolloutConfig {
                    frames,
                    chunk,
                    window,
                    knot,
                    ahead_interleave: Some((chunk + knot) as u64),
                    ref_start: (chunk + knot + 1) as u64,
                    seed,
                    schedule: NoiseSchedule::new(vec![1000.0, 500.0]).unwrap(),
                    recache_rotate: false,
                };
                let out = generate_stream(&cfg, &model, &reference(&model, seed), None).unwrap();
                prop_assert_eq!(out.frames.len(), frames);
                for tr in &out.trace {
                    prop_assert!(tr.cache_frames <= window);
                    prop_assert!(tr.ref_pos > tr.span_start + tr.span_len as u64 - 1);
                }
                let fused: usize = out.trace.iter().map(|t| t.knots.len()).sum();
                prop_assert_eq!(fused, chunks.saturating_sub(1) * knot);
            }
        }
    }
}
