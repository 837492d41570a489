//! A tiny diffusion transformer with deterministic random weights.
//!
//! The model predicts clean frame latents from noisy ones. Conditioning is
//! mask-inpainting: each frame's input is its latent concatenated with a
//! 0/1 visibility channel, so reference and knot frames enter as clean
//! `mask = 1` conditions while generated frames enter noisy with `mask = 0`.
//! A per-frame timestep embedding is added to token features, and an
//! optional driving signal is fused by frame-wise cross-attention after
//! every block.
//!
//! Three entry points share one stack:
//! - [`ToyDit::forward_denoise`] — incremental chunk denoising against
//!   cached reference/window KV entries;
//! - [`ToyDit::forward_kv`] — clean-frame pass that emits per-layer KV
//!   entries for caching (keys rotary-rotated at their frame positions);
//! - [`ToyDit::dense_oracle`] — one dense pass over a whole frame set with
//!   an explicit frame-level boolean mask, same weights; the independent
//!   route that incremental inference is checked against.
//!
//! Weights are seeded, never trained; everything under test here is
//! scheduling and cache correctness, not sample quality.

use std::io::{Read, Write};
use std::path::Path;

use crate::rng::Rng;
use crate::rope::{rope_apply, PositionIndex, RopeConfig};
use crate::tensor::Tensor;
use crate::topology::{AttentionMask, AttentionProbe};
use crate::{KnotError, Result};

const TAG_WEIGHTS: u64 = 0x6b66_5744; // "kfWD"
const TAG_DRIVE: u64 = 0x6b66_4452; // "kfDR"
const TIME_FEATURES: usize = 8;

/// Architecture hyperparameters; desk-scale stand-in for a video DiT.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub tokens_per_frame: usize,
    pub latent_channels: usize,
    pub drive_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 2,
            head_dim: 16,
            tokens_per_frame: 4,
            latent_channels: 8,
            drive_dim: 8,
        }
    }
}

impl ModelConfig {
    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        let all_positive = self.layers >= 1
            && self.heads >= 1
            && self.head_dim >= 1
            && self.tokens_per_frame >= 1
            && self.latent_channels >= 1
            && self.drive_dim >= 1;
        if !all_positive {
            return Err(KnotError::Config(
                "model dimensions must all be positive".into(),
            ));
        }
        if !self.head_dim.is_multiple_of(2) {
            return Err(KnotError::Config(format!(
                "head_dim {} must be even",
                self.head_dim
            )));
        }
        Ok(())
    }
}

/// One frame's model input: latent tokens, visibility mask channel, rotary
/// position, and noise level in [0, 1000].
#[derive(Debug, Clone)]
pub struct FrameLatent {
    pub tokens: Tensor,
    /// `[tokens_per_frame x 1]`, entries in {0, 1}; 1 marks a visible clean
    /// condition, 0 a generated frame.
    pub mask: Tensor,
    pub frame_pos: PositionIndex,
    pub noise_level: f32,
}

impl FrameLatent {
    /// A generated (noisy or clean-generated) frame, mask channel 0.
    pub fn generated(tokens: Tensor, frame_pos: u64, noise_level: f32) -> Self {
        let rows = tokens.rows();
        Self {
            tokens,
            mask: Tensor::zeros(&[rows, 1]),
            frame_pos: PositionIndex(frame_pos),
            noise_level,
        }
    }

    /// A visible clean condition (reference or knot), mask channel 1.
    pub fn condition(tokens: Tensor, frame_pos: u64) -> Self {
        let rows = tokens.rows();
        Self {
            tokens,
            mask: Tensor::filled(&[rows, 1], 1.0),
            frame_pos: PositionIndex(frame_pos),
            noise_level: 0.0,
        }
    }

    fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.tokens.shape() != [cfg.tokens_per_frame, cfg.latent_channels] {
            return Err(KnotError::Shape(format!(
                "frame tokens {:?}, want [{} x {}]",
                self.tokens.shape(),
                cfg.tokens_per_frame,
                cfg.latent_channels
            )));
        }
        if self.mask.shape() != [cfg.tokens_per_frame, 1] {
            return Err(KnotError::Shape(format!(
                "frame mask {:?}",
                self.mask.shape()
            )));
        }
        if !self.mask.data().iter().all(|&m| m == 0.0 || m == 1.0) {
            return Err(KnotError::Config(
                "mask channel entries must be 0 or 1".into(),
            ));
        }
        if !(0.0..=1000.0).contains(&self.noise_level) {
            return Err(KnotError::Schedule(self.noise_level));
        }
        Ok(())
    }
}

/// Per-frame control embedding, one vector per generated frame.
#[derive(Debug, Clone)]
pub struct DrivingSignal {
    per_frame: Tensor,
}

impl DrivingSignal {
    pub fn new(per_frame: Tensor) -> Result<Self> {
        if per_frame.shape().len() != 2 {
            return Err(KnotError::Shape(format!(
                "driving signal shape {:?}",
                per_frame.shape()
            )));
        }
        Ok(Self { per_frame })
    }

    /// Deterministic multi-frequency sinusoid features:
    /// `feature(f, d) = sin(2*pi*f*omega_d + phi_d)` with per-dimension
    /// frequency/phase drawn from the seed.
    pub fn synth(frames: usize, dim: usize, seed: u64) -> Self {
        let mut rng = Rng::new(Rng::derive_seed(seed, TAG_DRIVE));
        let omega: Vec<f64> = (0..dim).map(|_| 0.01 + 0.24 * rng.next_unit()).collect();
        let phi: Vec<f64> = (0..dim)
            .map(|_| std::f64::consts::TAU * rng.next_unit())
            .collect();
        let mut data = Vec::with_capacity(frames * dim);
        for f in 0..frames {
            for d in 0..dim {
                data.push((std::f64::consts::TAU * f as f64 * omega[d] + phi[d]).sin() as f32);
            }
        }
        Self {
            per_frame: Tensor::from_vec(&[frames, dim], data).expect("finite sinusoids"),
        }
    }

    pub fn zeros(frames: usize, dim: usize) -> Self {
        Self {
            per_frame: Tensor::zeros(&[frames, dim]),
        }
    }

    pub fn frames(&self) -> usize {
        self.per_frame.rows()
    }

    pub fn dim(&self) -> usize {
        self.per_frame.cols()
    }

    pub fn per_frame(&self) -> &Tensor {
        &self.per_frame
    }

    /// Row for an absolute frame position as a `[1 x dim]` tensor.
    pub fn vec_for(&self, frame_pos: u64) -> Result<Tensor> {
        let f = frame_pos as usize;
        if f >= self.frames() {
            return Err(KnotError::Index(format!(
                "driving signal covers {} frames, frame {f} requested",
                self.frames()
            )));
        }
        Tensor::from_vec(&[1, self.dim()], self.per_frame.row(f).to_vec())
    }

    /// Replace one frame's vector; used by causality tests.
    pub fn with_perturbed_frame(&self, frame_pos: u64, delta: &[f32]) -> Result<Self> {
        let f = frame_pos as usize;
        if f >= self.frames() || delta.len() != self.dim() {
            return Err(KnotError::Index(format!("perturb frame {f}")));
        }
        let mut data = self.per_frame.data().to_vec();
        for (d, &x) in delta.iter().enumerate() {
            data[f * self.dim() + d] += x;
        }
        Ok(Self {
            per_frame: Tensor::from_vec(&[self.frames(), self.dim()], data)?,
        })
    }
}

/// One layer's cached keys/values for one frame. Keys are stored already
/// rotated at `frame_pos`; values are position-independent.
#[derive(Debug, Clone)]
pub struct KvEntry {
    pub layer: usize,
    pub frame_pos: u64,
    pub keys: Tensor,
    pub values: Tensor,
}

/// All layers' KV entries for one frame.
#[derive(Debug, Clone)]
pub struct FrameKv {
    pub frame_pos: u64,
    pub entries: Vec<KvEntry>,
}

impl FrameKv {
    fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.entries.len() != cfg.layers {
            return Err(KnotError::Shape(format!(
                "frame kv holds {} layers, model has {}",
                self.entries.len(),
                cfg.layers
            )));
        }
        for (l, e) in self.entries.iter().enumerate() {
            if e.layer != l || e.frame_pos != self.frame_pos {
                return Err(KnotError::Shape(
                    "kv entry layer/pos bookkeeping mismatch".into(),
                ));
            }
            if e.keys.shape() != [cfg.tokens_per_frame, cfg.width()]
                || e.values.shape() != [cfg.tokens_per_frame, cfg.width()]
            {
                return Err(KnotError::Shape(format!(
                    "kv entry shape {:?}",
                    e.keys.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Exact attention work accounting (score-matrix elements touched).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardStats {
    pub score_elems: u64,
}

impl ForwardStats {
    pub fn merge(&mut self, other: ForwardStats) {
        self.score_elems += other.score_elems;
    }
}

// ---------------------------------------------------------------------------
// Weights
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct Block {
    ln1_g: Tensor,
    ln1_b: Tensor,
    w_q: Tensor,
    w_k: Tensor,
    w_v: Tensor,
    w_o: Tensor,
    lnx_g: Tensor,
    lnx_b: Tensor,
    xw_q: Tensor,
    xw_k: Tensor,
    xw_v: Tensor,
    xw_o: Tensor,
    ln2_g: Tensor,
    ln2_b: Tensor,
    w_mlp1: Tensor,
    b_mlp1: Tensor,
    w_mlp2: Tensor,
    b_mlp2: Tensor,
}

/// The toy DiT. Immutable after construction; forward passes are pure.
#[derive(Debug, Clone)]
pub struct ToyDit {
    cfg: ModelConfig,
    rope: RopeConfig,
    w_in: Tensor,
    b_in: Tensor,
    w_time: Tensor,
    blocks: Vec<Block>,
    lnf_g: Tensor,
    lnf_b: Tensor,
    w_out: Tensor,
    b_out: Tensor,
}

fn init_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let std = 1.0 / (rows as f32).sqrt();
    rng.gaussian(&[rows, cols]).scale(std).expect("finite init")
}

impl ToyDit {
    /// Build with weights fully determined by `(cfg, seed)`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let rope = RopeConfig::with_head_dim(cfg.head_dim)?;
        let w = cfg.width();
        let latent_channels = cfg.latent_channels;
        let mut rng = Rng::new(Rng::derive_seed(seed, TAG_WEIGHTS));
        let mut blocks = Vec::with_capacity(cfg.layers);
        let w_in = init_matrix(&mut rng, cfg.latent_channels + 1, w);
        let b_in = Tensor::zeros(&[1, w]);
        let w_time = init_matrix(&mut rng, TIME_FEATURES, w);
        for _ in 0..cfg.layers {
            blocks.push(Block {
                ln1_g: Tensor::filled(&[1, w], 1.0),
                ln1_b: Tensor::zeros(&[1, w]),
                w_q: init_matrix(&mut rng, w, w),
                w_k: init_matrix(&mut rng, w, w),
                w_v: init_matrix(&mut rng, w, w),
                w_o: init_matrix(&mut rng, w, w),
                lnx_g: Tensor::filled(&[1, w], 1.0),
                lnx_b: Tensor::zeros(&[1, w]),
                xw_q: init_matrix(&mut rng, w, w),
                xw_k: init_matrix(&mut rng, cfg.drive_dim, w),
                xw_v: init_matrix(&mut rng, cfg.drive_dim, w),
                xw_o: init_matrix(&mut rng, w, w),
                ln2_g: Tensor::filled(&[1, w], 1.0),
                ln2_b: Tensor::zeros(&[1, w]),
                w_mlp1: init_matrix(&mut rng, w, 4 * w),
                b_mlp1: Tensor::zeros(&[1, 4 * w]),
                w_mlp2: init_matrix(&mut rng, 4 * w, w),
                b_mlp2: Tensor::zeros(&[1, w]),
            });
        }
        Ok(Self {
            cfg,
            rope,
            w_in,
            b_in,
            w_time,
            blocks,
            lnf_g: Tensor::filled(&[1, w], 1.0),
            lnf_b: Tensor::zeros(&[1, w]),
            w_out: init_matrix(&mut rng, w, latent_channels),
            b_out: Tensor::zeros(&[1, latent_channels]),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn rope(&self) -> &RopeConfig {
        &self.rope
    }

    /// Zero every block's cross-attention output projection, making a zero
    /// or absent driving signal produce identical outputs.
    pub fn zero_cross_output(&mut self) {
        let w = self.cfg.width();
        for b in &mut self.blocks {
            b.xw_o = Tensor::zeros(&[w, w]);
        }
    }

    // -- shared primitives --------------------------------------------------

    fn time_embedding(&self, t: f32) -> Result<Tensor> {
        let tn = t / 1000.0;
        let mut feats = vec![0.0f32; TIME_FEATURES];
        for (i, f) in [1.0f32, 2.0, 4.0, 8.0].iter().enumerate() {
            let a = std::f32::consts::PI * f * tn;
            feats[2 * i] = a.sin();
            feats[2 * i + 1] = a.cos();
        }
        Tensor::from_vec(&[1, TIME_FEATURES], feats)?.matmul(&self.w_time)
    }

    fn embed(&self, fl: &FrameLatent) -> Result<Tensor> {
        let inp = Tensor::concat_cols(&[&fl.tokens, &fl.mask])?;
        let temb = self.time_embedding(fl.noise_level)?;
        inp.matmul(&self.w_in)?
            .add_row(self.b_in.row(0))?
            .add_row(temb.row(0))
    }

    fn rope_heads(&self, x: &Tensor, pos: u64) -> Result<Tensor> {
        let hd = self.cfg.head_dim;
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let s = x.slice_cols(h * hd, (h + 1) * hd)?;
            heads.push(rope_apply(&s, PositionIndex(pos), &self.rope)?);
        }
        Tensor::concat_cols(&heads.iter().collect::<Vec<_>>())
    }

    /// Multi-head attention of one query block over stacked context K/V.
    fn attend(
        &self,
        block: &Block,
        q_rot: &Tensor,
        keys: &Tensor,
        values: &Tensor,
        stats: &mut ForwardStats,
    ) -> Result<Tensor> {
        let hd = self.cfg.head_dim;
        let scale = 1.0 / (hd as f32).sqrt();
        let n_ctx = keys.rows();
        let mut outs = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let lo = h * hd;
            let qh = q_rot.slice_cols(lo, lo + hd)?;
            let kh = keys.slice_cols(lo, lo + hd)?;
            let vh = values.slice_cols(lo, lo + hd)?;
            let logits = qh.matmul(&kh.transpose2()?)?.scale(scale)?;
            let weights = logits.softmax_rows(&vec![true; logits.len()])?;
            outs.push(weights.matmul(&vh)?);
        }
        stats.score_elems += (self.cfg.heads * q_rot.rows() * n_ctx) as u64;
        Tensor::concat_cols(&outs.iter().collect::<Vec<_>>())?.matmul(&block.w_o)
    }

    /// Frame-wise cross-attention onto a single driving-signal token.
    fn cross_attend(
        &self,
        block: &Block,
        feat: &Tensor,
        drive_vec: &Tensor,
        stats: &mut ForwardStats,
    ) -> Result<Tensor> {
        let hd = self.cfg.head_dim;
        let scale = 1.0 / (hd as f32).sqrt();
        let h_in = feat.layer_norm(block.lnx_g.row(0), block.lnx_b.row(0), 1e-5)?;
        let q = h_in.matmul(&block.xw_q)?;
        let k = drive_vec.matmul(&block.xw_k)?;
        let v = drive_vec.matmul(&block.xw_v)?;
        let mut outs = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let lo = h * hd;
            let qh = q.slice_cols(lo, lo + hd)?;
            let kh = k.slice_cols(lo, lo + hd)?;
            let vh = v.slice_cols(lo, lo + hd)?;
            let logits = qh.matmul(&kh.transpose2()?)?.scale(scale)?;
            let weights = logits.softmax_rows(&vec![true; logits.len()])?;
            outs.push(weights.matmul(&vh)?);
        }
        stats.score_elems += (self.cfg.heads * feat.rows()) as u64;
        Tensor::concat_cols(&outs.iter().collect::<Vec<_>>())?.matmul(&block.xw_o)
    }

    fn mlp(&self, block: &Block, feat: &Tensor) -> Result<Tensor> {
        feat.layer_norm(block.ln2_g.row(0), block.ln2_b.row(0), 1e-5)?
            .matmul(&block.w_mlp1)?
            .add_row(block.b_mlp1.row(0))?
            .gelu()?
            .matmul(&block.w_mlp2)?
            .add_row(block.b_mlp2.row(0))
    }

    fn head(&self, feat: &Tensor) -> Result<Tensor> {
        feat.layer_norm(self.lnf_g.row(0), self.lnf_b.row(0), 1e-5)?
            .matmul(&self.w_out)?
            .add_row(self.b_out.row(0))
    }

    // -- shared stack driver --------------------------------------------------

    /// Run the block stack over `frames`. Each pass frame carries its own
    /// context list; context items resolve to the reference cache, the
    /// prefix cache, or another in-pass frame (fresh K/V each layer). All
    /// contexts assemble in canonical order: reference first, then frames by
    /// ascending position, so incremental and dense passes accumulate
    /// identically.
    #[allow(clippy::too_many_arguments)]
    fn run_stack(
        &self,
        frames: &[PassFrame],
        kv_pre: &[&FrameKv],
        kv_ref: Option<&FrameKv>,
        emit_kv: bool,
        probe_layer: Option<usize>,
        stats: &mut ForwardStats,
    ) -> Result<StackOutput> {
        let n = frames.len();
        let mut feats: Vec<Tensor> = Vec::with_capacity(n);
        for pf in frames {
            feats.push(self.embed(pf.latent)?);
        }
        let mut emitted: Vec<FrameKv> = frames
            .iter()
            .map(|pf| FrameKv {
                frame_pos: pf.latent.frame_pos.0,
                entries: Vec::new(),
            })
            .collect();
        let mut probe: Option<AttentionProbe> = None;

        for (layer, block) in self.blocks.iter().enumerate() {
            // Phase A: fresh K/V (and rotated Q) for every in-pass frame.
            let mut fresh_q: Vec<Tensor> = Vec::with_capacity(n);
            let mut fresh_k: Vec<Tensor> = Vec::with_capacity(n);
            let mut fresh_v: Vec<Tensor> = Vec::with_capacity(n);
            let phase_a = |f: usize| -> Result<(Tensor, Tensor, Tensor)> {
                let h = feats[f].layer_norm(block.ln1_g.row(0), block.ln1_b.row(0), 1e-5)?;
                let pos = frames[f].latent.frame_pos.0;
                let q = self.rope_heads(&h.matmul(&block.w_q)?, pos)?;
                let k = self.rope_heads(&h.matmul(&block.w_k)?, pos)?;
                let v = h.matmul(&block.w_v)?;
                Ok((q, k, v))
            };
            for out in parallel_map(n, &phase_a)? {
                let (q, k, v) = out;
                fresh_q.push(q);
                fresh_k.push(k);
                fresh_v.push(v);
            }
            if emit_kv {
                for f in 0..n {
                    emitted[f].entries.push(KvEntry {
                        layer,
                        frame_pos: frames[f].latent.frame_pos.0,
                        keys: fresh_k[f].clone(),
                        values: fresh_v[f].clone(),
                    });
                }
            }
            if probe_layer == Some(layer) {
                probe = Some(AttentionProbe {
                    heads: self.cfg.heads,
                    head_dim: self.cfg.head_dim,
                    tokens_per_frame: self.cfg.tokens_per_frame,
                    q: frames
                        .iter()
                        .zip(&fresh_q)
                        .filter(|(pf, _)| !pf.is_ref)
                        .map(|(_, q)| q.clone())
                        .collect(),
                    k: frames
                        .iter()
                        .zip(&fresh_k)
                        .filter(|(pf, _)| !pf.is_ref)
                        .map(|(_, k)| k.clone())
                        .collect(),
                    v: frames
                        .iter()
                        .zip(&fresh_v)
                        .filter(|(pf, _)| !pf.is_ref)
                        .map(|(_, v)| v.clone())
                        .collect(),
                    ref_kv: match kv_ref {
                        Some(r) => Some((
                            r.entries[layer].keys.clone(),
                            r.entries[layer].values.clone(),
                        )),
                        None => frames
                            .iter()
                            .position(|pf| pf.is_ref)
                            .map(|i| (fresh_k[i].clone(), fresh_v[i].clone())),
                    },
                });
            }

            // Phase B: attention + cross-attention + MLP per frame.
            let phase_b = |f: usize| -> Result<(Tensor, ForwardStats)> {
                let pf = &frames[f];
                let mut kparts: Vec<&Tensor> = Vec::with_capacity(pf.ctx.len());
                let mut vparts: Vec<&Tensor> = Vec::with_capacity(pf.ctx.len());
                for item in &pf.ctx {
                    match *item {
                        CtxItem::Ref => {
                            let r = kv_ref.ok_or_else(|| {
                                KnotError::Config(
                                    "context references an absent reference cache".into(),
                                )
                            })?;
                            kparts.push(&r.entries[layer].keys);
                            vparts.push(&r.entries[layer].values);
                        }
                        CtxItem::Pre(i) => {
                            kparts.push(&kv_pre[i].entries[layer].keys);
                            vparts.push(&kv_pre[i].entries[layer].values);
                        }
                        CtxItem::Pass(j) => {
                            kparts.push(&fresh_k[j]);
                            vparts.push(&fresh_v[j]);
                        }
                    }
                }
                let keys = Tensor::concat_rows(&kparts)?;
                let values = Tensor::concat_rows(&vparts)?;
                let mut local = ForwardStats::default();
                let mut feat = feats[f].add(&self.attend(
                    block,
                    &fresh_q[f],
                    &keys,
                    &values,
                    &mut local,
                )?)?;
                if let Some(dv) = &pf.drive_vec {
                    feat = feat.add(&self.cross_attend(block, &feat, dv, &mut local)?)?;
                }
                feat = feat.add(&self.mlp(block, &feat)?)?;
                Ok((feat, local))
            };
            let outputs = parallel_map(n, &phase_b)?;
            for (f, (feat, local)) in outputs.into_iter().enumerate() {
                feats[f] = feat;
                stats.merge(local);
            }
        }

        let mut predictions = Vec::with_capacity(n);
        for (pf, feat) in frames.iter().zip(&feats) {
            if pf.is_ref {
                continue;
            }
            predictions.push(self.head(feat)?);
        }
        Ok(StackOutput {
            predictions,
            kv: if emit_kv { Some(emitted) } else { None },
            probe,
        })
    }

    // -- public forward passes ------------------------------------------------

    /// Denoise one chunk against the cached context. `chunk` holds the
    /// `c + k` frames at consecutive positions and `knot` (possibly empty)
    /// overrides the first `knot.len()` slots as clean mask-1 conditions.
    /// The prediction for a knot slot is still produced — the knot is
    /// denoised a second time here.
    pub fn forward_denoise(
        &self,
        chunk: &[FrameLatent],
        t: f32,
        knot: &[FrameLatent],
        kv_pre: &[&FrameKv],
        kv_ref: Option<&FrameKv>,
        drive: Option<&DrivingSignal>,
    ) -> Result<Vec<Tensor>> {
        let mut stats = ForwardStats::default();
        self.forward_denoise_counted(chunk, t, knot, kv_pre, kv_ref, drive, &mut stats)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward_denoise_counted(
        &self,
        chunk: &[FrameLatent],
        t: f32,
        knot: &[FrameLatent],
        kv_pre: &[&FrameKv],
        kv_ref: Option<&FrameKv>,
        drive: Option<&DrivingSignal>,
        stats: &mut ForwardStats,
    ) -> Result<Vec<Tensor>> {
        if chunk.is_empty() {
            return Err(KnotError::Shape("empty chunk".into()));
        }
        if knot.len() >= chunk.len() {
            return Err(KnotError::Shape(format!(
                "knot length {} must be below chunk length {}",
                knot.len(),
                chunk.len()
            )));
        }
        if !(0.0..=1000.0).contains(&t) {
            return Err(KnotError::Schedule(t));
        }
        for (s, fl) in chunk.iter().enumerate() {
            fl.validate(&self.cfg)?;
            if fl.frame_pos.0 != chunk[0].frame_pos.0 + s as u64 {
                return Err(KnotError::Ordering(
                    "chunk positions must be consecutive".into(),
                ));
            }
            if fl.noise_level != t {
                return Err(KnotError::Config(format!(
                    "chunk slot {s} carries t = {}, call says {t}",
                    fl.noise_level
                )));
            }
        }
        for (s, kn) in knot.iter().enumerate() {
            kn.validate(&self.cfg)?;
            if kn.frame_pos != chunk[s].frame_pos {
                return Err(KnotError::Ordering(format!(
                    "knot slot {s} at position {}, chunk expects {}",
                    kn.frame_pos.0, chunk[s].frame_pos.0
                )));
            }
            if kn.noise_level != 0.0 || kn.mask.data().iter().any(|&m| m != 1.0) {
                return Err(KnotError::Config(
                    "knot slots must be clean mask-1 conditions".into(),
                ));
            }
        }
        self.check_context(chunk, kv_pre, kv_ref)?;

        let mut effective: Vec<&FrameLatent> = Vec::with_capacity(chunk.len());
        for (s, fl) in chunk.iter().enumerate() {
            effective.push(knot.get(s).unwrap_or(fl));
        }
        let shared_ctx = shared_context(chunk.len(), kv_pre.len(), kv_ref.is_some());
        let frames = self.pass_frames(&effective, &shared_ctx, drive)?;
        let out = self.run_stack(&frames, kv_pre, kv_ref, false, None, stats)?;
        Ok(out.predictions)
    }

    /// Clean-frame pass that emits per-layer KV entries for each input
    /// frame (keys rotated at their positions), computed with full context
    /// `reference ∪ prefix ∪ these frames`. Does not mutate its inputs.
    pub fn forward_kv(
        &self,
        frames: &[FrameLatent],
        kv_pre: &[&FrameKv],
        kv_ref: Option<&FrameKv>,
        drive: Option<&DrivingSignal>,
    ) -> Result<Vec<FrameKv>> {
        let mut stats = ForwardStats::default();
        self.forward_kv_counted(frames, kv_pre, kv_ref, drive, &mut stats)
    }

    pub fn forward_kv_counted(
        &self,
        frames: &[FrameLatent],
        kv_pre: &[&FrameKv],
        kv_ref: Option<&FrameKv>,
        drive: Option<&DrivingSignal>,
        stats: &mut ForwardStats,
    ) -> Result<Vec<FrameKv>> {
        if frames.is_empty() {
            return Err(KnotError::Shape("empty kv frame group".into()));
        }
        for fl in frames {
            fl.validate(&self.cfg)?;
            if fl.noise_level != 0.0 {
                return Err(KnotError::Config(format!(
                    "kv pass requires clean frames, frame {} has t = {}",
                    fl.frame_pos.0, fl.noise_level
                )));
            }
        }
        for w in frames.windows(2) {
            if w[1].frame_pos.0 <= w[0].frame_pos.0 {
                return Err(KnotError::Ordering(
                    "kv frames must have ascending positions".into(),
                ));
            }
        }
        self.check_context(frames, kv_pre, kv_ref)?;
        let refs: Vec<&FrameLatent> = frames.iter().collect();
        let shared_ctx = shared_context(frames.len(), kv_pre.len(), kv_ref.is_some());
        let pass = self.pass_frames(&refs, &shared_ctx, drive)?;
        let out = self.run_stack(&pass, kv_pre, kv_ref, true, None, stats)?;
        Ok(out.kv.expect("emit_kv requested"))
    }

    /// Single dense attention pass over all frames with an explicit
    /// frame-level boolean mask; same weights as the incremental paths. The
    /// reference (mask column -1) attends only to itself.
    pub fn dense_oracle(
        &self,
        frames: &[FrameLatent],
        reference: Option<&FrameLatent>,
        mask: &AttentionMask,
        drive: Option<&DrivingSignal>,
    ) -> Result<Vec<Tensor>> {
        let mut stats = ForwardStats::default();
        let out = self.dense_pass(frames, reference, mask, drive, None, &mut stats)?;
        Ok(out.predictions)
    }

    /// Rotated Q and K/V blocks of one layer of a dense pass, for the
    /// frame-contribution diagnostic.
    pub fn attention_probe(
        &self,
        frames: &[FrameLatent],
        reference: Option<&FrameLatent>,
        mask: &AttentionMask,
        layer: usize,
        drive: Option<&DrivingSignal>,
    ) -> Result<AttentionProbe> {
        if layer >= self.cfg.layers {
            return Err(KnotError::Index(format!(
                "probe layer {layer} of {} layers",
                self.cfg.layers
            )));
        }
        let mut stats = ForwardStats::default();
        let out = self.dense_pass(frames, reference, mask, drive, Some(layer), &mut stats)?;
        Ok(out.probe.expect("probe layer requested"))
    }

    fn dense_pass(
        &self,
        frames: &[FrameLatent],
        reference: Option<&FrameLatent>,
        mask: &AttentionMask,
        drive: Option<&DrivingSignal>,
        probe_layer: Option<usize>,
        stats: &mut ForwardStats,
    ) -> Result<StackOutput> {
        if frames.len() != mask.num_frames() {
            return Err(KnotError::Shape(format!(
                "mask covers {} frames, got {}",
                mask.num_frames(),
                frames.len()
            )));
        }
        for fl in frames {
            fl.validate(&self.cfg)?;
        }
        for w in frames.windows(2) {
            if w[1].frame_pos.0 <= w[0].frame_pos.0 {
                return Err(KnotError::Ordering(
                    "dense frames must have ascending positions".into(),
                ));
            }
        }
        if mask.uses_reference() && reference.is_none() {
            return Err(KnotError::Config(
                "mask uses the reference column but no reference frame given".into(),
            ));
        }
        if let Some(r) = reference {
            r.validate(&self.cfg)?;
            if frames.iter().any(|f| f.frame_pos == r.frame_pos) {
                return Err(KnotError::Position(format!(
                    "reference at {} collides with a frame",
                    r.frame_pos.0
                )));
            }
        }
        // Pass frame list: generated frames in order, reference appended.
        let mut effective: Vec<&FrameLatent> = frames.iter().collect();
        let ref_idx = reference.map(|r| {
            effective.push(r);
            effective.len() - 1
        });
        let mut rows: Vec<Vec<CtxItem>> = Vec::with_capacity(effective.len());
        for q in 0..frames.len() {
            let mut row = Vec::new();
            if mask.allows(q, -1) {
                row.push(CtxItem::Pass(ref_idx.expect("checked uses_reference")));
            }
            for j in 0..frames.len() {
                if mask.allows(q, j as i64) {
                    row.push(CtxItem::Pass(j));
                }
            }
            rows.push(row);
        }
        if let Some(ri) = ref_idx {
            rows.push(vec![CtxItem::Pass(ri)]);
        }
        let pass = self.pass_frames_rows(&effective, rows, drive, ref_idx)?;
        self.run_stack(&pass, &[], None, false, probe_layer, stats)
    }

    fn pass_frames<'a>(
        &self,
        effective: &[&'a FrameLatent],
        shared_ctx: &[CtxItem],
        drive: Option<&DrivingSignal>,
    ) -> Result<Vec<PassFrame<'a>>> {
        let rows = vec![shared_ctx.to_vec(); effective.len()];
        self.pass_frames_rows(effective, rows, drive, None)
    }

    fn pass_frames_rows<'a>(
        &self,
        effective: &[&'a FrameLatent],
        rows: Vec<Vec<CtxItem>>,
        drive: Option<&DrivingSignal>,
        ref_idx: Option<usize>,
    ) -> Result<Vec<PassFrame<'a>>> {
        let mut out = Vec::with_capacity(effective.len());
        for (f, (&latent, ctx)) in effective.iter().zip(rows).enumerate() {
            let is_ref = ref_idx == Some(f);
            let drive_vec = match (drive, is_ref) {
                (Some(d), false) => Some(d.vec_for(latent.frame_pos.0)?),
                _ => None,
            };
            out.push(PassFrame {
                latent,
                drive_vec,
                ctx,
                is_ref,
            });
        }
        Ok(out)
    }

    /// Shared collision/ordering checks between in-pass frames and caches.
    fn check_context(
        &self,
        pass: &[FrameLatent],
        kv_pre: &[&FrameKv],
        kv_ref: Option<&FrameKv>,
    ) -> Result<()> {
        for g in kv_pre {
            g.validate(&self.cfg)?;
        }
        if let Some(r) = kv_ref {
            r.validate(&self.cfg)?;
        }
        for w in kv_pre.windows(2) {
            if w[1].frame_pos <= w[0].frame_pos {
                return Err(KnotError::Ordering(
                    "prefix cache positions must ascend".into(),
                ));
            }
        }
        let first = pass[0].frame_pos.0;
        if let Some(last_pre) = kv_pre.last() {
            if last_pre.frame_pos >= first {
                return Err(KnotError::Ordering(format!(
                    "prefix cache reaches {} but the pass starts at {first}",
                    last_pre.frame_pos
                )));
            }
        }
        if let Some(r) = kv_ref {
            let clash = pass.iter().any(|f| f.frame_pos.0 == r.frame_pos)
                || kv_pre.iter().any(|g| g.frame_pos == r.frame_pos);
            if clash {
                return Err(KnotError::Position(format!(
                    "reference index {} collides with a frame position",
                    r.frame_pos
                )));
            }
        }
        Ok(())
    }

    // -- weight i/o -----------------------------------------------------------

    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v: Vec<(String, &Tensor)> = vec![
            ("w_in".into(), &self.w_in),
            ("b_in".into(), &self.b_in),
            ("w_time".into(), &self.w_time),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in [
                ("ln1_g", &b.ln1_g),
                ("ln1_b", &b.ln1_b),
                ("w_q", &b.w_q),
                ("w_k", &b.w_k),
                ("w_v", &b.w_v),
                ("w_o", &b.w_o),
                ("lnx_g", &b.lnx_g),
                ("lnx_b", &b.lnx_b),
                ("xw_q", &b.xw_q),
                ("xw_k", &b.xw_k),
                ("xw_v", &b.xw_v),
                ("xw_o", &b.xw_o),
                ("ln2_g", &b.ln2_g),
                ("ln2_b", &b.ln2_b),
                ("w_mlp1", &b.w_mlp1),
                ("b_mlp1", &b.b_mlp1),
                ("w_mlp2", &b.w_mlp2),
                ("b_mlp2", &b.b_mlp2),
            ] {
                v.push((format!("blocks.{i}.{name}"), t));
            }
        }
        v.push(("lnf_g".into(), &self.lnf_g));
        v.push(("lnf_b".into(), &self.lnf_b));
        v.push(("w_out".into(), &self.w_out));
        v.push(("b_out".into(), &self.b_out));
        v
    }

    /// Dump weights as flat little-endian f32 plus a JSON sidecar with
    /// shapes and the model configuration.
    pub fn save_weights(&self, bin_path: &Path, sidecar_path: &Path) -> Result<()> {
        let named = self.named_tensors();
        let mut bin = std::fs::File::create(bin_path)?;
        for (_, t) in &named {
            for v in t.data() {
                bin.write_all(&v.to_le_bytes())?;
            }
        }
        let sidecar = serde_json::json!({
            "dtype": "f32-le",
            "config": {
                "layers": self.cfg.layers,
                "heads": self.cfg.heads,
                "head_dim": self.cfg.head_dim,
                "tokens_per_frame": self.cfg.tokens_per_frame,
                "latent_channels": self.cfg.latent_channels,
                "drive_dim": self.cfg.drive_dim,
            },
            "tensors": named
                .iter()
                .map(|(n, t)| serde_json::json!({ "name": n, "shape": t.shape() }))
                .collect::<Vec<_>>(),
        });
        std::fs::write(sidecar_path, serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn load_weights(bin_path: &Path, sidecar_path: &Path) -> Result<Self> {
        let sidecar: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(sidecar_path)?)?;
        let cfg_v = &sidecar["config"];
        let as_usize = |v: &serde_json::Value, name: &str| -> Result<usize> {
            v.as_u64()
                .map(|x| x as usize)
                .ok_or_else(|| KnotError::Config(format!("sidecar missing {name}")))
        };
        let cfg = ModelConfig {
            layers: as_usize(&cfg_v["layers"], "layers")?,
            heads: as_usize(&cfg_v["heads"], "heads")?,
            head_dim: as_usize(&cfg_v["head_dim"], "head_dim")?,
            tokens_per_frame: as_usize(&cfg_v["tokens_per_frame"], "tokens_per_frame")?,
            latent_channels: as_usize(&cfg_v["latent_channels"], "latent_channels")?,
            drive_dim: as_usize(&cfg_v["drive_dim"], "drive_dim")?,
        };
        let mut model = Self::new(cfg, 0)?;
        let mut bin = std::fs::File::open(bin_path)?;
        let mut raw = Vec::new();
        bin.read_to_end(&mut raw)?;
        let mut off = 0usize;
        let tensors = sidecar["tensors"]
            .as_array()
            .ok_or_else(|| KnotError::Config("sidecar missing tensors".into()))?;
        let mut loaded: Vec<(String, Tensor)> = Vec::with_capacity(tensors.len());
        for t in tensors {
            let name = t["name"].as_str().unwrap_or_default().to_string();
            let shape: Vec<usize> = t["shape"]
                .as_array()
                .ok_or_else(|| KnotError::Config(format!("tensor {name} missing shape")))?
                .iter()
                .map(|v| v.as_u64().unwrap_or(0) as usize)
                .collect();
            let n: usize = shape.iter().product();
            if off + 4 * n > raw.len() {
                return Err(KnotError::Config(format!(
                    "weight blob too short at {name}"
                )));
            }
            let data: Vec<f32> = raw[off..off + 4 * n]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            off += 4 * n;
            loaded.push((name, Tensor::from_vec(&shape, data)?));
        }
        if off != raw.len() {
            return Err(KnotError::Config(format!(
                "weight blob has {} trailing bytes",
                raw.len() - off
            )));
        }
        model.assign_named(loaded)?;
        Ok(model)
    }

    fn assign_named(&mut self, loaded: Vec<(String, Tensor)>) -> Result<()> {
        let expected: Vec<String> = self
            .named_tensors()
            .iter()
            .map(|(n, _)| n.clone())
            .collect();
        if loaded.len() != expected.len() {
            return Err(KnotError::Config(format!(
                "expected {} tensors, sidecar lists {}",
                expected.len(),
                loaded.len()
            )));
        }
        for ((name, tensor), want) in loaded.into_iter().zip(expected) {
            if name != want {
                return Err(KnotError::Config(format!(
                    "tensor order mismatch: {name} vs {want}"
                )));
            }
            let slot = self.named_tensor_mut(&name);
            if slot.shape() != tensor.shape() {
                return Err(KnotError::Shape(format!(
                    "tensor {name}: sidecar shape {:?} vs model {:?}",
                    tensor.shape(),
                    slot.shape()
                )));
            }
            *slot = tensor;
        }
        Ok(())
    }

    fn named_tensor_mut(&mut self, name: &str) -> &mut Tensor {
        if let Some(rest) = name.strip_prefix("blocks.") {
            let (idx, field) = rest.split_once('.').expect("block tensor name");
            let b = &mut self.blocks[idx.parse::<usize>().expect("block index")];
            return match field {
                "ln1_g" => &mut b.ln1_g,
                "ln1_b" => &mut b.ln1_b,
                "w_q" => &mut b.w_q,
                "w_k" => &mut b.w_k,
                "w_v" => &mut b.w_v,
                "w_o" => &mut b.w_o,
                "lnx_g" => &mut b.lnx_g,
                "lnx_b" => &mut b.lnx_b,
                "xw_q" => &mut b.xw_q,
                "xw_k" => &mut b.xw_k,
                "xw_v" => &mut b.xw_v,
                "xw_o" => &mut b.xw_o,
                "ln2_g" => &mut b.ln2_g,
                "ln2_b" => &mut b.ln2_b,
                "w_mlp1" => &mut b.w_mlp1,
                "b_mlp1" => &mut b.b_mlp1,
                "w_mlp2" => &mut b.w_mlp2,
                "b_mlp2" => &mut b.b_mlp2,
                other => panic!("unknown block tensor {other}"),
            };
        }
        match name {
            "w_in" => &mut self.w_in,
            "b_in" => &mut self.b_in,
            "w_time" => &mut self.w_time,
            "lnf_g" => &mut self.lnf_g,
            "lnf_b" => &mut self.lnf_b,
            "w_out" => &mut self.w_out,
            "b_out" => &mut self.b_out,
            other => panic!("unknown tensor {other}"),
        }
    }
}

/// Context item for one query frame's attention row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CtxItem {
    Ref,
    Pre(usize),
    Pass(usize),
}

struct PassFrame<'a> {
    latent: &'a FrameLatent,
    drive_vec: Option<Tensor>,
    ctx: Vec<CtxItem>,
    is_ref: bool,
}

struct StackOutput {
    predictions: Vec<Tensor>,
    kv: Option<Vec<FrameKv>>,
    probe: Option<AttentionProbe>,
}

/// Canonical shared context: reference, prefix groups, then all in-pass
/// frames (positions ascend within each group, prefix below the pass).
fn shared_context(pass_len: usize, pre_len: usize, has_ref: bool) -> Vec<CtxItem> {
    let mut ctx = Vec::with_capacity(1 + pre_len + pass_len);
    if has_ref {
        ctx.push(CtxItem::Ref);
    }
    for i in 0..pre_len {
        ctx.push(CtxItem::Pre(i));
    }
    for j in 0..pass_len {
        ctx.push(CtxItem::Pass(j));
    }
    ctx
}

/// Run `f` over `0..n`, splitting across `KNOTFORGE_THREADS` scoped threads
/// when that exceeds 1. Outputs keep index order, so results are identical
/// for any thread count.
fn parallel_map<T: Send>(n: usize, f: &(dyn Fn(usize) -> Result<T> + Sync)) -> Result<Vec<T>> {
    let threads = crate::thread_cap().min(n.max(1));
    if threads <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let mut slots: Vec<Option<Result<T>>> = (0..n).map(|_| None).collect();
    let chunk = n.div_ceil(threads);
    std::thread::scope(|scope| {
        for part in slots.chunks_mut(chunk).enumerate() {
            let (p, out) = part;
            scope.spawn(move || {
                for (off, slot) in out.iter_mut().enumerate() {
                    *slot = Some(f(p * chunk + off));
                }
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("all slots filled"))
        .collect()
}
