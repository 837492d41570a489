//! WebAssembly bindings for the interactive demo page.
//!
//! Three operations, each returning a JSON string the page renders onto
//! canvases: the attention-mask / context-IoU explorer, a real (toy-scale)
//! rollout trace with running-ahead events, and the frame-contribution
//! ablation. Everything is deterministic in the given seed.

use wasm_bindgen::prelude::*;

use knotforge::model::{FrameLatent, ModelConfig, ToyDit};
use knotforge::rng::Rng;
use knotforge::scheduler::{generate_stream, NoiseSchedule, RolloutConfig};
use knotforge::topology::{build_mask, context_iou, frame_contribution, MaskDesign};

fn err_json(e: impl std::fmt::Display) -> String {
    serde_json::json!({ "error": e.to_string() }).to_string()
}

fn design_for(
    name: &str,
    chunk: usize,
    window: usize,
    knot: usize,
    sink: usize,
) -> Result<MaskDesign, String> {
    let d = match name {
        "growing-cache" => MaskDesign::growing_cache(chunk),
        "sink-window" => MaskDesign::sink_window(chunk, window, sink),
        "knot-forcing" => MaskDesign::knot_forcing(chunk, window, knot),
        other => return Err(format!("unknown design {other:?}")),
    };
    d.validate().map_err(|e| e.to_string())?;
    Ok(d)
}

/// Frame-level mask grid and the context-IoU curve for one causal design.
///
/// Returns `{frames, cols, grid, iou}` where `cols` runs `-1..frames`,
/// `grid[q]` is frame q's boolean context row, and `iou[t]` compares the
/// contexts of frames t and t+1.
#[wasm_bindgen]
pub fn mask_report(
    design: &str,
    chunk: usize,
    window: usize,
    knot: usize,
    sink: usize,
    frames: usize,
) -> String {
    let d = match design_for(design, chunk, window, knot, sink) {
        Ok(d) => d,
        Err(e) => return err_json(e),
    };
    let mask = match build_mask(&d, frames) {
        Ok(m) => m,
        Err(e) => return err_json(e),
    };
    let cols: Vec<i64> = (-1..frames as i64).collect();
    let grid: Vec<Vec<bool>> = (0..frames)
        .map(|q| cols.iter().map(|&c| mask.allows(q, c)).collect())
        .collect();
    let iou: Vec<f64> = (0..frames - 1)
        .map(|t| context_iou(&mask, t).unwrap_or(f64::NAN))
        .collect();
    serde_json::json!({
        "design": design,
        "frames": frames,
        "cols": cols,
        "grid": grid,
        "iou": iou,
    })
    .to_string()
}

fn demo_model(seed: u64) -> Result<ToyDit, knotforge::KnotError> {
    // Compact model so the rollout stays interactive in the browser.
    let cfg = ModelConfig {
        layers: 2,
        heads: 2,
        head_dim: 8,
        tokens_per_frame: 2,
        latent_channels: 4,
        drive_dim: 4,
    };
    ToyDit::new(cfg, seed)
}

/// Run a real toy rollout and return its per-chunk trace:
/// `{chunks: [{chunk, span_start, span_len, ref_pos, recache, cache_frames,
/// knot_fused_l2, iou}], frames}`.
#[wasm_bindgen]
pub fn rollout_report(
    frames: usize,
    chunk: usize,
    window: usize,
    knot: usize,
    ahead_interleave: u64,
    ref_start: u64,
    seed: u64,
) -> String {
    let model = match demo_model(seed) {
        Ok(m) => m,
        Err(e) => return err_json(e),
    };
    let cfg = RolloutConfig {
        frames,
        chunk,
        window,
        knot,
        ahead_interleave: (ahead_interleave > 0).then_some(ahead_interleave),
        ref_start,
        seed,
        schedule: NoiseSchedule::default_four(),
        recache_rotate: false,
    };
    let mcfg = model.config();
    let reference = Rng::new(seed).gaussian(&[mcfg.tokens_per_frame, mcfg.latent_channels]);
    match generate_stream(&cfg, &model, &reference, None) {
        Ok(result) => {
            let chunks: Vec<serde_json::Value> = result
                .trace
                .iter()
                .map(|t| {
                    serde_json::json!({
                        "chunk": t.chunk,
                        "span_start": t.span_start,
                        "span_len": t.span_len,
                        "ref_pos": t.ref_pos,
                        "recache": t.recache,
                        "cache_frames": t.cache_frames,
                        "cache_positions": t.cache_positions,
                        "knot_fused_l2": t.knot_fused_l2,
                        "iou": t.boundary_iou,
                    })
                })
                .collect();
            serde_json::json!({ "frames": result.frames.len(), "chunks": chunks }).to_string()
        }
        Err(e) => err_json(e),
    }
}

/// Frame-contribution ablation under the chosen design:
/// `{anchor, scores: [{frame, score}]}` with frame -1 the reference.
#[wasm_bindgen]
pub fn contribution_report(
    design: &str,
    frames: usize,
    chunk: usize,
    window: usize,
    knot: usize,
    anchor: usize,
    seed: u64,
) -> String {
    let d = match design_for(design, chunk, window, knot, chunk) {
        Ok(d) => d,
        Err(e) => return err_json(e),
    };
    let mask = match build_mask(&d, frames) {
        Ok(m) => m,
        Err(e) => return err_json(e),
    };
    if anchor >= frames {
        return err_json(format!("anchor {anchor} outside {frames} frames"));
    }
    let model = match demo_model(seed) {
        Ok(m) => m,
        Err(e) => return err_json(e),
    };
    let mcfg = model.config().clone();
    let mut rng = Rng::new(seed);
    let latents: Vec<FrameLatent> = (0..frames)
        .map(|p| {
            FrameLatent::generated(
                rng.gaussian(&[mcfg.tokens_per_frame, mcfg.latent_channels]),
                p as u64,
                0.0,
            )
        })
        .collect();
    let reference = mask.uses_reference().then(|| {
        FrameLatent::condition(
            rng.gaussian(&[mcfg.tokens_per_frame, mcfg.latent_channels]),
            frames as u64 + 1,
        )
    });
    let probe = match model.attention_probe(&latents, reference.as_ref(), &mask, 0, None) {
        Ok(p) => p,
        Err(e) => return err_json(e),
    };
    match frame_contribution(&probe, anchor, &mask) {
        Ok(scores) => serde_json::json!({
            "anchor": anchor,
            "scores": scores
                .iter()
                .map(|s| serde_json::json!({ "frame": s.frame, "score": s.score }))
                .collect::<Vec<_>>(),
        })
        .to_string(),
        Err(e) => err_json(e),
    }
}
