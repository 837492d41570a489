//! Command-line entry point: config loading, synthetic inputs, rollout
//! execution, attention-topology diagnostics, and latency benchmarking.
//!
//! Exit codes: 0 success, 2 bad configuration, 3 numeric abort (message
//! names the offending chunk), 1 other failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use serde::{Deserialize, Serialize};

use knotforge::model::{DrivingSignal, FrameLatent, ModelConfig, ToyDit};
use knotforge::rng::Rng;
use knotforge::scheduler::{
    generate_baseline, generate_stream, NoiseSchedule, RolloutConfig, RolloutResult,
};
use knotforge::tensor::Tensor;
use knotforge::topology::{build_mask, context_iou, frame_contribution, MaskDesign};
use knotforge::trace::{
    config_hash, write_cache_trace_jsonl, write_contribution_csv, write_frames, write_iou_csv,
    write_trace_jsonl,
};
use knotforge::{KnotError, Result};

const TAG_REFERENCE: u64 = 0x6b66_5246; // "kfRF"

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    /// Knot-forcing rollout: frames plus trace on disk.
    Rollout,
    /// Knot-free, pinned-reference rollout.
    Baseline,
    /// Context-IoU table for the three causal designs.
    Iou,
    /// Frame-contribution ablation scores.
    Contribution,
    /// Per-chunk latency statistics and throughput.
    Bench,
}

impl Mode {
    fn name(&self) -> &'static str {
        match self {
            Mode::Rollout => "rollout",
            Mode::Baseline => "baseline",
            Mode::Iou => "iou",
            Mode::Contribution => "contribution",
            Mode::Bench => "bench",
        }
    }

    fn parse(s: &str) -> Option<Mode> {
        match s {
            "rollout" => Some(Mode::Rollout),
            "baseline" => Some(Mode::Baseline),
            "iou" => Some(Mode::Iou),
            "contribution" => Some(Mode::Contribution),
            "bench" => Some(Mode::Bench),
            _ => None,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "knotforge",
    about = "Streaming chunked video-diffusion inference engine"
)]
struct Cli {
    /// Execution mode (flag overrides the config file).
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// JSON config file with flat keys; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Total frames M.
    #[arg(long, visible_alias = "m")]
    frames: Option<usize>,
    /// Chunk size c.
    #[arg(long, visible_alias = "c")]
    chunk: Option<usize>,
    /// Window length L.
    #[arg(long, visible_alias = "l", alias = "L")]
    window: Option<usize>,
    /// Knot length k.
    #[arg(long, visible_alias = "k")]
    knot: Option<usize>,
    /// Running-ahead interleave s; 0 disables running ahead.
    #[arg(long)]
    ahead_interleave: Option<u64>,
    /// Initial reference index n0.
    #[arg(long)]
    ref_start: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Mask design for iou/contribution modes.
    #[arg(long, value_parser = ["growing-cache", "sink-window", "knot-forcing"])]
    mask_design: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the resolved config to this path before running.
    #[arg(long)]
    dump_config: Option<PathBuf>,
}

/// Flat config file keys; all optional, mirroring RolloutConfig/ModelConfig.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    mode: Option<String>,
    frames: Option<usize>,
    chunk: Option<usize>,
    window: Option<usize>,
    knot: Option<usize>,
    ahead_interleave: Option<u64>,
    ref_start: Option<u64>,
    seed: Option<u64>,
    schedule: Option<Vec<f32>>,
    recache_rotate: Option<bool>,
    layers: Option<usize>,
    heads: Option<usize>,
    head_dim: Option<usize>,
    tokens_per_frame: Option<usize>,
    latent_channels: Option<usize>,
    drive_dim: Option<usize>,
    mask_design: Option<String>,
    sink: Option<usize>,
    anchor: Option<usize>,
    drive: Option<String>,
}

/// Fully resolved run configuration; serialized by `--dump-config` and
/// hashed into every output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Resolved {
    mode: String,
    frames: usize,
    chunk: usize,
    window: usize,
    knot: usize,
    /// 0 disables running ahead.
    ahead_interleave: u64,
    ref_start: u64,
    seed: u64,
    schedule: Vec<f32>,
    recache_rotate: bool,
    layers: usize,
    heads: usize,
    head_dim: usize,
    tokens_per_frame: usize,
    latent_channels: usize,
    drive_dim: usize,
    mask_design: String,
    sink: usize,
    anchor: usize,
    /// Driving-signal source: synth, zeros, or none.
    drive: String,
    /// From KNOTFORGE_THREADS; environment state, not file configuration
    /// (results are identical for any cap), so it stays out of the dump.
    #[serde(skip)]
    threads: usize,
}

impl Resolved {
    fn from_inputs(cli: &Cli, file: &FileConfig, threads: usize) -> Result<Self> {
        let mode = match (&cli.mode, &file.mode) {
            (Some(m), _) => *m,
            (None, Some(s)) => Mode::parse(s)
                .ok_or_else(|| KnotError::Config(format!("unknown mode {s:?} in config file")))?,
            (None, None) => Mode::Rollout,
        };
        let baseline = mode == Mode::Baseline;
        let chunk = cli.chunk.or(file.chunk).unwrap_or(3);
        let knot = cli
            .knot
            .or(file.knot)
            .unwrap_or(if baseline { 0 } else { 1 });
        let frames = cli.frames.or(file.frames).unwrap_or(match mode {
            Mode::Bench => 300,
            _ => 30,
        });
        let ahead_interleave = cli
            .ahead_interleave
            .or(file.ahead_interleave)
            .unwrap_or(if baseline { 0 } else { 2 * chunk as u64 });
        let ref_start = cli
            .ref_start
            .or(file.ref_start)
            .unwrap_or(if ahead_interleave > 0 {
                (chunk + knot + 1) as u64
            } else {
                (frames + knot) as u64
            });
        let drive = file.drive.clone().unwrap_or_else(|| "synth".into());
        if !["synth", "zeros", "none"].contains(&drive.as_str()) {
            return Err(KnotError::Config(format!(
                "drive {drive:?} must be synth, zeros, or none"
            )));
        }
        let mask_design = cli
            .mask_design
            .clone()
            .or_else(|| file.mask_design.clone())
            .unwrap_or_else(|| "knot-forcing".into());
        Ok(Self {
            mode: mode.name().into(),
            frames,
            chunk,
            window: cli.window.or(file.window).unwrap_or(2 * chunk),
            knot,
            ahead_interleave,
            ref_start,
            seed: cli.seed.or(file.seed).unwrap_or(0),
            schedule: file
                .schedule
                .clone()
                .unwrap_or_else(|| vec![1000.0, 750.0, 500.0, 250.0]),
            recache_rotate: file.recache_rotate.unwrap_or(false),
            layers: file.layers.unwrap_or(2),
            heads: file.heads.unwrap_or(2),
            head_dim: file.head_dim.unwrap_or(16),
            tokens_per_frame: file.tokens_per_frame.unwrap_or(4),
            latent_channels: file.latent_channels.unwrap_or(8),
            drive_dim: file.drive_dim.unwrap_or(8),
            mask_design,
            sink: file.sink.unwrap_or(chunk),
            anchor: file.anchor.unwrap_or(10),
            drive,
            threads,
        })
    }

    fn mode(&self) -> Mode {
        Mode::parse(&self.mode).expect("mode validated at resolution")
    }

    fn model_config(&self) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            heads: self.heads,
            head_dim: self.head_dim,
            tokens_per_frame: self.tokens_per_frame,
            latent_channels: self.latent_channels,
            drive_dim: self.drive_dim,
        }
    }

    fn rollout_config(&self) -> Result<RolloutConfig> {
        Ok(RolloutConfig {
            frames: self.frames,
            chunk: self.chunk,
            window: self.window,
            knot: self.knot,
            ahead_interleave: (self.ahead_interleave > 0).then_some(self.ahead_interleave),
            ref_start: self.ref_start,
            seed: self.seed,
            schedule: NoiseSchedule::new(self.schedule.clone())?,
            recache_rotate: self.recache_rotate,
        })
    }

    fn mask(&self, design: &str) -> Result<MaskDesign> {
        let d = match design {
            "growing-cache" => MaskDesign::growing_cache(self.chunk),
            "sink-window" => MaskDesign::sink_window(self.chunk, self.window, self.sink),
            "knot-forcing" => MaskDesign::knot_forcing(self.chunk, self.window, self.knot),
            other => return Err(KnotError::Config(format!("unknown mask design {other:?}"))),
        };
        d.validate()?;
        Ok(d)
    }

    fn hash(&self) -> String {
        config_hash(&serde_json::to_value(self).expect("resolved config serializes"))
    }

    fn driving_signal(&self, frames: usize) -> Option<DrivingSignal> {
        match self.drive.as_str() {
            "synth" => Some(DrivingSignal::synth(frames, self.drive_dim, self.seed)),
            "zeros" => Some(DrivingSignal::zeros(frames, self.drive_dim)),
            _ => None,
        }
    }

    /// Deterministic stand-in for the user-provided reference image latent.
    fn reference_latent(&self) -> Tensor {
        Rng::new(Rng::derive_seed(self.seed, TAG_REFERENCE))
            .gaussian(&[self.tokens_per_frame, self.latent_channels])
    }
}

fn read_threads_env() -> Result<usize> {
    match std::env::var("KNOTFORGE_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => v.parse::<usize>().ok().filter(|&n| n >= 1).ok_or_else(|| {
            KnotError::Config(format!("KNOTFORGE_THREADS={v:?} is not a positive integer"))
        }),
    }
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| KnotError::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| KnotError::Config(format!("cannot parse config {}: {e}", path.display())))
}

fn ensure_out_dir(out: &Option<PathBuf>) -> Result<PathBuf> {
    let dir = out.clone().unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn run_rollout_mode(resolved: &Resolved, baseline: bool, out: &Path) -> Result<RolloutResult> {
    let model = ToyDit::new(resolved.model_config(), resolved.seed)?;
    let cfg = resolved.rollout_config()?;
    let drive = resolved.driving_signal(resolved.frames + resolved.knot);
    let reference = resolved.reference_latent();
    let result = if baseline {
        generate_baseline(&cfg, &model, &reference, drive.as_ref())?
    } else {
        generate_stream(&cfg, &model, &reference, drive.as_ref())?
    };
    let hash = resolved.hash();
    write_frames(&out.join("frames"), &hash, &result.frames)?;
    write_trace_jsonl(&out.join("trace.jsonl"), &hash, &result.trace)?;
    write_cache_trace_jsonl(&out.join("cache_trace.jsonl"), &hash, &result.trace)?;
    Ok(result)
}

fn run_iou_mode(resolved: &Resolved, out: &Path) -> Result<usize> {
    let frames = resolved.frames;
    let mut rows = Vec::new();
    for name in ["growing-cache", "sink-window", "knot-forcing"] {
        let mask = build_mask(&resolved.mask(name)?, frames)?;
        for t in 0..frames - 1 {
            rows.push((name.to_string(), t, context_iou(&mask, t)?));
        }
    }
    write_iou_csv(&out.join("iou.csv"), &resolved.hash(), &rows)?;
    Ok(rows.len())
}

fn run_contribution_mode(resolved: &Resolved, out: &Path) -> Result<usize> {
    if resolved.anchor >= resolved.frames {
        return Err(KnotError::Config(format!(
            "anchor {} outside the {}-frame window",
            resolved.anchor, resolved.frames
        )));
    }
    let model = ToyDit::new(resolved.model_config(), resolved.seed)?;
    let mask = build_mask(&resolved.mask(&resolved.mask_design)?, resolved.frames)?;
    let mut rng = Rng::new(Rng::derive_seed(resolved.seed, TAG_REFERENCE));
    let latents: Vec<FrameLatent> = (0..resolved.frames)
        .map(|p| {
            FrameLatent::generated(
                rng.gaussian(&[resolved.tokens_per_frame, resolved.latent_channels]),
                p as u64,
                0.0,
            )
        })
        .collect();
    let reference = mask.uses_reference().then(|| {
        FrameLatent::condition(
            rng.gaussian(&[resolved.tokens_per_frame, resolved.latent_channels]),
            resolved.frames as u64 + 1,
        )
    });
    let drive = resolved.driving_signal(resolved.frames);
    let probe = model.attention_probe(&latents, reference.as_ref(), &mask, 0, drive.as_ref())?;
    let scores = frame_contribution(&probe, resolved.anchor, &mask)?;
    write_contribution_csv(
        &out.join("contribution.csv"),
        &resolved.hash(),
        resolved.anchor,
        &scores,
    )?;
    Ok(scores.len())
}

fn run_bench_mode(resolved: &Resolved, out: &Path) -> Result<()> {
    // Warm-up rollout so the measured run sees a hot allocator and caches.
    run_rollout_mode(resolved, false, out)?;
    let started = std::time::Instant::now();
    let result = run_rollout_mode(resolved, false, out)?;
    let total_s = started.elapsed().as_secs_f64();

    let warm: Vec<&knotforge::scheduler::ChunkTrace> = result
        .trace
        .iter()
        .filter(|t| t.span_start >= resolved.window as u64)
        .collect();
    let times: Vec<f64> = warm.iter().map(|t| t.wall_ms).collect();
    let mean = times.iter().sum::<f64>() / times.len().max(1) as f64;
    let var =
        times.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / times.len().max(1) as f64;
    let cv = if mean > 0.0 { var.sqrt() / mean } else { 0.0 };
    let mut sorted = times.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pick = |q: f64| sorted[(q * (sorted.len().max(1) - 1) as f64).round() as usize];
    let elems: Vec<u64> = warm.iter().map(|t| t.score_elems).collect();
    let constant_work = elems.windows(2).all(|w| w[0] == w[1]);

    let mut csv = String::new();
    csv.push_str(&format!("# config_hash={}\n", resolved.hash()));
    csv.push_str("chunk,wall_ms,score_elems,recache\n");
    for t in &result.trace {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            t.chunk, t.wall_ms, t.score_elems, t.recache
        ));
    }
    std::fs::write(out.join("bench.csv"), csv)?;

    println!(
        "bench: {} frames in {:.3} s ({:.2} frames/s)",
        resolved.frames,
        total_s,
        resolved.frames as f64 / total_s
    );
    if !times.is_empty() {
        println!(
            "bench: warm per-chunk wall ms mean {:.3} p50 {:.3} p95 {:.3} cv {:.4}",
            mean,
            pick(0.5),
            pick(0.95),
            cv
        );
    }
    println!(
        "bench: warm per-chunk attention score elements {} ({})",
        elems.first().copied().unwrap_or(0),
        if constant_work {
            "constant"
        } else {
            "NOT CONSTANT"
        }
    );
    let recaches = result.trace.iter().filter(|t| t.recache).count();
    println!(
        "bench: {} reference re-caches over {} chunks",
        recaches,
        result.trace.len()
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let threads = read_threads_env()?;
    let file = load_file_config(cli.config.as_deref())?;
    let resolved = Resolved::from_inputs(cli, &file, threads)?;
    if let Some(path) = &cli.dump_config {
        std::fs::write(path, serde_json::to_string_pretty(&resolved)?)?;
    }
    let out = ensure_out_dir(&cli.out)?;
    match resolved.mode() {
        Mode::Rollout => {
            let result = run_rollout_mode(&resolved, false, &out)?;
            let recaches = result.trace.iter().filter(|t| t.recache).count();
            println!(
                "rollout: {} frames, {} chunks, {} re-caches -> {}",
                result.frames.len(),
                result.trace.len(),
                recaches,
                out.display()
            );
        }
        Mode::Baseline => {
            if resolved.knot != 0 {
                return Err(KnotError::Config(format!(
                    "baseline mode requires knot = 0, got {}",
                    resolved.knot
                )));
            }
            if resolved.ahead_interleave != 0 {
                return Err(KnotError::Config(
                    "baseline mode requires ahead_interleave = 0".into(),
                ));
            }
            let result = run_rollout_mode(&resolved, true, &out)?;
            println!(
                "baseline: {} frames, {} chunks -> {}",
                result.frames.len(),
                result.trace.len(),
                out.display()
            );
        }
        Mode::Iou => {
            let rows = run_iou_mode(&resolved, &out)?;
            println!("iou: {} rows -> {}", rows, out.join("iou.csv").display());
        }
        Mode::Contribution => {
            let rows = run_contribution_mode(&resolved, &out)?;
            println!(
                "contribution: anchor {} over {} columns -> {}",
                resolved.anchor,
                rows,
                out.join("contribution.csv").display()
            );
        }
        Mode::Bench => run_bench_mode(&resolved, &out)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(KnotError::NumericAbort { chunk }) => {
            eprintln!("error: numeric abort in chunk {chunk}");
            ExitCode::from(3)
        }
        Err(e @ (KnotError::Config(_) | KnotError::Schedule(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
