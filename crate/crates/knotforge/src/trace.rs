//! Output formats: CSV diagnostics, JSON-lines rollout traces, and the flat
//! little-endian float frame dump with its JSON sidecar.
//!
//! Every file begins with the resolved configuration hash so results can be
//! tied back to the exact run. CSV files carry it as a `#` comment line
//! before the header row; JSON-lines files carry it as a leading header
//! record.

use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::scheduler::ChunkTrace;
use crate::tensor::Tensor;
use crate::{KnotError, Result};

/// SHA-256 hex digest of a canonical JSON value. serde_json maps are
/// BTree-backed, so serialization order (and the hash) is stable.
pub fn config_hash(resolved: &serde_json::Value) -> String {
    let canonical = serde_json::to_string(resolved).expect("json value serializes");
    let mut h = Sha256::new();
    h.update(canonical.as_bytes());
    let digest = h.finalize();
    let mut hex = String::with_capacity(64);
    for b in digest {
        hex.push_str(&format!("{b:02x}"));
    }
    hex
}

/// `design,t,iou` rows, LF endings.
pub fn write_iou_csv(path: &Path, hash: &str, rows: &[(String, usize, f64)]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("# config_hash={hash}\n"));
    out.push_str("design,t,iou\n");
    for (design, t, iou) in rows {
        out.push_str(&format!("{design},{t},{iou}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// `anchor,frame,score` rows, LF endings.
pub fn write_contribution_csv(
    path: &Path,
    hash: &str,
    anchor: usize,
    scores: &[crate::topology::ContributionScore],
) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("# config_hash={hash}\n"));
    out.push_str("anchor,frame,score\n");
    for s in scores {
        out.push_str(&format!("{anchor},{},{}\n", s.frame, s.score));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// One JSON object per chunk:
/// `{chunk, t_wall_ms, ref_pos, recache, cache_frames, knot_fused_l2}`,
/// preceded by a `{"config_hash": ...}` header record.
pub fn write_trace_jsonl(path: &Path, hash: &str, trace: &[ChunkTrace]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{}", serde_json::json!({ "config_hash": hash }))?;
    for t in trace {
        let line = serde_json::json!({
            "chunk": t.chunk,
            "t_wall_ms": t.wall_ms,
            "ref_pos": t.ref_pos,
            "recache": t.recache,
            "cache_frames": t.cache_frames,
            "knot_fused_l2": t.knot_fused_l2,
        });
        writeln!(f, "{line}")?;
    }
    Ok(())
}

/// Cache-state trace for debugging: one object per chunk with the window
/// cache's frame positions after that chunk's refresh, the reference index,
/// and whether a re-cache fired.
pub fn write_cache_trace_jsonl(path: &Path, hash: &str, trace: &[ChunkTrace]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{}", serde_json::json!({ "config_hash": hash }))?;
    for t in trace {
        let line = serde_json::json!({
            "chunk": t.chunk,
            "positions": t.cache_positions,
            "ref_pos": t.ref_pos,
            "recache": t.recache,
        });
        writeln!(f, "{line}")?;
    }
    Ok(())
}

/// Frame dump: `<prefix>.bin` holds all frames as flat little-endian f32 in
/// emission order; `<prefix>.json` records the per-frame shape and hash.
pub fn write_frames(prefix: &Path, hash: &str, frames: &[Tensor]) -> Result<()> {
    let first = frames
        .first()
        .ok_or_else(|| KnotError::Shape("no frames to write".into()))?;
    let bin_path = prefix.with_extension("bin");
    let mut bin = std::fs::File::create(&bin_path)?;
    for frame in frames {
        if frame.shape() != first.shape() {
            return Err(KnotError::Shape("frames with mixed shapes".into()));
        }
        for v in frame.data() {
            bin.write_all(&v.to_le_bytes())?;
        }
    }
    let sidecar = serde_json::json!({
        "config_hash": hash,
        "dtype": "f32-le",
        "frames": frames.len(),
        "frame_shape": first.shape(),
    });
    std::fs::write(
        prefix.with_extension("json"),
        serde_json::to_string_pretty(&sidecar)?,
    )?;
    Ok(())
}

/// Read back a frame dump written by [`write_frames`].
pub fn read_frames(prefix: &Path) -> Result<Vec<Tensor>> {
    let sidecar: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(prefix.with_extension("json"))?)?;
    let count = sidecar["frames"]
        .as_u64()
        .ok_or_else(|| KnotError::Config("frame sidecar missing count".into()))?
        as usize;
    let shape: Vec<usize> = sidecar["frame_shape"]
        .as_array()
        .ok_or_else(|| KnotError::Config("frame sidecar missing shape".into()))?
        .iter()
        .map(|v| v.as_u64().unwrap_or(0) as usize)
        .collect();
    let per_frame: usize = shape.iter().product();
    let raw = std::fs::read(prefix.with_extension("bin"))?;
    if raw.len() != count * per_frame * 4 {
        return Err(KnotError::Shape(format!(
            "frame dump holds {} bytes, sidecar expects {}",
            raw.len(),
            count * per_frame * 4
        )));
    }
    let mut frames = Vec::with_capacity(count);
    for f in 0..count {
        let data: Vec<f32> = raw[f * per_frame * 4..(f + 1) * per_frame * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        frames.push(Tensor::from_vec(&shape, data)?);
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn config_hash_is_stable_and_key_order_free() {
        let a = serde_json::json!({ "b": 2, "a": 1 });
        let b = serde_json::json!({ "a": 1, "b": 2 });
        assert_eq!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 64);
        let c = serde_json::json!({ "a": 1, "b": 3 });
        assert_ne!(config_hash(&a), config_hash(&c));
    }

    #[test]
    fn frame_dump_round_trips() {
        let dir = std::env::temp_dir().join(format!("knotforge-frames-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let prefix = dir.join("frames");
        let mut rng = Rng::new(4);
        let frames: Vec<Tensor> = (0..5).map(|_| rng.gaussian(&[2, 4])).collect();
        write_frames(&prefix, "deadbeef", &frames).unwrap();
        let back = read_frames(&prefix).unwrap();
        assert_eq!(back.len(), frames.len());
        for (a, b) in frames.iter().zip(&back) {
            assert!(a.bits_eq(b));
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn csv_layout_has_hash_comment_then_header() {
        let dir = std::env::temp_dir().join(format!("knotforge-csv-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("iou.csv");
        write_iou_csv(&path, "abc123", &[("knot-forcing".into(), 0, 1.0)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("# config_hash=abc123"));
        assert_eq!(lines.next(), Some("design,t,iou"));
        assert_eq!(lines.next(), Some("knot-forcing,0,1"));
        std::fs::remove_dir_all(&dir).ok();
    }
}
