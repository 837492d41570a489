//! Bounded sliding-window prefix cache and the re-cacheable reference cache.
//!
//! The window cache never holds more than `L` frames (oldest-first
//! eviction), which is what keeps per-chunk attention work constant over an
//! unbounded rollout. The reference cache holds exactly one frame whose
//! rotary index is periodically pushed ahead of the rollout and re-encoded.

use crate::model::FrameKv;
use crate::rope::{rope_rotate_between, PositionIndex, RopeConfig};
use crate::{KnotError, Result};

/// Sliding-window KV cache: at most `capacity` frames, positions strictly
/// increasing, oldest-first eviction.
#[derive(Debug, Clone)]
pub struct SlidingCache {
    capacity: usize,
    layers: usize,
    frames: Vec<FrameKv>,
}

impl SlidingCache {
    pub fn new(capacity: usize, layers: usize) -> Result<Self> {
        if capacity == 0 || layers == 0 {
            return Err(KnotError::Config(
                "cache capacity and layer count must be positive".into(),
            ));
        }
        Ok(Self {
            capacity,
            layers,
            frames: Vec::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn positions(&self) -> Vec<u64> {
        self.frames.iter().map(|g| g.frame_pos).collect()
    }

    /// Cached groups in position order, for attention context assembly.
    pub fn context(&self) -> Vec<&FrameKv> {
        self.frames.iter().collect()
    }

    /// Cached groups excluding the given positions (used when a KV refresh
    /// recomputes frames that are still cached: the stale copies must not
    /// appear in the refresh pass's own context).
    pub fn context_excluding(&self, skip: &[u64]) -> Vec<&FrameKv> {
        self.frames
            .iter()
            .filter(|g| !skip.contains(&g.frame_pos))
            .collect()
    }

    fn check_group(&self, g: &FrameKv) -> Result<()> {
        if g.entries.len() != self.layers {
            return Err(KnotError::Shape(format!(
                "cache expects {} layers per frame, got {}",
                self.layers,
                g.entries.len()
            )));
        }
        Ok(())
    }

    /// Append freshly generated frames and evict down to capacity. New
    /// positions must be strictly increasing and exceed everything cached.
    pub fn push_window(&mut self, groups: Vec<FrameKv>) -> Result<()> {
        let mut last = self.frames.last().map(|g| g.frame_pos);
        for g in &groups {
            self.check_group(g)?;
            if let Some(prev) = last {
                if g.frame_pos <= prev {
                    return Err(KnotError::Ordering(format!(
                        "push of frame {} onto cache ending at {prev}",
                        g.frame_pos
                    )));
                }
            }
            last = Some(g.frame_pos);
        }
        self.frames.extend(groups);
        self.evict();
        Ok(())
    }

    /// Overwrite-or-append update for the per-chunk window slice. Positions
    /// already cached are replaced with the fresh entries; new positions
    /// must extend the cache monotonically. Evicts down to capacity.
    pub fn refresh(&mut self, groups: Vec<FrameKv>) -> Result<()> {
        for w in groups.windows(2) {
            if w[1].frame_pos <= w[0].frame_pos {
                return Err(KnotError::Ordering("refresh positions must ascend".into()));
            }
        }
        for g in groups {
            self.check_group(&g)?;
            if let Some(slot) = self.frames.iter_mut().find(|f| f.frame_pos == g.frame_pos) {
                *slot = g;
            } else {
                if let Some(last) = self.frames.last() {
                    if g.frame_pos <= last.frame_pos {
                        return Err(KnotError::Ordering(format!(
                            "refresh of frame {} onto cache ending at {}",
                            g.frame_pos, last.frame_pos
                        )));
                    }
                }
                self.frames.push(g);
            }
        }
        self.evict();
        Ok(())
    }

    fn evict(&mut self) {
        while self.frames.len() > self.capacity {
            self.frames.remove(0);
        }
    }
}

/// The single-frame reference cache and its current rotary index `n`.
#[derive(Debug, Clone)]
pub struct ReferenceCache {
    group: FrameKv,
}

impl ReferenceCache {
    pub fn new(group: FrameKv) -> Self {
        Self { group }
    }

    pub fn position(&self) -> u64 {
        self.group.frame_pos
    }

    pub fn group(&self) -> &FrameKv {
        &self.group
    }

    /// Running-ahead trigger: when the chunk about to be denoised (start
    /// `i`, span `c + k`) would catch up with the reference index, advance
    /// the index by the interleave `s` and re-encode the reference there.
    /// Returns whether a re-cache happened. With `s >= c + k` a single bump
    /// restores the invariant, which is checked afterwards.
    pub fn running_ahead(
        &mut self,
        i: u64,
        chunk: usize,
        knot: usize,
        interleave: u64,
        recache: &mut dyn FnMut(u64, &FrameKv) -> Result<FrameKv>,
    ) -> Result<bool> {
        let needed = i + (chunk + knot) as u64;
        if needed <= self.group.frame_pos {
            return Ok(false);
        }
        let new_pos = self.group.frame_pos + interleave;
        let fresh = recache(new_pos, &self.group)?;
        if fresh.frame_pos != new_pos {
            return Err(KnotError::Ordering(format!(
                "recache produced position {}, wanted {new_pos}",
                fresh.frame_pos
            )));
        }
        self.group = fresh;
        if needed > self.group.frame_pos {
            return Err(KnotError::Ordering(format!(
                "reference at {} still behind chunk end {needed}; interleave too small",
                self.group.frame_pos
            )));
        }
        Ok(true)
    }
}

/// Fast-path re-cache: rotate a cached reference group's keys by the
/// position delta instead of re-running the model. Valid because values are
/// position-independent; equivalent to the full re-encode within float
/// tolerance.
pub fn rotated_reference(
    group: &FrameKv,
    new_pos: u64,
    heads: usize,
    rope: &RopeConfig,
) -> Result<FrameKv> {
    let old = group.frame_pos;
    if new_pos == old {
        return Ok(group.clone());
    }
    let hd = rope.head_dim();
    let mut fresh = group.clone();
    for e in &mut fresh.entries {
        let mut parts = Vec::with_capacity(heads);
        for h in 0..heads {
            let slice = e.keys.slice_cols(h * hd, (h + 1) * hd)?;
            parts.push(rope_rotate_between(
                &slice,
                PositionIndex(old),
                PositionIndex(new_pos),
                rope,
            )?);
        }
        e.keys = crate::tensor::Tensor::concat_cols(&parts.iter().collect::<Vec<_>>())?;
        e.frame_pos = new_pos;
    }
    fresh.frame_pos = new_pos;
    Ok(fresh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::KvEntry;
    use crate::tensor::Tensor;

    fn group(pos: u64, layers: usize) -> FrameKv {
        FrameKv {
            frame_pos: pos,
            entries: (0..layers)
                .map(|layer| KvEntry {
                    layer,
                    frame_pos: pos,
                    keys: Tensor::filled(&[2, 4], pos as f32),
                    values: Tensor::filled(&[2, 4], pos as f32),
                })
                .collect(),
        }
    }

    #[test]
    fn push_evicts_oldest_down_to_capacity() {
        let mut c = SlidingCache::new(6, 1).unwrap();
        c.push_window((3..9).map(|p| group(p, 1)).collect())
            .unwrap();
        assert_eq!(c.positions(), vec![3, 4, 5, 6, 7, 8]);
        c.push_window((9..12).map(|p| group(p, 1)).collect())
            .unwrap();
        assert_eq!(c.positions(), vec![6, 7, 8, 9, 10, 11]);
    }

    #[test]
    fn push_under_capacity_keeps_everything() {
        let mut c = SlidingCache::new(6, 1).unwrap();
        c.push_window((0..3).map(|p| group(p, 1)).collect())
            .unwrap();
        assert_eq!(c.len(), 3);
    }

    #[test]
    fn non_monotone_push_is_rejected() {
        let mut c = SlidingCache::new(6, 1).unwrap();
        c.push_window((6..9).map(|p| group(p, 1)).collect())
            .unwrap();
        let err = c.push_window(vec![group(5, 1)]).unwrap_err();
        assert!(matches!(err, KnotError::Ordering(_)));
    }

    #[test]
    fn refresh_overwrites_cached_suffix_and_appends() {
        let mut c = SlidingCache::new(8, 1).unwrap();
        c.push_window((0..6).map(|p| group(p, 1)).collect())
            .unwrap();
        // Slice {4,5,6,7,8}: 4 and 5 refreshed in place, 6..8 appended.
        c.refresh((4..9).map(|p| group(p, 1)).collect()).unwrap();
        assert_eq!(c.positions(), vec![1, 2, 3, 4, 5, 6, 7, 8]);
    }

    #[test]
    fn context_excluding_filters_positions() {
        let mut c = SlidingCache::new(8, 1).unwrap();
        c.push_window((0..5).map(|p| group(p, 1)).collect())
            .unwrap();
        let ctx = c.context_excluding(&[3, 4]);
        let pos: Vec<u64> = ctx.iter().map(|g| g.frame_pos).collect();
        assert_eq!(pos, vec![0, 1, 2]);
    }

    #[test]
    fn running_ahead_trigger_arithmetic() {
        // n = 12, i = 9, c = 3, k = 1, s = 6: 9 + 4 > 12 so n becomes 18.
        let mut r = ReferenceCache::new(group(12, 1));
        let mut calls = 0;
        let recached = r
            .running_ahead(9, 3, 1, 6, &mut |p, _| {
                calls += 1;
                Ok(group(p, 1))
            })
            .unwrap();
        assert!(recached && calls == 1 && r.position() == 18);

        // n = 18, i = 12: 12 + 4 > 18 is false, nothing happens.
        let recached = r
            .running_ahead(12, 3, 1, 6, &mut |_, _| panic!("must not recache"))
            .unwrap();
        assert!(!recached && r.position() == 18);
    }

    #[test]
    fn first_chunk_boundary_equality_does_not_trigger() {
        // i = 0, c = 3, k = 1, n = c + 1 = 4: 0 + 4 > 4 is false.
        let mut r = ReferenceCache::new(group(4, 1));
        let recached = r
            .running_ahead(0, 3, 1, 6, &mut |_, _| panic!("must not recache"))
            .unwrap();
        assert!(!recached);
    }

    #[test]
    fn undersized_interleave_is_reported() {
        let mut r = ReferenceCache::new(group(4, 1));
        let err = r
            .running_ahead(10, 3, 1, 2, &mut |p, _| Ok(group(p, 1)))
            .unwrap_err();
        assert!(matches!(err, KnotError::Ordering(_)));
    }
}
