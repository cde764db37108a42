use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::MaskProposalSet;
use crate::numerics::RngStream;
use crate::ClassId;

use super::scene::Rect;

const PROPOSAL_STREAM: u64 = 0x960b;

/// Knobs of the class-agnostic proposal simulator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProposalConfig {
    /// Each bounding-box side of a component moves by up to this many pixels.
    pub jitter: usize,
    /// Random rectangles added on top of the component masks.
    pub spurious: usize,
    /// Mask values are `1 - softness·u` with `u` uniform in `[0, 1]`.
    pub softness: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self { jitter: 1, spurious: 1, softness: 0.2 }
    }
}

impl ProposalConfig {
    pub fn exact() -> Self {
        Self { jitter: 0, spurious: 0, softness: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.softness) {
            return Err(Error::ConfigInvalid(format!("softness must lie in [0, 1], got {}", self.softness)));
        }
        Ok(())
    }
}

/// 4-connected components of equal non-background labels, in scan order.
pub fn connected_components(grid: &[ClassId], h: usize, w: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; grid.len()];
    let mut out = Vec::new();
    for start in 0..grid.len() {
        if seen[start] || grid[start].is_background() {
            continue;
        }
        let class = grid[start];
        let mut stack = vec![start];
        let mut comp = Vec::new();
        seen[start] = true;
        while let Some(q) = stack.pop() {
            comp.push(q);
            let (r, c) = (q / w, q % w);
            let mut push = |n: usize| {
                if !seen[n] && grid[n] == class {
                    seen[n] = true;
                    stack.push(n);
                }
            };
            if r > 0 {
                push(q - w);
            }
            if r + 1 < h {
                push(q + w);
            }
            if c > 0 {
                push(q - 1);
            }
            if c + 1 < w {
                push(q + 1);
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// One soft mask per labelled connected component plus `spurious` random
/// rectangles, in shuffled order. Class identities are discarded.
pub fn gen_proposals(
    grid: &[ClassId],
    h: usize,
    w: usize,
    config: &ProposalConfig,
    seed: u64,
) -> Result<MaskProposalSet> {
    config.validate()?;
    if grid.len() != h * w {
        return Err(Error::ShapeMismatch(format!("grid of {} cells for {h}x{w}", grid.len())));
    }
    let root = RngStream::new(seed, PROPOSAL_STREAM);
    let mut masks = Vec::new();
    for (i, comp) in connected_components(grid, h, w).iter().enumerate() {
        let mut rng = root.derive(i as u64);
        let mut member = vec![false; grid.len()];
        let mut bbox = Rect { top: h, left: w, bottom: 0, right: 0 };
        for &q in comp {
            member[q] = true;
            let (r, c) = (q / w, q % w);
            bbox.top = bbox.top.min(r);
            bbox.left = bbox.left.min(c);
            bbox.bottom = bbox.bottom.max(r + 1);
            bbox.right = bbox.right.max(c + 1);
        }
        let mut shift = || rng.range_inclusive(0, 2 * config.jitter) as isize - config.jitter as isize;
        let moved = |v: usize, d: isize, max: usize| (v as isize + d).clamp(0, max as isize) as usize;
        let jittered = Rect {
            top: moved(bbox.top, shift(), h),
            bottom: moved(bbox.bottom, shift(), h),
            left: moved(bbox.left, shift(), w),
            right: moved(bbox.right, shift(), w),
        };
        let mut mask = vec![0.0; grid.len()];
        let mut any = false;
        for (q, m) in mask.iter_mut().enumerate() {
            let (r, c) = (q / w, q % w);
            if jittered.contains(r, c) && (member[q] || !bbox.contains(r, c)) {
                *m = 1.0 - config.softness * rng.uniform();
                any = true;
            }
        }
        if any {
            masks.push(mask);
        }
    }
    let mut rng = root.derive(u64::MAX);
    for _ in 0..config.spurious {
        let side_max = (h.min(w) / 2).max(1);
        let side_min = 2.min(side_max);
        let rh = rng.range_inclusive(side_min, side_max);
        let rw = rng.range_inclusive(side_min, side_max);
        let top = rng.range_inclusive(0, h - rh);
        let left = rng.range_inclusive(0, w - rw);
        let rect = Rect { top, left, bottom: top + rh, right: left + rw };
        let mut mask = vec![0.0; grid.len()];
        for (q, m) in mask.iter_mut().enumerate() {
            if rect.contains(q / w, q % w) {
                *m = 1.0 - config.softness * rng.uniform();
            }
        }
        masks.push(mask);
    }
    rng.shuffle(&mut masks);
    MaskProposalSet::new(h, w, masks)
}
