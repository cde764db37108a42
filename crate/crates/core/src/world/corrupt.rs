use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RngStream;
use crate::ClassId;

use super::scene::{Rect, Scene};

const CORRUPT_STREAM: u64 = 0xc022;
const MAX_ATTEMPTS: usize = 50;
const IOU_BAND: f64 = 0.05;

/// Pseudo-label quality knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Corruption {
    /// Target per-class IoU with the ground truth.
    pub rho: f64,
    /// Probability of dropping a class region entirely.
    pub drop: f64,
}

impl Default for Corruption {
    fn default() -> Self {
        Self { rho: 1.0, drop: 0.0 }
    }
}

impl Corruption {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::ConfigInvalid(format!("pseudo-label rho must lie in (0, 1], got {}", self.rho)));
        }
        if !(0.0..=1.0).contains(&self.drop) {
            return Err(Error::ConfigInvalid(format!("drop rate must lie in [0, 1], got {}", self.drop)));
        }
        Ok(())
    }
}

/// Corrupted pixel labels for the seen classes of `scene`; everything else
/// is background.
///
/// Each surviving class region has its bounding box shrunk (erosion) or
/// grown into background (dilation) one side at a time, in a seeded order,
/// until its IoU with the truth lands within `rho ± 0.05`. Up to 50 seeded
/// attempts are made per class.
pub fn pseudo_label(
    scene: &Scene,
    seen: &BTreeSet<ClassId>,
    corruption: &Corruption,
    seed: u64,
) -> Result<Vec<ClassId>> {
    corruption.validate()?;
    let (h, w) = (scene.height(), scene.width());
    let truth = scene.grid();
    let mut out = vec![ClassId::BACKGROUND; truth.len()];
    let root = RngStream::new(seed, CORRUPT_STREAM);
    for class in scene.weak_label().classes().filter(|c| seen.contains(c)) {
        let mut rng = root.derive(u64::from(class.0));
        if rng.bernoulli(corruption.drop) {
            continue;
        }
        let region = corrupt_region(truth, h, w, class, corruption.rho, &mut rng)?;
        for (q, &inside) in region.iter().enumerate() {
            if inside && (truth[q] == class || out[q].is_background()) {
                out[q] = class;
            }
        }
    }
    Ok(out)
}

fn corrupt_region(
    truth: &[ClassId],
    h: usize,
    w: usize,
    class: ClassId,
    rho: f64,
    rng: &mut RngStream,
) -> Result<Vec<bool>> {
    let exact: Vec<bool> = truth.iter().map(|&c| c == class).collect();
    let area = exact.iter().filter(|&&b| b).count();
    if (1.0 - rho).abs() <= IOU_BAND {
        return Ok(exact);
    }
    let bbox = bounding_box(&exact, h, w).expect("class is present in the grid");
    for _ in 0..MAX_ATTEMPTS {
        let dilate = rng.bernoulli(0.5);
        let mut sides = [0usize, 1, 2, 3];
        rng.shuffle(&mut sides);
        let mut rect = bbox;
        let mut stalled = 0;
        let mut step = 0;
        while stalled < 4 {
            let side = sides[step % 4];
            step += 1;
            let moved = if dilate { grow(&mut rect, side, h, w) } else { shrink(&mut rect, side) };
            if !moved {
                stalled += 1;
                continue;
            }
            stalled = 0;
            let (region, iou) = evaluate(&exact, truth, w, &rect, dilate, area);
            if (iou - rho).abs() <= IOU_BAND {
                return Ok(region);
            }
            if iou < rho - IOU_BAND {
                break;
            }
        }
    }
    Err(Error::UnreachableIoU { class, target: rho, area })
}

fn bounding_box(mask: &[bool], h: usize, w: usize) -> Option<Rect> {
    let mut rect: Option<Rect> = None;
    for r in 0..h {
        for c in 0..w {
            if mask[r * w + c] {
                let b = rect.get_or_insert(Rect { top: r, left: c, bottom: r + 1, right: c + 1 });
                b.top = b.top.min(r);
                b.left = b.left.min(c);
                b.bottom = b.bottom.max(r + 1);
                b.right = b.right.max(c + 1);
            }
        }
    }
    rect
}

fn grow(rect: &mut Rect, side: usize, h: usize, w: usize) -> bool {
    match side {
        0 if rect.top > 0 => rect.top -= 1,
        1 if rect.bottom < h => rect.bottom += 1,
        2 if rect.left > 0 => rect.left -= 1,
        3 if rect.right < w => rect.right += 1,
        _ => return false,
    }
    true
}

fn shrink(rect: &mut Rect, side: usize) -> bool {
    let tall = rect.bottom - rect.top > 1;
    let wide = rect.right - rect.left > 1;
    match side {
        0 if tall => rect.top += 1,
        1 if tall => rect.bottom -= 1,
        2 if wide => rect.left += 1,
        3 if wide => rect.right -= 1,
        _ => return false,
    }
    true
}

/// Region for `rect` and its IoU with the exact mask.
fn evaluate(exact: &[bool], truth: &[ClassId], w: usize, rect: &Rect, dilate: bool, area: usize) -> (Vec<bool>, f64) {
    let region: Vec<bool> = exact
        .iter()
        .enumerate()
        .map(|(q, &e)| {
            let inside = rect.contains(q / w, q % w);
            if dilate {
                e || (inside && truth[q].is_background())
            } else {
                e && inside
            }
        })
        .collect();
    let inter = region.iter().zip(exact).filter(|(&p, &e)| p && e).count();
    let union = region.iter().zip(exact).filter(|(&p, &e)| p || e).count();
    debug_assert!(union >= area);
    (region, inter as f64 / union as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene_with(h: usize, w: usize, rects: &[(u32, Rect)]) -> Scene {
        let mut grid = vec![ClassId::BACKGROUND; h * w];
        for (c, rect) in rects {
            for r in rect.top..rect.bottom {
                for col in rect.left..rect.right {
                    grid[r * w + col] = ClassId(*c);
                }
            }
        }
        Scene::from_features(h, w, 2, grid, vec![0.0; h * w * 2]).unwrap()
    }

    fn iou(pred: &[ClassId], truth: &[ClassId], c: ClassId) -> f64 {
        let i = pred.iter().zip(truth).filter(|(&p, &t)| p == c && t == c).count();
        let u = pred.iter().zip(truth).filter(|(&p, &t)| p == c || t == c).count();
        i as f64 / u as f64
    }

    fn seen(ids: &[u32]) -> BTreeSet<ClassId> {
        ids.iter().map(|&i| ClassId(i)).collect()
    }

    #[test]
    fn exact_when_rho_is_one() {
        let scene = scene_with(
            10,
            10,
            &[(1, Rect { top: 0, left: 0, bottom: 4, right: 4 }), (2, Rect { top: 5, left: 5, bottom: 9, right: 9 })],
        );
        let out = pseudo_label(&scene, &seen(&[1]), &Corruption::default(), 3).unwrap();
        for (p, t) in out.iter().zip(scene.grid()) {
            let expect = if *t == ClassId(1) { *t } else { ClassId::BACKGROUND };
            assert_eq!(*p, expect);
        }
    }

    #[test]
    fn drop_all() {
        let scene = scene_with(8, 8, &[(1, Rect { top: 0, left: 0, bottom: 4, right: 4 })]);
        let out = pseudo_label(&scene, &seen(&[1]), &Corruption { rho: 0.7, drop: 1.0 }, 1).unwrap();
        assert!(out.iter().all(|c| c.is_background()));
    }

    #[test]
    fn target_band_on_large_region() {
        let scene = scene_with(32, 32, &[(4, Rect { top: 6, left: 6, bottom: 26, right: 26 })]);
        for seed in 0..20 {
            let out = pseudo_label(&scene, &seen(&[4]), &Corruption { rho: 0.7, drop: 0.0 }, seed).unwrap();
            let v = iou(&out, scene.grid(), ClassId(4));
            assert!((0.65..=0.75).contains(&v), "seed {seed}: iou {v}");
        }
    }

    #[test]
    fn never_emits_unseen() {
        let scene = scene_with(
            16,
            16,
            &[(1, Rect { top: 0, left: 0, bottom: 6, right: 6 }), (2, Rect { top: 8, left: 8, bottom: 14, right: 14 })],
        );
        for seed in 0..10 {
            let out = pseudo_label(&scene, &seen(&[2]), &Corruption { rho: 0.5, drop: 0.0 }, seed).unwrap();
            assert!(out.iter().all(|&c| c != ClassId(1)));
        }
    }

    #[test]
    fn tiny_region_is_unreachable() {
        let scene = scene_with(8, 8, &[(3, Rect { top: 2, left: 2, bottom: 3, right: 3 })]);
        let err = pseudo_label(&scene, &seen(&[3]), &Corruption { rho: 0.7, drop: 0.0 }, 0).unwrap_err();
        assert!(matches!(err, Error::UnreachableIoU { area: 1, .. }));
    }

    #[test]
    fn rejects_bad_knobs() {
        let scene = scene_with(4, 4, &[]);
        assert!(pseudo_label(&scene, &seen(&[]), &Corruption { rho: 0.0, drop: 0.0 }, 0).is_err());
        assert!(pseudo_label(&scene, &seen(&[]), &Corruption { rho: 0.5, drop: 1.5 }, 0).is_err());
    }
}
