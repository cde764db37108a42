use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{RngStream, Vector};
use crate::ClassId;

use super::World;

const FEATURE_STREAM: u64 = 0xfea7;

/// Set of non-background classes present in an image.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeakLabel(BTreeSet<ClassId>);

impl WeakLabel {
    pub fn from_grid(grid: &[ClassId]) -> Self {
        Self(grid.iter().copied().filter(|c| !c.is_background()).collect())
    }

    pub fn from_classes(classes: impl IntoIterator<Item = ClassId>) -> Self {
        Self(classes.into_iter().filter(|c| !c.is_background()).collect())
    }

    pub fn contains(&self, class: ClassId) -> bool {
        self.0.contains(&class)
    }

    pub fn classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.0.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_subset_of(&self, classes: &BTreeSet<ClassId>) -> bool {
        self.0.is_subset(classes)
    }

    pub fn restricted_to(&self, classes: &BTreeSet<ClassId>) -> WeakLabel {
        Self(self.0.intersection(classes).copied().collect())
    }
}

/// Synthetic stand-in for an image: a class grid and per-pixel features
/// `φ(q) = e_class(q) + o + ε(q)`.
#[derive(Debug, Clone)]
pub struct Scene {
    height: usize,
    width: usize,
    dim: usize,
    grid: Vec<ClassId>,
    offset: Option<Vector>,
    noise_seed: u64,
    features: Arc<Vec<f64>>,
}

impl Scene {
    /// Materializes features from the world's prototypes.
    pub fn generate(
        world: &World,
        height: usize,
        width: usize,
        grid: Vec<ClassId>,
        offset: Vector,
        noise_seed: u64,
        sigma: f64,
    ) -> Result<Self> {
        if grid.len() != height * width || height == 0 || width == 0 {
            return Err(Error::ShapeMismatch(format!(
                "grid of {} cells for a {height}x{width} scene",
                grid.len()
            )));
        }
        let dim = world.dim();
        offset.check_dim(dim)?;
        let mut rng = RngStream::new(noise_seed, FEATURE_STREAM);
        let mut features = Vec::with_capacity(grid.len() * dim);
        for &class in &grid {
            let proto = world.prototype(class)?.as_slice();
            for (p, o) in proto.iter().zip(offset.as_slice()) {
                // the draw happens even at sigma = 0 so the noise sequence
                // does not depend on sigma
                let eps = rng.normal();
                features.push(p + o + sigma * eps);
            }
        }
        Ok(Self {
            height,
            width,
            dim,
            grid,
            offset: Some(offset),
            noise_seed,
            features: Arc::new(features),
        })
    }

    /// Scene with explicit per-pixel features (row-major, `dim` per pixel).
    pub fn from_features(
        height: usize,
        width: usize,
        dim: usize,
        grid: Vec<ClassId>,
        features: Vec<f64>,
    ) -> Result<Self> {
        if grid.len() != height * width || features.len() != grid.len() * dim {
            return Err(Error::ShapeMismatch("grid/features do not match scene size".into()));
        }
        if features.iter().any(|f| !f.is_finite()) {
            return Err(Error::NonFinite("scene features"));
        }
        Ok(Self { height, width, dim, grid, offset: None, noise_seed: 0, features: Arc::new(features) })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn grid(&self) -> &[ClassId] {
        &self.grid
    }

    pub fn offset(&self) -> Option<&Vector> {
        self.offset.as_ref()
    }

    pub fn noise_seed(&self) -> u64 {
        self.noise_seed
    }

    pub fn feature(&self, pixel: usize) -> &[f64] {
        &self.features[pixel * self.dim..(pixel + 1) * self.dim]
    }

    pub fn weak_label(&self) -> WeakLabel {
        WeakLabel::from_grid(&self.grid)
    }
}

/// Half-open pixel rectangle `[top, bottom) × [left, right)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        (self.bottom - self.top) * (self.right - self.left)
    }

    pub fn overlaps(&self, other: &Rect) -> bool {
        self.top < other.bottom
            && other.top < self.bottom
            && self.left < other.right
            && other.left < self.right
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.top && r < self.bottom && c >= self.left && c < self.right
    }
}

/// Run-length encoding of a class grid as `(class, run length)` pairs.
pub fn rle_encode(grid: &[ClassId]) -> Vec<(ClassId, usize)> {
    let mut runs: Vec<(ClassId, usize)> = Vec::new();
    for &c in grid {
        match runs.last_mut() {
            Some((last, n)) if *last == c => *n += 1,
            _ => runs.push((c, 1)),
        }
    }
    runs
}

pub fn rle_decode(runs: &[(ClassId, usize)]) -> Vec<ClassId> {
    runs.iter().flat_map(|&(c, n)| std::iter::repeat_n(c, n)).collect()
}
