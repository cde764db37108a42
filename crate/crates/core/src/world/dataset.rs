use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{RngStream, Vector};
use crate::ClassId;

use super::scene::{rle_decode, rle_encode, Rect, Scene};
use super::universe::{World, WorldConfig};

const SCENE_STREAM: u64 = 0x5ce7e;
const OFFSET_DIRECTION_STREAM: u64 = 0x0ff5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub world: WorldConfig,
    pub height: usize,
    pub width: usize,
    pub train_scenes: usize,
    pub test_scenes: usize,
    /// Per-coordinate std of pixel feature noise.
    pub sigma: f64,
    /// Norm of the dataset's mean domain offset.
    pub offset_norm: f64,
    /// Seed of the offset direction; datasets sharing it share the direction.
    pub offset_direction_seed: u64,
    /// Per-coordinate std of the per-scene offset jitter.
    pub offset_sigma: f64,
    pub min_regions: usize,
    pub max_regions: usize,
    pub min_side: usize,
    pub max_side: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            height: 32,
            width: 32,
            train_scenes: 256,
            test_scenes: 256,
            sigma: 0.05,
            offset_norm: 0.0,
            offset_direction_seed: 0,
            offset_sigma: 0.0,
            min_regions: 1,
            max_regions: 4,
            min_side: 6,
            max_side: 14,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::ConfigInvalid(msg));
        if self.world.classes < 8 {
            return bad(format!("taxonomy of {} classes; at least 8 required", self.world.classes));
        }
        if self.world.dim < 8 {
            return bad(format!("dimension {} < 8", self.world.dim));
        }
        if self.min_regions == 0 || self.min_regions > self.max_regions {
            return bad(format!("region count range {}..={}", self.min_regions, self.max_regions));
        }
        if self.max_regions > self.world.classes {
            return bad("more regions per scene than classes".into());
        }
        if self.min_side == 0 || self.min_side > self.max_side {
            return bad(format!("region side range {}..={}", self.min_side, self.max_side));
        }
        if self.max_side > self.height.min(self.width) {
            return bad("region side exceeds scene size".into());
        }
        for (name, v) in [
            ("sigma", self.sigma),
            ("offset_norm", self.offset_norm),
            ("offset_sigma", self.offset_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a non-negative number, got {v}"));
            }
        }
        Ok(())
    }

    /// Mean domain offset of the dataset.
    pub fn offset_mean(&self) -> Vector {
        let d = self.world.dim;
        if self.offset_norm == 0.0 {
            return Vector::zeros(d);
        }
        let mut rng = RngStream::new(self.offset_direction_seed, OFFSET_DIRECTION_STREAM);
        let dir = Vector::from_raw(rng.normal_vec(d, 1.0))
            .normalized()
            .expect("gaussian direction has nonzero norm");
        dir.scaled(self.offset_norm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    config: DatasetConfig,
    seed: u64,
    world: Arc<World>,
    train: Vec<Scene>,
    test: Vec<Scene>,
}

/// Stored form of a scene; features are regenerated on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SceneRecord {
    height: usize,
    width: usize,
    grid: Vec<(ClassId, usize)>,
    offset: Vector,
    noise_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    config: DatasetConfig,
    seed: u64,
    taxonomy: Vec<ClassId>,
    offset_mean: Vector,
    train_scenes: usize,
    test_scenes: usize,
}

/// Generates a dataset; equal `(config, seed)` give bit-identical datasets.
pub fn gen_dataset(config: &DatasetConfig, seed: u64) -> Result<SyntheticDataset> {
    config.validate()?;
    let world = Arc::new(World::generate(&config.world)?);
    SyntheticDataset::generate_in(world, config, seed)
}

impl SyntheticDataset {
    /// Generates a dataset inside an existing world (shared prototypes).
    pub fn generate_in(world: Arc<World>, config: &DatasetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if world.config() != &config.world {
            return Err(Error::ConfigInvalid("world does not match dataset config".into()));
        }
        let mean = config.offset_mean();
        let make = |split: Split, n: usize| -> Result<Vec<Scene>> {
            let root = RngStream::new(seed, SCENE_STREAM).derive(split.tag());
            (0..n)
                .map(|i| generate_scene(&world, config, &mean, &mut root.derive(i as u64)))
                .collect()
        };
        let train = make(Split::Train, config.train_scenes)?;
        let test = make(Split::Test, config.test_scenes)?;
        Ok(Self { config: config.clone(), seed, world, train, test })
    }

    pub fn config(&self) -> &DatasetConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn world_arc(&self) -> Arc<World> {
        Arc::clone(&self.world)
    }

    pub fn taxonomy(&self) -> Vec<ClassId> {
        self.world.taxonomy()
    }

    pub fn scenes(&self, split: Split) -> &[Scene] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    /// Writes `manifest.json` and one record per scene under `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        let manifest = Manifest {
            config: self.config.clone(),
            seed: self.seed,
            taxonomy: self.taxonomy(),
            offset_mean: self.config.offset_mean(),
            train_scenes: self.train.len(),
            test_scenes: self.test.len(),
        };
        fs::create_dir_all(dir)?;
        fs::write(dir.join("manifest.json"), to_json(&manifest)?)?;
        for split in [Split::Train, Split::Test] {
            let sub = dir.join("scenes").join(split.name());
            fs::create_dir_all(&sub)?;
            for (i, scene) in self.scenes(split).iter().enumerate() {
                let record = SceneRecord {
                    height: scene.height(),
                    width: scene.width(),
                    grid: rle_encode(scene.grid()),
                    offset: scene.offset().cloned().unwrap_or_else(|| Vector::zeros(scene.dim())),
                    noise_seed: scene.noise_seed(),
                };
                fs::write(sub.join(format!("{i:05}.json")), to_json(&record)?)?;
            }
        }
        Ok(())
    }

    /// Loads a dataset written by [`SyntheticDataset::write_dir`],
    /// regenerating the world and every scene's features.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        manifest.config.validate()?;
        let world = Arc::new(World::generate(&manifest.config.world)?);
        let load = |split: Split, n: usize| -> Result<Vec<Scene>> {
            let sub = dir.join("scenes").join(split.name());
            (0..n)
                .map(|i| {
                    let bytes = fs::read(sub.join(format!("{i:05}.json")))?;
                    let r: SceneRecord = serde_json::from_slice(&bytes)?;
                    Scene::generate(
                        &world,
                        r.height,
                        r.width,
                        rle_decode(&r.grid),
                        r.offset,
                        r.noise_seed,
                        manifest.config.sigma,
                    )
                })
                .collect()
        };
        let train = load(Split::Train, manifest.train_scenes)?;
        let test = load(Split::Test, manifest.test_scenes)?;
        Ok(Self { config: manifest.config, seed: manifest.seed, world, train, test })
    }
}

pub(crate) fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(&serde_json::to_value(value)?)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn generate_scene(
    world: &World,
    config: &DatasetConfig,
    offset_mean: &Vector,
    rng: &mut RngStream,
) -> Result<Scene> {
    let (h, w) = (config.height, config.width);
    let mut classes = world.taxonomy();
    rng.shuffle(&mut classes);
    let wanted = rng.range_inclusive(config.min_regions, config.max_regions);

    let mut rects: Vec<(ClassId, Rect)> = Vec::new();
    for &class in classes.iter().take(wanted) {
        for _ in 0..100 {
            let rh = rng.range_inclusive(config.min_side, config.max_side);
            let rw = rng.range_inclusive(config.min_side, config.max_side);
            let top = rng.range_inclusive(0, h - rh);
            let left = rng.range_inclusive(0, w - rw);
            let rect = Rect { top, left, bottom: top + rh, right: left + rw };
            if rects.iter().all(|(_, r)| !r.overlaps(&rect)) {
                rects.push((class, rect));
                break;
            }
        }
    }
    debug_assert!(!rects.is_empty(), "the first region always fits");

    let mut grid = vec![ClassId::BACKGROUND; h * w];
    for (class, rect) in &rects {
        for r in rect.top..rect.bottom {
            for c in rect.left..rect.right {
                grid[r * w + c] = *class;
            }
        }
    }
    let jitter = rng.normal_vec(world.dim(), config.offset_sigma);
    let offset = Vector::new(offset_mean.as_slice().iter().zip(&jitter).map(|(m, j)| m + j).collect())?;
    let noise_seed = rng.next_u64();
    Scene::generate(world, h, w, grid, offset, noise_seed, config.sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::WeakLabel;

    fn small() -> DatasetConfig {
        DatasetConfig {
            world: WorldConfig { dim: 8, classes: 8, ..Default::default() },
            height: 16,
            width: 16,
            train_scenes: 6,
            test_scenes: 4,
            min_side: 3,
            max_side: 6,
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_dataset(&small(), 3).unwrap();
        let b = gen_dataset(&small(), 3).unwrap();
        for split in [Split::Train, Split::Test] {
            for (x, y) in a.scenes(split).iter().zip(b.scenes(split)) {
                assert_eq!(x.grid(), y.grid());
                assert_eq!(x.noise_seed(), y.noise_seed());
                for q in 0..x.pixel_count() {
                    assert_eq!(x.feature(q), y.feature(q));
                }
            }
        }
    }

    #[test]
    fn noiseless_features_are_prototypes() {
        let cfg = DatasetConfig { sigma: 0.0, ..small() };
        let ds = gen_dataset(&cfg, 1).unwrap();
        for scene in ds.scenes(Split::Train) {
            for q in 0..scene.pixel_count() {
                let proto = ds.world().prototype(scene.grid()[q]).unwrap();
                assert_eq!(scene.feature(q), proto.as_slice());
            }
        }
    }

    #[test]
    fn weak_labels_match_grids_and_region_counts() {
        let ds = gen_dataset(&small(), 5).unwrap();
        for scene in ds.scenes(Split::Test) {
            let label = scene.weak_label();
            assert_eq!(label, WeakLabel::from_grid(scene.grid()));
            assert!((1..=4).contains(&label.len()));
        }
    }

    #[test]
    fn rejects_small_taxonomy() {
        let mut cfg = small();
        cfg.world.classes = 7;
        assert!(matches!(gen_dataset(&cfg, 0), Err(Error::ConfigInvalid(_))));
        let mut cfg = small();
        cfg.world.dim = 4;
        assert!(matches!(gen_dataset(&cfg, 0), Err(Error::ConfigInvalid(_))));
    }

    #[test]
    fn offsets_follow_mean_and_jitter() {
        let cfg = DatasetConfig { offset_norm: 1.0, offset_sigma: 0.0, ..small() };
        let ds = gen_dataset(&cfg, 2).unwrap();
        let mean = cfg.offset_mean();
        assert!((mean.norm() - 1.0).abs() < 1e-12);
        for scene in ds.scenes(Split::Train) {
            assert_eq!(scene.offset().unwrap(), &mean);
        }
    }
}
