use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::SaliencyMap;
use crate::numerics::RngStream;
use crate::ClassId;

use super::dataset::{Split, SyntheticDataset};
use super::folds::FoldSplit;
use super::scene::{Scene, WeakLabel};

const EPISODE_STREAM: u64 = 0xe915;
const SALIENCY_STREAM: u64 = 0x5a11;
const TARGET_DRAWS: usize = 32;

/// An N-way K-shot task over the test split. Scenes are referenced by index.
///
/// Support and query scenes contain target classes only, so every labelled
/// query pixel belongs to the episode's prediction space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeTask {
    pub fold: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub targets: Vec<ClassId>,
    pub support: Vec<(usize, WeakLabel)>,
    pub query: Vec<usize>,
}

impl EpisodeTask {
    /// Union of the support weak labels.
    pub fn support_classes(&self) -> BTreeSet<ClassId> {
        self.support.iter().flat_map(|(_, l)| l.classes()).collect()
    }

    pub fn query_scenes<'a>(&self, dataset: &'a SyntheticDataset) -> Vec<&'a Scene> {
        let scenes = dataset.scenes(Split::Test);
        self.query.iter().map(|&i| &scenes[i]).collect()
    }
}

/// Draws `n` target classes from the fold's unseen set, `k` support scenes
/// per target, and `query_size` further query scenes.
///
/// When the drawn targets lack enough scenes, new targets are drawn (up to
/// 32 times) before giving up.
pub fn sample_episode(
    dataset: &SyntheticDataset,
    fold: &FoldSplit,
    n: usize,
    k: usize,
    query_size: usize,
    seed: u64,
) -> Result<EpisodeTask> {
    if n == 0 || k == 0 || query_size == 0 {
        return Err(Error::ConfigInvalid("episodes need n, k and query size >= 1".into()));
    }
    let unseen: Vec<ClassId> = fold.unseen.iter().copied().collect();
    if unseen.len() < n {
        return Err(Error::InsufficientScenes(format!(
            "fold {} has {} unseen classes, {n} requested",
            fold.fold,
            unseen.len()
        )));
    }
    let scenes = dataset.scenes(Split::Test);
    let labels: Vec<WeakLabel> = scenes.iter().map(Scene::weak_label).collect();
    let mut rng = RngStream::new(seed, EPISODE_STREAM);
    for _ in 0..TARGET_DRAWS {
        let mut pool = unseen.clone();
        rng.shuffle(&mut pool);
        let mut targets: Vec<ClassId> = pool[..n].to_vec();
        targets.sort();
        let target_set: BTreeSet<ClassId> = targets.iter().copied().collect();
        let eligible: Vec<usize> =
            (0..scenes.len()).filter(|&i| !labels[i].is_empty() && labels[i].is_subset_of(&target_set)).collect();
        let mut used = BTreeSet::new();
        let mut support = Vec::with_capacity(n * k);
        let mut feasible = true;
        for &class in &targets {
            let mut candidates: Vec<usize> =
                eligible.iter().copied().filter(|i| !used.contains(i) && labels[*i].contains(class)).collect();
            if candidates.len() < k {
                feasible = false;
                break;
            }
            rng.shuffle(&mut candidates);
            for &i in &candidates[..k] {
                used.insert(i);
                support.push((i, labels[i].clone()));
            }
        }
        if !feasible {
            continue;
        }
        let mut rest: Vec<usize> = eligible.into_iter().filter(|i| !used.contains(i)).collect();
        if rest.len() < query_size {
            continue;
        }
        rng.shuffle(&mut rest);
        let query = rest[..query_size].to_vec();
        return Ok(EpisodeTask { fold: fold.fold, n_way: n, k_shot: k, targets, support, query });
    }
    Err(Error::InsufficientScenes(format!(
        "no {n}-way {k}-shot episode with {query_size} queries found in fold {}",
        fold.fold
    )))
}

/// Foreground indicator of the scene with each pixel flipped independently
/// with probability `flip`.
pub fn oracle_saliency(scene: &Scene, flip: f64, seed: u64) -> Result<SaliencyMap> {
    if !(0.0..0.5).contains(&flip) {
        return Err(Error::ConfigInvalid(format!("saliency flip rate must lie in [0, 0.5), got {flip}")));
    }
    let mut rng = RngStream::new(seed, SALIENCY_STREAM);
    let salient = scene.grid().iter().map(|c| !c.is_background() ^ rng.bernoulli(flip)).collect();
    SaliencyMap::new(scene.height(), scene.width(), salient)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{make_folds, gen_dataset, DatasetConfig, WorldConfig};

    fn dataset() -> SyntheticDataset {
        let cfg = DatasetConfig {
            world: WorldConfig { dim: 8, classes: 8, ..Default::default() },
            height: 16,
            width: 16,
            train_scenes: 4,
            test_scenes: 120,
            min_regions: 1,
            max_regions: 2,
            min_side: 3,
            max_side: 6,
            ..Default::default()
        };
        gen_dataset(&cfg, 11).unwrap()
    }

    #[test]
    fn episode_shapes_and_laws() {
        let ds = dataset();
        let folds = make_folds(&ds.taxonomy(), 4).unwrap();
        for (n, k) in [(1, 1), (2, 1), (1, 2)] {
            for seed in 0..5 {
                let ep = sample_episode(&ds, &folds[1], n, k, 2, seed).unwrap();
                assert_eq!(ep.targets.len(), n);
                assert_eq!(ep.support.len(), n * k);
                let support = ep.support_classes();
                assert_eq!(support, ep.targets.iter().copied().collect());
                assert!(support.is_subset(&folds[1].unseen));
                assert!(support.is_disjoint(&folds[1].seen));
                let targets: BTreeSet<ClassId> = ep.targets.iter().copied().collect();
                for q in ep.query_scenes(&ds) {
                    let l = q.weak_label();
                    assert!(!l.is_empty() && l.is_subset_of(&targets));
                }
                assert_eq!(ep, sample_episode(&ds, &folds[1], n, k, 2, seed).unwrap());
            }
        }
    }

    #[test]
    fn insufficient() {
        let ds = dataset();
        let folds = make_folds(&ds.taxonomy(), 4).unwrap();
        assert!(matches!(sample_episode(&ds, &folds[0], 3, 1, 1, 0), Err(Error::InsufficientScenes(_))));
        assert!(matches!(sample_episode(&ds, &folds[0], 1, 1, 10_000, 0), Err(Error::InsufficientScenes(_))));
    }

    #[test]
    fn saliency_flips() {
        let grid: Vec<ClassId> = (0..10_000).map(|i| ClassId(u32::from(i % 3 == 0))).collect();
        let scene = Scene::from_features(100, 100, 1, grid.clone(), vec![0.0; 10_000]).unwrap();
        let exact = oracle_saliency(&scene, 0.0, 1).unwrap();
        for (s, c) in exact.values().iter().zip(&grid) {
            assert_eq!(*s, !c.is_background());
        }
        let noisy = oracle_saliency(&scene, 0.1, 1).unwrap();
        let hamming = noisy.values().iter().zip(exact.values()).filter(|(a, b)| a != b).count();
        assert!((700..=1300).contains(&hamming), "{hamming}");
        let blank = Scene::from_features(4, 4, 1, vec![ClassId::BACKGROUND; 16], vec![0.0; 16]).unwrap();
        assert!(oracle_saliency(&blank, 0.0, 2).unwrap().values().iter().all(|&s| !s));
        assert!(oracle_saliency(&blank, 0.5, 2).is_err());
    }
}
