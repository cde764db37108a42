use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ovseg_core::world::{
    gen_dataset, make_folds, pseudo_label, sample_episode, Corruption, DatasetConfig, Split, SyntheticDataset,
    WeakLabel, WorldConfig,
};
use ovseg_core::{ClassId, Error};
use proptest::prelude::*;

fn config(seed: u64) -> DatasetConfig {
    DatasetConfig {
        world: WorldConfig { seed, classes: 8, dim: 8, ..Default::default() },
        train_scenes: 12,
        test_scenes: 48,
        max_regions: 2,
        ..Default::default()
    }
}

fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn weak_labels_match_grids(seed in 0u64..1000) {
        let ds = gen_dataset(&config(seed), seed).unwrap();
        for scene in ds.scenes(Split::Train).iter().chain(ds.scenes(Split::Test)) {
            prop_assert_eq!(scene.weak_label(), WeakLabel::from_grid(scene.grid()));
            let taxonomy: BTreeSet<ClassId> = ds.taxonomy().into_iter().collect();
            prop_assert!(scene.grid().iter().all(|c| c.is_background() || taxonomy.contains(c)));
        }
    }

    #[test]
    fn pseudo_labels_never_name_unseen_classes(seed in 0u64..1000, rho in 0.3f64..=1.0, drop in 0.0f64..0.5) {
        let ds = gen_dataset(&config(seed), seed).unwrap();
        let folds = make_folds(&ds.taxonomy(), 4).unwrap();
        let corruption = Corruption { rho, drop };
        for fold in &folds {
            prop_assert!(fold.seen.is_disjoint(&fold.unseen));
            prop_assert_eq!(fold.all_classes(), ds.taxonomy().into_iter().collect::<BTreeSet<_>>());
            for (i, scene) in ds.scenes(Split::Test).iter().enumerate() {
                let labels = match pseudo_label(scene, &fold.seen, &corruption, seed ^ i as u64) {
                    Ok(l) => l,
                    // small regions move in whole rows, so some targets have no rectangle
                    Err(Error::UnreachableIoU { .. }) => continue,
                    Err(e) => return Err(TestCaseError::fail(e.to_string())),
                };
                prop_assert!(labels.iter().all(|c| c.is_background() || fold.seen.contains(c)));
            }
        }
    }

    #[test]
    fn episode_targets_are_unseen(seed in 0u64..1000) {
        let ds = gen_dataset(&config(seed), seed).unwrap();
        let fold = make_folds(&ds.taxonomy(), 2).unwrap().remove(0);
        if let Ok(task) = sample_episode(&ds, &fold, 2, 1, 1, seed) {
            prop_assert!(task.targets.iter().all(|c| !fold.seen.contains(c)));
            let covered: BTreeSet<ClassId> = task.support_classes();
            prop_assert_eq!(covered, task.targets.iter().copied().collect::<BTreeSet<_>>());
        }
    }
}

#[test]
fn regeneration_is_byte_identical() {
    let a = gen_dataset(&config(7), 7).unwrap();
    let b = gen_dataset(&config(7), 7).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    a.write_dir(&tmp.path().join("a")).unwrap();
    b.write_dir(&tmp.path().join("b")).unwrap();
    let ta = read_tree(&tmp.path().join("a"));
    assert!(!ta.is_empty());
    assert_eq!(ta, read_tree(&tmp.path().join("b")));

    // a loaded copy writes the same bytes again
    let loaded = SyntheticDataset::load_dir(&tmp.path().join("a")).unwrap();
    loaded.write_dir(&tmp.path().join("c")).unwrap();
    assert_eq!(ta, read_tree(&tmp.path().join("c")));
    assert_eq!(loaded.scenes(Split::Test)[3].feature(5), a.scenes(Split::Test)[3].feature(5));
}

#[test]
fn different_seeds_give_different_scenes() {
    let a = gen_dataset(&config(1), 1).unwrap();
    let b = gen_dataset(&config(1), 2).unwrap();
    let grids = |d: &SyntheticDataset| d.scenes(Split::Test).iter().map(|s| s.grid().to_vec()).collect::<Vec<_>>();
    assert_ne!(grids(&a), grids(&b));
}
