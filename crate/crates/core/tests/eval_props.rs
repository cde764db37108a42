use std::collections::BTreeSet;

use ovseg_core::eval::{
    harmonic, run_cross, run_fss, run_gzss, run_zss, train_on_fold, zero_shot_maps, ConfusionAccumulator, EvalConfig,
    Protocol,
};
use ovseg_core::exec::with_threads;
use ovseg_core::mask::argmax_map;
use ovseg_core::prompt::{LearnedPrompts, PromptModel, PromptPath, PromptTrainConfig};
use ovseg_core::world::{gen_dataset, make_folds, DatasetConfig, FoldSplit, Split, SyntheticDataset, WorldConfig};
use ovseg_core::{ClassId, Error};
use proptest::prelude::*;

proptest! {
    #[test]
    fn harmonic_sits_between_its_arguments(s in 0.001f64..1.0, u in 0.001f64..1.0) {
        let h = harmonic(s, u);
        prop_assert!(h >= s.min(u) - 1e-15 && h <= s.max(u) + 1e-15);
        prop_assert!(h <= (s + u) / 2.0 + 1e-15);
    }

    #[test]
    fn iou_counts_are_sane(pred in prop::collection::vec(0u32..4, 30), truth in prop::collection::vec(0u32..4, 30)) {
        let pred: Vec<ClassId> = pred.into_iter().map(ClassId).collect();
        let truth: Vec<ClassId> = truth.into_iter().map(ClassId).collect();
        let classes: BTreeSet<ClassId> = (1..4).map(ClassId).collect();
        let mut acc = ConfusionAccumulator::new();
        acc.accumulate(&pred, &truth, &classes).unwrap();
        for c in &classes {
            let counts = acc.counts(*c).unwrap();
            prop_assert!(counts.intersection <= counts.union);
            if let Some(iou) = acc.iou(*c) {
                prop_assert!((0.0..=1.0).contains(&iou));
            }
        }
    }
}

fn fixture() -> (SyntheticDataset, FoldSplit, LearnedPrompts) {
    let cfg = DatasetConfig {
        world: WorldConfig { seed: 21, classes: 8, dim: 8, ..Default::default() },
        train_scenes: 48,
        test_scenes: 96,
        max_regions: 2,
        ..Default::default()
    };
    let ds = gen_dataset(&cfg, 21).unwrap();
    let fold = make_folds(&ds.taxonomy(), 2).unwrap().remove(0);
    let tc = PromptTrainConfig { steps: 20, ..Default::default() };
    let prompts = train_on_fold(&ds, &fold, &tc, PromptPath::BatchMean).unwrap().prompts;
    (ds, fold, prompts)
}

fn eval_cfg() -> EvalConfig {
    EvalConfig { batch_size: 8, ..Default::default() }
}

#[test]
fn runs_are_repeatable_and_thread_independent() {
    let (ds, fold, prompts) = fixture();
    let model = PromptModel { prompts: &prompts, encoders: ds.world().encoders(), path: PromptPath::BatchMean };
    let cfg = eval_cfg();
    let all = |threads| {
        with_threads(threads, || {
            let g = run_gzss(&ds, &fold, &model, &cfg).unwrap().to_json().unwrap();
            let z = run_zss(&ds, &fold, &model, &cfg).unwrap().to_json().unwrap();
            let f = run_fss(&ds, &fold, &model, 1, 1, 12, &cfg).unwrap().to_json().unwrap();
            (g, z, f)
        })
        .unwrap()
    };
    let one = all(Some(1));
    assert_eq!(one, all(Some(1)));
    assert_eq!(one, all(Some(4)));
    assert_eq!(one, all(None));
}

#[test]
fn zero_shot_maps_are_the_scored_maps() {
    let (ds, fold, prompts) = fixture();
    let model = PromptModel { prompts: &prompts, encoders: ds.world().encoders(), path: PromptPath::BatchMean };
    let cfg = eval_cfg();
    let maps = zero_shot_maps(&ds, &fold, &model, &cfg, Protocol::Gzss, usize::MAX).unwrap();
    let scenes = ds.scenes(Split::Test);
    assert_eq!(maps.len(), scenes.len());

    // rescoring the maps by hand reproduces the report
    let classes: BTreeSet<ClassId> = ds.taxonomy().into_iter().collect();
    let mut acc = ConfusionAccumulator::new();
    for (map, scene) in maps.iter().zip(scenes) {
        acc.accumulate(&argmax_map(map), scene.grid(), &classes).unwrap();
    }
    let report = run_gzss(&ds, &fold, &model, &cfg).unwrap();
    for (c, iou) in &report.per_class_iou {
        assert_eq!(acc.iou(*c), Some(*iou), "class {c}");
    }

    let head = zero_shot_maps(&ds, &fold, &model, &cfg, Protocol::Gzss, 10).unwrap();
    assert_eq!(head.as_slice(), &maps[..10]);
    assert!(matches!(
        zero_shot_maps(&ds, &fold, &model, &cfg, Protocol::Fss, 10),
        Err(Error::ConfigInvalid(_))
    ));
}

#[test]
fn cross_runs_leave_prompts_alone_and_reject_seen_targets() {
    let (ds, fold, prompts) = fixture();
    let other_cfg = DatasetConfig { offset_norm: 1.0, ..ds.config().clone() };
    let other = SyntheticDataset::generate_in(ds.world_arc(), &other_cfg, 22).unwrap();
    let before = serde_json::to_vec(&prompts).unwrap();
    let r = run_cross(&ds, &other, &fold, &fold.unseen, &prompts, PromptPath::BatchMean, 4, &eval_cfg()).unwrap();
    assert!(r.zero_shot.unseen_miou.is_some());
    assert_eq!(r.one_shot.unwrap().episodes, 4);
    assert_eq!(serde_json::to_vec(&prompts).unwrap(), before);

    let leaky: BTreeSet<ClassId> = fold.seen.iter().take(1).copied().collect();
    let err = run_cross(&ds, &other, &fold, &leaky, &prompts, PromptPath::BatchMean, 0, &eval_cfg()).unwrap_err();
    assert!(matches!(err, Error::SeenClassLeak(_)));
}
