//! Single worker versus the full rayon pool on the two data-parallel hot
//! paths: zero-shot evaluation and few-shot episodes. Build with
//! `--no-default-features` to time the sequential fallback instead.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ovseg_core::eval::{run_fss, run_gzss, EvalConfig};
use ovseg_core::exec::with_threads;
use ovseg_core::prompt::{LearnedPrompts, PromptModel, PromptPath, PromptTrainConfig};
use ovseg_core::world::{gen_dataset, make_folds, DatasetConfig};

fn bench(c: &mut Criterion) {
    let cfg = DatasetConfig { train_scenes: 8, test_scenes: 128, ..Default::default() };
    let ds = gen_dataset(&cfg, 3).expect("dataset");
    let fold = make_folds(&ds.taxonomy(), 4).expect("folds").remove(0);
    let prompts = LearnedPrompts::initial(&PromptTrainConfig::default(), cfg.world.dim).expect("prompts");
    let model = PromptModel { prompts: &prompts, encoders: ds.world().encoders(), path: PromptPath::BatchMean };
    let eval = EvalConfig::default();

    let mut group = c.benchmark_group("gzss");
    group.sample_size(10);
    for (name, threads) in [("sequential", Some(1)), ("rayon", None)] {
        group.bench_with_input(BenchmarkId::from_parameter(name), &threads, |b, &t| {
            b.iter(|| with_threads(t, || run_gzss(&ds, &fold, &model, &eval).expect("gzss")).expect("pool"))
        });
    }
    group.finish();

    let mut group = c.benchmark_group("fss_2way_1shot");
    group.sample_size(10);
    for (name, threads) in [("sequential", Some(1)), ("rayon", None)] {
        group.bench_with_input(BenchmarkId::from_parameter(name), &threads, |b, &t| {
            b.iter(|| with_threads(t, || run_fss(&ds, &fold, &model, 2, 1, 64, &eval).expect("fss")).expect("pool"))
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
