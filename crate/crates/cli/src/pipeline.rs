//! Commands as pure functions of a [`RunConfig`], plus the on-disk layout.
//!
//! Everything a command writes lives under the output directory:
//!
//! ```text
//! run.toml             resolved configuration of the latest command
//! dataset/             manifest.json, folds.json, scenes/{train,test}/NNNNN.json
//! prompts.json         trained prompts with the settings that produced them
//! train_log.json       per-step loss
//! report-<proto>.json  evaluation report
//! maps/                label grids (PGM) and per-scene IoUs
//! ablation.json        sweep table
//! embeddings.json      image and text embedding rows
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::{Component, Path, PathBuf};

use anyhow::{bail, Context};
use ovseg_core::eval::{
    image_embedding, run_cross, run_fss, run_gzss, run_zss, train_on_fold, zero_shot_maps, ConfusionAccumulator,
    EvalConfig, MetricsReport, Protocol,
};
use ovseg_core::prompt::{LearnedPrompts, PromptModel, PromptPath, PromptSource, PromptTrainConfig, TrainOutcome};
use ovseg_core::world::{make_folds, FoldSplit, Split, SyntheticDataset};
use ovseg_core::{fingerprint, ClassId, Vector};
use serde::{Deserialize, Serialize};

use crate::config::{ProtocolChoice, RunConfig};
use crate::UsageError;

pub const RUN_FILE: &str = "run.toml";
pub const DATASET_DIR: &str = "dataset";
pub const FOLDS_FILE: &str = "folds.json";
pub const PROMPTS_FILE: &str = "prompts.json";
pub const TRAIN_LOG_FILE: &str = "train_log.json";
pub const MAPS_DIR: &str = "maps";
pub const ABLATION_FILE: &str = "ablation.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.json";

pub fn report_file(protocol: ProtocolChoice) -> String {
    let name = match protocol {
        ProtocolChoice::Gzss => "gzss",
        ProtocolChoice::Zss => "zss",
        ProtocolChoice::Fss => "fss",
        ProtocolChoice::Cross => "cross",
    };
    format!("report-{name}.json")
}

/// Pretty JSON with sorted keys and a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> anyhow::Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(&serde_json::to_value(value)?)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Output directory guard: every write goes through here, and relative
/// names may not climb out of the root.
#[derive(Debug, Clone)]
pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> anyhow::Result<PathBuf> {
        let rel = Path::new(rel);
        if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
            bail!("refusing to write {} outside the output directory", rel.display());
        }
        Ok(self.root.join(rel))
    }

    pub fn write(&self, rel: &str, bytes: &[u8]) -> anyhow::Result<PathBuf> {
        let path = self.path(rel)?;
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

// ---------------------------------------------------------------- dataset

pub fn generate(cfg: &RunConfig) -> anyhow::Result<SyntheticDataset> {
    cfg.validate()?;
    Ok(ovseg_core::world::gen_dataset(&cfg.dataset(), cfg.seed)?)
}

pub fn folds(cfg: &RunConfig, ds: &SyntheticDataset) -> anyhow::Result<Vec<FoldSplit>> {
    Ok(make_folds(&ds.taxonomy(), cfg.folds)?)
}

pub fn fold(cfg: &RunConfig, ds: &SyntheticDataset) -> anyhow::Result<FoldSplit> {
    folds(cfg, ds)?
        .into_iter()
        .nth(cfg.fold)
        .ok_or_else(|| UsageError(format!("fold {} does not exist", cfg.fold)).into())
}

/// Content hash over the generating settings and every stored scene field.
pub fn dataset_fingerprint(ds: &SyntheticDataset) -> anyhow::Result<String> {
    #[derive(Serialize)]
    struct SceneKey<'a> {
        grid: Vec<(ClassId, usize)>,
        offset: Option<&'a Vector>,
        noise_seed: u64,
    }
    let scenes: Vec<SceneKey<'_>> = [Split::Train, Split::Test]
        .into_iter()
        .flat_map(|s| ds.scenes(s))
        .map(|s| SceneKey {
            grid: ovseg_core::world::rle_encode(s.grid()),
            offset: s.offset(),
            noise_seed: s.noise_seed(),
        })
        .collect();
    Ok(fingerprint(&(ds.config(), ds.seed(), scenes))?)
}

pub fn write_dataset(out: &OutDir, cfg: &RunConfig, ds: &SyntheticDataset) -> anyhow::Result<()> {
    let dir = out.path(DATASET_DIR)?;
    ds.write_dir(&dir)?;
    out.write(&format!("{DATASET_DIR}/{FOLDS_FILE}"), &to_json(&folds(cfg, ds)?)?)?;
    Ok(())
}

/// Loads a stored dataset and checks it was generated by `cfg`.
pub fn load_dataset(dir: &Path, cfg: &RunConfig) -> anyhow::Result<SyntheticDataset> {
    if !dir.join("manifest.json").is_file() {
        bail!("no dataset at {} (run `gen` first)", dir.display());
    }
    let ds = SyntheticDataset::load_dir(dir).with_context(|| format!("loading dataset from {}", dir.display()))?;
    if ds.config() != &cfg.dataset() || ds.seed() != cfg.seed {
        bail!(UsageError(format!(
            "dataset at {} was generated with different settings; rerun `gen` or pass the same config",
            dir.display()
        )));
    }
    Ok(ds)
}

// ---------------------------------------------------------------- training

/// Trained prompts plus what produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptArtifact {
    pub dataset_fingerprint: String,
    pub fold: usize,
    pub folds: usize,
    pub path: PromptPath,
    pub train: PromptTrainConfig,
    pub prompts: LearnedPrompts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f64>,
    pub first_decile_loss: Option<f64>,
    pub last_decile_loss: Option<f64>,
}

pub fn train(cfg: &RunConfig, ds: &SyntheticDataset) -> anyhow::Result<(PromptArtifact, TrainLog)> {
    cfg.validate()?;
    let fold = fold(cfg, ds)?;
    let TrainOutcome { prompts, losses } = train_on_fold(ds, &fold, &cfg.train(), cfg.path())?;
    let trend = TrainOutcome { prompts: prompts.clone(), losses: losses.clone() }.loss_trend();
    let artifact = PromptArtifact {
        dataset_fingerprint: dataset_fingerprint(ds)?,
        fold: cfg.fold,
        folds: cfg.folds,
        path: cfg.path(),
        train: cfg.train(),
        prompts,
    };
    let log = TrainLog { losses, first_decile_loss: trend.map(|t| t.0), last_decile_loss: trend.map(|t| t.1) };
    Ok((artifact, log))
}

/// Loads prompts and checks they match the dataset and `cfg`.
pub fn load_prompts(path: &Path, cfg: &RunConfig, ds: &SyntheticDataset) -> anyhow::Result<PromptArtifact> {
    if !path.is_file() {
        bail!("no prompts at {} (run `train` first)", path.display());
    }
    let artifact: PromptArtifact = serde_json::from_slice(&fs::read(path)?)
        .with_context(|| format!("parsing {}", path.display()))?;
    if artifact.dataset_fingerprint != dataset_fingerprint(ds)? {
        bail!(UsageError(format!("prompts at {} were trained on a different dataset", path.display())));
    }
    if artifact.train != cfg.train() || artifact.fold != cfg.fold || artifact.folds != cfg.folds || artifact.path != cfg.path()
    {
        bail!(UsageError(format!(
            "prompts at {} were trained with different settings; rerun `train` with this config",
            path.display()
        )));
    }
    Ok(artifact)
}

// ---------------------------------------------------------------- evaluation

/// A command's result with enough context to regenerate it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub command: String,
    pub config: RunConfig,
    pub dataset_fingerprint: String,
    pub prompts_fingerprint: Option<String>,
    pub result: serde_json::Value,
    /// Hash of every other field.
    pub fingerprint: String,
}

impl Report {
    fn new(
        command: &str,
        config: &RunConfig,
        dataset_fingerprint: String,
        prompts_fingerprint: Option<String>,
        result: serde_json::Value,
    ) -> anyhow::Result<Self> {
        let fp = fingerprint(&(command, config, &dataset_fingerprint, &prompts_fingerprint, &result))?;
        Ok(Self {
            command: command.to_string(),
            config: config.clone(),
            dataset_fingerprint,
            prompts_fingerprint,
            result,
            fingerprint: fp,
        })
    }

    pub fn to_json(&self) -> anyhow::Result<Vec<u8>> {
        to_json(self)
    }
}

fn metrics(
    cfg: &RunConfig,
    ds: &SyntheticDataset,
    fold: &FoldSplit,
    prompts: &LearnedPrompts,
) -> anyhow::Result<serde_json::Value> {
    let eval = cfg.eval();
    let source = PromptModel { prompts, encoders: ds.world().encoders(), path: cfg.path() };
    Ok(match cfg.protocol {
        ProtocolChoice::Gzss => serde_json::to_value(run_gzss(ds, fold, &source, &eval)?)?,
        ProtocolChoice::Zss => serde_json::to_value(run_zss(ds, fold, &source, &eval)?)?,
        ProtocolChoice::Fss => serde_json::to_value(run_fss(ds, fold, &source, cfg.n, cfg.k, cfg.episodes, &eval)?)?,
        ProtocolChoice::Cross => {
            let test = cross_dataset(cfg, ds)?;
            serde_json::to_value(run_cross(ds, &test, fold, &fold.unseen, prompts, cfg.path(), cfg.episodes, &eval)?)?
        }
    })
}

/// Second dataset of a cross run, drawn in the training dataset's world.
pub fn cross_dataset(cfg: &RunConfig, ds: &SyntheticDataset) -> anyhow::Result<SyntheticDataset> {
    Ok(SyntheticDataset::generate_in(ds.world_arc(), &cfg.cross_dataset(), cfg.cross_seed)?)
}

pub fn evaluate(cfg: &RunConfig, ds: &SyntheticDataset, artifact: &PromptArtifact) -> anyhow::Result<Report> {
    cfg.validate()?;
    let fold = fold(cfg, ds)?;
    let result = metrics(cfg, ds, &fold, &artifact.prompts)?;
    Report::new("eval", cfg, dataset_fingerprint(ds)?, Some(fingerprint(artifact)?), result)
}

/// Per-scene record written next to each PGM map.
#[derive(Debug, Clone, Serialize)]
pub struct MapRecord {
    pub scene: usize,
    pub height: usize,
    pub width: usize,
    pub per_class_iou: std::collections::BTreeMap<ClassId, f64>,
}

/// Writes PGM label grids and IoU records for the first `count` test scenes.
pub fn write_maps(
    out: &OutDir,
    cfg: &RunConfig,
    ds: &SyntheticDataset,
    artifact: &PromptArtifact,
    count: usize,
) -> anyhow::Result<usize> {
    let protocol = match cfg.protocol {
        ProtocolChoice::Gzss => Protocol::Gzss,
        ProtocolChoice::Zss => Protocol::Zss,
        _ => bail!(UsageError("maps are exported for gzss and zss runs only".into())),
    };
    let fold = fold(cfg, ds)?;
    let source = PromptModel { prompts: &artifact.prompts, encoders: ds.world().encoders(), path: cfg.path() };
    let maps = zero_shot_maps(ds, &fold, &source, &cfg.eval(), protocol, count)?;
    for (i, (map, scene)) in maps.iter().zip(ds.scenes(Split::Test)).enumerate() {
        out.write(&format!("{MAPS_DIR}/test_{i:05}.pgm"), map.to_pgm().as_bytes())?;
        let classes: BTreeSet<ClassId> = map.classes().iter().copied().filter(|c| !c.is_background()).collect();
        let mut acc = ConfusionAccumulator::new();
        acc.accumulate(map.labels(), scene.grid(), &classes)?;
        let record = MapRecord { scene: i, height: map.height(), width: map.width(), per_class_iou: acc.per_class_iou() };
        out.write(&format!("{MAPS_DIR}/test_{i:05}.json"), &to_json(&record)?)?;
    }
    Ok(maps.len())
}

// ---------------------------------------------------------------- ablation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// `fixed`, `learned`, `batch-mean` or `pseudo-label`.
    pub strategy: String,
    pub lambda: f64,
    pub rho: f64,
    pub seen_miou: Option<f64>,
    pub unseen_miou: Option<f64>,
    pub harmonic_miou: Option<f64>,
}

fn gzss_row(
    strategy: &str,
    ds: &SyntheticDataset,
    fold: &FoldSplit,
    prompts: &LearnedPrompts,
    eval: &EvalConfig,
) -> anyhow::Result<AblationRow> {
    let source = PromptModel { prompts, encoders: ds.world().encoders(), path: PromptPath::BatchMean };
    let r: MetricsReport = run_gzss(ds, fold, &source as &dyn PromptSource, eval)?;
    Ok(AblationRow {
        strategy: strategy.into(),
        lambda: prompts.config.lambda,
        rho: eval.corruption.rho,
        seen_miou: r.seen_miou,
        unseen_miou: r.unseen_miou,
        harmonic_miou: r.harmonic_miou,
    })
}

/// Prompt strategies (fixed, learned, batch-mean over the λ grid) and
/// pseudo-label quality presets, each scored by GZSS.
pub fn ablate(cfg: &RunConfig, ds: &SyntheticDataset) -> anyhow::Result<Report> {
    cfg.validate()?;
    let fold = fold(cfg, ds)?;
    let eval = cfg.eval();
    let trained = |lambda: f64| -> anyhow::Result<LearnedPrompts> {
        let tc = PromptTrainConfig { lambda, ..cfg.train() };
        Ok(train_on_fold(ds, &fold, &tc, PromptPath::BatchMean)?.prompts)
    };
    let mut rows = Vec::new();
    let fixed = LearnedPrompts::initial(&PromptTrainConfig { lambda: 0.0, steps: 0, ..cfg.train() }, cfg.dim)?;
    rows.push(gzss_row("fixed", ds, &fold, &fixed, &eval)?);
    for &lambda in &cfg.lambda_grid {
        let name = if lambda == 0.0 { "learned" } else { "batch-mean" };
        rows.push(gzss_row(name, ds, &fold, &trained(lambda)?, &eval)?);
    }
    let base = trained(cfg.lambda)?;
    for &rho in &cfg.rho_grid {
        let e = EvalConfig { corruption: ovseg_core::world::Corruption { rho, ..eval.corruption }, ..eval.clone() };
        rows.push(gzss_row("pseudo-label", ds, &fold, &base, &e)?);
    }
    Report::new("ablate", cfg, dataset_fingerprint(ds)?, None, serde_json::to_value(rows)?)
}

// ---------------------------------------------------------------- embeddings

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    /// `image:<split>:<index>` or `text:<class id>`.
    pub label: String,
    pub vector: Vec<f64>,
}

/// One row per test scene (full-image embedding) and one per class (text
/// embedding, `μ` taken over all test scenes).
pub fn dump_embeddings(
    cfg: &RunConfig,
    ds: &SyntheticDataset,
    artifact: &PromptArtifact,
) -> anyhow::Result<Vec<EmbeddingRow>> {
    let scenes = ds.scenes(Split::Test);
    let xs = ovseg_core::exec::try_par_map(scenes, |_, s| image_embedding(ds, s))?;
    let mut rows: Vec<EmbeddingRow> = xs
        .iter()
        .enumerate()
        .map(|(i, x)| EmbeddingRow { label: format!("image:test:{i}"), vector: x.as_slice().to_vec() })
        .collect();
    let mut classes = vec![ClassId::BACKGROUND];
    classes.extend(ds.taxonomy());
    let source = PromptModel { prompts: &artifact.prompts, encoders: ds.world().encoders(), path: cfg.path() };
    let text = source.embeddings(&classes, &xs)?;
    for (c, v) in text.classes().iter().zip(text.vectors()) {
        rows.push(EmbeddingRow { label: format!("text:{c}"), vector: v.as_slice().to_vec() });
    }
    Ok(rows)
}

// ---------------------------------------------------------------- verify

/// Outcome of regenerating a stored report.
#[derive(Debug, Clone, PartialEq)]
pub enum Verdict {
    Match,
    Mismatch { first_difference: usize },
}

/// Regenerates the report from its embedded config (dataset, prompts and
/// all) and compares bytes.
pub fn verify(stored: &[u8]) -> anyhow::Result<Verdict> {
    let report: Report = serde_json::from_slice(stored).map_err(|e| UsageError(format!("not a report: {e}")))?;
    let cfg = report.config;
    let ds = generate(&cfg)?;
    let fresh = match report.command.as_str() {
        "eval" => {
            let (artifact, _) = train(&cfg, &ds)?;
            evaluate(&cfg, &ds, &artifact)?
        }
        "ablate" => ablate(&cfg, &ds)?,
        other => bail!(UsageError(format!("cannot verify a {other:?} report"))),
    };
    let bytes = fresh.to_json()?;
    Ok(match bytes.iter().zip(stored).position(|(a, b)| a != b) {
        None if bytes.len() == stored.len() => Verdict::Match,
        None => Verdict::Mismatch { first_difference: bytes.len().min(stored.len()) },
        Some(i) => Verdict::Mismatch { first_difference: i },
    })
}
