use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::try_par_map;
use crate::mask::{infer, InferenceMode, InferenceParams, MaskProposalSet, SegmentationMap};
use crate::numerics::{argmax, cosine_sim, RngStream, Vector};
use crate::prompt::{
    train_prompts, EmbeddedExample, LearnedPrompts, PromptModel, PromptPath, PromptSource, PromptTrainConfig, TrainOutcome,
};
use crate::world::{
    gen_proposals, oracle_saliency, pseudo_label, sample_episode, Corruption, DatasetConfig, EpisodeTask,
    FoldSplit, ProposalConfig, Scene, Split, SyntheticDataset, WeakLabel,
};
use crate::{fingerprint, ClassId};

use super::metrics::{harmonic, miou, ConfusionAccumulator};

const PROPOSAL_SEEDS: u64 = 0x9501;
const EPISODE_SEEDS: u64 = 0xe901;
const SALIENCY_SEEDS: u64 = 0x5a01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Gzss,
    Zss,
    Fss,
}

/// Everything a protocol run needs beyond the dataset and prompts:
/// inference settings and the simulated pseudo-label and proposal stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub inference: InferenceParams,
    pub corruption: Corruption,
    pub proposals: ProposalConfig,
    /// Add exact proposals for regions of classes not pseudo-labelled.
    pub proposals_cover_unseen: bool,
    /// Images scored together; `μ` is their adapter mean.
    pub batch_size: usize,
    /// Queries per few-shot episode.
    pub query_size: usize,
    pub saliency_flip: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            inference: InferenceParams::default(),
            corruption: Corruption::default(),
            proposals: ProposalConfig::default(),
            proposals_cover_unseen: true,
            batch_size: crate::prompt::DEFAULT_BATCH_SIZE,
            query_size: 1,
            saliency_flip: 0.0,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        self.corruption.validate()?;
        self.proposals.validate()?;
        if self.batch_size == 0 || self.query_size == 0 {
            return Err(Error::ConfigInvalid("batch and query sizes must be positive".into()));
        }
        if self.inference.tau.is_nan() || self.inference.tau <= 0.0 {
            return Err(Error::NonPositiveTemperature(self.inference.tau));
        }
        Ok(())
    }
}

/// Result of one protocol run. Serializes with sorted keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub protocol: Protocol,
    pub fold: usize,
    pub per_class_iou: BTreeMap<ClassId, f64>,
    pub seen_miou: Option<f64>,
    pub unseen_miou: Option<f64>,
    pub harmonic_miou: Option<f64>,
    /// Few-shot only: mean over episodes of the per-episode mIoU.
    pub episode_mean_miou: Option<f64>,
    pub episode_ious: Vec<f64>,
    pub episodes: usize,
    pub n_way: Option<usize>,
    pub k_shot: Option<usize>,
    pub excluded_classes: Vec<ClassId>,
    pub config_fingerprint: String,
    pub seed: u64,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<Vec<u8>> {
        crate::world::to_json(self)
    }
}

#[derive(Serialize)]
struct RunIdentity<'a> {
    dataset: &'a DatasetConfig,
    dataset_seed: u64,
    fold: &'a FoldSplit,
    eval: &'a EvalConfig,
}

fn run_fingerprint(dataset: &SyntheticDataset, fold: &FoldSplit, cfg: &EvalConfig) -> Result<String> {
    fingerprint(&RunIdentity { dataset: dataset.config(), dataset_seed: dataset.seed(), fold, eval: cfg })
}

fn derived_seed(seed: u64, tag: u64, index: u64) -> u64 {
    RngStream::new(seed, tag).derive(index).next_u64()
}

/// Full-image embedding (all-ones mask).
pub fn image_embedding(dataset: &SyntheticDataset, scene: &Scene) -> Result<Vector> {
    dataset.world().image_encoder().encode(scene, &vec![1.0; scene.pixel_count()])
}

/// Proposals for a test scene: pseudo-labels of the seen classes at the
/// configured corruption, plus exact labels for all other classes when
/// `proposals_cover_unseen` is set, passed through the proposal simulator.
pub fn scene_proposals(
    scene: &Scene,
    seen: &BTreeSet<ClassId>,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<MaskProposalSet> {
    let mut labels = pseudo_label(scene, seen, &cfg.corruption, seed)?;
    if cfg.proposals_cover_unseen {
        for (l, &t) in labels.iter_mut().zip(scene.grid()) {
            if !t.is_background() && !seen.contains(&t) {
                *l = t;
            }
        }
    }
    gen_proposals(&labels, scene.height(), scene.width(), &cfg.proposals, seed)
}

fn batches(n: usize, size: usize) -> Vec<Range<usize>> {
    (0..n).step_by(size).map(|s| s..(s + size).min(n)).collect()
}

fn batch_embeddings(
    dataset: &SyntheticDataset,
    scenes: &[&Scene],
    source: &dyn PromptSource,
) -> Result<Vec<Vector>> {
    if !source.uses_batch() {
        return Ok(Vec::new());
    }
    scenes.iter().map(|s| image_embedding(dataset, s)).collect()
}

/// Zero-shot maps for the test scenes in `range`, scored as one batch.
fn segment_batch(
    dataset: &SyntheticDataset,
    fold: &FoldSplit,
    source: &dyn PromptSource,
    cfg: &EvalConfig,
    classes: &[ClassId],
    range: Range<usize>,
) -> Result<Vec<SegmentationMap>> {
    let scenes = dataset.scenes(Split::Test);
    let encoder = dataset.world().image_encoder();
    let batch: Vec<&Scene> = scenes[range.clone()].iter().collect();
    let xs = batch_embeddings(dataset, &batch, source)?;
    let embeddings = source.embeddings(classes, &xs)?;
    range
        .zip(batch)
        .map(|(i, scene)| {
            let proposals = scene_proposals(scene, &fold.seen, cfg, derived_seed(cfg.seed, PROPOSAL_SEEDS, i as u64))?;
            infer(scene, &proposals, encoder, &embeddings, &InferenceMode::ZeroShot, &cfg.inference)
        })
        .collect()
}

fn zero_shot_accumulate(
    dataset: &SyntheticDataset,
    fold: &FoldSplit,
    source: &dyn PromptSource,
    cfg: &EvalConfig,
    classes: &[ClassId],
) -> Result<ConfusionAccumulator> {
    cfg.validate()?;
    let scenes = dataset.scenes(Split::Test);
    let class_set: BTreeSet<ClassId> = classes.iter().copied().collect();
    let parts = try_par_map(&batches(scenes.len(), cfg.batch_size), |_, range| {
        let maps = segment_batch(dataset, fold, source, cfg, classes, range.clone())?;
        let mut acc = ConfusionAccumulator::new();
        for (map, scene) in maps.iter().zip(&scenes[range.clone()]) {
            acc.accumulate(map.labels(), scene.grid(), &class_set)?;
        }
        Ok(acc)
    })?;
    let mut acc = ConfusionAccumulator::new();
    for p in &parts {
        acc.merge(p);
    }
    Ok(acc)
}

/// The zero-shot segmentation maps behind a GZSS (`Protocol::Gzss`) or ZSS
/// (`Protocol::Zss`) run, for the first `limit` test scenes. Batching and
/// proposal seeds match the full run, so these are exactly the maps it
/// scored.
pub fn zero_shot_maps(
    dataset: &SyntheticDataset,
    fold: &FoldSplit,
    source: &dyn PromptSource,
    cfg: &EvalConfig,
    protocol: Protocol,
    limit: usize,
) -> Result<Vec<SegmentationMap>> {
    cfg.validate()?;
    let classes = match protocol {
        Protocol::Gzss => with_background(dataset.taxonomy()),
        Protocol::Zss => with_background(fold.unseen.iter().copied()),
        Protocol::Fss => return Err(Error::ConfigInvalid("few-shot maps depend on the episode".into())),
    };
    let total = dataset.scenes(Split::Test).len();
    let n = limit.min(total);
    let mut out = Vec::with_capacity(n);
    for range in batches(total, cfg.batch_size).into_iter().take_while(|r| r.start < n) {
        out.extend(segment_batch(dataset, fold, source, cfg, &classes, range)?);
    }
    out.truncate(n);
    Ok(out)
}

fn with_background(classes: impl IntoIterator<Item = ClassId>) -> Vec<ClassId> {
    let mut out: BTreeSet<ClassId> = classes.into_iter().collect();
    out.insert(ClassId::BACKGROUND);
    out.into_iter().collect()
}

fn subset_miou(acc: &ConfusionAccumulator, subset: &BTreeSet<ClassId>, excluded: &mut Vec<ClassId>) -> Option<f64> {
    match miou(acc, subset) {
        Ok(m) => {
            excluded.extend(m.excluded);
            Some(m.value)
        }
        Err(_) => {
            excluded.extend(subset.iter().copied());
            None
        }
    }
}

fn foreground_iou(acc: &ConfusionAccumulator) -> BTreeMap<ClassId, f64> {
    acc.per_class_iou().into_iter().filter(|(c, _)| !c.is_background()).collect()
}

/// Generalized zero-shot: every test scene is segmented over background,
/// seen and unseen classes together.
pub fn run_gzss(
    dataset: &SyntheticDataset,
    fold: &FoldSplit,
    source: &dyn PromptSource,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    let classes = with_background(dataset.taxonomy());
    let acc = zero_shot_accumulate(dataset, fold, source, cfg, &classes)?;
    let mut excluded = Vec::new();
    let seen = subset_miou(&acc, &fold.seen, &mut excluded);
    let unseen = subset_miou(&acc, &fold.unseen, &mut excluded);
    excluded.sort();
    Ok(MetricsReport {
        protocol: Protocol::Gzss,
        fold: fold.fold,
        per_class_iou: foreground_iou(&acc),
        seen_miou: seen,
        unseen_miou: unseen,
        harmonic_miou: seen.zip(unseen).map(|(s, u)| harmonic(s, u)),
        episode_mean_miou: None,
        episode_ious: Vec::new(),
        episodes: 0,
        n_way: None,
        k_shot: None,
        excluded_classes: excluded,
        config_fingerprint: run_fingerprint(dataset, fold, cfg)?,
        seed: cfg.seed,
    })
}

/// Zero-shot: prediction space is background plus the unseen classes.
pub fn run_zss(
    dataset: &SyntheticDataset,
    fold: &FoldSplit,
    source: &dyn PromptSource,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    let classes = with_background(fold.unseen.iter().copied());
    let acc = zero_shot_accumulate(dataset, fold, source, cfg, &classes)?;
    let mut excluded = Vec::new();
    let unseen = subset_miou(&acc, &fold.unseen, &mut excluded);
    Ok(MetricsReport {
        protocol: Protocol::Zss,
        fold: fold.fold,
        per_class_iou: foreground_iou(&acc),
        seen_miou: None,
        unseen_miou: unseen,
        harmonic_miou: None,
        episode_mean_miou: None,
        episode_ious: Vec::new(),
        episodes: 0,
        n_way: None,
        k_shot: None,
        excluded_classes: excluded,
        config_fingerprint: run_fingerprint(dataset, fold, cfg)?,
        seed: cfg.seed,
    })
}

/// One evaluated few-shot episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutcome {
    pub task: EpisodeTask,
    /// Final per-pixel labels of each query, in query order.
    pub predictions: Vec<Vec<ClassId>>,
    pub accumulator: ConfusionAccumulator,
    /// Mean IoU over the episode's targets; `None` if no target was
    /// predicted or present.
    pub miou: Option<f64>,
}

/// Samples and evaluates episode `index`. Predictions outside the support
/// classes and background abort the run.
pub fn fss_episode(
    dataset: &SyntheticDataset,
    fold: &FoldSplit,
    source: &dyn PromptSource,
    n: usize,
    k: usize,
    index: usize,
    cfg: &EvalConfig,
) -> Result<EpisodeOutcome> {
    let task = sample_episode(dataset, fold, n, k, cfg.query_size, derived_seed(cfg.seed, EPISODE_SEEDS, index as u64))?;
    let support = task.support_classes();
    let classes = with_background(support.iter().copied());
    let allowed: BTreeSet<ClassId> = classes.iter().copied().collect();
    let targets: BTreeSet<ClassId> = task.targets.iter().copied().collect();
    let queries = task.query_scenes(dataset);
    let xs = batch_embeddings(dataset, &queries, source)?;
    let embeddings = source.embeddings(&classes, &xs)?;
    let encoder = dataset.world().image_encoder();
    let mut acc = ConfusionAccumulator::new();
    let mut predictions = Vec::with_capacity(queries.len());
    for (j, (&scene_index, scene)) in task.query.iter().zip(&queries).enumerate() {
        let seed = derived_seed(cfg.seed, PROPOSAL_SEEDS, ((index as u64) << 20) | j as u64);
        let proposals = scene_proposals(scene, &fold.seen, cfg, seed)?;
        let saliency = oracle_saliency(scene, cfg.saliency_flip, derived_seed(cfg.seed, SALIENCY_SEEDS, scene_index as u64))?;
        let mode = InferenceMode::FewShot { support: support.clone(), saliency: &saliency };
        let map = infer(scene, &proposals, encoder, &embeddings, &mode, &cfg.inference)?;
        if let Some(&bad) = map.labels().iter().find(|c| !allowed.contains(c)) {
            return Err(Error::RestrictionViolated(bad));
        }
        let truth: Vec<ClassId> =
            scene.grid().iter().map(|c| if targets.contains(c) { *c } else { ClassId::BACKGROUND }).collect();
        acc.accumulate(map.labels(), &truth, &targets)?;
        predictions.push(map.labels().to_vec());
    }
    let miou = miou(&acc, &targets).ok().map(|m| m.value);
    Ok(EpisodeOutcome { task, predictions, accumulator: acc, miou })
}

/// Episodic N-way K-shot evaluation on the fold's unseen classes.
/// `unseen_miou` pools intersections and unions per class across episodes;
/// `episode_mean_miou` averages per-episode means.
pub fn run_fss(
    dataset: &SyntheticDataset,
    fold: &FoldSplit,
    source: &dyn PromptSource,
    n: usize,
    k: usize,
    episodes: usize,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    cfg.validate()?;
    if episodes == 0 {
        return Err(Error::ConfigInvalid("few-shot evaluation needs at least one episode".into()));
    }
    let indices: Vec<usize> = (0..episodes).collect();
    let outcomes = try_par_map(&indices, |_, &e| {
        fss_episode(dataset, fold, source, n, k, e, cfg).map(|o| (o.accumulator, o.miou))
    })?;
    let mut pooled = ConfusionAccumulator::new();
    let mut episode_ious = Vec::with_capacity(episodes);
    for (acc, m) in &outcomes {
        pooled.merge(acc);
        if let Some(m) = m {
            episode_ious.push(*m);
        }
    }
    let mut excluded = Vec::new();
    let unseen = subset_miou(&pooled, &fold.unseen, &mut excluded);
    let episode_mean = (!episode_ious.is_empty()).then(|| episode_ious.iter().sum::<f64>() / episode_ious.len() as f64);
    Ok(MetricsReport {
        protocol: Protocol::Fss,
        fold: fold.fold,
        per_class_iou: foreground_iou(&pooled),
        seen_miou: None,
        unseen_miou: unseen,
        harmonic_miou: None,
        episode_mean_miou: episode_mean,
        episode_ious,
        episodes,
        n_way: Some(n),
        k_shot: Some(k),
        excluded_classes: excluded,
        config_fingerprint: run_fingerprint(dataset, fold, cfg)?,
        seed: cfg.seed,
    })
}

/// Zero-shot and 1-way 1-shot results on a second dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossReport {
    pub zero_shot: MetricsReport,
    pub one_shot: Option<MetricsReport>,
}

/// Evaluates prompts trained on `train` against the `novel` classes of
/// `test` without touching the prompts. Both datasets must share a world.
/// `episodes = 0` skips the one-shot run.
#[allow(clippy::too_many_arguments)]
pub fn run_cross(
    train: &SyntheticDataset,
    test: &SyntheticDataset,
    train_fold: &FoldSplit,
    novel: &BTreeSet<ClassId>,
    prompts: &LearnedPrompts,
    path: PromptPath,
    episodes: usize,
    cfg: &EvalConfig,
) -> Result<CrossReport> {
    if train.world() != test.world() {
        return Err(Error::ConfigInvalid("cross-dataset runs need datasets sharing one world".into()));
    }
    if let Some(&leak) = novel.intersection(&train_fold.seen).next() {
        return Err(Error::SeenClassLeak(leak));
    }
    let before = serde_json::to_vec(prompts)?;
    let fold = FoldSplit { fold: train_fold.fold, seen: train_fold.seen.clone(), unseen: novel.clone() };
    let source = PromptModel { prompts, encoders: test.world().encoders(), path };
    let zero_shot = run_zss(test, &fold, &source, cfg)?;
    let one_shot = if episodes > 0 { Some(run_fss(test, &fold, &source, 1, 1, episodes, cfg)?) } else { None };
    if serde_json::to_vec(prompts)? != before {
        return Err(Error::PromptsMutated);
    }
    Ok(CrossReport { zero_shot, one_shot })
}

/// Fraction of scenes whose top-1 class (full-image embedding against
/// `classes`) is in the scene's weak label. Scenes are scored in batches of
/// `batch_size`.
pub fn image_accuracy(
    dataset: &SyntheticDataset,
    scenes: &[&Scene],
    classes: &[ClassId],
    source: &dyn PromptSource,
    batch_size: usize,
) -> Result<f64> {
    if scenes.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let parts = try_par_map(&batches(scenes.len(), batch_size.max(1)), |_, range| {
        let batch = &scenes[range.clone()];
        let xs: Vec<Vector> = batch.iter().map(|s| image_embedding(dataset, s)).collect::<Result<_>>()?;
        let embeddings = source.embeddings(classes, &xs)?;
        let mut hits = 0usize;
        for (scene, x) in batch.iter().zip(&xs) {
            let sims = embeddings.vectors().iter().map(|t| cosine_sim(x, t)).collect::<Result<Vec<_>>>()?;
            let top = classes[argmax(&sims).expect("classes are nonempty")];
            hits += usize::from(scene.weak_label().contains(top));
        }
        Ok(hits)
    })?;
    Ok(parts.iter().sum::<usize>() as f64 / scenes.len() as f64)
}

/// Trains prompts on the fold's seen classes. Training scenes containing
/// any unseen class are left out, so unseen classes never reach the loss.
pub fn train_on_fold(
    dataset: &SyntheticDataset,
    fold: &FoldSplit,
    config: &PromptTrainConfig,
    path: PromptPath,
) -> Result<TrainOutcome> {
    let scenes: Vec<&Scene> = dataset
        .scenes(Split::Train)
        .iter()
        .filter(|s| s.weak_label().is_subset_of(&fold.seen) && !s.weak_label().is_empty())
        .collect();
    if scenes.is_empty() {
        return Err(Error::InsufficientScenes(format!("no training scene uses only seen classes of fold {}", fold.fold)));
    }
    let xs = try_par_map(&scenes, |_, s| image_embedding(dataset, s))?;
    let labels: Vec<WeakLabel> = scenes.iter().map(|s| s.weak_label()).collect();
    let examples: Vec<EmbeddedExample<'_>> =
        xs.iter().zip(&labels).map(|(embedding, label)| EmbeddedExample { embedding, label }).collect();
    let classes: Vec<ClassId> = fold.seen.iter().copied().collect();
    train_prompts(&examples, &classes, config, dataset.world().encoders(), path)
}
