//! Segment classification and proposal aggregation.
//!
//! Proposals are soft class-agnostic masks. Each one is binarized into a
//! masked input, embedded, and classified against the class text embeddings;
//! the soft masks and per-proposal class distributions are then combined
//! pixel-wise into a class distribution `Z` and its argmax label grid.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::encoders::ImageEncoderWeights;
use crate::error::{Error, Result};
use crate::numerics::{argmax, Vector};
use crate::prompt::{classify, ClassEmbeddings};
use crate::world::Scene;
use crate::ClassId;

/// Coverage at or below which a pixel counts as uncovered.
pub const COVERAGE_EPS: f64 = 1e-9;
pub const DEFAULT_BINARIZE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskProposalSet {
    height: usize,
    width: usize,
    masks: Vec<Vec<f64>>,
}

impl MaskProposalSet {
    pub fn new(height: usize, width: usize, masks: Vec<Vec<f64>>) -> Result<Self> {
        for m in &masks {
            if m.len() != height * width {
                return Err(Error::ShapeMismatch(format!(
                    "mask of {} entries for {height}x{width}",
                    m.len()
                )));
            }
            if m.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::ConfigInvalid("mask values must lie in [0, 1]".into()));
            }
        }
        Ok(Self { height, width, masks })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn masks(&self) -> &[Vec<f64>] {
        &self.masks
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(
            self.height,
            self.width,
            self.masks.iter().map(|m| m.iter().map(|v| v * factor).collect()).collect(),
        )
    }

    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            height: self.height,
            width: self.width,
            masks: order.iter().map(|&i| self.masks[i].clone()).collect(),
        }
    }
}

/// Per-proposal class distributions, one row per proposal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalClassScores {
    classes: Vec<ClassId>,
    rows: Vec<Vec<f64>>,
    /// Indices of proposals dropped because binarization left them empty.
    dropped: Vec<usize>,
}

impl ProposalClassScores {
    pub fn new(classes: Vec<ClassId>, rows: Vec<Vec<f64>>) -> Result<Self> {
        check_class_list(&classes)?;
        for row in &rows {
            if row.len() != classes.len() {
                return Err(Error::DimensionMismatch { expected: classes.len(), actual: row.len() });
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-9 || row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::ConfigInvalid("score rows must be distributions".into()));
            }
        }
        Ok(Self { classes, rows, dropped: Vec::new() })
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn dropped(&self) -> &[usize] {
        &self.dropped
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

fn check_class_list(classes: &[ClassId]) -> Result<()> {
    if classes.is_empty() {
        return Err(Error::ConfigInvalid("class set is empty".into()));
    }
    if classes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::ConfigInvalid("class set must be strictly ascending".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UncoveredRule {
    #[default]
    Background,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationMap {
    height: usize,
    width: usize,
    classes: Vec<ClassId>,
    /// Row-major `height × width × classes`.
    z: Vec<f64>,
    coverage: Vec<f64>,
    labels: Vec<ClassId>,
}

impl SegmentationMap {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn distribution(&self, pixel: usize) -> &[f64] {
        let n = self.classes.len();
        &self.z[pixel * n..(pixel + 1) * n]
    }

    pub fn coverage(&self) -> &[f64] {
        &self.coverage
    }

    pub fn labels(&self) -> &[ClassId] {
        &self.labels
    }

    pub(crate) fn with_labels(mut self, labels: Vec<ClassId>) -> Self {
        debug_assert_eq!(labels.len(), self.labels.len());
        self.labels = labels;
        self
    }

    /// Portable-greymap (plain `P2`) rendering of the label grid.
    pub fn to_pgm(&self) -> String {
        let max = self.labels.iter().map(|c| c.0).max().unwrap_or(0).max(1);
        let mut out = format!("P2\n{} {}\n{}\n", self.width, self.height, max);
        for row in self.labels.chunks(self.width) {
            let line: Vec<String> = row.iter().map(|c| c.0.to_string()).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SaliencyMap {
    height: usize,
    width: usize,
    salient: Vec<bool>,
}

impl SaliencyMap {
    pub fn new(height: usize, width: usize, salient: Vec<bool>) -> Result<Self> {
        if salient.len() != height * width {
            return Err(Error::ShapeMismatch("saliency size".into()));
        }
        Ok(Self { height, width, salient })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[bool] {
        &self.salient
    }
}

/// A scene paired with a binary foreground mask.
#[derive(Debug, Clone)]
pub struct MaskedInput<'a> {
    scene: &'a Scene,
    mask: Vec<f64>,
}

impl<'a> MaskedInput<'a> {
    pub fn scene(&self) -> &Scene {
        self.scene
    }

    pub fn mask(&self) -> &[f64] {
        &self.mask
    }

    pub fn embed(&self, encoder: &ImageEncoderWeights) -> Result<Vector> {
        encoder.encode(self.scene, &self.mask)
    }
}

/// Binarizes `mask` at `threshold` (values `>= threshold` become 1).
pub fn make_input_proposal<'a>(scene: &'a Scene, mask: &[f64], threshold: f64) -> Result<MaskedInput<'a>> {
    if mask.len() != scene.pixel_count() {
        return Err(Error::ShapeMismatch(format!(
            "mask of {} entries for a scene of {} pixels",
            mask.len(),
            scene.pixel_count()
        )));
    }
    let binary: Vec<f64> = mask.iter().map(|&m| if m >= threshold { 1.0 } else { 0.0 }).collect();
    if binary.iter().all(|&b| b == 0.0) {
        return Err(Error::EmptyMask);
    }
    Ok(MaskedInput { scene, mask: binary })
}

/// Classifies every proposal against `embeddings`. Proposals emptied by
/// binarization get a uniform row and are listed in `dropped`; aggregation
/// treats their soft mask as zero.
pub fn classify_segments(
    scene: &Scene,
    proposals: &MaskProposalSet,
    encoder: &ImageEncoderWeights,
    embeddings: &ClassEmbeddings,
    tau: f64,
    threshold: f64,
) -> Result<ProposalClassScores> {
    if proposals.height != scene.height() || proposals.width != scene.width() {
        return Err(Error::ShapeMismatch("proposals do not match scene".into()));
    }
    let classes = embeddings.classes().to_vec();
    check_class_list(&classes)?;
    let n = classes.len();
    let mut rows = Vec::with_capacity(proposals.len());
    let mut dropped = Vec::new();
    for (i, m) in proposals.masks.iter().enumerate() {
        match make_input_proposal(scene, m, threshold) {
            Ok(input) => {
                let x = input.embed(encoder)?;
                rows.push(classify(&x, embeddings.vectors(), tau)?.into_vec());
            }
            Err(Error::EmptyMask) => {
                dropped.push(i);
                rows.push(vec![1.0 / n as f64; n]);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(ProposalClassScores { classes, rows, dropped })
}

/// Pixel-wise aggregation
/// `Z_j(q) = Σ_i m_i(q)·C_i(j) / Σ_k Σ_i m_i(q)·C_i(k)`.
pub fn aggregate(
    proposals: &MaskProposalSet,
    scores: &ProposalClassScores,
    rule: UncoveredRule,
) -> Result<SegmentationMap> {
    if scores.len() != proposals.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} score rows for {} proposals",
            scores.len(),
            proposals.len()
        )));
    }
    let classes = scores.classes.clone();
    let n = classes.len();
    let background = classes.iter().position(|c| c.is_background());
    if rule == UncoveredRule::Background && background.is_none() {
        return Err(Error::MissingBackground(ClassId::BACKGROUND));
    }
    let dropped: BTreeSet<usize> = scores.dropped.iter().copied().collect();
    let pixels = proposals.height * proposals.width;
    let mut z = vec![0.0; pixels * n];
    let mut coverage = vec![0.0; pixels];
    let order = canonical_order(proposals, scores);
    for q in 0..pixels {
        let zq = &mut z[q * n..(q + 1) * n];
        let mut total = 0.0;
        for &i in &order {
            let (mask, row) = (&proposals.masks[i], &scores.rows[i]);
            let m = mask[q];
            if m == 0.0 || dropped.contains(&i) {
                continue;
            }
            coverage[q] += m;
            for (acc, &p) in zq.iter_mut().zip(row) {
                let w = m * p;
                *acc += w;
                total += w;
            }
        }
        if coverage[q] > COVERAGE_EPS && total > 0.0 {
            for v in zq.iter_mut() {
                *v /= total;
            }
        } else {
            match rule {
                UncoveredRule::Background => {
                    zq.fill(0.0);
                    zq[background.expect("checked above")] = 1.0;
                }
                UncoveredRule::Uniform => zq.fill(1.0 / n as f64),
            }
        }
    }
    let mut map = SegmentationMap {
        height: proposals.height,
        width: proposals.width,
        classes,
        z,
        coverage,
        labels: Vec::new(),
    };
    map.labels = argmax_map(&map);
    Ok(map)
}

/// Summation order that depends only on proposal contents, so permuting the
/// input leaves every floating-point sum unchanged.
fn canonical_order(proposals: &MaskProposalSet, scores: &ProposalClassScores) -> Vec<usize> {
    let mut order: Vec<usize> = (0..proposals.len()).collect();
    order.sort_by(|&a, &b| {
        let ka = proposals.masks[a].iter().chain(&scores.rows[a]);
        let kb = proposals.masks[b].iter().chain(&scores.rows[b]);
        ka.zip(kb)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order
}

/// Per-pixel argmax of `Z`, ties broken toward the lowest class id.
pub fn argmax_map(map: &SegmentationMap) -> Vec<ClassId> {
    let n = map.classes.len();
    map.z
        .chunks(n)
        .map(|zq| map.classes[argmax(zq).expect("class set is nonempty")])
        .collect()
}

/// Non-salient pixels become background; salient background pixels take
/// the most probable non-background class from `Z`. Salient foreground
/// labels are kept.
pub fn saliency_refine(
    map: &SegmentationMap,
    labels: &[ClassId],
    saliency: &SaliencyMap,
    background: ClassId,
) -> Result<Vec<ClassId>> {
    if labels.len() != saliency.salient.len()
        || saliency.height != map.height
        || saliency.width != map.width
    {
        return Err(Error::ShapeMismatch("saliency does not match segmentation".into()));
    }
    let foreground: Vec<usize> = (0..map.classes.len()).filter(|&j| map.classes[j] != background).collect();
    Ok(labels
        .iter()
        .zip(&saliency.salient)
        .enumerate()
        .map(|(q, (&label, &salient))| {
            if !salient {
                return background;
            }
            if label != background {
                return label;
            }
            let zq = map.distribution(q);
            let scores: Vec<f64> = foreground.iter().map(|&j| zq[j]).collect();
            argmax(&scores).map(|i| map.classes[foreground[i]]).unwrap_or(background)
        })
        .collect())
}

#[derive(Debug, Clone)]
pub enum InferenceMode<'a> {
    ZeroShot,
    FewShot { support: BTreeSet<ClassId>, saliency: &'a SaliencyMap },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceParams {
    pub tau: f64,
    pub threshold: f64,
    pub uncovered: UncoveredRule,
}

impl Default for InferenceParams {
    fn default() -> Self {
        Self { tau: 0.01, threshold: DEFAULT_BINARIZE_THRESHOLD, uncovered: UncoveredRule::Background }
    }
}

/// Zero-shot: classify over the full class set of `embeddings`.
/// Few-shot: classify over support classes plus background, then refine with
/// saliency. `embeddings` must cover every class that may be predicted.
pub fn infer(
    scene: &Scene,
    proposals: &MaskProposalSet,
    encoder: &ImageEncoderWeights,
    embeddings: &ClassEmbeddings,
    mode: &InferenceMode<'_>,
    params: &InferenceParams,
) -> Result<SegmentationMap> {
    match mode {
        InferenceMode::ZeroShot => {
            let scores = classify_segments(scene, proposals, encoder, embeddings, params.tau, params.threshold)?;
            aggregate(proposals, &scores, params.uncovered)
        }
        InferenceMode::FewShot { support, saliency } => {
            if support.is_empty() {
                return Err(Error::ConfigInvalid("few-shot support set is empty".into()));
            }
            let mut allowed: BTreeSet<ClassId> = support.clone();
            allowed.insert(ClassId::BACKGROUND);
            let restricted = embeddings.restricted(&allowed)?;
            let scores = classify_segments(scene, proposals, encoder, &restricted, params.tau, params.threshold)?;
            let map = aggregate(proposals, &scores, params.uncovered)?;
            let refined = saliency_refine(&map, map.labels(), saliency, ClassId::BACKGROUND)?;
            Ok(map.with_labels(refined))
        }
    }
}
