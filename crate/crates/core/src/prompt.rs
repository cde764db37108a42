//! Prompt learning with batch-mean injection.
//!
//! A shared context `V = [v_1 … v_k]` is concatenated with each class
//! embedding `w_c`. Image embeddings `x_i` of the current batch pass through
//! a two-layer adapter `f_i = h_θ(x_i)`; their mean `μ` is added, scaled by
//! `λ`, to every column of every class prompt before text encoding. Classes
//! are then scored by temperature softmax over cosine similarity.
//!
//! Training is plain gradient descent on `V` and `θ` with mean cross-entropy
//! over `(image, present class)` pairs; encoders and class embeddings stay
//! frozen.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::encoders::FrozenEncoders;
use crate::error::{Error, Result};
use crate::numerics::{self, cosine_sim, softmax_slice, Matrix, RngStream, Vector};
use crate::world::{Scene, WeakLabel};
use crate::ClassId;

const CONTEXT_STREAM: u64 = 0xc7c7;
const ADAPTER_STREAM: u64 = 0xada9;
const BATCH_STREAM: u64 = 0xba7c;

pub const DEFAULT_LAMBDA: f64 = 0.01;
pub const DEFAULT_TAU: f64 = 0.01;
pub const DEFAULT_BATCH_SIZE: usize = 16;
pub const CONTEXT_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    Normal,
    Zeros,
}

/// Learnable prompt tokens, stored as the columns of a `d × k` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ContextVector {
    tokens: Matrix,
}

impl ContextVector {
    pub fn from_matrix(tokens: Matrix) -> Self {
        Self { tokens }
    }

    pub fn tokens(&self) -> &Matrix {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.cols()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.tokens.rows()
    }
}

pub fn init_context(k: usize, d: usize, mode: InitMode, seed: u64) -> Result<ContextVector> {
    if k == 0 || d < 2 {
        return Err(Error::ConfigInvalid(format!("context needs k >= 1 and d >= 2 (got {k}, {d})")));
    }
    let tokens = match mode {
        InitMode::Zeros => Matrix::zeros(d, k),
        InitMode::Normal => {
            let mut rng = RngStream::new(seed, CONTEXT_STREAM);
            Matrix::from_fn(d, k, |_, _| rng.normal() * CONTEXT_INIT_STD)
        }
    };
    Ok(ContextVector { tokens })
}

/// Two affine layers with a ReLU between them: `A2·relu(A1·x + c1) + c2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterParams {
    pub a1: Matrix,
    pub c1: Vector,
    pub a2: Matrix,
    pub c2: Vector,
}

impl AdapterParams {
    /// Layer weights i.i.d. `N(0, 1/d)`, biases zero.
    pub fn seeded(d: usize, seed: u64) -> Self {
        let mut rng = RngStream::new(seed, ADAPTER_STREAM);
        let std = 1.0 / (d as f64).sqrt();
        let a1 = Matrix::from_fn(d, d, |_, _| rng.normal() * std);
        let a2 = Matrix::from_fn(d, d, |_, _| rng.normal() * std);
        Self { a1, c1: Vector::zeros(d), a2, c2: Vector::zeros(d) }
    }

    pub fn zeros(d: usize) -> Self {
        Self { a1: Matrix::zeros(d, d), c1: Vector::zeros(d), a2: Matrix::zeros(d, d), c2: Vector::zeros(d) }
    }

    pub fn dim(&self) -> usize {
        self.c2.dim()
    }

    /// `A1, c1, A2, c2` concatenated.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(self.a1.as_slice());
        out.extend_from_slice(self.c1.as_slice());
        out.extend_from_slice(self.a2.as_slice());
        out.extend_from_slice(self.c2.as_slice());
        out
    }

    pub fn from_flat(d: usize, flat: &[f64]) -> Result<Self> {
        let (m, v) = (d * d, d);
        if flat.len() != 2 * (m + v) {
            return Err(Error::DimensionMismatch { expected: 2 * (m + v), actual: flat.len() });
        }
        let (a1, rest) = flat.split_at(m);
        let (c1, rest) = rest.split_at(v);
        let (a2, c2) = rest.split_at(m);
        Ok(Self {
            a1: Matrix::new(d, d, a1.to_vec())?,
            c1: Vector::new(c1.to_vec())?,
            a2: Matrix::new(d, d, a2.to_vec())?,
            c2: Vector::new(c2.to_vec())?,
        })
    }

    fn hidden(&self, x: &Vector) -> Result<Vec<f64>> {
        let mut z = self.a1.matvec(x.as_slice())?;
        for (zi, c) in z.iter_mut().zip(self.c1.as_slice()) {
            *zi += c;
        }
        Ok(z)
    }

    fn step(&mut self, grad: &AdapterParams, lr: f64) {
        axpy(self.a1.as_mut_slice(), -lr, grad.a1.as_slice());
        axpy(self.a2.as_mut_slice(), -lr, grad.a2.as_slice());
        self.c1 = Vector::from_raw(sub_scaled(self.c1.as_slice(), lr, grad.c1.as_slice()));
        self.c2 = Vector::from_raw(sub_scaled(self.c2.as_slice(), lr, grad.c2.as_slice()));
    }
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn sub_scaled(y: &[f64], a: f64, x: &[f64]) -> Vec<f64> {
    y.iter().zip(x).map(|(yi, xi)| yi - a * xi).collect()
}

pub fn adapter_forward(theta: &AdapterParams, x: &Vector) -> Result<Vector> {
    x.check_dim(theta.a1.cols())?;
    let hidden: Vec<f64> = theta.hidden(x)?.into_iter().map(|z| z.max(0.0)).collect();
    let mut out = theta.a2.matvec(&hidden)?;
    for (o, c) in out.iter_mut().zip(theta.c2.as_slice()) {
        *o += c;
    }
    Ok(Vector::from_raw(out))
}

/// `μ = (1/b) Σ f_i`.
pub fn batch_mean(features: &[Vector]) -> Result<Vector> {
    let first = features.first().ok_or(Error::EmptyBatch)?;
    let d = first.dim();
    let mut sum = vec![0.0; d];
    for f in features {
        f.check_dim(d)?;
        for (s, v) in sum.iter_mut().zip(f.as_slice()) {
            *s += v;
        }
    }
    let b = features.len() as f64;
    Ok(Vector::from_raw(sum.into_iter().map(|s| s / b).collect()))
}

/// `[v_1 … v_k | w_c]`: the class embedding is the last column.
pub fn build_class_prompt(context: &ContextVector, class_embedding: &Vector) -> Result<Matrix> {
    class_embedding.check_dim(context.dim())?;
    Ok(crate::world::prompt_matrix(&context.tokens, class_embedding))
}

/// Adds `λ·μ` to every column, the class-embedding column included.
pub fn inject(prompt: &Matrix, mu: &Vector, lambda: f64) -> Result<Matrix> {
    mu.check_dim(prompt.rows())?;
    if lambda == 0.0 {
        return Ok(prompt.clone());
    }
    let m = mu.as_slice();
    Ok(Matrix::from_fn(prompt.rows(), prompt.cols(), |r, c| prompt.get(r, c) + lambda * m[r]))
}

/// `p(y=c|x) = softmax_c(cos(x, t_c) / τ)`.
pub fn classify(x: &Vector, text_embeddings: &[Vector], tau: f64) -> Result<Vector> {
    if text_embeddings.is_empty() {
        return Err(Error::ConfigInvalid("no classes to score".into()));
    }
    let sims = text_embeddings
        .iter()
        .map(|t| cosine_sim(x, t))
        .collect::<Result<Vec<f64>>>()?;
    Ok(Vector::from_raw(softmax_slice(&sims, tau)?))
}

/// Whether class prompts receive the batch mean. `Plain` is the reference
/// path with the adapter and the mean removed entirely.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptPath {
    BatchMean,
    Plain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTrainConfig {
    pub lambda: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
    pub init: InitMode,
    pub context_tokens: usize,
    /// Treat `μ` as a constant when differentiating (no gradient into `θ`).
    pub stop_mean_grad: bool,
}

impl Default for PromptTrainConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            tau: DEFAULT_TAU,
            batch_size: DEFAULT_BATCH_SIZE,
            learning_rate: 0.1,
            steps: 500,
            seed: 0,
            init: InitMode::Normal,
            context_tokens: 4,
            stop_mean_grad: false,
        }
    }
}

impl PromptTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ConfigInvalid(m.to_string()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be a non-negative number");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::NonPositiveTemperature(self.tau));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.context_tokens == 0 {
            return bad("context needs at least one token");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedPrompts {
    pub context: ContextVector,
    pub adapter: AdapterParams,
    pub config: PromptTrainConfig,
}

impl LearnedPrompts {
    /// Initial state for `config` in dimension `d`.
    pub fn initial(config: &PromptTrainConfig, d: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            context: init_context(config.context_tokens, d, config.init, config.seed)?,
            adapter: AdapterParams::seeded(d, config.seed),
            config: config.clone(),
        })
    }

    /// Text embeddings `t_c^B` for `classes`, with `μ` taken from `batch`
    /// (full-image embeddings of the images scored together).
    pub fn class_embeddings(
        &self,
        encoders: FrozenEncoders<'_>,
        classes: &[ClassId],
        batch: &[Vector],
        path: PromptPath,
    ) -> Result<ClassEmbeddings> {
        let mu = match path {
            PromptPath::BatchMean => {
                let feats = batch
                    .iter()
                    .map(|x| adapter_forward(&self.adapter, x))
                    .collect::<Result<Vec<_>>>()?;
                Some(batch_mean(&feats)?)
            }
            PromptPath::Plain => None,
        };
        let vectors = classes
            .iter()
            .map(|&c| {
                let prompt = build_class_prompt(&self.context, encoders.bank.get(c)?)?;
                let prompt = match &mu {
                    Some(mu) => inject(&prompt, mu, self.config.lambda)?,
                    None => prompt,
                };
                encoders.text.encode(&prompt)
            })
            .collect::<Result<Vec<_>>>()?;
        ClassEmbeddings::new(classes.to_vec(), vectors, mu)
    }
}

/// Text embeddings for an ascending class list, materialized for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEmbeddings {
    classes: Vec<ClassId>,
    vectors: Vec<Vector>,
    mean: Option<Vector>,
}

impl ClassEmbeddings {
    pub fn new(classes: Vec<ClassId>, vectors: Vec<Vector>, mean: Option<Vector>) -> Result<Self> {
        if classes.len() != vectors.len() {
            return Err(Error::DimensionMismatch { expected: classes.len(), actual: vectors.len() });
        }
        if classes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::ConfigInvalid("class list must be strictly ascending".into()));
        }
        Ok(Self { classes, vectors, mean })
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn vectors(&self) -> &[Vector] {
        &self.vectors
    }

    pub fn batch_mean(&self) -> Option<&Vector> {
        self.mean.as_ref()
    }

    pub fn get(&self, class: ClassId) -> Option<&Vector> {
        self.classes.binary_search(&class).ok().map(|i| &self.vectors[i])
    }

    pub fn restricted(&self, keep: &BTreeSet<ClassId>) -> Result<Self> {
        let mut classes = Vec::new();
        let mut vectors = Vec::new();
        for &c in keep {
            let v = self.get(c).ok_or(Error::UnknownClass(c))?;
            classes.push(c);
            vectors.push(v.clone());
        }
        Self::new(classes, vectors, self.mean.clone())
    }
}

/// Anything that can produce class text embeddings for a batch.
pub trait PromptSource: Sync {
    fn embeddings(&self, classes: &[ClassId], batch: &[Vector]) -> Result<ClassEmbeddings>;

    /// Whether `embeddings` reads the batch at all.
    fn uses_batch(&self) -> bool {
        true
    }
}

/// Learned prompts bound to the frozen encoders.
#[derive(Debug, Clone, Copy)]
pub struct PromptModel<'a> {
    pub prompts: &'a LearnedPrompts,
    pub encoders: FrozenEncoders<'a>,
    pub path: PromptPath,
}

impl PromptSource for PromptModel<'_> {
    fn embeddings(&self, classes: &[ClassId], batch: &[Vector]) -> Result<ClassEmbeddings> {
        self.prompts.class_embeddings(self.encoders, classes, batch, self.path)
    }

    fn uses_batch(&self) -> bool {
        self.path == PromptPath::BatchMean
    }
}

/// Fixed text embeddings per class, independent of the batch.
#[derive(Debug, Clone)]
pub struct FixedEmbeddings {
    table: std::collections::BTreeMap<ClassId, Vector>,
}

impl FixedEmbeddings {
    pub fn new(table: std::collections::BTreeMap<ClassId, Vector>) -> Self {
        Self { table }
    }
}

impl PromptSource for FixedEmbeddings {
    fn embeddings(&self, classes: &[ClassId], _batch: &[Vector]) -> Result<ClassEmbeddings> {
        let vectors = classes
            .iter()
            .map(|c| self.table.get(c).cloned().ok_or(Error::UnknownClass(*c)))
            .collect::<Result<Vec<_>>>()?;
        ClassEmbeddings::new(classes.to_vec(), vectors, None)
    }

    fn uses_batch(&self) -> bool {
        false
    }
}

/// Loss and exact gradients for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptGrads {
    pub loss: f64,
    pub context: Matrix,
    pub adapter: AdapterParams,
}

/// One training example: a full-image embedding and its weak label.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddedExample<'a> {
    pub embedding: &'a Vector,
    pub label: &'a WeakLabel,
}

/// Loss and gradients for a batch of scenes with weak labels.
pub fn prompt_loss_and_grads(
    batch: &[(&Scene, &WeakLabel)],
    classes: &[ClassId],
    prompts: &LearnedPrompts,
    encoders: FrozenEncoders<'_>,
) -> Result<PromptGrads> {
    let embeddings = batch
        .iter()
        .map(|(scene, _)| encoders.image.encode(scene, &vec![1.0; scene.pixel_count()]))
        .collect::<Result<Vec<_>>>()?;
    let examples: Vec<EmbeddedExample<'_>> = embeddings
        .iter()
        .zip(batch)
        .map(|(embedding, (_, label))| EmbeddedExample { embedding, label })
        .collect();
    loss_and_grads(&examples, classes, prompts, encoders, PromptPath::BatchMean)
}

/// Loss and gradients on precomputed image embeddings.
#[allow(clippy::needless_range_loop)] // rows index several arrays at once
pub fn loss_and_grads(
    batch: &[EmbeddedExample<'_>],
    classes: &[ClassId],
    prompts: &LearnedPrompts,
    encoders: FrozenEncoders<'_>,
    path: PromptPath,
) -> Result<PromptGrads> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if classes.is_empty() {
        return Err(Error::ConfigInvalid("no training classes".into()));
    }
    let cfg = &prompts.config;
    let (theta, context) = (&prompts.adapter, &prompts.context);
    let d = context.dim();
    let k = context.len();
    let b = batch.len();

    // adapter forward and batch mean
    let mut pre = Vec::with_capacity(b);
    let mut feats = Vec::with_capacity(b);
    if path == PromptPath::BatchMean {
        for ex in batch {
            ex.embedding.check_dim(d)?;
            let z = theta.hidden(ex.embedding)?;
            let r: Vec<f64> = z.iter().map(|v| v.max(0.0)).collect();
            let mut f = theta.a2.matvec(&r)?;
            for (fi, c) in f.iter_mut().zip(theta.c2.as_slice()) {
                *fi += c;
            }
            pre.push(z);
            feats.push(Vector::from_raw(f));
        }
    }
    let mu = match path {
        PromptPath::BatchMean => Some(batch_mean(&feats)?),
        PromptPath::Plain => None,
    };

    // index labels against the class list
    let mut targets: Vec<Vec<usize>> = Vec::with_capacity(b);
    for ex in batch {
        let mut idx = Vec::new();
        for c in ex.label.classes() {
            encoders.bank.get(c)?;
            idx.push(classes.iter().position(|&k| k == c).ok_or(Error::UnknownClass(c))?);
        }
        targets.push(idx);
    }
    let pairs: usize = targets.iter().map(Vec::len).sum();
    if pairs == 0 {
        return Err(Error::ConfigInvalid("batch carries no labels".into()));
    }

    // class prompts and text embeddings
    let mut prompt_mats = Vec::with_capacity(classes.len());
    let mut texts = Vec::with_capacity(classes.len());
    for &c in classes {
        let prompt = build_class_prompt(context, encoders.bank.get(c)?)?;
        let prompt = match &mu {
            Some(mu) => inject(&prompt, mu, cfg.lambda)?,
            None => prompt,
        };
        texts.push(encoders.text.encode(&prompt)?);
        prompt_mats.push(prompt);
    }

    // scores, loss, and dL/ds
    let tau = cfg.tau;
    let norm_p = pairs as f64;
    let mut loss = 0.0;
    let mut d_sims = vec![vec![0.0; classes.len()]; b];
    let mut sims = vec![vec![0.0; classes.len()]; b];
    for (i, ex) in batch.iter().enumerate() {
        for (j, t) in texts.iter().enumerate() {
            sims[i][j] = cosine_sim(ex.embedding, t)?;
        }
        let logits: Vec<f64> = sims[i].iter().map(|s| s / tau).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        let probs = softmax_slice(&sims[i], tau)?;
        let n_i = targets[i].len() as f64;
        for &j in &targets[i] {
            loss -= (logits[j] - lse) / norm_p;
        }
        for j in 0..classes.len() {
            d_sims[i][j] = n_i * probs[j] / (tau * norm_p);
        }
        for &j in &targets[i] {
            d_sims[i][j] -= 1.0 / (tau * norm_p);
        }
    }

    // back through cosine and the text encoder
    let mut grad_context = Matrix::zeros(d, k);
    let mut grad_mu = vec![0.0; d];
    for (j, t) in texts.iter().enumerate() {
        let t_norm = t.norm();
        let mut upstream = vec![0.0; d];
        for (i, ex) in batch.iter().enumerate() {
            let g = d_sims[i][j];
            if g == 0.0 {
                continue;
            }
            let x_norm = ex.embedding.norm();
            let s = sims[i][j];
            for r in 0..d {
                upstream[r] += g
                    * (ex.embedding.as_slice()[r] / (x_norm * t_norm) - s * t.as_slice()[r] / (t_norm * t_norm));
            }
        }
        let grad_prompt = encoders.text.encode_grad(&prompt_mats[j], &Vector::from_raw(upstream))?;
        for r in 0..d {
            for col in 0..k {
                let v = grad_context.get(r, col) + grad_prompt.get(r, col);
                grad_context.set(r, col, v);
            }
            if mu.is_some() {
                let row_sum: f64 = (0..=k).map(|col| grad_prompt.get(r, col)).sum();
                grad_mu[r] += cfg.lambda * row_sum;
            }
        }
    }

    // back through the batch mean into the adapter
    let mut grad_adapter = AdapterParams::zeros(d);
    if path == PromptPath::BatchMean && !cfg.stop_mean_grad {
        let df: Vec<f64> = grad_mu.iter().map(|g| g / b as f64).collect();
        for (ex, z) in batch.iter().zip(&pre) {
            let r: Vec<f64> = z.iter().map(|v| v.max(0.0)).collect();
            grad_adapter.a2.add_outer(1.0, &df, &r);
            let dr = theta.a2.matvec_t(&df)?;
            let dz: Vec<f64> = dr.iter().zip(z).map(|(g, &zi)| if zi > 0.0 { *g } else { 0.0 }).collect();
            grad_adapter.a1.add_outer(1.0, &dz, ex.embedding.as_slice());
            grad_adapter.c1 = grad_adapter.c1.add(&Vector::from_raw(dz));
            grad_adapter.c2 = grad_adapter.c2.add(&Vector::from_raw(df.clone()));
        }
    }
    debug_assert!(numerics::norm(grad_context.as_slice()).is_finite());
    Ok(PromptGrads { loss, context: grad_context, adapter: grad_adapter })
}

/// Loss per step plus the final prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub prompts: LearnedPrompts,
    pub losses: Vec<f64>,
}

impl TrainOutcome {
    /// Mean loss over the first and last 10% of steps (at least one step each).
    pub fn loss_trend(&self) -> Option<(f64, f64)> {
        let n = self.losses.len();
        if n == 0 {
            return None;
        }
        let w = (n / 10).max(1);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((mean(&self.losses[..w]), mean(&self.losses[n - w..])))
    }
}

/// Trains `V` and `θ` by gradient descent on seeded mini-batches.
///
/// Batches are drawn by walking a fresh seeded permutation of the examples
/// each epoch.
pub fn train_prompts(
    examples: &[EmbeddedExample<'_>],
    classes: &[ClassId],
    config: &PromptTrainConfig,
    encoders: FrozenEncoders<'_>,
    path: PromptPath,
) -> Result<TrainOutcome> {
    let mut prompts = LearnedPrompts::initial(config, encoders.text.dim())?;
    train_from(&mut prompts, examples, classes, encoders, path).map(|losses| TrainOutcome { prompts, losses })
}

fn train_from(
    prompts: &mut LearnedPrompts,
    examples: &[EmbeddedExample<'_>],
    classes: &[ClassId],
    encoders: FrozenEncoders<'_>,
    path: PromptPath,
) -> Result<Vec<f64>> {
    let config = prompts.config.clone();
    if config.steps == 0 {
        return Ok(Vec::new());
    }
    if examples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut rng = RngStream::new(config.seed, BATCH_STREAM);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut cursor = order.len();
    let b = config.batch_size.min(examples.len());
    let mut losses = Vec::with_capacity(config.steps);
    let mut batch = Vec::with_capacity(b);
    for _ in 0..config.steps {
        batch.clear();
        while batch.len() < b {
            if cursor == order.len() {
                rng.shuffle(&mut order);
                cursor = 0;
            }
            batch.push(examples[order[cursor]]);
            cursor += 1;
        }
        let grads = loss_and_grads(&batch, classes, prompts, encoders, path)?;
        losses.push(grads.loss);
        axpy(prompts.context.tokens.as_mut_slice(), -config.learning_rate, grads.context.as_slice());
        if path == PromptPath::BatchMean && config.lambda != 0.0 {
            prompts.adapter.step(&grads.adapter, config.learning_rate);
        }
        if prompts.context.tokens.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("context vector during training"));
        }
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> Vector {
        Vector::new(x.to_vec()).unwrap()
    }

    #[test]
    fn init_modes() {
        let z = init_context(3, 4, InitMode::Zeros, 1).unwrap();
        assert!(z.tokens().as_slice().iter().all(|&x| x == 0.0));
        let a = init_context(3, 4, InitMode::Normal, 1).unwrap();
        let b = init_context(3, 4, InitMode::Normal, 1).unwrap();
        assert_eq!(a, b);
        assert!(init_context(0, 4, InitMode::Normal, 1).is_err());
    }

    #[test]
    fn init_std_is_small() {
        let c = init_context(16, 512, InitMode::Normal, 9).unwrap();
        let xs = c.tokens().as_slice();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
        assert!((0.015..=0.025).contains(&std), "std {std}");
    }

    #[test]
    fn adapter_examples() {
        let d = 3;
        let id = AdapterParams {
            a1: Matrix::identity(d),
            c1: Vector::zeros(d),
            a2: Matrix::identity(d),
            c2: Vector::zeros(d),
        };
        assert_eq!(adapter_forward(&id, &v(&[0.5, 1.0, 2.0])).unwrap(), v(&[0.5, 1.0, 2.0]));
        let sat = AdapterParams { c1: v(&[-1e6; 3]), c2: v(&[0.1, 0.2, 0.3]), ..id.clone() };
        assert_eq!(adapter_forward(&sat, &v(&[5.0, -2.0, 9.0])).unwrap(), v(&[0.1, 0.2, 0.3]));
        assert!(adapter_forward(&id, &v(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn adapter_flat_round_trip() {
        let a = AdapterParams::seeded(4, 3);
        assert_eq!(AdapterParams::from_flat(4, &a.to_flat()).unwrap(), a);
    }

    #[test]
    fn batch_mean_examples() {
        assert_eq!(batch_mean(&[v(&[1.0, 2.0])]).unwrap(), v(&[1.0, 2.0]));
        assert_eq!(batch_mean(&[v(&[1.0, 0.0]), v(&[0.0, 1.0])]).unwrap(), v(&[0.5, 0.5]));
        assert!(matches!(batch_mean(&[]), Err(Error::EmptyBatch)));
        assert!(batch_mean(&[v(&[1.0]), v(&[1.0, 2.0])]).is_err());
    }

    #[test]
    fn class_prompt_layout() {
        let ctx = ContextVector::from_matrix(Matrix::new(2, 1, vec![1.0, 0.0]).unwrap());
        let p = build_class_prompt(&ctx, &v(&[0.0, 1.0])).unwrap();
        assert_eq!(p, Matrix::identity(2));
        assert_eq!(p.column(0), v(&[1.0, 0.0]));
        assert_eq!(p.column(1), v(&[0.0, 1.0]));
        assert!(build_class_prompt(&ctx, &v(&[1.0, 2.0, 3.0])).is_err());
    }

    #[test]
    fn inject_examples() {
        let p = Matrix::new(2, 3, vec![1.0, -0.0, 2.0, 3.5, 0.25, -1.0]).unwrap();
        let mu = v(&[0.3, -7.0]);
        let same = inject(&p, &mu, 0.0).unwrap();
        let bits = |m: &Matrix| m.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&same), bits(&p));
        let ones = inject(&p, &v(&[1.0, 1.0]), 1.0).unwrap();
        for (a, b) in ones.as_slice().iter().zip(p.as_slice()) {
            assert_eq!(*a, b + 1.0);
        }
        assert!(inject(&p, &v(&[1.0]), 1.0).is_err());
    }

    struct Fixture {
        text: crate::encoders::TextEncoderWeights,
        image: crate::encoders::ImageEncoderWeights,
        bank: crate::encoders::ClassEmbeddingBank,
        scenes: Vec<Scene>,
        labels: Vec<WeakLabel>,
        classes: Vec<ClassId>,
    }

    impl Fixture {
        fn new(seed: u64, nl: crate::encoders::Nonlinearity) -> Self {
            let d = 8;
            let classes: Vec<ClassId> = (1..=3).map(ClassId).collect();
            let mut rng = RngStream::new(seed, 77);
            let scenes: Vec<Scene> = (0..2)
                .map(|_| {
                    let grid = vec![ClassId::BACKGROUND; 4];
                    Scene::from_features(2, 2, d, grid, rng.normal_vec(4 * d, 1.0)).unwrap()
                })
                .collect();
            let labels = vec![
                WeakLabel::from_classes([classes[rng.below(3) as usize]]),
                WeakLabel::from_classes([ClassId(1), ClassId(3)]),
            ];
            Self {
                text: crate::encoders::TextEncoderWeights::seeded(seed, d, d, nl),
                image: crate::encoders::ImageEncoderWeights::seeded(seed, d),
                bank: crate::encoders::ClassEmbeddingBank::generate(seed, &classes, d).unwrap(),
                scenes,
                labels,
                classes,
            }
        }

        fn encoders(&self) -> FrozenEncoders<'_> {
            FrozenEncoders { text: &self.text, image: &self.image, bank: &self.bank }
        }

        fn prompts(&self, lambda: f64, tau: f64, seed: u64) -> LearnedPrompts {
            let config = PromptTrainConfig { lambda, tau, context_tokens: 3, seed, ..Default::default() };
            let mut p = LearnedPrompts::initial(&config, 8).unwrap();
            let mut rng = RngStream::new(seed, 78);
            p.context = ContextVector::from_matrix(Matrix::from_fn(8, 3, |_, _| rng.normal() * 0.5));
            p.adapter.c1 = Vector::from_raw(rng.normal_vec(8, 0.3));
            p
        }

        fn loss(&self, p: &LearnedPrompts) -> Result<PromptGrads> {
            let batch: Vec<(&Scene, &WeakLabel)> = self.scenes.iter().zip(&self.labels).collect();
            prompt_loss_and_grads(&batch, &self.classes, p, self.encoders())
        }
    }

    fn flat(p: &LearnedPrompts) -> Vec<f64> {
        let mut x = p.context.tokens().as_slice().to_vec();
        x.extend(p.adapter.to_flat());
        x
    }

    fn unflat(template: &LearnedPrompts, x: &[f64]) -> LearnedPrompts {
        let n = template.context.tokens().as_slice().len();
        let mut p = template.clone();
        p.context = ContextVector::from_matrix(Matrix::new(8, 3, x[..n].to_vec()).unwrap());
        p.adapter = AdapterParams::from_flat(8, &x[n..]).unwrap();
        p
    }

    #[test]
    fn gradients_match_finite_differences() {
        use crate::encoders::Nonlinearity;
        for (seed, nl) in [(1, Nonlinearity::Relu), (2, Nonlinearity::Identity), (4, Nonlinearity::Relu)] {
            let fx = Fixture::new(seed, nl);
            let p = fx.prompts(0.5, 0.2, seed);
            let g = fx.loss(&p).unwrap();
            let mut analytic = g.context.as_slice().to_vec();
            analytic.extend(g.adapter.to_flat());
            let numeric =
                numerics::finite_diff_grad(|x| fx.loss(&unflat(&p, x)).map(|g| g.loss), &flat(&p), 1e-5).unwrap();
            for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
                assert!((a - n).abs() <= 1e-4 * a.abs().max(n.abs()) + 1e-8, "seed {seed} coord {i}: {a} vs {n}");
            }
            assert!(g.adapter.to_flat().iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn zero_lambda_leaves_adapter_without_gradient() {
        let fx = Fixture::new(4, crate::encoders::Nonlinearity::Relu);
        let g = fx.loss(&fx.prompts(0.0, 0.01, 4)).unwrap();
        assert!(g.adapter.to_flat().iter().all(|&v| v == 0.0));
        let stopped = PromptTrainConfig { stop_mean_grad: true, ..fx.prompts(0.5, 0.01, 4).config };
        let mut p = fx.prompts(0.5, 0.01, 4);
        p.config = stopped;
        assert!(fx.loss(&p).unwrap().adapter.to_flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unknown_label_is_rejected() {
        let mut fx = Fixture::new(5, crate::encoders::Nonlinearity::Relu);
        fx.labels[0] = WeakLabel::from_classes([ClassId(9)]);
        assert!(matches!(fx.loss(&fx.prompts(0.01, 0.01, 5)), Err(Error::UnknownClass(ClassId(9)))));
    }

    #[test]
    fn batch_shift_moves_prompts_by_lambda_delta() {
        let feats = [v(&[1.0, 2.0]), v(&[-3.0, 0.5])];
        let delta = v(&[0.25, -0.5]);
        let shifted: Vec<Vector> = feats.iter().map(|f| f.add(&delta)).collect();
        let mu = batch_mean(&feats).unwrap();
        let mu_s = batch_mean(&shifted).unwrap();
        for (a, (b, d)) in mu_s.as_slice().iter().zip(mu.as_slice().iter().zip(delta.as_slice())) {
            assert!((a - b - d).abs() < 1e-15);
        }
        let prompt = Matrix::new(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let lambda = 0.25;
        let p0 = inject(&prompt, &mu, lambda).unwrap();
        let p1 = inject(&prompt, &mu_s, lambda).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                assert!((p1.get(r, c) - p0.get(r, c) - lambda * delta.as_slice()[r]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_steps_and_determinism() {
        let fx = Fixture::new(6, crate::encoders::Nonlinearity::Identity);
        let xs: Vec<Vector> =
            fx.scenes.iter().map(|s| fx.image.encode(s, &[1.0; 4]).unwrap()).collect();
        let examples: Vec<EmbeddedExample<'_>> =
            xs.iter().zip(&fx.labels).map(|(embedding, label)| EmbeddedExample { embedding, label }).collect();
        let cfg = PromptTrainConfig { steps: 0, batch_size: 2, ..Default::default() };
        let out = train_prompts(&examples, &fx.classes, &cfg, fx.encoders(), PromptPath::BatchMean).unwrap();
        assert_eq!(out.prompts, LearnedPrompts::initial(&cfg, 8).unwrap());
        assert!(out.losses.is_empty());
        let cfg = PromptTrainConfig { steps: 30, batch_size: 2, lambda: 0.1, ..Default::default() };
        let a = train_prompts(&examples, &fx.classes, &cfg, fx.encoders(), PromptPath::BatchMean).unwrap();
        let b = train_prompts(&examples, &fx.classes, &cfg, fx.encoders(), PromptPath::BatchMean).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let (first, last) = a.loss_trend().unwrap();
        assert!(last <= first, "{first} -> {last}");
    }

    #[test]
    fn zero_lambda_matches_plain_path() {
        let fx = Fixture::new(7, crate::encoders::Nonlinearity::Relu);
        let xs: Vec<Vector> =
            fx.scenes.iter().map(|s| fx.image.encode(s, &[1.0; 4]).unwrap()).collect();
        let examples: Vec<EmbeddedExample<'_>> =
            xs.iter().zip(&fx.labels).map(|(embedding, label)| EmbeddedExample { embedding, label }).collect();
        let cfg = PromptTrainConfig { steps: 20, batch_size: 1, lambda: 0.0, ..Default::default() };
        let a = train_prompts(&examples, &fx.classes, &cfg, fx.encoders(), PromptPath::BatchMean).unwrap();
        let b = train_prompts(&examples, &fx.classes, &cfg, fx.encoders(), PromptPath::Plain).unwrap();
        assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
    }

    #[test]
    fn classify_examples() {
        let t = [v(&[1.0, 0.0]), v(&[0.0, 1.0])];
        let p = classify(&v(&[1.0, 0.0]), &t, 0.01).unwrap();
        assert!(p.as_slice()[0] >= 1.0 - 1e-40);
        let same = [v(&[0.3, 0.4]), v(&[0.3, 0.4]), v(&[0.3, 0.4])];
        let p = classify(&v(&[1.0, 2.0]), &same, 0.01).unwrap();
        for &x in p.as_slice() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(classify(&v(&[1.0, 2.0]), &t[..1], 0.01).unwrap().as_slice(), &[1.0]);
    }
}
