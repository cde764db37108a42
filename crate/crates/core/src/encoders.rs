//! Frozen stand-ins for the vision-language encoders.
//!
//! The text encoder pools its input tokens with a single attention query,
//! runs a two-layer MLP and L2-normalizes. It exposes an exact
//! vector-Jacobian product with respect to the tokens so prompts can be
//! trained through it; none of the weight types offers a mutating method.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, cosine_sim, softmax_slice, Matrix, RngStream, Vector, MIN_NORM};
use crate::world::Scene;
use crate::ClassId;

const BANK_STREAM: u64 = 0xba4c;
const TEXT_STREAM: u64 = 0x7e47;
const IMAGE_STREAM: u64 = 0x1a6e;

/// Minimum total mask weight for a masked embedding.
pub const MIN_MASK_MASS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    Relu,
    Identity,
}

impl Nonlinearity {
    fn apply(self, z: f64) -> f64 {
        match self {
            Nonlinearity::Relu => z.max(0.0),
            Nonlinearity::Identity => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Nonlinearity::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Nonlinearity::Identity => 1.0,
        }
    }
}

/// Borrowed view of the frozen encoders and class-embedding bank.
#[derive(Debug, Clone, Copy)]
pub struct FrozenEncoders<'a> {
    pub text: &'a TextEncoderWeights,
    pub image: &'a ImageEncoderWeights,
    pub bank: &'a ClassEmbeddingBank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEmbeddingBank {
    d: usize,
    seed: u64,
    entries: BTreeMap<ClassId, Vector>,
}

impl ClassEmbeddingBank {
    /// Draws a unit-norm embedding per class from a per-class stream.
    ///
    /// A draw whose |cosine| with an earlier entry reaches 0.9 is discarded
    /// and redrawn from the next sub-stream of that class.
    pub fn generate(seed: u64, class_ids: &[ClassId], d: usize) -> Result<Self> {
        if d < 2 {
            return Err(Error::ConfigInvalid(format!("embedding dimension {d} < 2")));
        }
        let root = RngStream::new(seed, BANK_STREAM);
        let mut entries: BTreeMap<ClassId, Vector> = BTreeMap::new();
        for &id in class_ids {
            if entries.contains_key(&id) {
                return Err(Error::DuplicateClassId(id));
            }
            let class_stream = root.derive(u64::from(id.0));
            let mut accepted = None;
            for attempt in 0..100 {
                let mut rng = class_stream.derive(attempt);
                let raw = Vector::from_raw(rng.normal_vec(d, 1.0));
                let Ok(candidate) = raw.normalized() else { continue };
                let separated = entries
                    .values()
                    .all(|e| cosine_sim(e, &candidate).map(|c| c.abs() < 0.9).unwrap_or(false));
                if separated {
                    accepted = Some(candidate);
                    break;
                }
            }
            let entry = accepted.ok_or_else(|| {
                Error::ConfigInvalid(format!("cannot separate class {id} in dimension {d}"))
            })?;
            entries.insert(id, entry);
        }
        Ok(Self { d, seed, entries })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn get(&self, id: ClassId) -> Result<&Vector> {
        self.entries.get(&id).ok_or(Error::UnknownClass(id))
    }

    pub fn contains(&self, id: ClassId) -> bool {
        self.entries.contains_key(&id)
    }

    pub fn class_ids(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.entries.keys().copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderWeights {
    seed: u64,
    query: Vector,
    w1: Matrix,
    b1: Vector,
    w2: Matrix,
    b2: Vector,
    nonlinearity: Nonlinearity,
}

/// Intermediate values of one text-encoder forward pass.
struct TextForward {
    attention: Vec<f64>,
    pooled: Vec<f64>,
    pre_activation: Vec<f64>,
    raw_norm: f64,
    output: Vec<f64>,
}

impl TextEncoderWeights {
    /// i.i.d. normal weights with standard deviation `1/√d`; zero biases.
    pub fn seeded(seed: u64, d: usize, hidden: usize, nonlinearity: Nonlinearity) -> Self {
        let mut rng = RngStream::new(seed, TEXT_STREAM);
        let std = 1.0 / (d as f64).sqrt();
        let query = Vector::from_raw(rng.normal_vec(d, std));
        let w1 = Matrix::from_fn(hidden, d, |_, _| rng.normal() * std);
        let w2 = Matrix::from_fn(d, hidden, |_, _| rng.normal() * std);
        let (b1, b2) = (Vector::zeros(hidden), Vector::zeros(d));
        Self { seed, query, w1, b1, w2, b2, nonlinearity }
    }

    pub fn from_parts(
        query: Vector,
        w1: Matrix,
        b1: Vector,
        w2: Matrix,
        b2: Vector,
        nonlinearity: Nonlinearity,
    ) -> Result<Self> {
        let d = query.dim();
        let hidden = w1.rows();
        if w1.cols() != d {
            return Err(Error::DimensionMismatch { expected: d, actual: w1.cols() });
        }
        b1.check_dim(hidden)?;
        if w2.rows() != d || w2.cols() != hidden {
            return Err(Error::ShapeMismatch(format!(
                "second layer is {}x{}, expected {d}x{hidden}",
                w2.rows(),
                w2.cols()
            )));
        }
        b2.check_dim(d)?;
        Ok(Self { seed: 0, query, w1, b1, w2, b2, nonlinearity })
    }

    pub fn dim(&self) -> usize {
        self.query.dim()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn nonlinearity(&self) -> Nonlinearity {
        self.nonlinearity
    }

    /// Product `W2·W1` of the two layers (meaningful as a linear map only in
    /// identity mode).
    pub fn layer_product(&self) -> Matrix {
        self.w2.matmul(&self.w1).expect("layer shapes checked at construction")
    }

    fn check_tokens(&self, tokens: &Matrix) -> Result<()> {
        if tokens.rows() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), actual: tokens.rows() });
        }
        Ok(())
    }

    fn forward(&self, tokens: &Matrix) -> Result<TextForward> {
        self.check_tokens(tokens)?;
        let (d, m) = (tokens.rows(), tokens.cols());
        let q = self.query.as_slice();
        let scores: Vec<f64> = (0..m)
            .map(|j| (0..d).map(|r| q[r] * tokens.get(r, j)).sum())
            .collect();
        let attention = softmax_slice(&scores, 1.0)?;
        let pooled: Vec<f64> = (0..d)
            .map(|r| (0..m).map(|j| attention[j] * tokens.get(r, j)).sum())
            .collect();
        let mut pre_activation = self.w1.matvec(&pooled)?;
        for (z, b) in pre_activation.iter_mut().zip(self.b1.as_slice()) {
            *z += b;
        }
        let hidden: Vec<f64> = pre_activation.iter().map(|&z| self.nonlinearity.apply(z)).collect();
        let mut raw = self.w2.matvec(&hidden)?;
        for (u, b) in raw.iter_mut().zip(self.b2.as_slice()) {
            *u += b;
        }
        let raw_norm = numerics::norm(&raw);
        if raw_norm < MIN_NORM {
            return Err(Error::ZeroNorm(raw_norm));
        }
        let output = raw.iter().map(|u| u / raw_norm).collect();
        Ok(TextForward { attention, pooled, pre_activation, raw_norm, output })
    }

    /// Unit-norm text embedding of a `d × m` token matrix.
    pub fn encode(&self, tokens: &Matrix) -> Result<Vector> {
        Ok(Vector::from_raw(self.forward(tokens)?.output))
    }

    /// Gradient of `⟨encode(tokens), upstream⟩` with respect to every token
    /// entry, returned in the shape of `tokens`.
    pub fn encode_grad(&self, tokens: &Matrix, upstream: &Vector) -> Result<Matrix> {
        upstream.check_dim(self.dim())?;
        let fw = self.forward(tokens)?;
        Ok(self.backward(tokens, &fw, upstream.as_slice()))
    }

    fn backward(&self, tokens: &Matrix, fw: &TextForward, upstream: &[f64]) -> Matrix {
        let (d, m) = (tokens.rows(), tokens.cols());
        // normalization: dL/du = (g − t⟨t,g⟩) / ‖u‖
        let along = numerics::dot(&fw.output, upstream);
        let d_raw: Vec<f64> = upstream
            .iter()
            .zip(&fw.output)
            .map(|(g, t)| (g - t * along) / fw.raw_norm)
            .collect();
        let d_hidden = self.w2.matvec_t(&d_raw).expect("shape");
        let d_pre: Vec<f64> = d_hidden
            .iter()
            .zip(&fw.pre_activation)
            .map(|(g, &z)| g * self.nonlinearity.derivative(z))
            .collect();
        let d_pooled = self.w1.matvec_t(&d_pre).expect("shape");

        // pooled = Σ_j a_j col_j, a = softmax(q·col_j)
        let pooled_dot = numerics::dot(&fw.pooled, &d_pooled);
        let q = self.query.as_slice();
        let mut grad = Matrix::zeros(d, m);
        for j in 0..m {
            let a = fw.attention[j];
            let col_dot: f64 = (0..d).map(|r| tokens.get(r, j) * d_pooled[r]).sum();
            let d_score = a * (col_dot - pooled_dot);
            for r in 0..d {
                grad.set(r, j, a * d_pooled[r] + d_score * q[r]);
            }
        }
        grad
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEncoderWeights {
    seed: u64,
    projection: Matrix,
}

impl ImageEncoderWeights {
    /// Random orthogonal projection: Q of the QR factorization of a seeded
    /// Gaussian matrix, with column signs fixed by R's diagonal.
    pub fn seeded(seed: u64, d: usize) -> Self {
        let mut rng = RngStream::new(seed, IMAGE_STREAM);
        let gaussian = nalgebra::DMatrix::from_fn(d, d, |_, _| rng.normal());
        let qr = gaussian.qr();
        let (q, r) = (qr.q(), qr.r());
        let projection = Matrix::from_fn(d, d, |i, j| {
            let sign = if r[(j, j)] < 0.0 { -1.0 } else { 1.0 };
            q[(i, j)] * sign
        });
        Self { seed, projection }
    }

    pub fn from_matrix(projection: Matrix) -> Result<Self> {
        if projection.rows() != projection.cols() {
            return Err(Error::ShapeMismatch("image projection must be square".into()));
        }
        Ok(Self { seed: 0, projection })
    }

    pub fn dim(&self) -> usize {
        self.projection.rows()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn projection(&self) -> &Matrix {
        &self.projection
    }

    /// Unit-norm projection of a raw feature vector.
    pub fn embed_feature(&self, feature: &[f64]) -> Result<Vector> {
        Vector::from_raw(self.projection.matvec(feature)?).normalized()
    }

    /// `normalize(W · Σ m(q)φ(q) / Σ m(q))` over the scene's pixels.
    pub fn encode(&self, scene: &Scene, mask: &[f64]) -> Result<Vector> {
        if mask.len() != scene.pixel_count() {
            return Err(Error::ShapeMismatch(format!(
                "mask has {} entries, scene has {} pixels",
                mask.len(),
                scene.pixel_count()
            )));
        }
        if scene.dim() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), actual: scene.dim() });
        }
        let mass: f64 = mask.iter().sum();
        if mass < MIN_MASK_MASS {
            return Err(Error::EmptyMask);
        }
        let mut mean = vec![0.0; scene.dim()];
        for (q, &w) in mask.iter().enumerate() {
            if w != 0.0 {
                for (acc, f) in mean.iter_mut().zip(scene.feature(q)) {
                    *acc += w * f;
                }
            }
        }
        for v in &mut mean {
            *v /= mass;
        }
        self.embed_feature(&mean)
    }
}
