use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::encoders::{
    ClassEmbeddingBank, FrozenEncoders, ImageEncoderWeights, Nonlinearity, TextEncoderWeights,
};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngStream, Vector};
use crate::ClassId;

const HIDDEN_CONTEXT_STREAM: u64 = 0xc0de;
const RANDOM_PROTOTYPE_STREAM: u64 = 0x9a07;
const HIDDEN_CONTEXT_DRAWS: u64 = 32;

/// How class prototypes relate to the frozen encoders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrototypeMode {
    /// `e_c ∝ W_img⁻¹ · g([V* | w_c])` for a hidden context `V*`, so a shared
    /// learned context can align text and image embeddings for every class.
    Aligned,
    /// Independent random unit vectors.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub seed: u64,
    pub dim: usize,
    pub classes: usize,
    pub nonlinearity: Nonlinearity,
    pub prototypes: PrototypeMode,
    pub hidden_tokens: usize,
    pub hidden_std: f64,
    /// Norm of the background prototype; class prototypes have unit norm.
    pub background_scale: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dim: 16,
            classes: 20,
            nonlinearity: Nonlinearity::Relu,
            prototypes: PrototypeMode::Aligned,
            hidden_tokens: 4,
            hidden_std: 0.2,
            background_scale: 0.1,
        }
    }
}

/// Frozen encoders, the class-embedding bank, and the class prototypes
/// shared by every dataset drawn from the same world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    config: WorldConfig,
    text: TextEncoderWeights,
    image: ImageEncoderWeights,
    bank: ClassEmbeddingBank,
    hidden_context: Matrix,
    prototypes: BTreeMap<ClassId, Vector>,
}

impl World {
    pub fn generate(config: &WorldConfig) -> Result<Self> {
        let d = config.dim;
        if !(config.background_scale > 0.0 && config.background_scale.is_finite()) {
            return Err(Error::ConfigInvalid(format!(
                "background scale must be positive, got {}",
                config.background_scale
            )));
        }
        if d < 2 || config.classes == 0 || config.hidden_tokens == 0 {
            return Err(Error::ConfigInvalid(format!(
                "world needs dim >= 2, classes >= 1 and hidden tokens >= 1 (got {d}, {}, {})",
                config.classes, config.hidden_tokens
            )));
        }
        let ids: Vec<ClassId> = (0..=config.classes as u32).map(ClassId).collect();
        let text = TextEncoderWeights::seeded(config.seed, d, d, config.nonlinearity);
        let image = ImageEncoderWeights::seeded(config.seed, d);
        let bank = ClassEmbeddingBank::generate(config.seed, &ids, d)?;
        let root = RngStream::new(config.seed, HIDDEN_CONTEXT_STREAM);
        let mut last = None;
        for attempt in 0..HIDDEN_CONTEXT_DRAWS {
            // a relu encoder can switch off for some class; redraw the context
            let mut rng = if attempt == 0 {
                root.clone()
            } else {
                root.derive(attempt)
            };
            let hidden_context = Matrix::from_fn(d, config.hidden_tokens, |_, _| {
                rng.normal() * config.hidden_std
            });
            match build_prototypes(config, &text, &image, &bank, &hidden_context, &ids) {
                Ok(prototypes) => {
                    return Ok(Self {
                        config: config.clone(),
                        text,
                        image,
                        bank,
                        hidden_context,
                        prototypes,
                    })
                }
                Err(Error::ZeroNorm(n)) => last = Some(n),
                Err(e) => return Err(e),
            }
        }
        Err(Error::ConfigInvalid(format!(
            "no hidden context in {HIDDEN_CONTEXT_DRAWS} draws gives every class a text embedding (last norm {:e})",
            last.unwrap_or(0.0)
        )))
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn text_encoder(&self) -> &TextEncoderWeights {
        &self.text
    }

    pub fn image_encoder(&self) -> &ImageEncoderWeights {
        &self.image
    }

    pub fn bank(&self) -> &ClassEmbeddingBank {
        &self.bank
    }

    pub fn encoders(&self) -> FrozenEncoders<'_> {
        FrozenEncoders {
            text: &self.text,
            image: &self.image,
            bank: &self.bank,
        }
    }

    /// Non-background classes, ascending.
    pub fn taxonomy(&self) -> Vec<ClassId> {
        (1..=self.config.classes as u32).map(ClassId).collect()
    }

    pub fn prototype(&self, class: ClassId) -> Result<&Vector> {
        self.prototypes
            .get(&class)
            .ok_or(Error::UnknownClass(class))
    }

    /// Image-side embedding of a noiseless, offset-free region of `class`.
    pub fn oracle_embedding(&self, class: ClassId) -> Result<Vector> {
        self.image.embed_feature(self.prototype(class)?.as_slice())
    }

    #[cfg(test)]
    pub(crate) fn hidden_context(&self) -> &Matrix {
        &self.hidden_context
    }
}

fn build_prototypes(
    config: &WorldConfig,
    text: &TextEncoderWeights,
    image: &ImageEncoderWeights,
    bank: &ClassEmbeddingBank,
    hidden_context: &Matrix,
    ids: &[ClassId],
) -> Result<BTreeMap<ClassId, Vector>> {
    let d = config.dim;
    let mut prototypes = BTreeMap::new();
    match config.prototypes {
        PrototypeMode::Aligned => {
            let proj = image.projection();
            let lu = DMatrix::from_row_slice(d, d, proj.as_slice()).lu();
            for &id in ids {
                let target = text.encode(&prompt_matrix(hidden_context, bank.get(id)?))?;
                let solved = lu
                    .solve(&DVector::from_column_slice(target.as_slice()))
                    .ok_or_else(|| Error::ConfigInvalid("image projection is singular".into()))?;
                let proto = Vector::new(solved.iter().copied().collect())?.normalized()?;
                prototypes.insert(id, proto);
            }
        }
        PrototypeMode::Random => {
            let root = RngStream::new(config.seed, RANDOM_PROTOTYPE_STREAM);
            for &id in ids {
                let mut r = root.derive(u64::from(id.0));
                prototypes.insert(id, Vector::from_raw(r.normal_vec(d, 1.0)).normalized()?);
            }
        }
    }
    if let Some(bg) = prototypes.get_mut(&ClassId::BACKGROUND) {
        *bg = bg.scaled(config.background_scale);
    }
    Ok(prototypes)
}

/// `[v_1 … v_k | w]` as a `d × (k+1)` matrix.
pub(crate) fn prompt_matrix(context: &Matrix, class_embedding: &Vector) -> Matrix {
    let (d, k) = (context.rows(), context.cols());
    Matrix::from_fn(d, k + 1, |r, c| {
        if c < k {
            context.get(r, c)
        } else {
            class_embedding.as_slice()[r]
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::cosine_sim;

    #[test]
    fn dead_relu_context_is_redrawn() {
        // seed 304 switches the relu off for one class under the first draw
        let config = WorldConfig { seed: 304, dim: 8, classes: 8, ..Default::default() };
        let first = {
            let mut rng = RngStream::new(304, HIDDEN_CONTEXT_STREAM);
            Matrix::from_fn(8, config.hidden_tokens, |_, _| rng.normal() * config.hidden_std)
        };
        let world = World::generate(&config).unwrap();
        assert_ne!(world.hidden_context(), &first);
        for id in world.taxonomy() {
            let t = world.text.encode(&prompt_matrix(world.hidden_context(), world.bank.get(id).unwrap()));
            assert!(t.is_ok());
        }
    }

    #[test]
    fn aligned_prototypes_match_hidden_prompts() {
        let world = World::generate(&WorldConfig {
            dim: 8,
            classes: 8,
            ..Default::default()
        })
        .unwrap();
        for id in world.taxonomy() {
            let proto = world.prototype(id).unwrap();
            assert!((proto.norm() - 1.0).abs() < 1e-12);
            assert!(id != ClassId::BACKGROUND);
            let x = world.oracle_embedding(id).unwrap();
            let t = world
                .text_encoder()
                .encode(&prompt_matrix(
                    world.hidden_context(),
                    world.bank().get(id).unwrap(),
                ))
                .unwrap();
            assert!((cosine_sim(&x, &t).unwrap() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn world_is_deterministic() {
        let cfg = WorldConfig {
            dim: 8,
            classes: 10,
            ..Default::default()
        };
        assert_eq!(
            World::generate(&cfg).unwrap(),
            World::generate(&cfg).unwrap()
        );
    }
}
