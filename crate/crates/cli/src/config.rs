//! Flat run configuration: one table of typed keys, loaded from TOML and
//! overridden key by key from the command line.

use std::path::Path;

use anyhow::{bail, Context};
use ovseg_core::encoders::Nonlinearity;
use ovseg_core::eval::EvalConfig;
use ovseg_core::mask::{InferenceParams, UncoveredRule};
use ovseg_core::prompt::{InitMode, PromptPath, PromptTrainConfig};
use ovseg_core::world::{Corruption, DatasetConfig, PrototypeMode, ProposalConfig, WorldConfig};
use serde::{Deserialize, Serialize};

use crate::UsageError;

/// Environment variable replacing the built-in default seed.
pub const SEED_ENV: &str = "OVSEG_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ProtocolChoice {
    Gzss,
    Zss,
    Fss,
    Cross,
}

/// Every knob of a run. Threads and the output directory are deliberately
/// absent: they must not change results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    // world
    pub classes: usize,
    pub dim: usize,
    pub nonlinearity: Nonlinearity,
    pub prototypes: PrototypeMode,
    pub hidden_tokens: usize,
    pub hidden_std: f64,
    pub background_scale: f64,

    // dataset
    pub height: usize,
    pub width: usize,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub sigma: f64,
    pub offset_norm: f64,
    pub offset_sigma: f64,
    pub min_regions: usize,
    pub max_regions: usize,
    pub min_side: usize,
    pub max_side: usize,
    pub folds: usize,
    pub fold: usize,

    // prompt learning
    pub lambda: f64,
    pub tau: f64,
    pub context_tokens: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub init: InitMode,
    pub stop_mean_grad: bool,
    /// Train and evaluate with the batch-mean machinery removed.
    pub reference: bool,

    // pseudo labels and proposals
    pub rho: f64,
    pub drop: f64,
    pub jitter: usize,
    pub spurious: usize,
    pub softness: f64,
    pub proposals_cover_unseen: bool,

    // inference and protocols
    pub inference_tau: f64,
    pub threshold: f64,
    pub uncovered: UncoveredRule,
    pub protocol: ProtocolChoice,
    pub n: usize,
    pub k: usize,
    pub episodes: usize,
    pub query_size: usize,
    pub eval_batch_size: usize,
    pub saliency_flip: f64,

    // second dataset for cross runs (same world)
    pub cross_seed: u64,
    pub cross_offset_norm: f64,
    pub cross_offset_sigma: f64,
    pub cross_offset_direction_seed: u64,

    // ablation sweep
    pub lambda_grid: Vec<f64>,
    pub rho_grid: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let world = WorldConfig::default();
        let data = DatasetConfig::default();
        let train = PromptTrainConfig::default();
        let eval = EvalConfig::default();
        Self {
            seed: 0,
            classes: world.classes,
            dim: world.dim,
            nonlinearity: world.nonlinearity,
            prototypes: world.prototypes,
            hidden_tokens: world.hidden_tokens,
            hidden_std: world.hidden_std,
            background_scale: world.background_scale,
            height: data.height,
            width: data.width,
            train_scenes: data.train_scenes,
            test_scenes: data.test_scenes,
            sigma: data.sigma,
            offset_norm: data.offset_norm,
            offset_sigma: data.offset_sigma,
            min_regions: data.min_regions,
            max_regions: data.max_regions,
            min_side: data.min_side,
            max_side: data.max_side,
            folds: 4,
            fold: 0,
            lambda: train.lambda,
            tau: train.tau,
            context_tokens: train.context_tokens,
            batch_size: train.batch_size,
            steps: train.steps,
            learning_rate: train.learning_rate,
            init: train.init,
            stop_mean_grad: train.stop_mean_grad,
            reference: false,
            rho: eval.corruption.rho,
            drop: eval.corruption.drop,
            jitter: eval.proposals.jitter,
            spurious: eval.proposals.spurious,
            softness: eval.proposals.softness,
            proposals_cover_unseen: eval.proposals_cover_unseen,
            inference_tau: eval.inference.tau,
            threshold: eval.inference.threshold,
            uncovered: eval.inference.uncovered,
            protocol: ProtocolChoice::Gzss,
            n: 2,
            k: 1,
            episodes: 200,
            query_size: eval.query_size,
            eval_batch_size: eval.batch_size,
            saliency_flip: eval.saliency_flip,
            cross_seed: 1,
            cross_offset_norm: 1.0,
            cross_offset_sigma: 0.05,
            cross_offset_direction_seed: 0,
            lambda_grid: vec![0.0, 0.001, 0.01, 0.1],
            rho_grid: vec![1.0, 0.8, 0.6, 0.4],
        }
    }
}

impl RunConfig {
    /// Defaults, with the seed taken from `OVSEG_SEED` when set.
    pub fn base() -> anyhow::Result<Self> {
        let mut cfg = Self::default();
        if let Ok(raw) = std::env::var(SEED_ENV) {
            cfg.seed = raw
                .trim()
                .parse()
                .map_err(|_| UsageError(format!("{SEED_ENV}={raw:?} is not an unsigned integer")))?;
        }
        Ok(cfg)
    }

    /// Applies the keys of a TOML file on top of `self`.
    pub fn merge_file(self, path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let table: toml::Table =
            toml::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
        self.merge(table)
    }

    /// Overrides keys with already-typed values.
    pub fn merge(self, overrides: toml::Table) -> anyhow::Result<Self> {
        let mut table = toml::Table::try_from(&self)?;
        for (k, v) in overrides {
            let v = match (table.get(&k), v) {
                (None, _) => bail!(UsageError(format!("unknown config key {k:?}"))),
                // `lambda = 0` in a file means 0.0
                (Some(toml::Value::Float(_)), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
                (_, v) => v,
            };
            table.insert(k, v);
        }
        toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| UsageError(e.to_string()).into())
    }

    /// Parses `key=value` pairs, typing each value by the key's current type.
    pub fn merge_pairs(self, pairs: &[String]) -> anyhow::Result<Self> {
        let current = toml::Table::try_from(&self)?;
        let mut overrides = toml::Table::new();
        for pair in pairs {
            let (key, raw) =
                pair.split_once('=').ok_or_else(|| UsageError(format!("expected key=value, got {pair:?}")))?;
            let key = key.trim().replace('-', "_");
            let Some(existing) = current.get(&key) else {
                bail!(UsageError(format!("unknown config key {key:?}")));
            };
            overrides.insert(key.clone(), typed_value(existing, raw.trim()).map_err(|e| UsageError(format!("{key}: {e}")))?);
        }
        self.merge(overrides)
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn world(&self) -> WorldConfig {
        WorldConfig {
            seed: self.seed,
            dim: self.dim,
            classes: self.classes,
            nonlinearity: self.nonlinearity,
            prototypes: self.prototypes,
            hidden_tokens: self.hidden_tokens,
            hidden_std: self.hidden_std,
            background_scale: self.background_scale,
        }
    }

    pub fn dataset(&self) -> DatasetConfig {
        DatasetConfig {
            world: self.world(),
            height: self.height,
            width: self.width,
            train_scenes: self.train_scenes,
            test_scenes: self.test_scenes,
            sigma: self.sigma,
            offset_norm: self.offset_norm,
            offset_direction_seed: self.seed,
            offset_sigma: self.offset_sigma,
            min_regions: self.min_regions,
            max_regions: self.max_regions,
            min_side: self.min_side,
            max_side: self.max_side,
        }
    }

    /// Test-side dataset of a cross run: same world, its own offsets.
    pub fn cross_dataset(&self) -> DatasetConfig {
        DatasetConfig {
            offset_norm: self.cross_offset_norm,
            offset_sigma: self.cross_offset_sigma,
            offset_direction_seed: self.cross_offset_direction_seed,
            ..self.dataset()
        }
    }

    pub fn train(&self) -> PromptTrainConfig {
        PromptTrainConfig {
            lambda: self.lambda,
            tau: self.tau,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            steps: self.steps,
            seed: self.seed,
            init: self.init,
            context_tokens: self.context_tokens,
            stop_mean_grad: self.stop_mean_grad,
        }
    }

    pub fn path(&self) -> PromptPath {
        if self.reference {
            PromptPath::Plain
        } else {
            PromptPath::BatchMean
        }
    }

    pub fn eval(&self) -> EvalConfig {
        EvalConfig {
            inference: InferenceParams { tau: self.inference_tau, threshold: self.threshold, uncovered: self.uncovered },
            corruption: Corruption { rho: self.rho, drop: self.drop },
            proposals: ProposalConfig { jitter: self.jitter, spurious: self.spurious, softness: self.softness },
            proposals_cover_unseen: self.proposals_cover_unseen,
            batch_size: self.eval_batch_size,
            query_size: self.query_size,
            saliency_flip: self.saliency_flip,
            seed: self.seed,
        }
    }

    /// Cheap checks that core validation does not cover.
    pub fn validate(&self) -> anyhow::Result<()> {
        if self.folds == 0 || self.fold >= self.folds {
            bail!(UsageError(format!("fold {} is out of range for {} folds", self.fold, self.folds)));
        }
        if !self.classes.is_multiple_of(self.folds) {
            bail!(ovseg_core::Error::IndivisibleTaxonomy { classes: self.classes, folds: self.folds });
        }
        if self.reference && self.lambda != 0.0 {
            bail!(UsageError("the reference path has no batch mean; it needs lambda = 0".into()));
        }
        // every section up front, so `gen` already rejects a bad tau
        self.dataset().validate()?;
        self.cross_dataset().validate()?;
        self.train().validate()?;
        self.eval().validate()?;
        if let Some(l) = self.lambda_grid.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
            bail!(UsageError(format!("lambda grid entry {l} is not a non-negative number")));
        }
        if let Some(r) = self.rho_grid.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            bail!(UsageError(format!("rho grid entry {r} is outside (0, 1]")));
        }
        Ok(())
    }
}

fn typed_value(like: &toml::Value, raw: &str) -> Result<toml::Value, String> {
    use toml::Value;
    Ok(match like {
        Value::String(_) => Value::String(raw.to_string()),
        Value::Integer(_) => Value::Integer(raw.parse().map_err(|_| format!("{raw:?} is not an integer"))?),
        Value::Float(_) => Value::Float(raw.parse().map_err(|_| format!("{raw:?} is not a number"))?),
        Value::Boolean(_) => Value::Boolean(raw.parse().map_err(|_| format!("{raw:?} is not true/false"))?),
        Value::Array(_) => {
            let items: Result<Vec<Value>, String> = raw
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| s.trim().parse::<f64>().map(Value::Float).map_err(|_| format!("{s:?} is not a number")))
                .collect();
            Value::Array(items?)
        }
        other => return Err(format!("cannot override a {} value", other.type_str())),
    })
}
