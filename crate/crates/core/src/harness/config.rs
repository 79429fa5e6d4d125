use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::language::Template;
use crate::model::ModelConfig;
use crate::numerics::LrSchedule;
use crate::objective::LossWeights;
use crate::scene::{GeneratorConfig, SuperpointParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Write a checkpoint every this many epochs (the final one is always written).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            decay_epochs: vec![26, 34, 40],
            decay_factor: 0.5,
            batch_size: 8,
            epochs: 30,
            max_steps: None,
            grad_clip: Some(1.0),
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule { base: self.lr, decay_epochs: self.decay_epochs.clone(), factor: self.decay_factor }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Dataset directory; the `STMN_DATA_DIR` variable takes precedence.
    pub root: Option<PathBuf>,
    pub train_expressions: usize,
    pub val_expressions: usize,
    pub expressions_per_scene: usize,
    pub generator: GeneratorConfig,
    pub superpoints: SuperpointParams,
    pub templates: Vec<Template>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: None,
            train_expressions: 200,
            val_expressions: 50,
            expressions_per_scene: 4,
            generator: GeneratorConfig::default(),
            superpoints: SuperpointParams::default(),
            templates: Template::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub loss: LossWeights,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr {} must be positive", self.train.lr)));
        }
        if self.data.expressions_per_scene == 0 {
            return Err(Error::Config("data.expressions_per_scene must be at least 1".into()));
        }
        if self.data.templates.is_empty() {
            return Err(Error::Config("data.templates is empty".into()));
        }
        Ok(())
    }

    /// Applies a JSON object of overrides, merged key by key.
    pub fn with_overrides(&self, patch: &serde_json::Value) -> Result<Self> {
        let mut base = serde_json::to_value(self).expect("config serializes");
        merge(&mut base, patch);
        let cfg: RunConfig =
            serde_json::from_value(base).map_err(|e| Error::Config(format!("bad override: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn merge(base: &mut serde_json::Value, patch: &serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k.clone()).or_insert(serde_json::Value::Null), v);
            }
        }
        (b, p) => *b = p.clone(),
    }
}

/// Deterministic 64-bit seed for a `(seed, stream, a, b)` tuple.
pub fn derive_seed(seed: u64, stream: u64, a: u64, b: u64) -> u64 {
    // SplitMix64 finalizer over a running combination.
    let mut z = seed;
    for v in [stream, a, b] {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(v.wrapping_mul(0xD1B5_4A32_D192_ED03));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}
