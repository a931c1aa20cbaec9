//! Run configuration: a flat `key = value` document layered over a preset.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{LossWeights, ThetaMask, FULL_MASK, NO_SKEW_MASK};
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    pub lr: f64,
    pub batch: usize,
    pub clip: f64,
    pub epochs: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta: [f64; 6],
    /// include the two skew components in the localization term
    pub supervise_skew: bool,
    /// include the fixed whole-image first read in the localization term
    pub supervise_first_read: bool,
    /// present objects right-to-left
    pub reverse_order: bool,
    pub plateau_patience: u32,
    pub plateau_threshold: f64,
    pub lr_factor: f64,
    pub lr_floor: f64,
    pub train_count: usize,
    pub test_count: usize,
    pub canvas_h: usize,
    pub canvas_w: usize,
    pub clutter_count: usize,
    pub data_dir: String,
    pub out_dir: String,
    /// `"f32"` or `"f64"` storage for training
    pub precision: String,
    /// step budget of the single-batch overfit mode
    pub overfit_steps: usize,
    /// training samples whose batch-norm moments replace the running
    /// averages after each epoch; 0 keeps the running averages
    pub bn_refresh_samples: usize,
    pub model: ModelConfig,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let model = ModelConfig::preset(name)?;
        let base = RunConfig {
            preset: name.to_string(),
            seed: 1,
            lr: 1e-4,
            batch: 128,
            clip: 10.0,
            epochs: 100,
            alpha1: 1.0,
            alpha2: 1.0,
            beta: LossWeights::default().beta,
            supervise_skew: true,
            supervise_first_read: false,
            reverse_order: false,
            plateau_patience: 3,
            plateau_threshold: 1e-4,
            lr_factor: 0.1,
            lr_floor: 1e-7,
            train_count: 60000,
            test_count: 10000,
            canvas_h: 100,
            canvas_w: 100,
            clutter_count: 8,
            data_dir: "data".into(),
            out_dir: "runs".into(),
            precision: "f32".into(),
            overfit_steps: 500,
            bn_refresh_samples: 2048,
            model,
        };
        Ok(match name {
            "svhn" => RunConfig { supervise_skew: false, train_count: 20000, test_count: 2000, canvas_h: 64, canvas_w: 160, ..base },
            "reduced" => RunConfig {
                lr: 1e-3,
                batch: 64,
                epochs: 12,
                train_count: 10000,
                test_count: 1000,
                canvas_h: 60,
                canvas_w: 60,
                clutter_count: 4,
                ..base
            },
            "tiny" => RunConfig {
                lr: 1e-3,
                batch: 8,
                epochs: 2,
                train_count: 32,
                test_count: 16,
                canvas_h: 28,
                canvas_w: 28,
                clutter_count: 2,
                model: ModelConfig { class_count: 10, ..base.model.clone() },
                ..base
            },
            _ => base,
        })
    }

    /// Parses a document; `preset` picks the base values and every other key
    /// overrides one of them. Unknown keys are rejected.
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let preset = match user.get("preset") {
            Some(toml::Value::String(s)) => s.clone(),
            Some(_) => return Err(Error::Config("`preset` must be a string".into())),
            None => "mnist".to_string(),
        };
        let mut flat = Self::preset(&preset)?.to_flat_table()?;
        for (k, v) in user {
            if !flat.contains_key(&k) {
                return Err(Error::Config(format!("unknown key `{k}`")));
            }
            flat.insert(k, v);
        }
        Self::from_flat_table(flat)
    }

    pub fn to_flat_table(&self) -> Result<toml::Table> {
        let mut t = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(toml::Value::Table(m)) = t.remove("model") {
            for (k, v) in m {
                t.insert(k, v);
            }
        }
        Ok(t)
    }

    fn from_flat_table(mut flat: toml::Table) -> Result<Self> {
        let model_keys: Vec<String> = match toml::Table::try_from(ModelConfig::tiny()) {
            Ok(t) => t.keys().cloned().collect(),
            Err(e) => return Err(Error::Config(e.to_string())),
        };
        let mut model = toml::Table::new();
        for k in model_keys {
            if let Some(v) = flat.remove(&k) {
                model.insert(k, v);
            }
        }
        flat.insert("model".into(), toml::Value::Table(model));
        let cfg: RunConfig = flat.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The document with every key spelled out.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(&self.to_flat_table()?).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr > 0.0) || self.batch == 0 || !(self.clip > 0.0) {
            return Err(Error::Config("lr, batch and clip must be positive".into()));
        }
        if self.precision != "f32" && self.precision != "f64" {
            return Err(Error::Config(format!("precision must be \"f32\" or \"f64\", got {:?}", self.precision)));
        }
        if self.alpha1 < 0.0 || self.alpha2 < 0.0 || self.beta.iter().any(|b| *b < 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.canvas_h < 28 || self.canvas_w < 28 * self.model.objects {
            return Err(Error::Config(format!("a {}x{} canvas cannot hold {} digits", self.canvas_h, self.canvas_w, self.model.objects)));
        }
        if self.model.objects == 1 && self.canvas_h != self.canvas_w {
            return Err(Error::Config("single-object canvases are square".into()));
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { alpha1: self.alpha1, alpha2: self.alpha2, beta: self.beta }
    }

    pub fn theta_mask(&self) -> ThetaMask {
        if self.supervise_skew {
            FULL_MASK
        } else {
            NO_SKEW_MASK
        }
    }
}
