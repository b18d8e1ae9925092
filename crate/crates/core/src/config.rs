//! Run configuration: every knob of a training run in one JSON document.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SyntheticGenConfig;
use crate::error::{Error, Result};
use crate::extractors::MagnificationLevel;
use crate::losses::HyperParams;
use crate::metrics::ThresholdRule;
use crate::model::{config_digest, ModelConfig};
use crate::preprocess::PreprocessConfig;
use crate::train::{AdamConfig, TrainingConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub folds: usize,
    /// Fraction of cases held out as the test split.
    pub test_fraction: f64,
    pub threshold_rule: ThresholdRule,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            folds: 5,
            test_fraction: 0.2,
            threshold_rule: ThresholdRule::F1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    pub step: f64,
    pub max_coords_per_param: usize,
    /// Cases per miniature batch.
    pub batch_size: usize,
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-4,
            max_coords_per_param: 24,
            batch_size: 2,
            tolerance: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub hp: HyperParams,
    pub adam: AdamConfig,
    pub training: TrainingConfig,
    pub synthetic: SyntheticGenConfig,
    pub preprocess: PreprocessConfig,
    pub evaluation: EvalConfig,
    pub gradcheck: GradCheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl RunConfig {
    /// ~100 synthetic cases, miniature-scale extractors, 30 epochs.
    pub fn desk() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig::desk(),
            hp: HyperParams {
                epochs: 30,
                ..Default::default()
            },
            adam: AdamConfig::default(),
            training: TrainingConfig::default(),
            synthetic: SyntheticGenConfig::default(),
            preprocess: PreprocessConfig::default(),
            evaluation: EvalConfig::default(),
            gradcheck: GradCheckConfig::default(),
        }
    }

    /// Full-size shapes (112³ CT, 560² slide patches) and 400 epochs.
    pub fn paper() -> Self {
        RunConfig {
            model: ModelConfig::paper(),
            hp: HyperParams::default(),
            synthetic: SyntheticGenConfig {
                volume_extents: [128; 3],
                patch_extents: [112; 3],
                slide_extents: [1680, 1680],
                ct_period: 16,
                slide_period: 56,
                ..Default::default()
            },
            preprocess: PreprocessConfig::paper(),
            ..Self::desk()
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.hp.validate(self.training.contrastive)?;
        self.adam.validate()?;
        self.synthetic.validate()?;
        self.preprocess.validate()?;
        if self.evaluation.folds < 2 || !(0.0..1.0).contains(&self.evaluation.test_fraction) {
            return Err(Error::Config(
                "evaluation needs at least 2 folds and a test fraction in [0, 1)".into(),
            ));
        }
        let ct = &self.model.radiological.input_extents;
        if ct.as_slice() != self.preprocess.ct_patch_extents {
            return Err(Error::Config(format!(
                "radiological input {ct:?} differs from the CT patch extents {:?}",
                self.preprocess.ct_patch_extents
            )));
        }
        let side = &self.model.pathological.input_extents;
        if side.iter().any(|&e| e != self.preprocess.patch_side) {
            return Err(Error::Config(format!(
                "pathological input {side:?} differs from the slide patch side {}",
                self.preprocess.patch_side
            )));
        }
        if self
            .preprocess
            .magnifications
            .iter()
            .any(|m| !MagnificationLevel::ALL.contains(m))
        {
            return Err(Error::Config("unknown magnification level".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file whose keys override `base`; keys the file omits
    /// keep their value from `base`.
    pub fn load_over(base: &RunConfig, path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let overlay: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        let mut merged = serde_json::to_value(base).map_err(|e| Error::json(path, e))?;
        merge(&mut merged, overlay);
        let cfg: RunConfig = serde_json::from_value(merged).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Identity of everything that shapes the trained parameters, except
    /// the epoch budget so a run can be resumed with more epochs.
    pub fn training_digest(&self) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            seed: u64,
            model: &'a ModelConfig,
            hp: HyperParams,
            adam: &'a AdamConfig,
            training: &'a TrainingConfig,
        }
        config_digest(&Key {
            seed: self.seed,
            model: &self.model,
            hp: HyperParams {
                epochs: 0,
                ..self.hp.clone()
            },
            adam: &self.adam,
            training: &self.training,
        })
    }
}

fn merge(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
