//! Adam, the mixed-modality training loop and run-directory bookkeeping.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::data::{build_batch_plan, LoadedCase};
use crate::error::{Error, Result};
use crate::losses::HyperParams;
use crate::model::CcdcNet;
use crate::tensor::{Parameters, Tape, Tensor};
use crate::types::BatchMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiplicative learning-rate factor applied after every epoch.
    pub lr_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr_decay: 1.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !unit(self.beta1)
            || !unit(self.beta2)
            || self.eps.is_nan()
            || self.eps <= 0.0
            || self.lr_decay.is_nan()
            || self.lr_decay <= 0.0
        {
            return Err(Error::Config(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

/// First and second moments per parameter name, plus the global step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub moments: IndexMap<String, (Tensor, Tensor)>,
}

impl AdamState {
    /// One Adam step over every parameter holding a gradient; parameters
    /// without a gradient (not reached by the loss) are left untouched.
    pub fn update(&mut self, params: &mut Parameters, lr: f64, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let Some(g) = p.grad.as_ref() else { continue };
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let values = p.value.data_mut();
            for (i, &gi) in g.data().iter().enumerate() {
                let mi = &mut m.data_mut()[i];
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                let mi = *mi;
                let vi = &mut v.data_mut()[i];
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                let vi = *vi;
                values[i] -= lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    /// Adds the contrastive terms on paired batches.
    pub contrastive: bool,
    /// Trains on CT-only cases as well as paired ones.
    pub use_ct_only_data: bool,
    /// Probability that a batch slot is paired; `None` follows the data.
    pub mode_mix: Option<f64>,
    /// Checkpoint cadence in epochs; 0 keeps only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            contrastive: true,
            use_ct_only_data: true,
            mode_mix: None,
            checkpoint_every: 0,
        }
    }
}

/// One structured line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub batches: usize,
    pub paired_batches: usize,
    pub ct_only_batches: usize,
    /// Per-batch means; contrastive columns count unpaired batches as zero.
    pub class_loss: f64,
    pub type_loss: f64,
    pub correlation_loss: f64,
    pub total_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: Parameters,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
}

impl TrainState {
    pub fn fresh(params: Parameters) -> Self {
        TrainState {
            params,
            adam: AdamState::default(),
            epoch: 0,
        }
    }
}

pub struct TrainSetup<'a> {
    pub net: &'a CcdcNet,
    pub cases: &'a [LoadedCase],
    pub hp: &'a HyperParams,
    pub adam: &'a AdamConfig,
    pub training: &'a TrainingConfig,
    pub seed: u64,
}

/// Runs epochs `state.epoch .. hp.epochs`, calling `on_epoch` after each.
pub fn train(
    setup: &TrainSetup<'_>,
    mut state: TrainState,
    on_epoch: &mut dyn FnMut(&EpochRecord, &TrainState) -> Result<()>,
) -> Result<TrainState> {
    let TrainSetup {
        net,
        cases,
        hp,
        adam,
        training,
        seed,
    } = *setup;
    hp.validate(training.contrastive)?;
    adam.validate()?;
    let paired: Vec<String> = cases
        .iter()
        .filter(|c| c.bag.is_some())
        .map(|c| c.case_id.clone())
        .collect();
    let ct_only: Vec<String> = if training.use_ct_only_data {
        cases
            .iter()
            .filter(|c| c.bag.is_none())
            .map(|c| c.case_id.clone())
            .collect()
    } else {
        Vec::new()
    };
    let by_id: IndexMap<&str, &LoadedCase> = cases.iter().map(|c| (c.case_id.as_str(), c)).collect();

    while state.epoch < hp.epochs {
        let epoch = state.epoch;
        let lr = hp.learning_rate * adam.lr_decay.powi(epoch as i32);
        let plan_seed = seed ^ (epoch as u64 + 1).wrapping_mul(0xd1b5_4a32_d192_ed03);
        let plan = build_batch_plan(
            &paired,
            &ct_only,
            hp.batch_size,
            training.mode_mix,
            training.contrastive,
            plan_seed,
        )?;
        let mut rec = EpochRecord {
            epoch: epoch + 1,
            learning_rate: lr,
            batches: plan.batches.len(),
            paired_batches: plan.count(BatchMode::Paired),
            ct_only_batches: plan.count(BatchMode::CtOnly),
            class_loss: 0.0,
            type_loss: 0.0,
            correlation_loss: 0.0,
            total_loss: 0.0,
        };
        for (bi, batch) in plan.batches.iter().enumerate() {
            let members: Vec<&LoadedCase> = batch.case_ids.iter().map(|id| by_id[id.as_str()]).collect();
            let tape = Tape::new();
            let non_finite = Error::NonFiniteLoss {
                epoch: epoch + 1,
                batch: bi,
            };
            let loss = match net.batch_loss(&tape, &state.params, &members, batch.mode, hp, training.contrastive) {
                Ok(l) => l,
                Err(Error::Domain { op, detail }) => {
                    log::error!("{op}: {detail}");
                    return Err(non_finite);
                }
                Err(e) => return Err(e),
            };
            let total = loss.total.item();
            if !total.is_finite() {
                return Err(non_finite);
            }
            rec.total_loss += total;
            rec.class_loss += loss.class.item();
            rec.type_loss += loss.type_loss.map_or(0.0, |v| v.item());
            rec.correlation_loss += loss.correlation.map_or(0.0, |v| v.item());
            let grads = tape.backward(&loss.total)?;
            state.params.zero_grad();
            grads.accumulate_into(&mut state.params);
            state.adam.update(&mut state.params, lr, adam);
        }
        state.params.zero_grad();
        if rec.batches > 0 {
            let n = rec.batches as f64;
            rec.class_loss /= n;
            rec.type_loss /= n;
            rec.correlation_loss /= n;
            rec.total_loss /= n;
        }
        state.epoch += 1;
        log::info!(
            "epoch {}: class {:.5} type {:.5} correlation {:.5}",
            rec.epoch,
            rec.class_loss,
            rec.type_loss,
            rec.correlation_loss
        );
        on_epoch(&rec, &state)?;
    }
    Ok(state)
}

/// `(score, is_lusc)` per case. Paired mode skips cases without a bag.
pub fn predict_cases(
    net: &CcdcNet,
    params: &Parameters,
    cases: &[&LoadedCase],
    mode: BatchMode,
) -> Result<Vec<(f64, bool)>> {
    cases
        .iter()
        .filter(|c| mode == BatchMode::CtOnly || c.bag.is_some())
        .map(|c| Ok((net.predict(params, c, mode)?, c.target > 0.5)))
        .collect()
}

pub const LOCK_FILE: &str = "run.lock";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

/// A run directory held under an advisory lock for the lifetime of the value.
pub struct RunDir {
    pub path: PathBuf,
    lock: PathBuf,
}

impl RunDir {
    pub fn open(path: &Path) -> Result<Self> {
        fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
        let lock = path.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(Error::Usage(format!(
                    "run directory {} is locked by another process (remove {} if stale)",
                    path.display(),
                    lock.display()
                )));
            }
            Err(e) => return Err(Error::io(&lock, e)),
        }
        Ok(RunDir {
            path: path.to_path_buf(),
            lock,
        })
    }

    pub fn log_path(&self) -> PathBuf {
        self.path.join(LOG_FILE)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.path.join(CHECKPOINT_FILE)
    }

    /// Appends one JSON line to the training log.
    pub fn append_log<T: Serialize>(&self, record: &T) -> Result<()> {
        let path = self.log_path();
        let line = serde_json::to_string(record).map_err(|e| Error::json(&path, e))?;
        let mut f: File = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}
