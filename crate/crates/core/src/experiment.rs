//! Fitting, hold-out evaluation and cross-validation on a loaded cohort.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{holdout_split, load_dataset, make_folds, manifest_dir, LoadedCase, Manifest};
use crate::error::{Error, Result};
use crate::metrics::{FoldMetrics, MetricsReport, ThresholdRule};
use crate::model::CcdcNet;
use crate::tensor::Parameters;
use crate::train::{predict_cases, train, EpochRecord, RunDir, TrainSetup, TrainState};
use crate::types::BatchMode;

/// A preprocessed cohort held in memory.
pub struct Dataset {
    pub manifest: Manifest,
    pub dir: PathBuf,
    pub cases: Vec<LoadedCase>,
}

impl Dataset {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = Manifest::read(manifest_path)?;
        let dir = manifest_dir(manifest_path);
        let cases = load_dataset(&manifest, &dir)?;
        Ok(Dataset { manifest, dir, cases })
    }

    pub fn select(&self, ids: &[String]) -> Vec<&LoadedCase> {
        self.cases.iter().filter(|c| ids.contains(&c.case_id)).collect()
    }

    pub fn holdout(&self, cfg: &RunConfig) -> Result<(Vec<String>, Vec<String>)> {
        holdout_split(&self.manifest.cases, cfg.evaluation.test_fraction, cfg.seed)
    }
}

/// One report per inference mode; a mode is absent when its cases cannot
/// support the metrics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModeReports {
    pub paired: Option<MetricsReport>,
    pub ct_only: Option<MetricsReport>,
}

impl ModeReports {
    pub fn get(&self, mode: BatchMode) -> Option<&MetricsReport> {
        match mode {
            BatchMode::Paired => self.paired.as_ref(),
            BatchMode::CtOnly => self.ct_only.as_ref(),
        }
    }
}

/// Trains from the configured initialization (or resumes from the run
/// directory's checkpoint), logging and checkpointing into `run` if given.
pub fn fit(
    cfg: &RunConfig,
    net: &CcdcNet,
    cases: &[LoadedCase],
    run: Option<&RunDir>,
    resume: bool,
) -> Result<TrainState> {
    let digest = cfg.training_digest();
    let mut state = TrainState::fresh(net.init_params(cfg.seed));
    if let (Some(run), true) = (run, resume) {
        let path = run.checkpoint_path();
        if path.exists() {
            let ck = Checkpoint::load(&path)?;
            if ck.config_digest != digest {
                return Err(Error::Config(format!(
                    "checkpoint {} was written under a different configuration",
                    path.display()
                )));
            }
            state = TrainState {
                params: ck.params,
                adam: ck.adam,
                epoch: ck.epoch as usize,
            };
        }
    }
    let setup = TrainSetup {
        net,
        cases,
        hp: &cfg.hp,
        adam: &cfg.adam,
        training: &cfg.training,
        seed: cfg.seed,
    };
    let every = cfg.training.checkpoint_every;
    let last = cfg.hp.epochs;
    let mut on_epoch = |rec: &EpochRecord, s: &TrainState| -> Result<()> {
        if let Some(run) = run {
            run.append_log(rec)?;
            if s.epoch == last || (every > 0 && s.epoch.is_multiple_of(every)) {
                checkpoint_of(&digest, s).save(&run.checkpoint_path())?;
            }
        }
        Ok(())
    };
    train(&setup, state, &mut on_epoch)
}

pub fn checkpoint_of(digest: &str, s: &TrainState) -> Checkpoint {
    Checkpoint {
        config_digest: digest.to_string(),
        epoch: s.epoch as u64,
        params: s.params.clone(),
        adam: s.adam.clone(),
    }
}

fn fold_metrics(preds: &[(f64, bool)], rule: ThresholdRule) -> Result<FoldMetrics> {
    let (scores, labels): (Vec<f64>, Vec<bool>) = preds.iter().copied().unzip();
    FoldMetrics::evaluate(&scores, &labels, None, rule)
}

fn usable(preds: &[(f64, bool)]) -> bool {
    preds.iter().any(|p| p.1) && preds.iter().any(|p| !p.1)
}

/// Paired inference over the cases with slides and CT-only inference over
/// all cases, as single-fold reports.
pub fn evaluate_modes(
    net: &CcdcNet,
    params: &Parameters,
    cases: &[&LoadedCase],
    rule: ThresholdRule,
) -> Result<ModeReports> {
    let mut out = ModeReports::default();
    for mode in [BatchMode::Paired, BatchMode::CtOnly] {
        let preds = predict_cases(net, params, cases, mode)?;
        if !usable(&preds) {
            log::warn!(
                "skipping {} evaluation: the cases do not cover both subtypes",
                mode.as_str()
            );
            continue;
        }
        let report = MetricsReport::from_folds(mode.as_str(), vec![fold_metrics(&preds, rule)?])?;
        match mode {
            BatchMode::Paired => out.paired = Some(report),
            BatchMode::CtOnly => out.ct_only = Some(report),
        }
    }
    Ok(out)
}

pub struct HoldoutOutcome {
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub state: TrainState,
    pub reports: ModeReports,
}

/// Trains on the hold-out training split and evaluates on the test split.
pub fn holdout_experiment(cfg: &RunConfig, data: &Dataset, run: Option<&RunDir>) -> Result<HoldoutOutcome> {
    let net = CcdcNet::new(cfg.model.clone())?;
    let (train_ids, test_ids) = data.holdout(cfg)?;
    let train_cases: Vec<LoadedCase> = data.select(&train_ids).into_iter().cloned().collect();
    let state = fit(cfg, &net, &train_cases, run, false)?;
    let reports = evaluate_modes(
        &net,
        &state.params,
        &data.select(&test_ids),
        cfg.evaluation.threshold_rule,
    )?;
    Ok(HoldoutOutcome {
        train_ids,
        test_ids,
        state,
        reports,
    })
}

/// k-fold cross-validation within `ids`; each fold is trained once and
/// evaluated in both modes. Fold `k` trains with seed `seed + k`.
pub fn cross_validation(cfg: &RunConfig, data: &Dataset, ids: &[String]) -> Result<ModeReports> {
    let net = CcdcNet::new(cfg.model.clone())?;
    let records: Vec<_> = data
        .manifest
        .cases
        .iter()
        .filter(|c| ids.contains(&c.case_id))
        .cloned()
        .collect();
    let folds = make_folds(&records, cfg.evaluation.folds, cfg.seed)?;
    let rule = cfg.evaluation.threshold_rule;
    let mut per_mode: [Vec<FoldMetrics>; 2] = [Vec::new(), Vec::new()];
    let mut complete = [true, true];
    for k in 0..folds.k() {
        let fold_cfg = RunConfig {
            seed: cfg.seed.wrapping_add(k as u64),
            ..cfg.clone()
        };
        let train_cases: Vec<LoadedCase> = data.select(&folds.train_ids(k)).into_iter().cloned().collect();
        let state = fit(&fold_cfg, &net, &train_cases, None, false)?;
        let held = data.select(&folds.folds[k]);
        for (slot, mode) in [BatchMode::Paired, BatchMode::CtOnly].into_iter().enumerate() {
            let preds = predict_cases(&net, &state.params, &held, mode)?;
            if usable(&preds) {
                per_mode[slot].push(fold_metrics(&preds, rule)?);
            } else {
                complete[slot] = false;
            }
        }
        log::info!("fold {} of {} done", k + 1, folds.k());
    }
    let mut out = ModeReports::default();
    for (slot, mode) in [BatchMode::Paired, BatchMode::CtOnly].into_iter().enumerate() {
        if !complete[slot] {
            log::warn!(
                "skipping {} cross-validation report: some folds lack one subtype",
                mode.as_str()
            );
            continue;
        }
        let report = MetricsReport::from_folds(mode.as_str(), std::mem::take(&mut per_mode[slot]))?;
        match mode {
            BatchMode::Paired => out.paired = Some(report),
            BatchMode::CtOnly => out.ct_only = Some(report),
        }
    }
    Ok(out)
}
