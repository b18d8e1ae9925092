use std::fs;

use ccdc_core::checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
use ccdc_core::config::{GradCheckConfig, RunConfig};
use ccdc_core::data::LoadedCase;
use ccdc_core::diagnostics::{miniature_cases, model_gradcheck, param_group};
use ccdc_core::experiment::{checkpoint_of, fit};
use ccdc_core::losses::{class_loss_value, HyperParams};
use ccdc_core::metrics::classification_metrics;
use ccdc_core::model::{CcdcNet, ModelConfig};
use ccdc_core::train::{predict_cases, train, AdamConfig, AdamState, EpochRecord, RunDir, TrainSetup, TrainState};
use ccdc_core::{BatchMode, Error, Parameters, Tape, Tensor};

fn mini_run(epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.model = ModelConfig::miniature();
    cfg.hp.epochs = epochs;
    cfg.hp.batch_size = 2;
    cfg.hp.learning_rate = 1e-2;
    cfg
}

fn mini_cases(n: usize, ct_only: usize) -> Vec<LoadedCase> {
    let mut cases = miniature_cases(&ModelConfig::miniature(), n, 11).unwrap();
    for c in cases.iter_mut().take(ct_only) {
        c.bag = None;
    }
    cases
}

#[test]
fn full_objective_gradients_match_finite_differences() {
    let cfg = GradCheckConfig::default();
    let paired = model_gradcheck(&cfg, 1, BatchMode::Paired, None).unwrap();
    assert!(paired.passed(1e-5), "{}", paired.render());
    assert!(paired.groups.iter().all(|g| !g.no_gradient_path), "{}", paired.render());
    assert!(paired.groups.iter().any(|g| g.group == "gen"));

    let ct = model_gradcheck(&cfg, 1, BatchMode::CtOnly, None).unwrap();
    assert!(ct.passed(1e-5), "{}", ct.render());
    for g in &ct.groups {
        assert_eq!(g.no_gradient_path, g.group.starts_with("path"), "{}", g.group);
    }
}

#[test]
fn corrupted_adjoint_fails_the_check() {
    let cfg = GradCheckConfig::default();
    let r = model_gradcheck(&cfg, 1, BatchMode::Paired, Some(("dynamic_contract", 1.5))).unwrap();
    assert!(!r.passed(1e-4), "{}", r.render());
}

#[test]
fn param_groups_drop_the_last_component() {
    assert_eq!(param_group("ct.blocks.0.attn.q.w"), "ct.blocks.0.attn.q");
    assert_eq!(param_group("fc.b"), "fc");
    assert_eq!(param_group("plain"), "plain");
}

#[test]
fn ct_only_batches_skip_the_pathology_extractor() {
    let net = CcdcNet::new(ModelConfig::miniature()).unwrap();
    let params = net.init_params(2);
    let cases = mini_cases(4, 0);
    let refs: Vec<&LoadedCase> = cases.iter().collect();
    let hp = HyperParams::default();

    let tape = Tape::new();
    let loss = net
        .batch_loss(&tape, &params, &refs, BatchMode::CtOnly, &hp, true)
        .unwrap();
    assert_eq!(net.path_forward_count(), 0);
    assert_eq!(loss.total.id(), loss.class.id());
    assert!(loss.type_loss.is_none() && loss.correlation.is_none());
    let probs: Vec<f64> = loss.outputs.iter().map(|o| o.prob.item()).collect();
    let targets: Vec<f64> = cases.iter().map(|c| c.target).collect();
    assert_eq!(
        loss.total.item().to_bits(),
        class_loss_value(&probs, &targets).unwrap().to_bits()
    );
    let grads = tape.backward(&loss.total).unwrap();
    assert!(grads.params().all(|(name, _)| !name.starts_with("path.")));

    let tape = Tape::new();
    let loss = net
        .batch_loss(&tape, &params, &refs, BatchMode::Paired, &hp, true)
        .unwrap();
    assert_eq!(net.path_forward_count(), 4);
    let c = loss.class.item() + loss.type_loss.unwrap().item() + loss.correlation.unwrap().item();
    assert!((loss.total.item() - c).abs() < 1e-12);
}

#[test]
fn paired_batch_without_slides_is_rejected() {
    let net = CcdcNet::new(ModelConfig::miniature()).unwrap();
    let params = net.init_params(0);
    let cases = mini_cases(2, 1);
    let refs: Vec<&LoadedCase> = cases.iter().collect();
    let tape = Tape::new();
    let r = net.batch_loss(&tape, &params, &refs, BatchMode::Paired, &HyperParams::default(), true);
    assert!(matches!(r, Err(Error::Input(_))));
}

#[test]
fn model_config_validation() {
    for cfg in [ModelConfig::desk(), ModelConfig::miniature(), ModelConfig::paper()] {
        cfg.validate().unwrap();
    }
    let mut bad = ModelConfig::miniature();
    bad.pathological.output_dim = 54;
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    RunConfig::desk().validate().unwrap();
    RunConfig::paper().validate().unwrap();
}

#[test]
fn adam_matches_hand_computation() {
    let mut params = Parameters::new();
    params.insert("w", Tensor::vector(vec![1.0, -2.0]));
    let cfg = AdamConfig::default();
    let mut state = AdamState::default();
    let grads = [[0.5, -1.0], [0.25, 2.0]];
    let lr = 0.1;
    let (mut m, mut v, mut w) = ([0.0; 2], [0.0; 2], [1.0, -2.0]);
    for (t, g) in grads.iter().enumerate() {
        params.get_mut("w").unwrap().grad = Some(Tensor::vector(g.to_vec()));
        state.update(&mut params, lr, &cfg);
        for i in 0..2 {
            m[i] = 0.9 * m[i] + 0.1 * g[i];
            v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
            let mh = m[i] / (1.0 - 0.9f64.powi(t as i32 + 1));
            let vh = v[i] / (1.0 - 0.999f64.powi(t as i32 + 1));
            w[i] -= lr * mh / (vh.sqrt() + 1e-8);
        }
    }
    let got = params.value("w").unwrap().data();
    for i in 0..2 {
        assert!((got[i] - w[i]).abs() < 1e-15);
    }
    // A parameter without a gradient stays put and gets no moments.
    params.insert("idle", Tensor::scalar(3.0));
    params.get_mut("w").unwrap().grad = None;
    state.update(&mut params, lr, &cfg);
    assert_eq!(params.value("idle").unwrap().item(), 3.0);
    assert!(!state.moments.contains_key("idle"));
}

fn train_mini(cfg: &RunConfig, cases: &[LoadedCase]) -> (TrainState, Vec<EpochRecord>) {
    let net = CcdcNet::new(cfg.model.clone()).unwrap();
    let setup = TrainSetup {
        net: &net,
        cases,
        hp: &cfg.hp,
        adam: &cfg.adam,
        training: &cfg.training,
        seed: cfg.seed,
    };
    let mut log = Vec::new();
    let state = train(&setup, TrainState::fresh(net.init_params(cfg.seed)), &mut |r, _| {
        log.push(r.clone());
        Ok(())
    })
    .unwrap();
    (state, log)
}

#[test]
fn training_is_deterministic_and_round_trips() {
    let cfg = mini_run(3);
    let cases = mini_cases(8, 4);
    let (a, log_a) = train_mini(&cfg, &cases);
    let (b, log_b) = train_mini(&cfg, &cases);
    assert_eq!(a.params.digest(), b.params.digest());
    assert_eq!(log_a, log_b);
    assert_eq!(log_a.len(), 3);
    assert!(log_a.iter().all(|r| r.paired_batches == 2 && r.ct_only_batches == 2));

    let ck = checkpoint_of(&cfg.training_digest(), &a);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    for (name, p) in ck.params.iter() {
        let q = back.params.value(name).unwrap();
        assert!(p
            .value
            .data()
            .iter()
            .zip(q.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_eq!(back.adam.step, 12);
    assert_eq!(back.digest().unwrap(), ck.digest().unwrap());

    let bytes = fs::read(&path).unwrap();
    assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
    let bad = dir.path().join("bad.bin");
    fs::write(&bad, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(Checkpoint::load(&bad), Err(Error::Format { .. })));
    let mut wrong = bytes.clone();
    wrong[3] ^= 1;
    fs::write(&bad, wrong).unwrap();
    assert!(matches!(Checkpoint::load(&bad), Err(Error::Format { path, .. }) if path == bad));
}

#[test]
fn contrastive_columns_are_zero_without_paired_contrast() {
    let mut cfg = mini_run(2);
    cfg.training.contrastive = false;
    let (_, log) = train_mini(&cfg, &mini_cases(8, 4));
    assert!(log.iter().all(|r| r.type_loss == 0.0 && r.correlation_loss == 0.0));

    let cfg = mini_run(2);
    let (_, log) = train_mini(&cfg, &mini_cases(8, 8));
    assert!(log
        .iter()
        .all(|r| r.type_loss == 0.0 && r.correlation_loss == 0.0 && r.paired_batches == 0));

    let (_, log) = train_mini(&cfg, &mini_cases(8, 0));
    assert!(log.iter().all(|r| r.type_loss > 0.0 && r.ct_only_batches == 0));
}

#[test]
fn ct_only_data_switch_drops_unpaired_cases() {
    let mut cfg = mini_run(1);
    cfg.training.use_ct_only_data = false;
    let (_, log) = train_mini(&cfg, &mini_cases(8, 4));
    assert_eq!((log[0].paired_batches, log[0].ct_only_batches), (2, 0));
}

#[test]
fn run_directory_lock_log_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = mini_run(2);
    let cases = mini_cases(8, 4);
    let net = CcdcNet::new(cfg.model.clone()).unwrap();
    {
        let run = RunDir::open(dir.path()).unwrap();
        assert!(matches!(RunDir::open(dir.path()), Err(Error::Usage(_))));
        fit(&cfg, &net, &cases, Some(&run), false).unwrap();
    }
    let run = RunDir::open(dir.path()).unwrap();
    let text = fs::read_to_string(run.log_path()).unwrap();
    let recs: Vec<EpochRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(recs.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![1, 2]);
    let two = Checkpoint::load(&run.checkpoint_path()).unwrap();
    assert_eq!(two.epoch, 2);

    // Resuming to four epochs equals training four epochs straight.
    let mut longer = cfg.clone();
    longer.hp.epochs = 4;
    let resumed = fit(&longer, &net, &cases, Some(&run), true).unwrap();
    let (straight, _) = train_mini(&longer, &cases);
    assert_eq!(resumed.params.digest(), straight.params.digest());
    assert_eq!(fs::read_to_string(run.log_path()).unwrap().lines().count(), 4);

    let mut other = longer.clone();
    other.hp.tau = 0.5;
    assert!(matches!(
        fit(&other, &net, &cases, Some(&run), true),
        Err(Error::Config(_))
    ));
}

#[test]
fn non_finite_loss_aborts_and_keeps_the_last_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = mini_run(1);
    let cases = mini_cases(8, 4);
    let net = CcdcNet::new(cfg.model.clone()).unwrap();
    let run = RunDir::open(dir.path()).unwrap();
    fit(&cfg, &net, &cases, Some(&run), false).unwrap();
    let before = fs::read(run.checkpoint_path()).unwrap();

    let mut params = net.init_params(0);
    let b = &mut params.get_mut("fc.b").unwrap().value;
    b.data_mut().fill(f64::NAN);
    let setup = TrainSetup {
        net: &net,
        cases: &cases,
        hp: &cfg.hp,
        adam: &cfg.adam,
        training: &cfg.training,
        seed: 0,
    };
    let r = train(&setup, TrainState::fresh(params), &mut |_, _| Ok(()));
    assert!(
        matches!(r, Err(Error::NonFiniteLoss { epoch: 1, batch: 0 })),
        "{:?}",
        r.err()
    );
    assert_eq!(fs::read(run.checkpoint_path()).unwrap(), before);
}

#[test]
fn untrained_model_is_at_chance_with_the_default_threshold() {
    let net = CcdcNet::new(ModelConfig::miniature()).unwrap();
    let params = net.init_params(4);
    let cases = mini_cases(40, 0);
    let refs: Vec<&LoadedCase> = cases.iter().collect();
    let preds = predict_cases(&net, &params, &refs, BatchMode::CtOnly).unwrap();
    let (s, l): (Vec<f64>, Vec<bool>) = preds.into_iter().unzip();
    let m = classification_metrics(&s, &l, Some(0.5), Default::default()).unwrap();
    // 40 balanced cases: binomial sd of accuracy ≈ 0.079.
    assert!((m.acc - 0.5).abs() <= 0.25, "accuracy {}", m.acc);
}

#[test]
fn run_config_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    RunConfig::desk().save(&path).unwrap();
    assert_eq!(RunConfig::load(&path).unwrap(), RunConfig::desk());
    fs::write(&path, r#"{"seed": 1, "hp": {"tau": 0.1, "typo": 2}}"#).unwrap();
    assert!(matches!(RunConfig::load(&path), Err(Error::Json { .. })));
    fs::write(&path, r#"{"hp": {"tau": -1}}"#).unwrap();
    assert!(matches!(RunConfig::load(&path), Err(Error::Config(_))));
    let partial: RunConfig = serde_json::from_str(r#"{"seed": 9}"#).unwrap();
    assert_eq!(partial.hp.epochs, 30);
}
