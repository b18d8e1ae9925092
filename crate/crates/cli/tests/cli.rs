use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ccdc_core::metrics::{FoldMetrics, MetricsReport};

const TINY: &str = r#"{"synthetic": {"n_paired": 4, "n_ct_only": 2}, "hp": {"epochs": 2}}"#;

fn ccdc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ccdc"))
        .args(args)
        .env("CCDC_THREADS", "2")
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn ccdc")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

struct Cohort {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Cohort {
    fn raw_manifest(&self) -> PathBuf {
        self.root.join("raw/manifest.json")
    }

    fn manifest(&self) -> PathBuf {
        self.root.join("pre/manifest.json")
    }
}

fn cohort() -> Cohort {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("tiny.json");
    fs::write(&config, TINY).unwrap();
    let o = ccdc(&["--config", s(&config), "--out", s(&root.join("raw")), "gen-data"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let c = Cohort {
        _dir: dir,
        root,
        config,
    };
    let o = ccdc(&[
        "--config",
        s(&c.config),
        "--out",
        s(&c.root.join("pre")),
        "preprocess",
        s(&c.raw_manifest()),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    c
}

fn train(c: &Cohort, run: &str, extra: &[&str]) -> Output {
    let out = c.root.join(run);
    let manifest = c.manifest();
    let mut args = vec!["--config", s(&c.config), "--out", s(&out), "train", s(&manifest)];
    args.extend_from_slice(extra);
    ccdc(&args)
}

#[test]
fn pipeline_trains_and_reports_both_modes() {
    let c = cohort();
    let o = train(&c, "run", &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = c.root.join("run");
    for f in ["checkpoint.bin", "config.json", "split.json", "train_log.jsonl"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert!(!run.join("run.lock").exists());
    let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[1]["epoch"], 2);

    let ck = run.join("checkpoint.bin");
    let eval = |out: &str| {
        ccdc(&[
            "--out",
            s(&c.root.join(out)),
            "eval",
            s(&ck),
            s(&c.manifest()),
            "--split",
            "all",
        ])
    };
    let o = eval("ev1");
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("paired") && stdout(&o).contains("ct_only"));
    assert!(eval("ev2").status.success());
    for mode in ["paired", "ct_only"] {
        let a = fs::read(c.root.join(format!("ev1/report_{mode}.json"))).unwrap();
        let b = fs::read(c.root.join(format!("ev2/report_{mode}.json"))).unwrap();
        assert_eq!(a, b);
        let r: MetricsReport = serde_json::from_slice(&a).unwrap();
        assert_eq!(r.mode, mode);
    }
    let paired: MetricsReport =
        serde_json::from_slice(&fs::read(c.root.join("ev1/report_paired.json")).unwrap()).unwrap();
    let ct: MetricsReport = serde_json::from_slice(&fs::read(c.root.join("ev1/report_ct_only.json")).unwrap()).unwrap();
    assert_eq!(paired.per_fold[0].cases, 8);
    assert_eq!(ct.per_fold[0].cases, 12);
}

#[test]
fn training_is_reproducible_and_guards_its_run_directory() {
    let c = cohort();
    assert!(train(&c, "a", &[]).status.success());
    assert!(train(&c, "b", &[]).status.success());
    let a = fs::read(c.root.join("a/checkpoint.bin")).unwrap();
    assert_eq!(a, fs::read(c.root.join("b/checkpoint.bin")).unwrap());
    assert_eq!(&a[..8], b"CCDCKPT1");

    let o = train(&c, "a", &[]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    fs::write(c.root.join("a/run.lock"), "1").unwrap();
    let o = train(&c, "a", &["--resume"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("locked"));
    fs::remove_file(c.root.join("a/run.lock")).unwrap();

    let changed = c.root.join("changed.json");
    fs::write(&changed, r#"{"hp": {"tau": 0.5}}"#).unwrap();
    let o = ccdc(&[
        "--config",
        s(&changed),
        "--out",
        s(&c.root.join("a")),
        "train",
        s(&c.manifest()),
        "--resume",
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn preprocess_reports_corrupt_volumes_per_case() {
    let c = cohort();
    let vol = c.root.join("raw/ct/case0003.vol");
    let mut bytes = fs::read(&vol).unwrap();
    bytes[..4].copy_from_slice(b"XXXX");
    fs::write(&vol, bytes).unwrap();
    let o = ccdc(&["--out", s(&c.root.join("pre2")), "preprocess", s(&c.raw_manifest())]);
    assert_eq!(o.status.code(), Some(4));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(
        err.contains("input format error") && err.contains("case0003.vol"),
        "{err}"
    );
}

#[test]
fn preprocess_accepts_an_empty_cohort() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.json");
    fs::write(&m, r#"{"schema_version": 1, "stage": "raw", "cases": []}"#).unwrap();
    let o = ccdc(&["--out", s(&dir.path().join("pre")), "preprocess", s(&m)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("pre/manifest.json")).unwrap()).unwrap();
    assert_eq!(v["cases"].as_array().unwrap().len(), 0);
}

#[test]
fn gradcheck_passes_and_catches_a_corrupted_adjoint() {
    let o = ccdc(&["gradcheck"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out.contains("mode paired") && out.contains("mode ct_only"));
    assert!(out.contains("gen "));
    assert!(out.contains("no gradient path"));

    let o = ccdc(&["gradcheck", "--corrupt-adjoint", "dynamic_contract"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAILED"));
}

fn report(dir: &Path, name: &str, acc: &[f64]) -> PathBuf {
    let folds = acc
        .iter()
        .map(|&a| FoldMetrics {
            acc: a,
            auc: a,
            f1: a,
            threshold: 0.5,
            cases: 10,
        })
        .collect();
    let r = MetricsReport::from_folds("paired", folds).unwrap();
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string(&r).unwrap()).unwrap();
    p
}

#[test]
fn compare_runs_paired_t_tests() {
    let dir = tempfile::tempdir().unwrap();
    let a = report(dir.path(), "a.json", &[0.71, 0.72, 0.73, 0.74, 0.75]);
    let b = report(dir.path(), "b.json", &[0.70, 0.70, 0.70, 0.70, 0.70]);
    let o = ccdc(&["compare", s(&a), s(&b)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("4.2426") && out.contains("0.0132"), "{out}");

    let short = report(dir.path(), "c.json", &[0.7, 0.8]);
    let o = ccdc(&["compare", s(&a), s(&short)]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("input error"));
}

#[test]
fn configuration_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"hp": {"learning_rat": 0.1}}"#).unwrap();
    let o = ccdc(&["--config", s(&bad), "gradcheck"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("learning_rat"));

    let o = ccdc(&["gen-data"]);
    assert_eq!(o.status.code(), Some(2));

    let o = Command::new(env!("CARGO_BIN_EXE_ccdc"))
        .arg("gradcheck")
        .env("CCDC_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}
