use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ccdc_core::checkpoint::Checkpoint;
use ccdc_core::config::{Preset, RunConfig};
use ccdc_core::data::{generate_synthetic_dataset, manifest_dir, preprocess_dataset, Manifest, MANIFEST_FILE};
use ccdc_core::diagnostics::model_gradcheck;
use ccdc_core::experiment::{cross_validation, evaluate_modes, fit, Dataset, ModeReports};
use ccdc_core::metrics::{compare_reports, render_significance, render_table, MetricsReport};
use ccdc_core::model::CcdcNet;
use ccdc_core::train::RunDir;
use ccdc_core::{BatchMode, Error, Result};

use crate::{Cli, Command, PresetArg, Split};

pub const CONFIG_FILE: &str = "config.json";
pub const SPLIT_FILE: &str = "split.json";

/// Exit status per error kind.
pub fn exit_code(e: &Error) -> ExitCode {
    ExitCode::from(match e {
        Error::Usage(_) => 2,
        Error::Config(_) => 3,
        Error::Input(_) | Error::Format { .. } | Error::Json { .. } => 4,
        Error::Io { .. } => 5,
        Error::NonFiniteLoss { .. } => 6,
        _ => 7,
    })
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    configure_threads()?;
    let preset = match cli.preset {
        PresetArg::Desk => Preset::Desk,
        PresetArg::Paper => Preset::Paper,
    };
    let ctx = Ctx {
        config: cli.config,
        seed: cli.seed,
        out: cli.out,
        preset,
    };
    match cli.command {
        Command::GenData => gen_data(&ctx),
        Command::Preprocess { manifest } => preprocess(&ctx, &manifest),
        Command::Train { manifest, resume, cv } => train(&ctx, &manifest, resume, cv),
        Command::Eval {
            checkpoint,
            manifest,
            split,
        } => eval(&ctx, &checkpoint, &manifest, split),
        Command::Gradcheck { corrupt_adjoint } => gradcheck(&ctx, corrupt_adjoint),
        Command::Compare { report_a, report_b } => compare(&report_a, &report_b),
    }
}

struct Ctx {
    config: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    preset: Preset,
}

impl Ctx {
    fn run_config(&self, fallback: Option<&Path>) -> Result<RunConfig> {
        let base = RunConfig::preset(self.preset);
        let mut cfg = match self.config.as_deref().or(fallback.filter(|p| p.exists())) {
            Some(path) => RunConfig::load_over(&base, path)?,
            None => base,
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
            cfg.synthetic.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out(&self, cmd: &str) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Usage(format!("{cmd} needs --out DIR")))
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("CCDC_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Usage(format!("CCDC_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Usage(format!("cannot size the thread pool: {e}")))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| json_err(path, e))?;
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn json_err(path: &Path, source: serde_json::Error) -> Error {
    Error::Json {
        path: path.to_path_buf(),
        source,
    }
}

fn gen_data(ctx: &Ctx) -> Result<ExitCode> {
    let cfg = ctx.run_config(None)?;
    let out = ctx.out("gen-data")?;
    let manifest = generate_synthetic_dataset(&cfg.synthetic, out)?;
    println!(
        "wrote {} cases ({} paired) to {}",
        manifest.cases.len(),
        manifest.paired().count(),
        out.join(MANIFEST_FILE).display()
    );
    Ok(ExitCode::SUCCESS)
}

fn preprocess(ctx: &Ctx, manifest_path: &Path) -> Result<ExitCode> {
    let cfg = ctx.run_config(None)?;
    let out = ctx.out("preprocess")?;
    let manifest = Manifest::read(manifest_path)?;
    let outcome = preprocess_dataset(&manifest, &manifest_dir(manifest_path), out, &cfg.preprocess, cfg.seed)?;
    for (id, e) in &outcome.failures {
        eprintln!("error: case {id}: {e}");
    }
    println!(
        "preprocessed {} of {} cases into {}",
        outcome.manifest.cases.len(),
        manifest.cases.len(),
        out.join(MANIFEST_FILE).display()
    );
    Ok(match outcome.failures.first() {
        Some((_, e)) => exit_code(e),
        None => ExitCode::SUCCESS,
    })
}

fn train(ctx: &Ctx, manifest_path: &Path, resume: bool, cv: bool) -> Result<ExitCode> {
    let out = ctx.out("train")?;
    let fallback = out.join(CONFIG_FILE);
    let cfg = ctx.run_config(resume.then_some(fallback.as_path()))?;
    let run = RunDir::open(out)?;
    if !resume && run.checkpoint_path().exists() {
        return Err(Error::Usage(format!(
            "{} already holds a checkpoint; pass --resume or choose a new --out",
            out.display()
        )));
    }
    cfg.save(&run.path.join(CONFIG_FILE))?;
    let data = Dataset::load(manifest_path)?;
    let (train_ids, test_ids) = data.holdout(&cfg)?;
    write_json(
        &run.path.join(SPLIT_FILE),
        &serde_json::json!({ "train": train_ids, "test": test_ids }),
    )?;

    let net = CcdcNet::new(cfg.model.clone())?;
    let cases: Vec<_> = data.select(&train_ids).into_iter().cloned().collect();
    let state = match fit(&cfg, &net, &cases, Some(&run), resume) {
        Err(e @ Error::NonFiniteLoss { .. }) => {
            eprintln!(
                "error: training aborted; the last good checkpoint is kept at {}",
                run.checkpoint_path().display()
            );
            return Err(e);
        }
        r => r?,
    };
    println!(
        "trained {} epochs on {} cases; checkpoint {}",
        state.epoch,
        cases.len(),
        run.checkpoint_path().display()
    );

    if cv {
        let reports = cross_validation(&cfg, &data, &train_ids)?;
        write_reports(&run.path, "cv_report", &reports)?;
        print!("{}", render_table(&present(&reports)));
    }
    Ok(ExitCode::SUCCESS)
}

fn present(r: &ModeReports) -> Vec<&MetricsReport> {
    [BatchMode::Paired, BatchMode::CtOnly]
        .into_iter()
        .filter_map(|m| r.get(m))
        .collect()
}

fn write_reports(dir: &Path, stem: &str, reports: &ModeReports) -> Result<()> {
    for r in present(reports) {
        write_json(&dir.join(format!("{stem}_{}.json", r.mode)), r)?;
    }
    Ok(())
}

fn eval(ctx: &Ctx, checkpoint: &Path, manifest_path: &Path, split: Split) -> Result<ExitCode> {
    let run_dir = checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf();
    let cfg = ctx.run_config(Some(&run_dir.join(CONFIG_FILE)))?;
    let ck = Checkpoint::load(checkpoint)?;
    if ck.config_digest != cfg.training_digest() {
        return Err(Error::Config(format!(
            "checkpoint {} does not match the run configuration",
            checkpoint.display()
        )));
    }
    let net = CcdcNet::new(cfg.model.clone())?;
    let data = Dataset::load(manifest_path)?;
    let ids: Vec<String> = match split {
        Split::All => data.manifest.cases.iter().map(|c| c.case_id.clone()).collect(),
        Split::Train => data.holdout(&cfg)?.0,
        Split::Test => data.holdout(&cfg)?.1,
    };
    let reports = evaluate_modes(&net, &ck.params, &data.select(&ids), cfg.evaluation.threshold_rule)?;
    let out = ctx.out.clone().unwrap_or(run_dir);
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    write_reports(&out, "report", &reports)?;
    print!("{}", render_table(&present(&reports)));
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(ctx: &Ctx, corrupt: Option<String>) -> Result<ExitCode> {
    let cfg = ctx.run_config(None)?;
    let corrupt = corrupt.map(|op| (&*Box::leak(op.into_boxed_str()), 1.5));
    let mut ok = true;
    for mode in [BatchMode::Paired, BatchMode::CtOnly] {
        let report = model_gradcheck(&cfg.gradcheck, cfg.seed, mode, corrupt)?;
        print!("{}", report.render());
        if let Some((name, i)) = &report.non_finite {
            println!("  non-finite loss while probing {name}[{i}]");
        }
        ok &= report.passed(cfg.gradcheck.tolerance);
    }
    println!(
        "{} (tolerance {:e})",
        if ok {
            "gradient check passed"
        } else {
            "gradient check FAILED"
        },
        cfg.gradcheck.tolerance
    );
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn read_report(path: &Path) -> Result<MetricsReport> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| json_err(path, e))
}

fn compare(a: &Path, b: &Path) -> Result<ExitCode> {
    let (ra, rb) = (read_report(a)?, read_report(b)?);
    let rows = compare_reports(&ra, &rb)?;
    println!("A = {}\nB = {}", a.display(), b.display());
    print!("{}", render_significance(&rows));
    Ok(ExitCode::SUCCESS)
}
