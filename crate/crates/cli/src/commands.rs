//! The five subcommands. Each one computes everything first and only then
//! writes its artifacts into the run directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use avfusion_core::data::{self, Dataset};
use avfusion_core::fusion::Model;
use avfusion_core::harness::{self, parse_report_csv, report_table, EpochRecord, EvalReport, ReportTable, TrainOutcome};
use avfusion_core::verify::{self, CheckResult, SuiteConfig};

use crate::checkpoint::{self, Checkpoint};
use crate::config::{self, RunConfig};
use crate::dataset;
use crate::error::{CliError, IoContext, Result};

pub const CHECKPOINT: &str = "checkpoint.bin";
pub const HISTORY: &str = "history.csv";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_TXT: &str = "report.txt";
pub const GRADCHECK: &str = "gradcheck.csv";
/// Largest accepted relative gradient error.
pub const GRAD_TOLERANCE: f64 = 1e-4;

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).at(path)
}

/// The dataset named by `data.path`, or the synthetic one described by
/// `synth.*`.
pub fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let ds = match &cfg.data_path {
        Some(dir) => dataset::load_dataset(dir)?,
        None => data::generate(&cfg.synth_spec())?,
    };
    if ds.task != cfg.task {
        return Err(CliError::config(
            "task.mode",
            format!("dataset task {:?} does not match configured task {:?}", ds.task, cfg.task),
        ));
    }
    Ok(ds)
}

pub fn generate(cfg: &RunConfig) -> Result<PathBuf> {
    let ds = data::generate(&cfg.synth_spec())?;
    fs::create_dir_all(&cfg.out).at(&cfg.out)?;
    dataset::save_dataset(&ds, &cfg.out)?;
    config::echo(cfg, &cfg.out)?;
    eprintln!(
        "wrote {} samples ({} train, {} val, {} test) to {}",
        ds.len(),
        ds.train.len(),
        ds.val.len(),
        ds.test.len(),
        cfg.out.display()
    );
    Ok(cfg.out.clone())
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_metric,lr\n");
    for r in history {
        writeln!(out, "{},{},{},{}", r.epoch, r.train_loss, r.val_metric, r.lr).expect("write to string");
    }
    out
}

pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let mut ds = load_data(cfg)?;
    let standardizer = data::standardize(&mut ds)?;
    let mut model = Model::new(cfg.model_config(ds.audio_dim, ds.vision_dim), cfg.seed)?;
    let outcome = harness::train(&mut model, &ds, &cfg.train_config(), |r| {
        eprintln!(
            "epoch {:>3}  loss {:.5}  val {:.4}  lr {:.2e}",
            r.epoch, r.train_loss, r.val_metric, r.lr
        );
    })?;
    if let (Some(e), Some(m)) = (outcome.best_epoch, outcome.best_metric) {
        eprintln!("kept epoch {e} (validation {m:.4})");
    }
    let ck = Checkpoint {
        model,
        standardizer: Some(standardizer),
    };
    fs::create_dir_all(&cfg.out).at(&cfg.out)?;
    checkpoint::save(&ck, &cfg.out.join(CHECKPOINT))?;
    write(&cfg.out.join(HISTORY), history_csv(&outcome.history))?;
    config::echo(cfg, &cfg.out)?;
    Ok(outcome)
}

pub fn eval(cfg: &RunConfig) -> Result<ReportTable> {
    let ck_path = cfg.checkpoint.clone().unwrap_or_else(|| cfg.out.join(CHECKPOINT));
    let ck = checkpoint::load(&ck_path)?;
    let mut ds = load_data(cfg)?;
    if ds.audio_dim != ck.model.config.audio_dim || ds.vision_dim != ck.model.config.vision_dim {
        return Err(CliError::Usage(format!(
            "dataset feature widths ({}, {}) do not match the checkpoint ({}, {})",
            ds.audio_dim, ds.vision_dim, ck.model.config.audio_dim, ck.model.config.vision_dim
        )));
    }
    if let Some(s) = &ck.standardizer {
        s.apply_all(&mut ds);
    }
    let reports = harness::evaluate(
        &ck.model,
        ds.split(cfg.eval_split),
        &cfg.eval_settings,
        &cfg.run_name(),
        cfg.seed,
    )?;
    let table = report_table(&reports)?;
    fs::create_dir_all(&cfg.out).at(&cfg.out)?;
    write(&cfg.out.join(REPORT_CSV), &table.csv)?;
    write(&cfg.out.join(REPORT_TXT), &table.text)?;
    config::echo(cfg, &cfg.out)?;
    print!("{}", table.text);
    Ok(table)
}

pub fn gradcheck_csv(results: &[CheckResult]) -> String {
    let mut out = String::from("module,max_rel_error,coords\n");
    for r in results {
        writeln!(out, "{},{},{}", r.name, r.max_error, r.coords).expect("write to string");
    }
    out
}

/// Runs the finite-difference suite; fails if any module exceeds
/// [`GRAD_TOLERANCE`]. The CSV is written either way.
pub fn gradcheck(cfg: &RunConfig) -> Result<Vec<CheckResult>> {
    let suite = SuiteConfig {
        seed: cfg.seed,
        ..SuiteConfig::default()
    };
    let results = verify::gradient_suite(&suite, |r| {
        let flag = if r.max_error < GRAD_TOLERANCE { "ok" } else { "FAIL" };
        println!("{:<36} {:>10.3e}  {:>6} coords  {flag}", r.name, r.max_error, r.coords);
    })?;
    let worst = results.iter().map(|r| r.max_error).fold(0.0, f64::max);
    println!("max relative error {worst:.3e}");
    fs::create_dir_all(&cfg.out).at(&cfg.out)?;
    write(&cfg.out.join(GRADCHECK), gradcheck_csv(&results))?;
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| r.max_error.is_nan() || r.max_error >= GRAD_TOLERANCE)
        .map(|r| r.name.as_str())
        .collect();
    if !failed.is_empty() {
        return Err(CliError::Check(format!(
            "gradient check above {GRAD_TOLERANCE:e} for: {}",
            failed.join(", ")
        )));
    }
    Ok(results)
}

/// Merges report CSVs, in argument order, into one table.
pub fn report(inputs: &[PathBuf], out: &Path) -> Result<ReportTable> {
    if inputs.is_empty() {
        return Err(CliError::Usage("report needs at least one report CSV".into()));
    }
    let mut all: Vec<EvalReport> = Vec::new();
    for path in inputs {
        let text = fs::read_to_string(path).at(path)?;
        let parsed = parse_report_csv(&text).map_err(|e| CliError::format(path, e.to_string()))?;
        all.extend(parsed);
    }
    let table = report_table(&all)?;
    fs::create_dir_all(out).at(out)?;
    write(&out.join(REPORT_CSV), &table.csv)?;
    write(&out.join(REPORT_TXT), &table.text)?;
    print!("{}", table.text);
    Ok(table)
}
