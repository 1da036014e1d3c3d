//! Learning curves from finished runs.
//!
//! Writes `curves.csv` into each run directory and, for several runs, a
//! `joined.csv` with the fold-mean test error and confidence AUC per step.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use conmatch_core::trainer::LogRecord;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::run::{create_dir, fold_result, read_fold_log, write_file, Summary};

#[derive(Debug, Serialize)]
struct CurveRow {
    fold: u64,
    step: u64,
    stage: &'static str,
    lr: f64,
    loss_total: f64,
    loss_sup: f64,
    loss_un: f64,
    loss_ccr: f64,
    loss_conf: f64,
    loss_conf_sup: f64,
    mask_rate: f64,
    train_error: f64,
    test_error: f64,
    pseudo_precision: f64,
    pseudo_recall: f64,
    pseudo_f1: f64,
    confidence_auc: Option<f64>,
}

impl CurveRow {
    fn new(fold: u64, r: &LogRecord) -> Self {
        Self {
            fold,
            step: r.step,
            stage: r.stage.name(),
            lr: r.lr,
            loss_total: r.losses.total,
            loss_sup: r.losses.sup,
            loss_un: r.losses.un,
            loss_ccr: r.losses.ccr,
            loss_conf: r.losses.conf,
            loss_conf_sup: r.losses.conf_sup,
            mask_rate: r.mask_rate,
            train_error: r.eval.train_error,
            test_error: r.eval.test_error,
            pseudo_precision: r.eval.pseudo.precision,
            pseudo_recall: r.eval.pseudo.recall,
            pseudo_f1: r.eval.pseudo.f1,
            confidence_auc: r.eval.confidence_auc,
        }
    }
}

/// A finished run: its config and every fold's log.
pub struct LoadedRun {
    pub dir: PathBuf,
    pub name: String,
    pub config: RunConfig,
    pub folds: Vec<(u64, Vec<LogRecord>)>,
}

/// Loads `dir`, failing with [`CliError::Incomplete`] unless every fold
/// logged its final step.
pub fn load_run(dir: &Path) -> Result<LoadedRun, CliError> {
    let cfg_path = dir.join("config.toml");
    if !cfg_path.is_file() {
        return Err(CliError::Incomplete(format!("{} has no config.toml", dir.display())));
    }
    let config = RunConfig::load(&cfg_path)?;
    let total = config.train.total_steps;
    let mut folds = Vec::new();
    for &seed in &config.seeds {
        let log = read_fold_log(dir, seed).map_err(|e| match e {
            CliError::Io { context, .. } => CliError::Incomplete(format!("missing log {context}")),
            other => other,
        })?;
        match log.last() {
            Some(r) if r.step == total => {}
            Some(r) => {
                return Err(CliError::Incomplete(format!(
                    "{} fold {seed} stopped at step {} of {total}",
                    dir.display(),
                    r.step
                )))
            }
            None => return Err(CliError::Incomplete(format!("{} fold {seed} has an empty log", dir.display()))),
        }
        folds.push((seed, log));
    }
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    Ok(LoadedRun {
        dir: dir.to_path_buf(),
        name,
        config,
        folds,
    })
}

fn write_curves(run: &LoadedRun) -> Result<PathBuf, CliError> {
    let path = run.dir.join("curves.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for (seed, log) in &run.folds {
        for r in log {
            w.serialize(CurveRow::new(*seed, r))?;
        }
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

/// Fold-mean test error and AUC per step.
fn mean_curve(run: &LoadedRun) -> BTreeMap<u64, (f64, Option<f64>)> {
    let mut acc: BTreeMap<u64, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (_, log) in &run.folds {
        for r in log {
            let e = acc.entry(r.step).or_default();
            e.0.push(r.eval.test_error);
            e.1.extend(r.eval.confidence_auc);
        }
    }
    acc.into_iter()
        .map(|(step, (errs, aucs))| {
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let auc = (!aucs.is_empty()).then(|| mean(&aucs));
            (step, (mean(&errs), auc))
        })
        .collect()
}

fn write_joined(runs: &[LoadedRun], path: &Path) -> Result<(), CliError> {
    let curves: Vec<_> = runs.iter().map(mean_curve).collect();
    let mut steps: Vec<u64> = curves.iter().flat_map(|c| c.keys().copied()).collect();
    steps.sort_unstable();
    steps.dedup();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["step".to_string()];
    for r in runs {
        header.push(format!("{}_test_error", r.name));
        header.push(format!("{}_confidence_auc", r.name));
    }
    w.write_record(&header)?;
    for step in steps {
        let mut row = vec![step.to_string()];
        for c in &curves {
            match c.get(&step) {
                Some((e, a)) => {
                    row.push(e.to_string());
                    row.push(a.map_or(String::new(), |a| a.to_string()));
                }
                None => row.extend([String::new(), String::new()]),
            }
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Writes curves for every run and returns the text summary.
pub fn report(dirs: &[PathBuf], out: &Path) -> Result<String, CliError> {
    if dirs.is_empty() {
        return Err(CliError::Incomplete("no run directories given".into()));
    }
    let runs = dirs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>, _>>()?;
    let mut text = String::new();
    for run in &runs {
        write_curves(run)?;
        let folds = run
            .folds
            .iter()
            .map(|(seed, log)| fold_result(*seed, log.last().expect("complete run")))
            .collect();
        let summary = Summary::from_folds(run.config.train.mode.name(), folds, Vec::new());
        text.push_str(&format!("== {} ==\n{}\n", run.dir.display(), summary.to_text()));
    }
    create_dir(out)?;
    if runs.len() > 1 {
        write_joined(&runs, &out.join("joined.csv"))?;
    }
    write_file(&out.join("report.txt"), &text)?;
    Ok(text)
}
