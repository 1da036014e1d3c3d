//! Multi-fold training runs.
//!
//! Layout under the output directory:
//!
//! ```text
//! config.toml            resolved flat config
//! meta.json              timestamps and versions
//! summary.json           per-fold results, error rate mean and std
//! summary.txt
//! fold-<seed>/log.jsonl  one record per evaluation
//! fold-<seed>/checkpoint/
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use conmatch_core::datakit::{load_dataset, make_synthetic, split_labeled, Dataset, SplitSpec};
use conmatch_core::metrics::mean_std;
use conmatch_core::trainer::{load_state, ExperimentData, LogRecord, Trainer};
use conmatch_core::{DType, Scalar};

use crate::config::{DatasetSource, RunConfig};
use crate::error::CliError;

pub const THREADS_ENV: &str = "CONMATCH_KIT_THREADS";

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub parallel: bool,
    pub resume: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub seed: u64,
    pub steps: u64,
    pub train_error: f64,
    pub test_error: f64,
    pub confidence_auc: Option<f64>,
    pub pseudo_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldFailure {
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        mean_std(values).map(|(mean, std)| Self { mean, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mode: String,
    pub folds: Vec<FoldResult>,
    pub failed: Vec<FoldFailure>,
    pub error_rate: Option<MeanStd>,
    pub confidence_auc: Option<MeanStd>,
}

impl Summary {
    pub fn from_folds(mode: &str, folds: Vec<FoldResult>, failed: Vec<FoldFailure>) -> Self {
        let errors: Vec<f64> = folds.iter().map(|f| f.test_error).collect();
        let aucs: Vec<f64> = folds.iter().filter_map(|f| f.confidence_auc).collect();
        Self {
            mode: mode.to_string(),
            error_rate: MeanStd::of(&errors),
            confidence_auc: MeanStd::of(&aucs),
            folds,
            failed,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("mode: {}\n", self.mode);
        s.push_str(&format!("{:>8} {:>8} {:>11} {:>11} {:>8}\n", "seed", "steps", "test_error", "train_error", "auc"));
        for f in &self.folds {
            let auc = f.confidence_auc.map_or("-".into(), |a| format!("{a:.4}"));
            s.push_str(&format!(
                "{:>8} {:>8} {:>11.4} {:>11.4} {:>8}\n",
                f.seed, f.steps, f.test_error, f.train_error, auc
            ));
        }
        for f in &self.failed {
            s.push_str(&format!("{:>8} failed: {}\n", f.seed, f.error));
        }
        if let Some(e) = &self.error_rate {
            s.push_str(&format!("error_rate: {:.4} ± {:.4} over {} folds\n", e.mean, e.std, self.folds.len()));
        }
        s
    }
}

#[derive(Debug, Serialize)]
struct Meta {
    tool: &'static str,
    version: &'static str,
    log_schema_version: u32,
    dtype: &'static str,
    started_unix: u64,
    finished_unix: u64,
    resumed: bool,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

pub fn fold_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("fold-{seed}"))
}

pub fn worker_count(jobs: usize, parallel: bool) -> usize {
    if !parallel {
        return 1;
    }
    let cap = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    cap.min(jobs).max(1)
}

/// Runs `job` over `items` on up to `workers` threads, results in input order.
pub fn parallel_map<I: Sync, R: Send>(items: &[I], workers: usize, job: impl Fn(&I) -> R + Sync) -> Vec<R> {
    if workers <= 1 {
        return items.iter().map(job).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let r = job(item);
                *slots[i].lock().expect("result slot") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("result slot").expect("every item ran"))
        .collect()
}

fn load_manifest<T: Scalar>(path: &Path, key: &str) -> Result<Dataset<T>, CliError> {
    load_dataset::<T>(path).map_err(|e| CliError::config(key, format!("{}: {e}", path.display())))
}

/// Train and test sets before splitting; shared by every fold.
pub fn base_datasets<T: Scalar>(cfg: &RunConfig) -> Result<(Dataset<T>, Dataset<T>), CliError> {
    let d = &cfg.dataset;
    match d.source {
        DatasetSource::Synthetic => {
            let train = make_synthetic::<T>(d.n_classes, d.per_class, d.input_dim, d.separation, d.noise, d.seed)?;
            let test = make_synthetic::<T>(
                d.n_classes,
                d.test_per_class,
                d.input_dim,
                d.separation,
                d.noise,
                d.seed.wrapping_add(1),
            )?;
            Ok((train, test))
        }
        DatasetSource::Manifest => {
            cfg.check_paths()?;
            let train = load_manifest(d.manifest.as_deref().expect("validated"), "dataset.manifest")?;
            let test = load_manifest(d.test_manifest.as_deref().expect("validated"), "dataset.test_manifest")?;
            Ok((train, test))
        }
    }
}

fn fold_data<T: Scalar>(cfg: &RunConfig, train: &Dataset<T>, test: &Dataset<T>, seed: u64) -> Result<ExperimentData<T>, CliError> {
    let spec = SplitSpec {
        n_labels_per_class: cfg.dataset.labels_per_class,
        seed,
        include_labeled_in_unlabeled: cfg.dataset.include_labeled_in_unlabeled,
    };
    let split = split_labeled(train, spec)?;
    Ok(ExperimentData::from_split(split, test.clone())?)
}

fn read_log(path: &Path) -> Result<Vec<LogRecord>, CliError> {
    let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| CliError::Other(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_fold_log(out: &Path, seed: u64) -> Result<Vec<LogRecord>, CliError> {
    read_log(&fold_dir(out, seed).join("log.jsonl"))
}

pub fn fold_result(seed: u64, last: &LogRecord) -> FoldResult {
    FoldResult {
        seed,
        steps: last.step,
        train_error: last.eval.train_error,
        test_error: last.eval.test_error,
        confidence_auc: last.eval.confidence_auc,
        pseudo_f1: last.eval.pseudo.f1,
    }
}

fn run_fold<T: Scalar>(
    cfg: &RunConfig,
    train: &Dataset<T>,
    test: &Dataset<T>,
    out: &Path,
    seed: u64,
    resume: bool,
) -> Result<FoldResult, CliError> {
    let data = fold_data(cfg, train, test, seed)?;
    let mut tc = cfg.train.clone();
    tc.seed = seed;
    let dir = fold_dir(out, seed);
    let ckpt = dir.join("checkpoint");
    let log_path = dir.join("log.jsonl");
    create_dir(&dir)?;

    let mut records = Vec::new();
    let mut trainer = if resume && ckpt.join("state.json").is_file() {
        let (state, stored) = load_state::<T>(&ckpt)?;
        if stored != tc {
            return Err(CliError::config(
                "--resume",
                format!("checkpoint in {} was written by a different config", ckpt.display()),
            ));
        }
        records = read_log(&log_path)?;
        records.retain(|r| r.step <= state.step);
        Trainer::resume(tc, &data, state)?
    } else {
        Trainer::new(tc, &data)?
    };

    let file = fs::File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let write_record = |log: &mut BufWriter<fs::File>, r: &LogRecord| -> Result<(), CliError> {
        serde_json::to_writer(&mut *log, r)?;
        log.write_all(b"\n").map_err(|e| CliError::io(&log_path, e))
    };
    for r in &records {
        write_record(&mut log, r)?;
    }
    while !trainer.is_finished() {
        let rec = trainer.advance()?;
        if let Some(r) = rec {
            write_record(&mut log, &r)?;
            log.flush().map_err(|e| CliError::io(&log_path, e))?;
            records.push(r);
        }
        let step = trainer.state().step;
        if cfg.output.checkpoint_every.is_some_and(|k| step % k == 0) && !trainer.is_finished() {
            trainer.save_checkpoint(&ckpt)?;
        }
    }
    trainer.save_checkpoint(&ckpt)?;
    log.flush().map_err(|e| CliError::io(&log_path, e))?;
    let last = records
        .last()
        .ok_or_else(|| CliError::Other(format!("fold {seed} produced no log records")))?;
    Ok(fold_result(seed, last))
}

fn run_typed<T: Scalar>(cfg: &RunConfig, out: &Path, opts: RunOptions) -> Result<Summary, CliError> {
    let (train, test) = base_datasets::<T>(cfg)?;
    let workers = worker_count(cfg.seeds.len(), opts.parallel);
    let results = parallel_map(&cfg.seeds, workers, |&seed| run_fold(cfg, &train, &test, out, seed, opts.resume));
    let mut folds = Vec::new();
    let mut failed = Vec::new();
    let mut first_err = None;
    for (&seed, r) in cfg.seeds.iter().zip(results) {
        match r {
            Ok(f) => folds.push(f),
            Err(e) => {
                failed.push(FoldFailure {
                    seed,
                    error: e.to_string(),
                });
                first_err.get_or_insert(e);
            }
        }
    }
    let summary = Summary::from_folds(cfg.train.mode.name(), folds, failed);
    write_summary(out, &summary)?;
    match first_err {
        Some(e) => Err(e),
        None => Ok(summary),
    }
}

fn write_summary(out: &Path, summary: &Summary) -> Result<(), CliError> {
    write_file(&out.join("summary.json"), serde_json::to_string_pretty(summary)?)?;
    write_file(&out.join("summary.txt"), summary.to_text())
}

/// Trains every fold of `cfg` into `out`.
///
/// All folds run even when one fails; the summary lists the failures and
/// the first error is returned.
pub fn run_experiment(cfg: &RunConfig, out: &Path, opts: RunOptions) -> Result<Summary, CliError> {
    cfg.validate()?;
    cfg.check_paths()?;
    create_dir(out)?;
    let started = unix_now();
    write_file(&out.join("config.toml"), cfg.to_flat_toml())?;
    let result = match cfg.dtype {
        DType::F32 => run_typed::<f32>(cfg, out, opts),
        DType::F64 => run_typed::<f64>(cfg, out, opts),
    };
    let meta = Meta {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        log_schema_version: conmatch_core::trainer::LOG_SCHEMA_VERSION,
        dtype: cfg.dtype.name(),
        started_unix: started,
        finished_unix: unix_now(),
        resumed: opts.resume,
    };
    write_file(&out.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_map_keeps_order() {
        let items: Vec<u64> = (0..17).collect();
        let out = parallel_map(&items, 4, |&x| x * x);
        assert_eq!(out, items.iter().map(|x| x * x).collect::<Vec<_>>());
    }

    #[test]
    fn summary_statistics() {
        let fold = |seed, test_error| FoldResult {
            seed,
            steps: 10,
            train_error: 0.0,
            test_error,
            confidence_auc: None,
            pseudo_f1: 0.0,
        };
        let s = Summary::from_folds("conmatch_np", vec![fold(0, 0.1), fold(1, 0.3)], vec![]);
        let e = s.error_rate.as_ref().unwrap();
        assert!((e.mean - 0.2).abs() < 1e-12);
        assert!((e.std - 0.02f64.sqrt()).abs() < 1e-12);
        assert!(s.confidence_auc.is_none());
        assert!(s.to_text().contains("over 2 folds"));
    }
}
