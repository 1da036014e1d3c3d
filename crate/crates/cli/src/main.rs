use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use toml::{Table, Value};

use conmatch_core::datakit::save_dataset;
use conmatch_kit::config::{parse_value, DatasetSource, RunConfig, SweepConfig};
use conmatch_kit::report::report;
use conmatch_kit::run::{base_datasets, run_experiment, RunOptions};
use conmatch_kit::sweep::{run_sweep, table_text};
use conmatch_kit::CliError;

/// Train, sweep and report semi-supervised classification experiments.
///
/// Exit codes: 0 success, 1 other failure, 2 invalid config or incomplete
/// run, 3 training diverged.
#[derive(Parser)]
#[command(name = "conmatch-kit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Flat TOML config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated fold seeds; overrides `seeds`.
    #[arg(long, value_delimiter = ',')]
    seed_list: Option<Vec<u64>>,
    /// Run folds on several threads (capped by CONMATCH_KIT_THREADS).
    #[arg(long)]
    parallel: bool,
    /// Continue folds from their last checkpoint.
    #[arg(long)]
    resume: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train every fold of one config.
    Train(Common),
    /// Train one run per value of a config key.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Dotted config key to vary; overrides `sweep.axis`.
        #[arg(long)]
        axis: Option<String>,
        /// Comma-separated values; overrides `sweep.values`.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<String>>,
    },
    /// Write learning curves for finished runs.
    Report {
        /// Run directories (each holding config.toml).
        runs: Vec<PathBuf>,
        /// Where report.txt and joined.csv go.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Write the synthetic train and test sets of a config as manifests.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_table(path: &Path) -> Result<Table, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config("--config", format!("cannot read {}: {e}", path.display())))?;
    text.parse()
        .map_err(|e: toml::de::Error| CliError::config("<syntax>", e.message().to_string()))
}

fn apply_common(table: &mut Table, c: &Common) {
    if let Some(seeds) = &c.seed_list {
        let seeds = seeds.iter().map(|&s| Value::Integer(s as i64)).collect();
        table.insert("seeds".into(), Value::Array(seeds));
    }
}

fn out_dir(c: &Common, cfg: &RunConfig) -> PathBuf {
    c.out.clone().unwrap_or_else(|| cfg.output.dir.clone())
}

fn options(c: &Common) -> RunOptions {
    RunOptions {
        parallel: c.parallel,
        resume: c.resume,
    }
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

fn train(c: &Common) -> Result<(), CliError> {
    let mut table = read_table(&c.config)?;
    apply_common(&mut table, c);
    let mut cfg = RunConfig::from_table(table)?;
    cfg.resolve_paths(&base_dir(&c.config));
    let out = out_dir(c, &cfg);
    let summary = run_experiment(&cfg, &out, options(c))?;
    print!("{}", summary.to_text());
    Ok(())
}

fn sweep(c: &Common, axis: Option<String>, values: Option<Vec<String>>) -> Result<(), CliError> {
    let mut table = read_table(&c.config)?;
    apply_common(&mut table, c);
    // Validates everything outside the swept key up front.
    let cfg = RunConfig::from_table(table.clone())?;
    let from_file = cfg.sweep.clone().unwrap_or_default();
    let spec = SweepConfig {
        axis: axis.unwrap_or(from_file.axis),
        values: match values {
            Some(v) => v.iter().map(|s| parse_value(s)).collect(),
            None => from_file.values,
        },
    };
    if spec.axis.is_empty() {
        return Err(CliError::config("sweep.axis", "set it in the config or pass --axis"));
    }
    let out = out_dir(c, &cfg);
    let rows = run_sweep(&table, &base_dir(&c.config), &spec, &out, options(c))?;
    print!("{}", table_text(&rows));
    Ok(())
}

fn gen_data(config: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::parse("")?,
    };
    if cfg.dataset.source != DatasetSource::Synthetic {
        return Err(CliError::config("dataset.source", "gen-data needs a synthetic dataset"));
    }
    let (train, test) = base_datasets::<f64>(&cfg)?;
    for (stem, ds) in [("train", &train), ("test", &test)] {
        let files = save_dataset(ds, out, stem)?;
        println!("{}", files.manifest.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(c) => train(&c),
        Command::Sweep { common, axis, values } => sweep(&common, axis, values),
        Command::Report { runs, out } => report(&runs, &out).map(|text| print!("{text}")),
        Command::GenData { config, out } => gen_data(config.as_deref(), &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
