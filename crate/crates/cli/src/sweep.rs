//! One-axis sweeps over a base config.
//!
//! Each value gets its own run directory `<out>/<axis>=<value>/`. A failing
//! point is recorded in `sweep.csv` and the sweep moves on.

use std::path::Path;

use serde::Serialize;
use toml::{Table, Value};

use crate::config::{known_keys, set_key, RunConfig, SweepConfig};
use crate::error::CliError;
use crate::run::{create_dir, run_experiment, write_file, RunOptions};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub status: String,
    pub folds: usize,
    pub error_mean: Option<f64>,
    pub error_std: Option<f64>,
    pub auc_mean: Option<f64>,
    pub detail: String,
}

/// Plain text rendering of a TOML value, without quotes for strings.
pub fn value_label(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn dir_name(axis: &str, v: &Value) -> String {
    let raw = format!("{axis}={}", value_label(v));
    raw.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "=._-".contains(c) { c } else { '_' })
        .collect()
}

pub fn check_axis(axis: &str) -> Result<(), CliError> {
    if known_keys().contains(axis) {
        Ok(())
    } else {
        Err(CliError::config("sweep.axis", format!("`{axis}` is not a config key")))
    }
}

/// Runs every point of `sweep` over `base`, the raw table of the config.
/// Relative dataset paths resolve against `base_dir`.
pub fn run_sweep(
    base: &Table,
    base_dir: &Path,
    sweep: &SweepConfig,
    out: &Path,
    opts: RunOptions,
) -> Result<Vec<SweepRow>, CliError> {
    check_axis(&sweep.axis)?;
    if sweep.values.is_empty() {
        return Err(CliError::config("sweep.values", "needs at least one value"));
    }
    create_dir(out)?;
    let mut rows = Vec::new();
    for v in &sweep.values {
        let label = value_label(v);
        let point_out = out.join(dir_name(&sweep.axis, v));
        let mut table = base.clone();
        table.remove("sweep");
        let outcome = set_key(&mut table, &sweep.axis, v.clone())
            .and_then(|_| RunConfig::from_table(table))
            .map(|mut cfg| {
                cfg.resolve_paths(base_dir);
                cfg
            })
            .and_then(|cfg| run_experiment(&cfg, &point_out, opts));
        let row = match outcome {
            Ok(s) => SweepRow {
                axis: sweep.axis.clone(),
                value: label,
                status: "ok".into(),
                folds: s.folds.len(),
                error_mean: s.error_rate.as_ref().map(|e| e.mean),
                error_std: s.error_rate.as_ref().map(|e| e.std),
                auc_mean: s.confidence_auc.as_ref().map(|a| a.mean),
                detail: String::new(),
            },
            Err(e) => {
                eprintln!("sweep point {}={label} failed: {e}", sweep.axis);
                SweepRow {
                    axis: sweep.axis.clone(),
                    value: label,
                    status: format!("failed (exit {})", e.exit_code()),
                    folds: 0,
                    error_mean: None,
                    error_std: None,
                    auc_mean: None,
                    detail: e.to_string(),
                }
            }
        };
        rows.push(row);
        write_outputs(out, &rows)?;
    }
    Ok(rows)
}

fn write_outputs(out: &Path, rows: &[SweepRow]) -> Result<(), CliError> {
    let csv_path = out.join("sweep.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| CliError::io(&csv_path, e))?;
    write_file(&out.join("sweep.txt"), table_text(rows))
}

pub fn table_text(rows: &[SweepRow]) -> String {
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    let axis = rows.first().map_or("value", |r| r.axis.as_str());
    let width = rows.iter().map(|r| r.value.len()).chain([axis.len()]).max().unwrap_or(5);
    let mut s = format!("{axis:<width$}  {:>10}  {:>8}  {:>8}  status\n", "error", "std", "auc");
    for r in rows {
        s.push_str(&format!(
            "{:<width$}  {:>10}  {:>8}  {:>8}  {}\n",
            r.value,
            fmt(r.error_mean),
            fmt(r.error_std),
            fmt(r.auc_mean),
            r.status
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directory_names_are_safe() {
        assert_eq!(dir_name("mode", &Value::String("conmatch_p".into())), "mode=conmatch_p");
        assert_eq!(dir_name("model.hidden", &toml::Value::Array(vec![Value::Integer(8)])), "model.hidden=_8_");
    }

    #[test]
    fn unknown_axis_is_a_config_error() {
        let err = check_axis("not.a.key").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("sweep.axis"));
        check_axis("warmup_encoder_steps").unwrap();
    }
}
