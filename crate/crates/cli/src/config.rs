//! Run configuration: flat TOML with dotted keys.
//!
//! ```toml
//! mode = "conmatch_np"
//! total_steps = 3000
//! augment.mask_prob = 0.1
//! dataset.source = "synthetic"
//! output.dir = "runs/np"
//! seeds = [0, 1, 2]
//! ```
//!
//! Keys outside `dataset`, `output`, `sweep`, `seeds` and `dtype` belong to
//! the training config. Relative paths resolve against the config file.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use conmatch_core::trainer::{StageWeights, TrainConfig};
use conmatch_core::DType;

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    #[default]
    Synthetic,
    Manifest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    /// Training set manifest, for `source = "manifest"`.
    pub manifest: Option<PathBuf>,
    /// Held-out manifest, for `source = "manifest"`.
    pub test_manifest: Option<PathBuf>,
    pub n_classes: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub input_dim: usize,
    pub separation: f64,
    pub noise: f64,
    /// Seed of the synthetic training set; the test set uses `seed + 1`.
    pub seed: u64,
    pub labels_per_class: usize,
    pub include_labeled_in_unlabeled: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            source: DatasetSource::Synthetic,
            manifest: None,
            test_manifest: None,
            n_classes: 4,
            per_class: 504,
            test_per_class: 500,
            input_dim: 8,
            separation: 3.0,
            noise: 1.0,
            seed: 1000,
            labels_per_class: 4,
            include_labeled_in_unlabeled: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Save a resumable checkpoint every this many steps (always at the end).
    pub checkpoint_every: Option<u64>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
            checkpoint_every: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: String,
    pub values: Vec<Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub dtype: DType,
    pub dataset: DatasetConfig,
    pub output: OutputConfig,
    pub seeds: Vec<u64>,
    pub sweep: Option<SweepConfig>,
}

fn typed<T: DeserializeOwned>(prefix: &str, value: Value) -> Result<T, CliError> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let key = match (prefix.is_empty(), path.as_str()) {
            (true, _) => path.clone(),
            (false, ".") => prefix.to_string(),
            (false, p) => format!("{prefix}.{p}"),
        };
        CliError::config(key, e.into_inner().to_string())
    })
}

/// Fills unset loss weights from the mode defaults.
fn merge_weights(table: &mut Table, mode: conmatch_core::trainer::Mode) -> Result<(), CliError> {
    let defaults = Value::try_from(StageWeights::for_mode(mode)).expect("weights serialize");
    let Some(user) = table.remove("weights") else {
        return Ok(());
    };
    let Value::Table(user) = user else {
        return Err(CliError::config("weights", "must be a table of per-stage weights"));
    };
    let mut merged = defaults.as_table().cloned().unwrap_or_default();
    for (stage, w) in user {
        let Value::Table(w) = w else {
            return Err(CliError::config(format!("weights.{stage}"), "must be a table"));
        };
        let slot = merged
            .get_mut(&stage)
            .and_then(Value::as_table_mut)
            .ok_or_else(|| CliError::config(format!("weights.{stage}"), "unknown stage"))?;
        for (k, v) in w {
            slot.insert(k, v);
        }
    }
    table.insert("weights".into(), Value::Table(merged));
    Ok(())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::config("<syntax>", e.message().to_string()))?;
        Self::from_table(table)
    }

    pub fn from_table(mut table: Table) -> Result<Self, CliError> {
        let dataset = match table.remove("dataset") {
            Some(v) => typed("dataset", v)?,
            None => DatasetConfig::default(),
        };
        let output = match table.remove("output") {
            Some(v) => typed("output", v)?,
            None => OutputConfig::default(),
        };
        let sweep = table.remove("sweep").map(|v| typed("sweep", v)).transpose()?;
        let seeds = match table.remove("seeds") {
            Some(v) => typed("seeds", v)?,
            None => vec![0],
        };
        let dtype = match table.remove("dtype") {
            Some(Value::String(s)) => DType::parse(&s)
                .ok_or_else(|| CliError::config("dtype", format!("unknown dtype `{s}`, expected f32 or f64")))?,
            Some(_) => return Err(CliError::config("dtype", "must be a string")),
            None => DType::F64,
        };
        let mode = match table.get("mode") {
            Some(v) => typed("mode", v.clone())?,
            None => TrainConfig::default().mode,
        };
        merge_weights(&mut table, mode)?;
        let mut train: TrainConfig = typed("", Value::Table(table))?;
        train.weights = Some(train.stage_weights());
        let cfg = Self {
            train,
            dtype,
            dataset,
            output,
            seeds,
            sweep,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` and resolves relative dataset paths against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config("--config", format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.dataset.manifest, &mut self.dataset.test_manifest]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate().map_err(CliError::from)?;
        if self.seeds.is_empty() {
            return Err(CliError::config("seeds", "needs at least one fold seed"));
        }
        let unique: BTreeSet<_> = self.seeds.iter().collect();
        if unique.len() != self.seeds.len() {
            return Err(CliError::config("seeds", "fold seeds must be distinct"));
        }
        if self.output.checkpoint_every == Some(0) {
            return Err(CliError::config("output.checkpoint_every", "must be positive"));
        }
        let d = &self.dataset;
        if d.labels_per_class == 0 {
            return Err(CliError::config("dataset.labels_per_class", "must be positive"));
        }
        match d.source {
            DatasetSource::Synthetic => {
                for (key, v) in [
                    ("dataset.n_classes", d.n_classes),
                    ("dataset.per_class", d.per_class),
                    ("dataset.test_per_class", d.test_per_class),
                    ("dataset.input_dim", d.input_dim),
                ] {
                    if v == 0 {
                        return Err(CliError::config(key, "must be positive"));
                    }
                }
                if d.per_class < d.labels_per_class {
                    return Err(CliError::config(
                        "dataset.labels_per_class",
                        format!("exceeds dataset.per_class = {}", d.per_class),
                    ));
                }
            }
            DatasetSource::Manifest => {
                if d.manifest.is_none() {
                    return Err(CliError::config("dataset.manifest", "required when dataset.source = \"manifest\""));
                }
                if d.test_manifest.is_none() {
                    return Err(CliError::config(
                        "dataset.test_manifest",
                        "required when dataset.source = \"manifest\"",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Checks that every referenced file exists.
    pub fn check_paths(&self) -> Result<(), CliError> {
        if self.dataset.source != DatasetSource::Manifest {
            return Ok(());
        }
        for (key, p) in [
            ("dataset.manifest", &self.dataset.manifest),
            ("dataset.test_manifest", &self.dataset.test_manifest),
        ] {
            if let Some(p) = p {
                if !p.is_file() {
                    return Err(CliError::config(key, format!("file not found: {}", p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn to_table(&self) -> Table {
        let mut table = match Value::try_from(&self.train).expect("train config serializes") {
            Value::Table(t) => t,
            _ => unreachable!("structs serialize to tables"),
        };
        table.insert("weights".into(), Value::try_from(self.train.stage_weights()).expect("weights serialize"));
        table.insert("dtype".into(), Value::String(self.dtype.name().into()));
        table.insert("dataset".into(), Value::try_from(&self.dataset).expect("dataset serializes"));
        table.insert("output".into(), Value::try_from(&self.output).expect("output serializes"));
        table.insert(
            "seeds".into(),
            Value::Array(self.seeds.iter().map(|&s| Value::Integer(s as i64)).collect()),
        );
        if let Some(s) = &self.sweep {
            table.insert("sweep".into(), Value::try_from(s).expect("sweep serializes"));
        }
        table
    }

    /// Flat `dotted.key = value` text that parses back to the same config.
    pub fn to_flat_toml(&self) -> String {
        let mut lines = Vec::new();
        flatten("", &Value::Table(self.to_table()), &mut lines);
        lines.join("\n") + "\n"
    }
}

fn flatten(prefix: &str, value: &Value, out: &mut Vec<String>) {
    match value {
        Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        leaf => out.push(format!("{prefix} = {leaf}")),
    }
}

/// Every dotted key path of `table`, leaves only.
pub fn key_paths(table: &Table) -> BTreeSet<String> {
    let mut lines = Vec::new();
    flatten("", &Value::Table(table.clone()), &mut lines);
    lines
        .into_iter()
        .map(|l| l.split(" = ").next().unwrap_or_default().to_string())
        .collect()
}

/// Keys a sweep may vary: every leaf of a fully populated config.
pub fn known_keys() -> BTreeSet<String> {
    let mut cfg = RunConfig {
        train: TrainConfig::default(),
        dtype: DType::F64,
        dataset: DatasetConfig {
            manifest: Some(PathBuf::new()),
            test_manifest: Some(PathBuf::new()),
            ..DatasetConfig::default()
        },
        output: OutputConfig {
            checkpoint_every: Some(1),
            ..OutputConfig::default()
        },
        seeds: vec![0],
        sweep: None,
    };
    cfg.train.gate = Some(conmatch_core::trainer::Gate::Fixed);
    cfg.train.ema_decay = Some(0.0);
    cfg.train.estimator.k = Some(1);
    key_paths(&cfg.to_table())
}

/// Parses a command-line value as a TOML literal, falling back to a string.
pub fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Sets `dotted` in `table`, creating intermediate tables.
pub fn set_key(table: &mut Table, dotted: &str, value: Value) -> Result<(), CliError> {
    let mut parts: Vec<&str> = dotted.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| CliError::config(dotted, "empty key"))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::config(dotted, format!("`{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use conmatch_core::trainer::Mode;

    const SAMPLE: &str = r#"
mode = "conmatch_np"
total_steps = 120
warmup_encoder_steps = 20
conf_pretrain_steps = 0
eval_every = 40
augment.mask_prob = 0.2
weights.finetune.ccr = 0.5
dataset.per_class = 30
output.dir = "out/np"
seeds = [3, 4]
"#;

    #[test]
    fn parses_dotted_keys() {
        let c = RunConfig::parse(SAMPLE).unwrap();
        assert_eq!(c.train.mode, Mode::ConmatchNp);
        assert_eq!(c.train.augment.mask_prob, 0.2);
        assert_eq!(c.train.stage_weights().finetune.ccr, 0.5);
        assert_eq!(c.train.stage_weights().finetune.sup, 1.0);
        assert_eq!(c.dataset.per_class, 30);
        assert_eq!(c.seeds, vec![3, 4]);
    }

    #[test]
    fn round_trip_preserves_keys_and_values() {
        let c = RunConfig::parse(SAMPLE).unwrap();
        let text = c.to_flat_toml();
        assert!(!text.contains('['.to_string().repeat(2).as_str()));
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, c);
        let a: Table = text.parse().unwrap();
        let b: Table = back.to_flat_toml().parse().unwrap();
        assert_eq!(key_paths(&a), key_paths(&b));
        assert_eq!(a, b);
    }

    #[test]
    fn errors_name_the_key() {
        let err = RunConfig::parse("augment.mask_probb = 0.1").unwrap_err();
        assert!(err.to_string().contains("augment"), "{err}");
        assert!(err.to_string().contains("mask_probb"), "{err}");
        let err = RunConfig::parse("tau = 2.0").unwrap_err();
        assert!(err.to_string().contains("`tau`"), "{err}");
        let err = RunConfig::parse("dataset.source = \"manifest\"").unwrap_err();
        assert!(err.to_string().contains("dataset.manifest"), "{err}");
        let err = RunConfig::parse("mode = \"baseline_fix\"\nweights.finetune.ccr = 1.0").unwrap_err();
        assert!(err.to_string().contains("weights.finetune.ccr"), "{err}");
        let err = RunConfig::parse("total_steps = \"many\"").unwrap_err();
        assert!(err.to_string().contains("total_steps"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn values_and_keys() {
        assert_eq!(parse_value("0.5"), Value::Float(0.5));
        assert_eq!(parse_value("300"), Value::Integer(300));
        assert_eq!(parse_value("conmatch_p"), Value::String("conmatch_p".into()));
        let keys = known_keys();
        for k in ["mode", "similarity", "warmup_encoder_steps", "estimator.variant", "weights.finetune.ccr", "dataset.manifest"] {
            assert!(keys.contains(k), "{k}");
        }
        let mut t = Table::new();
        set_key(&mut t, "augment.scale", Value::Float(0.1)).unwrap();
        assert_eq!(t["augment"]["scale"], Value::Float(0.1));
    }
}
