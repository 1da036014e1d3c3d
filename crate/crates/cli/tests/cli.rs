use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use conmatch_kit::RunConfig;

const SMALL: &str = r#"
mode = "conmatch_np"
total_steps = 60
warmup_encoder_steps = 20
conf_pretrain_steps = 0
eval_every = 20
batch_size = 8
mu = 2
dataset.per_class = 40
dataset.test_per_class = 20
seeds = [0, 1]
"#;

fn kit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_conmatch-kit"))
        .args(args)
        .env("CONMATCH_KIT_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_manifest_exits_2_naming_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.toml",
        "dataset.source = \"manifest\"\ndataset.manifest = \"nope.manifest\"\ndataset.test_manifest = \"nope.manifest\"\n",
    );
    let o = kit(&["train", "--config", s(&cfg), "--out", s(&tmp.path().join("out"))]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("dataset.manifest"), "{}", stderr(&o));

    let cfg = write_config(tmp.path(), "d.toml", "dataset.source = \"manifest\"\n");
    let o = kit(&["train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("dataset.manifest"), "{}", stderr(&o));
}

#[test]
fn bad_values_exit_2_naming_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    for (body, key) in [
        ("augment.mask_prob = 1.5\n", "augment.mask_prob"),
        ("mode = \"no_such_mode\"\n", "mode"),
        ("estimator.bogus = 1\n", "estimator"),
        ("seeds = []\n", "seeds"),
    ] {
        let cfg = write_config(tmp.path(), "c.toml", body);
        let o = kit(&["train", "--config", s(&cfg), "--out", s(&tmp.path().join("out"))]);
        assert_eq!(o.status.code(), Some(2), "{body}: {}", stderr(&o));
        assert!(stderr(&o).contains(key), "{body}: {}", stderr(&o));
    }
}

#[test]
fn divergence_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", &format!("{SMALL}lr0 = 1e300\nmomentum = 0.0\n"));
    let out = tmp.path().join("out");
    let o = kit(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let summary = fs::read_to_string(out.join("summary.json")).unwrap();
    assert!(summary.contains("failed"));
}

#[test]
fn reruns_write_identical_logs_and_meta_holds_the_timestamps() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SMALL);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(kit(&["train", "--config", s(&cfg), "--out", s(&a)]).status.success());
    let o = kit(&["train", "--config", s(&cfg), "--out", s(&b), "--parallel"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for seed in [0, 1] {
        let log = |d: &Path| fs::read(d.join(format!("fold-{seed}/log.jsonl"))).unwrap();
        assert_eq!(log(&a), log(&b));
        assert_eq!(String::from_utf8(log(&a)).unwrap().lines().count(), 3);
    }
    assert_eq!(fs::read(a.join("summary.json")).unwrap(), fs::read(b.join("summary.json")).unwrap());
    let meta = fs::read_to_string(a.join("meta.json")).unwrap();
    assert!(meta.contains("started_unix"));

    let resolved = RunConfig::load(&a.join("config.toml")).unwrap();
    assert_eq!(resolved, RunConfig::load(&cfg).unwrap());
}

#[test]
fn resume_continues_the_same_stream() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SMALL);
    let (a, c) = (tmp.path().join("a"), tmp.path().join("c"));
    assert!(kit(&["train", "--config", s(&cfg), "--out", s(&a)]).status.success());
    let state = fs::read_to_string(a.join("fold-0/checkpoint/state.json")).unwrap();
    assert!(state.contains("\"step\": 60"));

    interrupted_run(&a, &c, 30);
    let o = kit(&["train", "--config", s(&cfg), "--out", s(&c), "--resume"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for seed in [0, 1] {
        let log = |d: &Path| fs::read_to_string(d.join(format!("fold-{seed}/log.jsonl"))).unwrap();
        assert_eq!(log(&a), log(&c));
    }
}

/// Writes the fold logs and checkpoints `reference` would have had if it
/// had stopped after `step` steps.
fn interrupted_run(reference: &Path, target: &Path, step: u64) {
    let text = fs::read_to_string(reference.join("config.toml")).unwrap();
    let mut cfg = RunConfig::parse(&text).unwrap();
    let total = cfg.train.total_steps;
    let data = conmatch_kit::run::base_datasets::<f64>(&cfg).unwrap();
    for &seed in &cfg.seeds.clone() {
        cfg.train.seed = seed;
        let split = conmatch_core::datakit::split_labeled(
            &data.0,
            conmatch_core::datakit::SplitSpec {
                n_labels_per_class: cfg.dataset.labels_per_class,
                seed,
                include_labeled_in_unlabeled: cfg.dataset.include_labeled_in_unlabeled,
            },
        )
        .unwrap();
        let exp = conmatch_core::trainer::ExperimentData::from_split(split, data.1.clone()).unwrap();
        let mut t = conmatch_core::trainer::Trainer::new(cfg.train.clone(), &exp).unwrap();
        let mut lines = String::new();
        while t.state().step < step {
            if let Some(r) = t.advance().unwrap() {
                lines.push_str(&serde_json::to_string(&r).unwrap());
                lines.push('\n');
            }
        }
        let dir = target.join(format!("fold-{seed}"));
        fs::create_dir_all(&dir).unwrap();
        fs::write(dir.join("log.jsonl"), lines).unwrap();
        t.save_checkpoint(&dir.join("checkpoint")).unwrap();
    }
    assert!(step < total);
}

#[test]
fn sweep_records_failures_and_keeps_going() {
    let tmp = tempfile::tempdir().unwrap();
    let body = format!("{SMALL}sweep.axis = \"mode\"\nsweep.values = [\"baseline_fix\", \"no_such_mode\", \"conmatch_np\"]\n");
    let cfg = write_config(tmp.path(), "c.toml", &body);
    let out = tmp.path().join("sw");
    let o = kit(&["sweep", "--config", s(&cfg), "--out", s(&out), "--seed-list", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut rd = csv::Reader::from_path(out.join("sweep.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rd.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(&rows[0][1], "baseline_fix");
    assert_eq!(&rows[0][2], "ok");
    assert!(rows[1][2].starts_with("failed"));
    assert_eq!(&rows[2][2], "ok");
    assert!(out.join("sweep.txt").is_file());
    assert!(out.join("mode=conmatch_np/fold-0/log.jsonl").is_file());

    let o = kit(&["sweep", "--config", s(&cfg), "--out", s(&out), "--axis", "no.such.key", "--values", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("sweep.axis"));
}

#[test]
fn report_writes_curves_and_rejects_incomplete_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SMALL);
    let (a, b) = (tmp.path().join("np"), tmp.path().join("fix"));
    assert!(kit(&["train", "--config", s(&cfg), "--out", s(&a)]).status.success());
    let fix = write_config(tmp.path(), "fix.toml", &SMALL.replace("conmatch_np", "baseline_fix"));
    assert!(kit(&["train", "--config", s(&fix), "--out", s(&b)]).status.success());

    let rep = tmp.path().join("rep");
    let o = kit(&["report", s(&a), s(&b), "--out", s(&rep)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let curves = fs::read_to_string(a.join("curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + 2 * 3);
    let joined = fs::read_to_string(rep.join("joined.csv")).unwrap();
    assert!(joined.starts_with("step,np_test_error,np_confidence_auc,fix_test_error"));
    assert_eq!(joined.lines().count(), 4);

    let empty = tmp.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    assert_eq!(kit(&["report", s(&empty), "--out", s(&rep)]).status.code(), Some(2));

    // Drop the last record of one fold.
    let log = a.join("fold-1/log.jsonl");
    let text = fs::read_to_string(&log).unwrap();
    let kept: Vec<&str> = text.lines().take(2).collect();
    fs::write(&log, kept.join("\n") + "\n").unwrap();
    let o = kit(&["report", s(&a), "--out", s(&rep)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("stopped at step 40"), "{}", stderr(&o));
}

#[test]
fn generated_data_trains_from_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let gen = write_config(tmp.path(), "gen.toml", "dataset.per_class = 40\ndataset.test_per_class = 20\n");
    let data = tmp.path().join("data");
    let o = kit(&["gen-data", "--config", s(&gen), "--out", s(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(data.join("train.manifest").is_file());
    assert!(data.join("test.inputs.bin").is_file());

    let body = SMALL.replace("dataset.per_class = 40\ndataset.test_per_class = 20\n", "")
        + "dataset.source = \"manifest\"\ndataset.manifest = \"data/train.manifest\"\ndataset.test_manifest = \"data/test.manifest\"\n";
    let cfg = write_config(tmp.path(), "c.toml", &body);
    let out = tmp.path().join("out");
    let o = kit(&["train", "--config", s(&cfg), "--out", s(&out), "--seed-list", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("fold-5/log.jsonl").is_file());
}

#[test]
fn f32_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", &format!("{SMALL}dtype = \"f32\"\n"));
    let out = tmp.path().join("out");
    let o = kit(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(fs::read_to_string(out.join("fold-0/checkpoint/state.json")).unwrap().contains("\"dtype\": \"f32\""));
}
