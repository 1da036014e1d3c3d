use conmatch_core::datakit::{make_synthetic, split_labeled, SplitSpec};
use conmatch_core::losses::LossWeights;
use conmatch_core::trainer::{stage_of, ExperimentData, Mode, Stage, TrainConfig, Trainer};
use conmatch_core::Error;

fn data() -> ExperimentData<f64> {
    let train = make_synthetic::<f64>(3, 30, 4, 3.0, 1.0, 4).unwrap();
    let test = make_synthetic::<f64>(3, 10, 4, 3.0, 1.0, 5).unwrap();
    ExperimentData::from_split(split_labeled(&train, SplitSpec::new(3, 1)).unwrap(), test).unwrap()
}

fn config() -> TrainConfig {
    TrainConfig {
        total_steps: 40,
        warmup_encoder_steps: 10,
        conf_pretrain_steps: 10,
        batch_size: 6,
        mu: 2,
        eval_every: 10,
        ..TrainConfig::for_mode(Mode::ConmatchP)
    }
}

fn with_finetune(mut cfg: TrainConfig, finetune: LossWeights) -> TrainConfig {
    let mut w = cfg.stage_weights();
    w.finetune = finetune;
    cfg.weights = Some(w);
    cfg
}

#[test]
fn finetune_routes_each_loss_to_its_parameters() {
    let d = data();
    let cfg = config();
    let mut t = Trainer::new(cfg.clone(), &d).unwrap();
    for _ in 0..25 {
        t.train_step().unwrap();
    }
    assert_eq!(stage_of(t.state().step, &cfg), Stage::Finetune);
    let start = t.state().clone();

    let step_with = |c: TrainConfig| {
        let mut tr = Trainer::resume(c, &d, start.clone()).unwrap();
        tr.train_step().unwrap();
        tr.state().clone()
    };
    let full = step_with(cfg.clone());
    let model_only = step_with(with_finetune(
        cfg.clone(),
        LossWeights { conf: 0.0, conf_sup: 0.0, ..LossWeights::finetune() },
    ));
    let conf_only = step_with(with_finetune(
        cfg,
        LossWeights { sup: 0.0, un: 0.0, ccr: 0.0, ..LossWeights::finetune() },
    ));
    assert_ne!(full.model, start.model);
    assert_ne!(full.conf, start.conf);
    assert_eq!(full.model, model_only.model);
    assert_eq!(full.conf, conf_only.conf);
}

#[test]
fn non_finite_loss_is_reported_by_name() {
    let d = data();
    let mut cfg = TrainConfig {
        lr0: 1e300,
        ..config()
    };
    cfg.momentum = 0.0;
    let mut t = Trainer::new(cfg, &d).unwrap();
    let err = (0..40).find_map(|_| t.train_step().err()).expect("training diverges");
    assert!(matches!(err, Error::NonFiniteLoss(_)), "{err}");
}

#[test]
fn every_mode_runs_on_f32() {
    let train = make_synthetic::<f32>(3, 30, 4, 3.0, 1.0, 4).unwrap();
    let test = make_synthetic::<f32>(3, 10, 4, 3.0, 1.0, 5).unwrap();
    let d = ExperimentData::from_split(split_labeled(&train, SplitSpec::new(3, 1)).unwrap(), test).unwrap();
    for mode in Mode::ALL {
        let cfg = TrainConfig { mode, ..config() };
        let cfg = TrainConfig { weights: None, gate: None, ..cfg };
        let log = Trainer::new(cfg, &d).unwrap().run().unwrap();
        assert_eq!(log.len(), 4);
        assert!(log.iter().all(|r| r.losses.total.is_finite()));
    }
}
