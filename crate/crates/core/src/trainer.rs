//! Staged training: encoder pre-training, estimator pre-training (parametric
//! mode only), then joint fine-tuning.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::{augment_batch, AugPolicy, Branch};
use crate::autodiff::{floored_cross_entropy, Activation, Graph, NodeId};
use crate::checkpoint;
use crate::confidence::{
    conf_forward_batch, conf_forward_graph, init_conf_params, np_confidence_batch, ConfSpec, ConfidencePair,
    EstimatorInputs, EstimatorVariant, NormMode, NormStats, SimilarityKind, DEFAULT_SENTINEL,
    DEFAULT_SIMILARITY_EPS,
};
use crate::datakit::{BatchIter, BatchIterState, BatchPair, Dataset, InputShape, LabeledSplit, UnlabeledPool};
use crate::error::{Error, Result};
use crate::losses::{
    confidence_targets, loss_ccr, loss_conf, loss_conf_sup, loss_self, loss_sup, loss_un, pseudo_targets,
    LossBreakdown, LossWeights,
};
use crate::metrics::{
    auc_roc, confident_set, error_rate, per_class_accuracy, pseudo_quality, ConfidenceSource, PseudoQuality,
    ESTIMATOR_THRESHOLD,
};
use crate::model::{forward_batch, forward_graph, init_model_params, ForwardNodes, ModelSpec, ProbVec};
use crate::optim::{cosine_lr, sgd_update, Sgd};
use crate::params::{Gradients, ParamStore};
use crate::pseudo::{curriculum_mask, fixed_threshold_mask, update_class_thresholds, PseudoMode, ThresholdState};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LOG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    BaselineFix,
    BaselineFlex,
    ConmatchNp,
    ConmatchP,
    AblationUnguided,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::BaselineFix,
        Mode::BaselineFlex,
        Mode::ConmatchNp,
        Mode::ConmatchP,
        Mode::AblationUnguided,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::BaselineFix => "baseline_fix",
            Mode::BaselineFlex => "baseline_flex",
            Mode::ConmatchNp => "conmatch_np",
            Mode::ConmatchP => "conmatch_p",
            Mode::AblationUnguided => "ablation_unguided",
        }
    }

    /// Whether the cross-branch consistency term is trained.
    pub fn has_ccr(self) -> bool {
        matches!(self, Mode::ConmatchNp | Mode::ConmatchP | Mode::AblationUnguided)
    }

    /// Whether a confidence estimator is trained.
    pub fn is_parametric(self) -> bool {
        self == Mode::ConmatchP
    }

    pub fn default_gate(self) -> Gate {
        match self {
            Mode::BaselineFlex => Gate::Curriculum,
            _ => Gate::Fixed,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    EncoderPretrain,
    ConfPretrain,
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::EncoderPretrain => "encoder_pretrain",
            Stage::ConfPretrain => "conf_pretrain",
            Stage::Finetune => "finetune",
        }
    }
}

/// Gate deciding which pseudo-labels enter the unsupervised loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gate {
    Fixed,
    Curriculum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageWeights {
    pub encoder_pretrain: LossWeights,
    pub conf_pretrain: LossWeights,
    pub finetune: LossWeights,
}

impl StageWeights {
    /// Defaults with the terms a mode does not train set to zero.
    pub fn for_mode(mode: Mode) -> Self {
        let mut finetune = LossWeights::finetune();
        if !mode.has_ccr() {
            finetune.ccr = 0.0;
        }
        let conf_pretrain = if mode.is_parametric() {
            LossWeights::conf_pretrain()
        } else {
            finetune.conf = 0.0;
            finetune.conf_sup = 0.0;
            LossWeights::ZERO
        };
        Self {
            encoder_pretrain: LossWeights::encoder_pretrain(),
            conf_pretrain,
            finetune,
        }
    }

    pub fn get(&self, stage: Stage) -> LossWeights {
        match stage {
            Stage::EncoderPretrain => self.encoder_pretrain,
            Stage::ConfPretrain => self.conf_pretrain,
            Stage::Finetune => self.finetune,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub variant: EstimatorVariant,
    pub inputs: EstimatorInputs,
    /// Top-k; `⌈Y/2⌉` when unset.
    pub k: Option<usize>,
    pub proj_width: usize,
    pub trunk_depth: usize,
    pub sentinel: f64,
    pub squash_delta: f64,
    pub norm_momentum: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            variant: EstimatorVariant::TopkNorm,
            inputs: EstimatorInputs::FeaturesAndLogits,
            k: None,
            proj_width: 16,
            trunk_depth: 2,
            sentinel: DEFAULT_SENTINEL,
            squash_delta: 1e-6,
            norm_momentum: 0.9,
        }
    }
}

impl EstimatorConfig {
    pub fn spec(&self, feature_dim: usize, n_classes: usize) -> ConfSpec {
        let mut spec = ConfSpec::new(feature_dim, n_classes).with_variant(self.variant);
        spec.inputs = self.inputs;
        if let Some(k) = self.k {
            spec.k = k;
        }
        spec.proj_width = self.proj_width;
        spec.trunk_depth = self.trunk_depth;
        spec.sentinel = self.sentinel;
        spec.squash_delta = self.squash_delta;
        spec.norm_momentum = self.norm_momentum;
        spec
    }
}

/// Vector-data augmentation strengths, relative to the feature spread of the
/// unlabeled pool. Image data always uses the fixed image policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub weak_noise: f64,
    pub strong_noise: f64,
    pub mask_prob: f64,
    pub scale: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            weak_noise: 0.05,
            strong_noise: 0.25,
            mask_prob: 0.1,
            scale: 0.2,
        }
    }
}

impl AugmentConfig {
    pub fn policies(&self, shape: InputShape, feature_std: f64) -> (AugPolicy, AugPolicy) {
        match shape {
            InputShape::Vector(_) => (
                AugPolicy::weak_vector(self.weak_noise * feature_std),
                AugPolicy::strong_vector(self.strong_noise * feature_std, self.mask_prob, self.scale),
            ),
            InputShape::Image { .. } => (AugPolicy::weak_image(), AugPolicy::strong_image()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Gate for the unsupervised loss; follows the mode when unset.
    pub gate: Option<Gate>,
    pub batch_size: usize,
    pub mu: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
    pub total_steps: u64,
    pub warmup_encoder_steps: u64,
    pub conf_pretrain_steps: u64,
    /// Per-stage loss weights; mode defaults when unset.
    pub weights: Option<StageWeights>,
    pub tau: f64,
    pub threshold_window: usize,
    pub eval_every: u64,
    pub seed: u64,
    pub pseudo_mode: PseudoMode,
    pub ccr_targets: PseudoMode,
    pub temperature: f64,
    pub similarity: SimilarityKind,
    pub similarity_eps: f64,
    /// Also weight the unsupervised loss by the estimator's confidence on
    /// the weak view (parametric mode).
    pub un_uses_estimator: bool,
    /// Decay of an evaluation-only moving average of the model weights.
    pub ema_decay: Option<f64>,
    pub model: ModelConfig,
    pub estimator: EstimatorConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::ConmatchP,
            gate: None,
            batch_size: 16,
            mu: 7,
            lr0: 0.03,
            momentum: 0.9,
            weight_decay: 5e-4,
            nesterov: true,
            total_steps: 3000,
            warmup_encoder_steps: 300,
            conf_pretrain_steps: 300,
            weights: None,
            tau: 0.95,
            threshold_window: crate::pseudo::DEFAULT_WINDOW,
            eval_every: 100,
            seed: 0,
            pseudo_mode: PseudoMode::OneHot,
            ccr_targets: PseudoMode::OneHot,
            temperature: 0.5,
            similarity: SimilarityKind::CrossEntropy,
            similarity_eps: DEFAULT_SIMILARITY_EPS,
            un_uses_estimator: false,
            ema_decay: None,
            model: ModelConfig::default(),
            estimator: EstimatorConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

fn config_error(key: &str, reason: impl Into<String>) -> Error {
    Error::InvalidConfig {
        key: key.to_string(),
        reason: reason.into(),
    }
}

impl TrainConfig {
    pub fn for_mode(mode: Mode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn gate(&self) -> Gate {
        self.gate.unwrap_or(self.mode.default_gate())
    }

    pub fn stage_weights(&self) -> StageWeights {
        self.weights.unwrap_or(StageWeights::for_mode(self.mode))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |key: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(config_error(key, format!("must be positive, got {v}")))
            }
        };
        if self.batch_size == 0 {
            return Err(config_error("batch_size", "must be positive"));
        }
        if self.mu == 0 {
            return Err(config_error("mu", "must be positive"));
        }
        positive("lr0", self.lr0)?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(config_error("momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(config_error("weight_decay", "must be non-negative"));
        }
        if self.total_steps == 0 {
            return Err(config_error("total_steps", "must be positive"));
        }
        if self.warmup_encoder_steps + self.conf_pretrain_steps > self.total_steps {
            return Err(config_error(
                "warmup_encoder_steps",
                format!(
                    "warmup_encoder_steps + conf_pretrain_steps = {} exceeds total_steps = {}",
                    self.warmup_encoder_steps + self.conf_pretrain_steps,
                    self.total_steps
                ),
            ));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(config_error("tau", format!("must lie in (0, 1], got {}", self.tau)));
        }
        if self.threshold_window == 0 {
            return Err(config_error("threshold_window", "must be positive"));
        }
        if self.eval_every == 0 {
            return Err(config_error("eval_every", "must be positive"));
        }
        positive("temperature", self.temperature)?;
        positive("similarity_eps", self.similarity_eps)?;
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(config_error("ema_decay", "must lie in [0, 1)"));
            }
        }
        if self.model.hidden.is_empty() || self.model.hidden.contains(&0) {
            return Err(config_error("model.hidden", "needs at least one positive width"));
        }
        let a = &self.augment;
        for (key, v) in [
            ("augment.weak_noise", a.weak_noise),
            ("augment.strong_noise", a.strong_noise),
            ("augment.scale", a.scale),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(config_error(key, "must be non-negative"));
            }
        }
        if !(0.0..=1.0).contains(&a.mask_prob) {
            return Err(config_error("augment.mask_prob", "must lie in [0, 1]"));
        }
        let weights = self.stage_weights();
        for (stage, w) in [
            ("encoder_pretrain", weights.encoder_pretrain),
            ("conf_pretrain", weights.conf_pretrain),
            ("finetune", weights.finetune),
        ] {
            w.validate()
                .map_err(|e| config_error(&format!("weights.{stage}"), e.to_string()))?;
            if !self.mode.is_parametric() && (w.conf != 0.0 || w.conf_sup != 0.0) {
                return Err(config_error(
                    &format!("weights.{stage}.conf"),
                    format!("mode {} trains no confidence estimator", self.mode),
                ));
            }
        }
        if !self.mode.has_ccr() && weights.finetune.ccr != 0.0 {
            return Err(config_error(
                "weights.finetune.ccr",
                format!("mode {} has no consistency term", self.mode),
            ));
        }
        if self.un_uses_estimator && !self.mode.is_parametric() {
            return Err(config_error("un_uses_estimator", "requires mode conmatch_p"));
        }
        Ok(())
    }
}

/// Stage of 0-based `step`. Estimator pre-training only exists in
/// parametric mode.
pub fn stage_of(step: u64, config: &TrainConfig) -> Stage {
    if step < config.warmup_encoder_steps {
        Stage::EncoderPretrain
    } else if config.mode.is_parametric() && step < config.warmup_encoder_steps + config.conf_pretrain_steps {
        Stage::ConfPretrain
    } else {
        Stage::Finetune
    }
}

/// Labeled set, unlabeled pool and held-out evaluation set of one run.
#[derive(Debug, Clone)]
pub struct ExperimentData<T> {
    pub labeled: Dataset<T>,
    pub unlabeled: UnlabeledPool<T>,
    pub test: Dataset<T>,
}

impl<T: Scalar> ExperimentData<T> {
    pub fn new(labeled: Dataset<T>, unlabeled: UnlabeledPool<T>, test: Dataset<T>) -> Result<Self> {
        let (shape, k) = (labeled.shape(), labeled.n_classes());
        if unlabeled.shape() != shape || test.shape() != shape {
            return Err(Error::ShapeMismatch {
                context: "experiment data".into(),
                expected: shape.to_manifest(),
                found: format!("{} / {}", unlabeled.shape().to_manifest(), test.shape().to_manifest()),
            });
        }
        if unlabeled.n_classes() != k || test.n_classes() != k {
            return Err(Error::invalid("labeled, unlabeled and test sets disagree on the class count"));
        }
        Ok(Self {
            labeled,
            unlabeled,
            test,
        })
    }

    pub fn from_split(split: LabeledSplit<T>, test: Dataset<T>) -> Result<Self> {
        Self::new(split.labeled, split.unlabeled, test)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent seed for one consumer of the run seed.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag))
}

const SEED_MODEL: u64 = 1;
const SEED_CONF: u64 = 2;
const SEED_BATCHES: u64 = 3;
const SEED_AUGMENT: u64 = 4;

/// Running sums over the current logging interval.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct IntervalStats {
    pub steps: u64,
    pub losses: LossBreakdown,
    pub mask_rate: f64,
}

impl IntervalStats {
    fn push(&mut self, r: &StepReport) {
        let (s, l) = (&mut self.losses, &r.losses);
        s.sup += l.sup;
        s.un += l.un;
        s.ccr += l.ccr;
        s.conf += l.conf;
        s.conf_sup += l.conf_sup;
        s.self_sup += l.self_sup;
        s.total += l.total;
        self.mask_rate += r.mask_rate;
        self.steps += 1;
    }

    fn mean(&self) -> (LossBreakdown, f64) {
        let n = self.steps.max(1) as f64;
        let l = &self.losses;
        (
            LossBreakdown {
                sup: l.sup / n,
                un: l.un / n,
                ccr: l.ccr / n,
                conf: l.conf / n,
                conf_sup: l.conf_sup / n,
                self_sup: l.self_sup / n,
                total: l.total / n,
            },
            self.mask_rate / n,
        )
    }
}

/// Everything that changes during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    /// Number of completed steps.
    pub step: u64,
    pub model: ParamStore<T>,
    /// Estimator parameters; empty outside parametric mode.
    pub conf: ParamStore<T>,
    pub conf_buffers: ParamStore<T>,
    pub momentum: ParamStore<T>,
    pub ema: Option<ParamStore<T>>,
    pub thresholds: ThresholdState,
    pub batches: BatchIterState,
    pub interval: IntervalStats,
}

/// Result of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub stage: Stage,
    pub lr: f64,
    pub losses: LossBreakdown,
    /// Fraction of unlabeled samples admitted by the gate.
    pub mask_rate: f64,
}

/// Evaluation on clean (unaugmented) inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub train_error: f64,
    pub test_error: f64,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub pseudo: PseudoQuality,
    pub confidence_source: ConfidenceSource,
    /// `None` when every pseudo-label is right (or every one wrong).
    pub confidence_auc: Option<f64>,
}

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub schema_version: u32,
    pub step: u64,
    pub stage: Stage,
    pub lr: f64,
    /// Mean over the steps since the previous record.
    pub losses: LossBreakdown,
    pub mask_rate: f64,
    #[serde(flatten)]
    pub eval: EvalMetrics,
}

struct StepOutput<T> {
    report: StepReport,
    model_grads: Option<Gradients<T>>,
    conf_grads: Option<Gradients<T>>,
    norm_stats: Option<NormStats<T>>,
    thresholds: Option<ThresholdState>,
}

pub struct Trainer<'a, T> {
    config: TrainConfig,
    data: &'a ExperimentData<T>,
    model_spec: ModelSpec,
    conf_spec: Option<ConfSpec>,
    weak: AugPolicy,
    strong: AugPolicy,
    state: TrainState<T>,
    batches: BatchIter,
}

fn pool_std<T: Scalar>(x: &Tensor<T>) -> f64 {
    let data = x.data();
    if data.is_empty() {
        return 0.0;
    }
    let n = data.len() as f64;
    let mean = data.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    (data.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n).sqrt()
}

impl<'a, T: Scalar> Trainer<'a, T> {
    /// Fresh run: parameters initialized from the config seed.
    pub fn new(config: TrainConfig, data: &'a ExperimentData<T>) -> Result<Self> {
        let (model_spec, conf_spec) = Self::specs(&config, data)?;
        let model = init_model_params(&model_spec, derive_seed(config.seed, SEED_MODEL));
        let (conf, conf_buffers) = match &conf_spec {
            Some(spec) => init_conf_params(spec, derive_seed(config.seed, SEED_CONF)),
            None => (ParamStore::new(), ParamStore::new()),
        };
        let state = TrainState {
            step: 0,
            ema: config.ema_decay.map(|_| model.clone()),
            model,
            conf,
            conf_buffers,
            momentum: ParamStore::new(),
            thresholds: ThresholdState::new(model_spec.n_classes, config.tau, config.threshold_window)?,
            batches: BatchIterState::default(),
            interval: IntervalStats::default(),
        };
        Self::resume(config, data, state)
    }

    /// Continues from a saved state.
    pub fn resume(config: TrainConfig, data: &'a ExperimentData<T>, state: TrainState<T>) -> Result<Self> {
        let (model_spec, conf_spec) = Self::specs(&config, data)?;
        model_spec.check_params(&state.model)?;
        if state.step > config.total_steps {
            return Err(Error::invalid("state is past the configured total_steps"));
        }
        let std = pool_std(data.unlabeled.inputs());
        let (weak, strong) = config.augment.policies(data.labeled.shape(), std);
        weak.validate(data.labeled.shape())?;
        strong.validate(data.labeled.shape())?;
        let batches = BatchIter::with_state(
            data.labeled.len(),
            data.unlabeled.len(),
            config.batch_size,
            config.mu,
            derive_seed(config.seed, SEED_BATCHES),
            state.batches,
        )?;
        Ok(Self {
            config,
            data,
            model_spec,
            conf_spec,
            weak,
            strong,
            state,
            batches,
        })
    }

    fn specs(config: &TrainConfig, data: &ExperimentData<T>) -> Result<(ModelSpec, Option<ConfSpec>)> {
        config.validate()?;
        let model_spec = ModelSpec {
            input_dim: data.labeled.shape().numel(),
            hidden: config.model.hidden.clone(),
            n_classes: data.labeled.n_classes(),
            activation: config.model.activation,
        };
        model_spec.validate()?;
        let conf_spec = if config.mode.is_parametric() {
            let spec = config.estimator.spec(model_spec.feature_dim(), model_spec.n_classes);
            spec.validate()
                .map_err(|e| config_error("estimator", e.to_string()))?;
            Some(spec)
        } else {
            None
        };
        Ok((model_spec, conf_spec))
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn state(&self) -> &TrainState<T> {
        &self.state
    }

    pub fn model_spec(&self) -> &ModelSpec {
        &self.model_spec
    }

    pub fn conf_spec(&self) -> Option<&ConfSpec> {
        self.conf_spec.as_ref()
    }

    pub fn is_finished(&self) -> bool {
        self.state.step >= self.config.total_steps
    }

    /// One optimization step on the next batch.
    pub fn train_step(&mut self) -> Result<StepReport> {
        if self.is_finished() {
            return Err(Error::invalid("training already finished"));
        }
        let idx = self.batches.next().expect("batch stream is infinite");
        let batch = idx.materialize(&self.data.labeled, &self.data.unlabeled);
        let out = self.compute_step(&batch)?;
        self.apply(out)
    }

    /// Steps once and returns a log record when an evaluation is due.
    pub fn advance(&mut self) -> Result<Option<LogRecord>> {
        let report = self.train_step()?;
        self.state.interval.push(&report);
        let done = self.state.step;
        if !done.is_multiple_of(self.config.eval_every) && done != self.config.total_steps {
            return Ok(None);
        }
        let (losses, mask_rate) = self.state.interval.mean();
        self.state.interval = IntervalStats::default();
        Ok(Some(LogRecord {
            schema_version: LOG_SCHEMA_VERSION,
            step: done,
            stage: report.stage,
            lr: report.lr,
            losses,
            mask_rate,
            eval: self.evaluate()?,
        }))
    }

    /// Trains to `total_steps`, returning every log record.
    pub fn run(&mut self) -> Result<Vec<LogRecord>> {
        let mut records = Vec::new();
        while !self.is_finished() {
            if let Some(r) = self.advance()? {
                records.push(r);
            }
        }
        Ok(records)
    }

    fn compute_step(&self, batch: &BatchPair<T>) -> Result<StepOutput<T>> {
        let cfg = &self.config;
        let state = &self.state;
        let step = state.step;
        let stage = stage_of(step, cfg);
        let w = cfg.stage_weights().get(stage);
        let parametric = cfg.mode.is_parametric();
        let model_trainable = stage != Stage::ConfPretrain;
        let conf_trainable = parametric && stage != Stage::EncoderPretrain;
        let temperature = T::lit(cfg.temperature);

        let shape = self.data.labeled.shape();
        let aug_seed = derive_seed(cfg.seed, SEED_AUGMENT);
        let aug = |x: &Tensor<T>, policy: &AugPolicy, branch: Branch| {
            augment_batch(x, shape, policy, aug_seed, step, branch)
        };
        let x_l = aug(&batch.labeled_inputs, &self.weak, Branch::LabeledWeak)?;
        let x_w = aug(&batch.unlabeled_inputs, &self.weak, Branch::UnlabeledWeak)?;
        let x_i = aug(&batch.unlabeled_inputs, &self.strong, Branch::StrongI)?;
        let x_j = aug(&batch.unlabeled_inputs, &self.strong, Branch::StrongJ)?;

        let mut g = Graph::new();
        let mb = g.bind(&state.model, |_| !model_trainable);
        let cb = g.bind(&state.conf, |_| !conf_trainable);
        let forward = |g: &mut Graph<T>, x: Tensor<T>| -> Result<ForwardNodes> {
            let input = g.constant(x);
            forward_graph(g, &mb, &self.model_spec, input)
        };
        let f_l = forward(&mut g, x_l)?;
        let f_w = forward(&mut g, x_w)?;
        let f_i = forward(&mut g, x_i)?;
        let f_j = forward(&mut g, x_j)?;
        for f in [&f_l, &f_w, &f_i, &f_j] {
            if !g.value(f.logits).is_finite() {
                return Err(Error::NonFiniteLoss("model outputs".into()));
            }
        }
        let n_u = batch.unlabeled_inputs.rows();
        let n_l = batch.labeled_inputs.rows();

        // Weak-view predictions: values only, never differentiated.
        let p_w = g.value(f_w.probs).clone();
        let weak_probs: Vec<ProbVec<T>> = p_w
            .iter_rows()
            .map(|r| ProbVec::new(r.to_vec()))
            .collect::<Result<_>>()?;
        let gate = cfg.gate();
        let mask: Vec<bool> = weak_probs
            .iter()
            .map(|p| match gate {
                Gate::Fixed => fixed_threshold_mask(p, cfg.tau),
                Gate::Curriculum => curriculum_mask(p, &state.thresholds),
            })
            .collect();
        let mask_rate = mask.iter().filter(|&&m| m).count() as f64 / n_u as f64;
        let thresholds = (gate == Gate::Curriculum)
            .then(|| update_class_thresholds(state.thresholds.clone(), &weak_probs));

        // Estimator on frozen model outputs: rows [A_i; A_j; α(x); α(u)?].
        let weak_rows = cfg.un_uses_estimator && stage == Stage::Finetune;
        let mut estimator = None;
        if let (Some(spec), true) = (&self.conf_spec, stage != Stage::EncoderPretrain) {
            let mut feats = vec![g.value(f_i.features), g.value(f_j.features), g.value(f_l.features)];
            let mut logits = vec![g.value(f_i.logits), g.value(f_j.logits), g.value(f_l.logits)];
            if weak_rows {
                feats.push(g.value(f_w.features));
                logits.push(g.value(f_w.logits));
            }
            let feats = Tensor::vstack(&feats);
            let logits = Tensor::vstack(&logits);
            let fc = g.constant(feats);
            let lc = g.constant(logits);
            let (c, stats) = conf_forward_graph(&mut g, &cb, spec, &state.conf_buffers, fc, lc, NormMode::Train)?;
            estimator = Some((c, stats));
        }

        let mut terms: Vec<(&'static str, f64, NodeId)> = Vec::new();
        if stage != Stage::ConfPretrain {
            let sup = loss_sup(&mut g, f_l.probs, &batch.labels)?;
            terms.push(("L_sup", w.sup, sup));

            let mut gate_w: Vec<T> = mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect();
            if let (true, Some((c, _))) = (weak_rows, &estimator) {
                let cv = g.value(*c);
                for (r, gw) in gate_w.iter_mut().enumerate() {
                    *gw = *gw * cv.get(2 * n_u + n_l + r, 0);
                }
            }
            let q = pseudo_targets(&p_w, cfg.pseudo_mode, temperature)?;
            let un = loss_un(&mut g, f_i.probs, q, &gate_w)?;
            terms.push(("L_un", w.un, un));
        }

        if let Some((c, _)) = &estimator {
            let c = *c;
            let p_i = g.value(f_i.probs).clone();
            let p_j = g.value(f_j.probs).clone();
            let mut h = Vec::with_capacity(2 * n_u);
            for p in [&p_i, &p_j] {
                for r in 0..n_u {
                    h.push(floored_cross_entropy(p_w.row(r), p.row(r)));
                }
            }
            let c_strong = g.slice_rows(c, 0, 2 * n_u);
            let conf = loss_conf(&mut g, c_strong, &h)?;
            terms.push(("L_conf", w.conf, conf));
            let c_gt = confidence_targets(g.value(f_l.probs), &batch.labels);
            let c_lab = g.slice_rows(c, 2 * n_u, 2 * n_u + n_l);
            let conf_sup = loss_conf_sup(&mut g, c_lab, &c_gt)?;
            terms.push(("L_conf_sup", w.conf_sup, conf_sup));
        }

        if stage == Stage::Finetune && cfg.mode.has_ccr() {
            let pairs: Vec<ConfidencePair<T>> = match cfg.mode {
                Mode::ConmatchP => {
                    let (c, _) = estimator.as_ref().expect("estimator runs during finetune");
                    let cv = g.value(*c);
                    (0..n_u)
                        .map(|r| ConfidencePair {
                            c_i: cv.get(r, 0),
                            c_j: cv.get(n_u + r, 0),
                        })
                        .collect()
                }
                Mode::AblationUnguided => vec![ConfidencePair::constant(T::lit(0.5)); n_u],
                _ => {
                    let eps = T::lit(cfg.similarity_eps);
                    let (a, b, c) = if cfg.similarity == SimilarityKind::Cosine {
                        (f_w.features, f_i.features, f_j.features)
                    } else {
                        (f_w.probs, f_i.probs, f_j.probs)
                    };
                    np_confidence_batch(g.value(a), g.value(b), g.value(c), cfg.similarity, eps)
                }
            };
            let t_i = pseudo_targets(g.value(f_i.probs), cfg.ccr_targets, temperature)?;
            let t_j = pseudo_targets(g.value(f_j.probs), cfg.ccr_targets, temperature)?;
            let ccr = loss_ccr(&mut g, f_i.probs, f_j.probs, t_i, t_j, &pairs)?;
            terms.push(("L_ccr", w.ccr, ccr));
        }

        if stage == Stage::Finetune && w.self_sup > 0.0 {
            let s = loss_self(&mut g, f_i.features, f_j.features);
            terms.push(("L_self", w.self_sup, s));
        }

        let mut losses = LossBreakdown::default();
        let mut total: Option<NodeId> = None;
        for (name, weight, node) in terms {
            let v = g.value(node).item();
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss(name.into()));
            }
            let v = v.as_f64();
            match name {
                "L_sup" => losses.sup = v,
                "L_un" => losses.un = v,
                "L_ccr" => losses.ccr = v,
                "L_conf" => losses.conf = v,
                "L_conf_sup" => losses.conf_sup = v,
                _ => losses.self_sup = v,
            }
            let scaled = g.scale(node, T::lit(weight));
            total = Some(match total {
                Some(t) => g.add(t, scaled),
                None => scaled,
            });
        }
        let total = total.expect("every stage trains at least one term");
        let tv = g.value(total).item();
        if !tv.is_finite() {
            return Err(Error::NonFiniteLoss("total".into()));
        }
        losses.total = tv.as_f64();

        let grads = g.backward(total)?;
        let model_grads = model_trainable.then(|| g.gradients(&grads, &mb, &state.model));
        let conf_grads = conf_trainable.then(|| g.gradients(&grads, &cb, &state.conf));
        let norm_stats = estimator.filter(|_| conf_trainable).map(|(_, s)| s);
        Ok(StepOutput {
            report: StepReport {
                step,
                stage,
                lr: cosine_lr(cfg.lr0, step, cfg.total_steps),
                losses,
                mask_rate,
            },
            model_grads,
            conf_grads,
            norm_stats,
            thresholds,
        })
    }

    fn apply(&mut self, out: StepOutput<T>) -> Result<StepReport> {
        let cfg = &self.config;
        let opt = Sgd {
            lr: out.report.lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            nesterov: cfg.nesterov,
        };
        let st = &mut self.state;
        if let Some(g) = &out.model_grads {
            sgd_update(&mut st.model, g, &mut st.momentum, &opt)?;
            if !st.model.is_finite() {
                return Err(Error::NonFiniteLoss("model parameters".into()));
            }
        }
        if let Some(g) = &out.conf_grads {
            sgd_update(&mut st.conf, g, &mut st.momentum, &opt)?;
            if !st.conf.is_finite() {
                return Err(Error::NonFiniteLoss("estimator parameters".into()));
            }
        }
        if let (Some(stats), Some(spec)) = (&out.norm_stats, &self.conf_spec) {
            stats.apply(&mut st.conf_buffers, spec.norm_momentum)?;
        }
        if let Some(t) = out.thresholds {
            st.thresholds = t;
        }
        if let (Some(ema), Some(d)) = (st.ema.as_mut(), cfg.ema_decay) {
            let d = T::lit(d);
            for (name, e) in ema.iter_mut() {
                let m = st.model.require(name)?;
                for (ev, &mv) in e.data_mut().iter_mut().zip(m.data()) {
                    *ev = d * *ev + (T::one() - d) * mv;
                }
            }
        }
        st.step += 1;
        st.batches = self.batches.state();
        Ok(out.report)
    }

    /// Parameters used for evaluation: the moving average when enabled.
    pub fn eval_params(&self) -> &ParamStore<T> {
        self.state.ema.as_ref().unwrap_or(&self.state.model)
    }

    /// Confidence of every unlabeled sample's pseudo-label on clean inputs,
    /// with the rule turning it into a selection.
    pub fn pool_confidences(&self) -> Result<(Vec<usize>, Vec<f64>, ConfidenceSource)> {
        let out = forward_batch(self.eval_params(), &self.model_spec, self.data.unlabeled.inputs())?;
        let preds = out.predictions();
        let (scores, source) = match &self.conf_spec {
            Some(spec) => {
                let c = conf_forward_batch(&self.state.conf, &self.state.conf_buffers, spec, &out.features, &out.logits)?;
                (c.iter().map(|v| v.as_f64()).collect(), ConfidenceSource::Estimator)
            }
            None => (
                (0..out.probs.rows())
                    .map(|r| out.prob_vec(r).max_prob().as_f64())
                    .collect(),
                ConfidenceSource::MaxProb,
            ),
        };
        Ok((preds, scores, source))
    }

    pub fn evaluate(&self) -> Result<EvalMetrics> {
        let params = self.eval_params();
        let test = forward_batch(params, &self.model_spec, self.data.test.inputs())?;
        let test_pred = test.predictions();
        let test_error = error_rate(&test_pred, self.data.test.labels())?;
        let per_class = per_class_accuracy(&test_pred, self.data.test.labels(), self.model_spec.n_classes);
        let train = forward_batch(params, &self.model_spec, self.data.labeled.inputs())?;
        let train_error = error_rate(&train.predictions(), self.data.labeled.labels())?;

        let (preds, scores, source) = self.pool_confidences()?;
        let truth = self.data.unlabeled.eval_labels();
        let threshold = match source {
            ConfidenceSource::Estimator => ESTIMATOR_THRESHOLD,
            ConfidenceSource::MaxProb => self.config.tau,
        };
        let mask = confident_set(&scores, source, threshold);
        let pseudo = pseudo_quality(&preds, truth, &mask)?;
        let correct: Vec<bool> = preds.iter().zip(truth).map(|(&p, &y)| p == y as usize).collect();
        let confidence_auc = match auc_roc(&scores, &correct) {
            Ok(a) => Some(a),
            Err(Error::DegenerateLabels) => None,
            Err(e) => return Err(e),
        };
        Ok(EvalMetrics {
            train_error,
            test_error,
            per_class_accuracy: per_class,
            pseudo,
            confidence_source: source,
            confidence_auc,
        })
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        save_state(&self.state, &self.config, dir)
    }
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    format: String,
    dtype: String,
    step: u64,
    has_ema: bool,
    thresholds: ThresholdState,
    batches: BatchIterState,
    interval: IntervalStats,
    config: TrainConfig,
}

const STATE_FORMAT: &str = "conmatch-state v1";
const TENSOR_STEM: &str = "tensors";
const STATE_FILE: &str = "state.json";

/// Writes `state` and the config that produced it under `dir`.
pub fn save_state<T: Scalar>(state: &TrainState<T>, config: &TrainConfig, dir: &Path) -> Result<()> {
    let mut all = ParamStore::new();
    for (prefix, store) in [
        ("params/", &state.model),
        ("params/", &state.conf),
        ("buffers/", &state.conf_buffers),
        ("momentum/", &state.momentum),
    ] {
        for (name, t) in store.iter() {
            all.insert(format!("{prefix}{name}"), t.clone());
        }
    }
    if let Some(ema) = &state.ema {
        for (name, t) in ema.iter() {
            all.insert(format!("ema/{name}"), t.clone());
        }
    }
    checkpoint::save_tensors(&all, dir, TENSOR_STEM)?;
    let file = StateFile {
        format: STATE_FORMAT.into(),
        dtype: T::DTYPE.name().into(),
        step: state.step,
        has_ema: state.ema.is_some(),
        thresholds: state.thresholds.clone(),
        batches: state.batches,
        interval: state.interval,
        config: config.clone(),
    };
    std::fs::write(dir.join(STATE_FILE), serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

/// Reads a state written by [`save_state`], with the config stored beside it.
pub fn load_state<T: Scalar>(dir: &Path) -> Result<(TrainState<T>, TrainConfig)> {
    let file: StateFile = serde_json::from_str(&std::fs::read_to_string(dir.join(STATE_FILE))?)?;
    if file.format != STATE_FORMAT {
        return Err(Error::format("state file", format!("unknown format `{}`", file.format)));
    }
    let all = checkpoint::load_tensors::<T>(dir, TENSOR_STEM)?;
    let mut model = ParamStore::new();
    let mut conf = ParamStore::new();
    let mut conf_buffers = ParamStore::new();
    let mut momentum = ParamStore::new();
    let mut ema = ParamStore::new();
    for (name, t) in all.iter() {
        let (kind, rest) = name
            .split_once('/')
            .ok_or_else(|| Error::format("checkpoint", format!("unscoped tensor `{name}`")))?;
        let target = match kind {
            "params" if rest.starts_with(ModelSpec::PREFIX) => &mut model,
            "params" if rest.starts_with(ConfSpec::PREFIX) => &mut conf,
            "buffers" => &mut conf_buffers,
            "momentum" => &mut momentum,
            "ema" => &mut ema,
            _ => return Err(Error::format("checkpoint", format!("unexpected tensor `{name}`"))),
        };
        target.insert(rest, t.clone());
    }
    let state = TrainState {
        step: file.step,
        model,
        conf,
        conf_buffers,
        momentum,
        ema: file.has_ema.then_some(ema),
        thresholds: file.thresholds,
        batches: file.batches,
        interval: file.interval,
    };
    Ok((state, file.config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::{make_synthetic, split_labeled, SplitSpec};

    fn data(seed: u64) -> ExperimentData<f64> {
        let train = make_synthetic::<f64>(3, 40, 4, 3.0, 1.0, seed).unwrap();
        let test = make_synthetic::<f64>(3, 20, 4, 3.0, 1.0, seed + 100).unwrap();
        let split = split_labeled(&train, SplitSpec::new(4, seed)).unwrap();
        ExperimentData::from_split(split, test).unwrap()
    }

    fn small(mode: Mode) -> TrainConfig {
        TrainConfig {
            total_steps: 30,
            warmup_encoder_steps: 10,
            conf_pretrain_steps: 10,
            eval_every: 10,
            batch_size: 4,
            mu: 2,
            model: ModelConfig {
                hidden: vec![8],
                activation: Activation::Relu,
            },
            ..TrainConfig::for_mode(mode)
        }
    }

    #[test]
    fn stage_examples() {
        let cfg = TrainConfig {
            total_steps: 20000,
            warmup_encoder_steps: 4000,
            conf_pretrain_steps: 10000,
            ..TrainConfig::for_mode(Mode::ConmatchP)
        };
        assert_eq!(stage_of(0, &cfg), Stage::EncoderPretrain);
        assert_eq!(stage_of(4000, &cfg), Stage::ConfPretrain);
        assert_eq!(stage_of(14000, &cfg), Stage::Finetune);
        let np = TrainConfig {
            mode: Mode::ConmatchNp,
            ..cfg.clone()
        };
        assert_eq!(stage_of(4000, &np), Stage::Finetune);
        let e2e = TrainConfig {
            warmup_encoder_steps: 0,
            mode: Mode::ConmatchNp,
            ..cfg
        };
        assert_eq!(stage_of(0, &e2e), Stage::Finetune);
    }

    #[test]
    fn validation_names_keys() {
        let bad = TrainConfig {
            warmup_encoder_steps: 3000,
            ..TrainConfig::default()
        };
        match bad.validate() {
            Err(Error::InvalidConfig { key, .. }) => assert_eq!(key, "warmup_encoder_steps"),
            other => panic!("unexpected {other:?}"),
        }
        for mode in Mode::ALL {
            TrainConfig::for_mode(mode).validate().unwrap();
        }
        let mut inconsistent = TrainConfig::for_mode(Mode::BaselineFix);
        inconsistent.weights = Some(StageWeights::for_mode(Mode::ConmatchNp));
        assert!(matches!(inconsistent.validate(), Err(Error::InvalidConfig { .. })));
    }

    #[test]
    fn modes_run_and_log() {
        let d = data(1);
        for mode in Mode::ALL {
            let mut t = Trainer::new(small(mode), &d).unwrap();
            let log = t.run().unwrap();
            assert_eq!(log.iter().map(|r| r.step).collect::<Vec<_>>(), vec![10, 20, 30], "{mode}");
            assert!(log.iter().all(|r| r.losses.total.is_finite()));
            assert_eq!(log[0].stage, Stage::EncoderPretrain);
        }
    }

    #[test]
    fn conf_pretrain_freezes_model() {
        let d = data(2);
        let mut t = Trainer::new(small(Mode::ConmatchP), &d).unwrap();
        for _ in 0..10 {
            t.train_step().unwrap();
        }
        let before = t.state().model.clone();
        let conf_before = t.state().conf.clone();
        let r = t.train_step().unwrap();
        assert_eq!(r.stage, Stage::ConfPretrain);
        assert_eq!(t.state().model, before);
        assert_ne!(t.state().conf, conf_before);
    }

    #[test]
    fn encoder_pretrain_freezes_estimator() {
        let d = data(3);
        let mut t = Trainer::new(small(Mode::ConmatchP), &d).unwrap();
        let conf = t.state().conf.clone();
        let buffers = t.state().conf_buffers.clone();
        t.train_step().unwrap();
        assert_eq!(t.state().conf, conf);
        assert_eq!(t.state().conf_buffers, buffers);
    }

    #[test]
    fn checkpoint_round_trip() {
        let d = data(4);
        let mut t = Trainer::new(small(Mode::ConmatchP), &d).unwrap();
        for _ in 0..15 {
            t.advance().unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        t.save_checkpoint(dir.path()).unwrap();
        let (state, cfg) = load_state::<f64>(dir.path()).unwrap();
        assert_eq!(&state, t.state());
        assert_eq!(&cfg, t.config());
    }
}
