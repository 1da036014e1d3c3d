//! Confidence of strong-branch pseudo-labels.
//!
//! Two estimators share this module. The closed-form one scores each strong
//! view by its similarity to the weak anchor and normalizes the pair. The
//! learned one is a small network `h(F, L)` with separate projection heads for
//! features and (top-k masked) logits, a trunk, and a squashed scalar output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{floored_cross_entropy, Activation, Bound, Graph, NodeId};
use crate::error::{Error, Result};
use crate::model::he_uniform;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityKind {
    /// `1 / max(H(p_anchor, p_strong), eps)` on probabilities.
    CrossEntropy,
    /// `1 / max(‖p_strong − p_anchor‖₂, eps)` on probabilities.
    L2,
    /// `(1 + cos(F_strong, F_anchor)) / 2 + eps` on features.
    Cosine,
}

pub const DEFAULT_SIMILARITY_EPS: f64 = 1e-8;

/// Similarity of a strong view to its weak anchor. `anchor`/`strong` are
/// probability vectors for the cross-entropy and L2 kinds and feature
/// vectors for the cosine kind.
pub fn similarity<T: Scalar>(kind: SimilarityKind, anchor: &[T], strong: &[T], eps: T) -> T {
    match kind {
        SimilarityKind::CrossEntropy => T::one() / floored_cross_entropy(anchor, strong).max(eps),
        SimilarityKind::L2 => {
            let d: T = anchor
                .iter()
                .zip(strong)
                .map(|(&a, &s)| (s - a) * (s - a))
                .sum::<T>()
                .sqrt();
            T::one() / d.max(eps)
        }
        SimilarityKind::Cosine => {
            let dot: T = anchor.iter().zip(strong).map(|(&a, &s)| a * s).sum();
            let na = anchor.iter().map(|&a| a * a).sum::<T>().sqrt();
            let ns = strong.iter().map(|&s| s * s).sum::<T>().sqrt();
            let denom = na * ns;
            let cos = if denom > T::zero() { dot / denom } else { T::zero() };
            (T::one() + cos) / T::lit(2.0) + eps
        }
    }
}

/// Confidences of the two strong views of one instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidencePair<T> {
    pub c_i: T,
    pub c_j: T,
}

impl<T: Scalar> ConfidencePair<T> {
    pub fn constant(c: T) -> Self {
        Self { c_i: c, c_j: c }
    }
}

/// `c_i = s_i / (s_i + s_j)`, `c_j = s_j / (s_i + s_j)`.
pub fn np_confidence<T: Scalar>(
    weak: &[T],
    strong_i: &[T],
    strong_j: &[T],
    kind: SimilarityKind,
    eps: T,
) -> ConfidencePair<T> {
    let s_i = similarity(kind, weak, strong_i, eps);
    let s_j = similarity(kind, weak, strong_j, eps);
    pair_from_scores(s_i, s_j)
}

pub fn pair_from_scores<T: Scalar>(s_i: T, s_j: T) -> ConfidencePair<T> {
    let total = s_i + s_j;
    let c_i = s_i / total;
    ConfidencePair {
        c_i,
        c_j: T::one() - c_i,
    }
}

/// Row-wise [`np_confidence`] over a batch.
pub fn np_confidence_batch<T: Scalar>(
    weak: &Tensor<T>,
    strong_i: &Tensor<T>,
    strong_j: &Tensor<T>,
    kind: SimilarityKind,
    eps: T,
) -> Vec<ConfidencePair<T>> {
    (0..weak.rows())
        .map(|r| np_confidence(weak.row(r), strong_i.row(r), strong_j.row(r), kind, eps))
        .collect()
}

pub const DEFAULT_SENTINEL: f64 = -30.0;

/// Keep-mask of the `k` largest logits; among equal values the lowest index
/// wins.
pub fn topk_keep<T: Scalar>(logits: &[T], k: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| {
        logits[b]
            .partial_cmp(&logits[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut keep = vec![false; logits.len()];
    for &i in order.iter().take(k) {
        keep[i] = true;
    }
    keep
}

/// Replaces every logit outside the top `k` with `sentinel`; length is kept.
pub fn topk_mask<T: Scalar>(logits: &[T], k: usize, sentinel: T) -> Result<Vec<T>> {
    if k == 0 || k > logits.len() {
        return Err(Error::invalid(format!(
            "top-k needs 1 <= k <= {}, got {k}",
            logits.len()
        )));
    }
    Ok(topk_keep(logits, k)
        .into_iter()
        .zip(logits)
        .map(|(keep, &v)| if keep { v } else { sentinel })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorVariant {
    /// Constant trunk width.
    Basic,
    /// Trunk widths halve per layer.
    Reduced,
    /// Reduced trunk on top-k masked logits.
    Topk,
    /// Top-k plus normalization after every hidden linear layer.
    TopkNorm,
}

impl EstimatorVariant {
    fn uses_topk(self) -> bool {
        matches!(self, EstimatorVariant::Topk | EstimatorVariant::TopkNorm)
    }

    fn uses_norm(self) -> bool {
        self == EstimatorVariant::TopkNorm
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorInputs {
    FeaturesAndLogits,
    LogitsOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfSpec {
    pub feature_dim: usize,
    pub n_classes: usize,
    pub variant: EstimatorVariant,
    pub inputs: EstimatorInputs,
    pub k: usize,
    pub proj_width: usize,
    pub trunk_depth: usize,
    pub sentinel: f64,
    pub squash_delta: f64,
    pub norm_momentum: f64,
    pub norm_eps: f64,
}

impl ConfSpec {
    /// Default `topk_norm` estimator with 16-wide projection heads and
    /// `k = ⌈Y/2⌉` (5 for ten classes).
    pub fn new(feature_dim: usize, n_classes: usize) -> Self {
        Self {
            feature_dim,
            n_classes,
            variant: EstimatorVariant::TopkNorm,
            inputs: EstimatorInputs::FeaturesAndLogits,
            k: n_classes.div_ceil(2).max(1),
            proj_width: 16,
            trunk_depth: 2,
            sentinel: DEFAULT_SENTINEL,
            squash_delta: 1e-6,
            norm_momentum: 0.9,
            norm_eps: 1e-5,
        }
    }

    pub fn with_variant(mut self, variant: EstimatorVariant) -> Self {
        self.variant = variant;
        self
    }

    pub fn concat_width(&self) -> usize {
        match self.inputs {
            EstimatorInputs::FeaturesAndLogits => 2 * self.proj_width,
            EstimatorInputs::LogitsOnly => self.proj_width,
        }
    }

    pub fn trunk_widths(&self) -> Vec<usize> {
        let base = self.concat_width();
        (0..self.trunk_depth)
            .map(|i| match self.variant {
                EstimatorVariant::Basic => base,
                _ => (base >> (i + 1)).max(1),
            })
            .collect()
    }

    /// Effective top-k; `Y` for variants without masking.
    pub fn effective_k(&self) -> usize {
        if self.variant.uses_topk() {
            self.k
        } else {
            self.n_classes
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k > self.n_classes {
            return Err(Error::invalid(format!(
                "estimator k must lie in 1..={}, got {}",
                self.n_classes, self.k
            )));
        }
        if self.proj_width == 0 || self.feature_dim == 0 {
            return Err(Error::invalid("estimator widths must be positive"));
        }
        if !(self.squash_delta > 0.0 && self.squash_delta < 0.5) {
            return Err(Error::invalid("squash delta must lie in (0, 0.5)"));
        }
        Ok(())
    }

    /// Hidden linear layers, in order, with their output widths.
    fn hidden_layers(&self) -> Vec<(String, usize, usize)> {
        let mut layers = Vec::new();
        if self.inputs == EstimatorInputs::FeaturesAndLogits {
            layers.push(("conf.proj_f".to_string(), self.feature_dim, self.proj_width));
        }
        layers.push(("conf.proj_l".to_string(), self.n_classes, self.proj_width));
        let mut fan_in = self.concat_width();
        for (i, w) in self.trunk_widths().into_iter().enumerate() {
            layers.push((format!("conf.trunk.{i}"), fan_in, w));
            fan_in = w;
        }
        layers
    }

    pub const PREFIX: &'static str = "conf.";
}

/// Running normalization statistics (non-trainable).
pub type ConfBuffers<T> = ParamStore<T>;

pub fn init_conf_params<T: Scalar>(spec: &ConfSpec, seed: u64) -> (ParamStore<T>, ConfBuffers<T>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let mut buffers = ConfBuffers::new();
    for (name, fan_in, w) in spec.hidden_layers() {
        params.insert(format!("{name}.weight"), he_uniform(&mut rng, fan_in, w));
        params.insert(format!("{name}.bias"), Tensor::zeros(1, w));
        if spec.variant.uses_norm() {
            params.insert(format!("{name}.norm_gamma"), Tensor::full(1, w, T::one()));
            params.insert(format!("{name}.norm_beta"), Tensor::zeros(1, w));
            buffers.insert(format!("{name}.running_mean"), Tensor::zeros(1, w));
            buffers.insert(format!("{name}.running_var"), Tensor::full(1, w, T::one()));
        }
    }
    let last = spec.trunk_widths().last().copied().unwrap_or(spec.concat_width());
    let out_w = he_uniform::<T, _>(&mut rng, last, 1).map(|v| v * T::lit(0.1));
    params.insert("conf.out.weight", out_w);
    params.insert("conf.out.bias", Tensor::zeros(1, 1));
    (params, buffers)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics; running averages are returned for the caller to apply.
    Train,
    /// Running averages.
    Eval,
}

/// Batch statistics observed in training mode, keyed by layer name.
#[derive(Debug, Clone, Default)]
pub struct NormStats<T> {
    pub layers: Vec<(String, Vec<T>, Vec<T>)>,
}

impl<T: Scalar> NormStats<T> {
    /// `running ← m·running + (1 − m)·batch`.
    pub fn apply(&self, buffers: &mut ConfBuffers<T>, momentum: f64) -> Result<()> {
        let m = T::lit(momentum);
        let one_m = T::one() - m;
        for (name, mean, var) in &self.layers {
            for (suffix, batch) in [("running_mean", mean), ("running_var", var)] {
                let key = format!("{name}.{suffix}");
                let run = buffers
                    .get_mut(&key)
                    .ok_or_else(|| Error::MissingParameter(key.clone()))?;
                for (r, &b) in run.data_mut().iter_mut().zip(batch) {
                    *r = m * *r + one_m * b;
                }
            }
        }
        Ok(())
    }
}

fn linear_block<T: Scalar>(
    graph: &mut Graph<T>,
    bound: &Bound,
    spec: &ConfSpec,
    buffers: &ConfBuffers<T>,
    name: &str,
    x: NodeId,
    mode: NormMode,
    stats: &mut NormStats<T>,
) -> Result<NodeId> {
    let z = graph.matmul(x, bound.id(&format!("{name}.weight"))?);
    let mut z = graph.add_bias(z, bound.id(&format!("{name}.bias"))?);
    if spec.variant.uses_norm() {
        let eps = T::lit(spec.norm_eps);
        let normed = match mode {
            NormMode::Train => {
                let (n, mean, var) = graph.batch_norm(z, eps);
                stats.layers.push((name.to_string(), mean, var));
                n
            }
            NormMode::Eval => {
                let mean = buffers.require(&format!("{name}.running_mean"))?.data().to_vec();
                let inv_std = buffers
                    .require(&format!("{name}.running_var"))?
                    .data()
                    .iter()
                    .map(|&v| T::one() / (v + eps).sqrt())
                    .collect();
                graph.normalize_const(z, &mean, inv_std)
            }
        };
        let scaled = graph.mul_row(normed, bound.id(&format!("{name}.norm_gamma"))?);
        z = graph.add_bias(scaled, bound.id(&format!("{name}.norm_beta"))?);
    }
    Ok(graph.activation(z, Activation::Relu))
}

/// Records `c = squash(trunk(concat(proj_F(F), proj_L(topk_mask(L)))))`.
/// Gradient reaches `logits` only through the kept top-k entries.
pub fn conf_forward_graph<T: Scalar>(
    graph: &mut Graph<T>,
    bound: &Bound,
    spec: &ConfSpec,
    buffers: &ConfBuffers<T>,
    features: NodeId,
    logits: NodeId,
    mode: NormMode,
) -> Result<(NodeId, NormStats<T>)> {
    let (fv, lv) = (graph.value(features), graph.value(logits));
    if lv.cols() != spec.n_classes || fv.cols() != spec.feature_dim || fv.rows() != lv.rows() {
        return Err(Error::ShapeMismatch {
            context: "confidence estimator input".into(),
            expected: format!("F: n x {}, L: n x {}", spec.feature_dim, spec.n_classes),
            found: format!(
                "F: {} x {}, L: {} x {}",
                fv.rows(),
                fv.cols(),
                lv.rows(),
                lv.cols()
            ),
        });
    }
    let k = spec.effective_k();
    let masked = if k < spec.n_classes {
        let mut keep = Tensor::zeros(lv.rows(), lv.cols());
        let mut fill = Tensor::zeros(lv.rows(), lv.cols());
        let sentinel = T::lit(spec.sentinel);
        for r in 0..lv.rows() {
            for (c, kept) in topk_keep(lv.row(r), k).into_iter().enumerate() {
                if kept {
                    keep.set(r, c, T::one());
                } else {
                    fill.set(r, c, sentinel);
                }
            }
        }
        let kept = graph.mul_const(logits, keep);
        let fill = graph.constant(fill);
        graph.add(kept, fill)
    } else {
        logits
    };

    let mut stats = NormStats::default();
    let pl = linear_block(graph, bound, spec, buffers, "conf.proj_l", masked, mode, &mut stats)?;
    let mut h = match spec.inputs {
        EstimatorInputs::FeaturesAndLogits => {
            let pf = linear_block(graph, bound, spec, buffers, "conf.proj_f", features, mode, &mut stats)?;
            graph.concat_cols(pf, pl)
        }
        EstimatorInputs::LogitsOnly => pl,
    };
    for i in 0..spec.trunk_widths().len() {
        let name = format!("conf.trunk.{i}");
        h = linear_block(graph, bound, spec, buffers, &name, h, mode, &mut stats)?;
    }
    let z = graph.matmul(h, bound.id("conf.out.weight")?);
    let z = graph.add_bias(z, bound.id("conf.out.bias")?);
    let c = graph.squash(z, T::lit(spec.squash_delta));
    Ok((c, stats))
}

/// Evaluation-mode confidences for a batch of (features, logits) rows.
pub fn conf_forward_batch<T: Scalar>(
    params: &ParamStore<T>,
    buffers: &ConfBuffers<T>,
    spec: &ConfSpec,
    features: &Tensor<T>,
    logits: &Tensor<T>,
) -> Result<Vec<T>> {
    let mut graph = Graph::new();
    let bound = graph.bind(params, |_| true);
    let f = graph.constant(features.clone());
    let l = graph.constant(logits.clone());
    let (c, _) = conf_forward_graph(&mut graph, &bound, spec, buffers, f, l, NormMode::Eval)?;
    Ok(graph.value(c).data().to_vec())
}

/// Evaluation-mode confidence of one instance, in `(0, 1)`.
pub fn conf_forward<T: Scalar>(
    params: &ParamStore<T>,
    buffers: &ConfBuffers<T>,
    spec: &ConfSpec,
    features: &[T],
    logits: &[T],
) -> Result<T> {
    let c = conf_forward_batch(
        params,
        buffers,
        spec,
        &Tensor::row_vector(features.to_vec()),
        &Tensor::row_vector(logits.to_vec()),
    )?;
    Ok(c[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn similarity_examples() {
        let s = similarity(SimilarityKind::CrossEntropy, &[1.0, 0.0], &[0.5, 0.5], 1e-8);
        assert!((s - 1.0 / std::f64::consts::LN_2).abs() < 1e-12);
        assert!((s - 1.442_695).abs() < 1e-6);
        let p = [1.0 - 1e-13, 1e-13f64];
        let clamped = similarity(SimilarityKind::CrossEntropy, &p, &p, 1e-8);
        assert!(clamped.is_finite());
        assert!((clamped - 1e8).abs() < 1.0);
        let ortho = similarity(SimilarityKind::Cosine, &[1.0, 0.0], &[0.0, 2.0], 1e-8);
        assert_eq!(ortho, 0.5 + 1e-8);
        let l2 = similarity(SimilarityKind::L2, &[1.0, 0.0], &[0.0, 1.0], 1e-8);
        assert!((l2 - 1.0 / 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn np_pair_examples() {
        let w = [0.7, 0.2, 0.1];
        let s = [0.5, 0.3, 0.2];
        let pair = np_confidence(&w, &s, &s, SimilarityKind::CrossEntropy, 1e-8);
        assert_eq!(pair, ConfidencePair { c_i: 0.5, c_j: 0.5 });
        // H_i = 0.5, H_j = 1.0 ⇒ s = (2, 1)
        let p = pair_from_scores(1.0f64 / 0.5, 1.0 / 1.0);
        assert!((p.c_i - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.c_j - 1.0 / 3.0).abs() < 1e-15);
        let scaled = pair_from_scores(7.0 * 2.0, 7.0 * 1.0);
        assert!((scaled.c_i - p.c_i).abs() < 1e-15);
    }

    #[test]
    fn topk_examples() {
        let l = [3.0, 1.0, 2.0];
        assert_eq!(topk_mask(&l, 3, -30.0).unwrap(), l.to_vec());
        assert_eq!(topk_mask(&l, 2, -30.0).unwrap(), vec![3.0, -30.0, 2.0]);
        // tie at the k-th value keeps the lower index
        assert_eq!(topk_mask(&[1.0, 2.0, 1.0, 0.0], 2, -30.0).unwrap(), vec![1.0, 2.0, -30.0, -30.0]);
        assert!(topk_mask(&l, 0, -30.0).is_err());
        assert!(topk_mask(&l, 4, -30.0).is_err());
    }

    #[test]
    fn zero_trunk_gives_half() {
        for variant in [
            EstimatorVariant::Basic,
            EstimatorVariant::Reduced,
            EstimatorVariant::Topk,
            EstimatorVariant::TopkNorm,
        ] {
            let spec = ConfSpec::new(6, 4).with_variant(variant);
            let (mut params, buffers) = init_conf_params::<f64>(&spec, 3);
            for name in params.names_with_prefix("conf.trunk.") {
                if name.ends_with(".weight") {
                    let t = params.get_mut(&name).unwrap();
                    t.data_mut().iter_mut().for_each(|v| *v = 0.0);
                }
            }
            let w = params.get_mut("conf.out.weight").unwrap();
            w.data_mut().iter_mut().for_each(|v| *v = 0.0);
            let c = conf_forward(&params, &buffers, &spec, &[0.3; 6], &[1.0, -2.0, 0.5, 3.0]).unwrap();
            assert_eq!(c, 0.5, "{variant:?}");
        }
    }

    #[test]
    fn variants_have_expected_shapes() {
        let basic = ConfSpec::new(32, 10).with_variant(EstimatorVariant::Basic);
        let reduced = ConfSpec::new(32, 10).with_variant(EstimatorVariant::Reduced);
        assert_eq!(basic.trunk_widths(), vec![32, 32]);
        assert_eq!(reduced.trunk_widths(), vec![16, 8]);
        assert_eq!(ConfSpec::new(32, 10).k, 5);
        let (pb, _) = init_conf_params::<f64>(&basic, 1);
        let (pr, _) = init_conf_params::<f64>(&reduced, 1);
        assert!(pb.numel() > pr.numel());
        let f = [0.5; 32];
        let l = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
        for (spec, p) in [(&basic, &pb), (&reduced, &pr)] {
            let c = conf_forward(p, &ParamStore::new(), spec, &f, &l).unwrap();
            assert!(c > 0.0 && c < 1.0);
        }
    }

    #[test]
    fn output_stays_in_open_interval() {
        let spec = ConfSpec::new(4, 3);
        let (mut params, buffers) = init_conf_params::<f64>(&spec, 5);
        params.insert("conf.out.bias", Tensor::scalar(1e4));
        let c = conf_forward(&params, &buffers, &spec, &[1e3; 4], &[1e3, -1e3, 0.0]).unwrap();
        assert!(c < 1.0 && c > 0.0);
        params.insert("conf.out.bias", Tensor::scalar(-1e4));
        let c = conf_forward(&params, &buffers, &spec, &[1e3; 4], &[1e3, -1e3, 0.0]).unwrap();
        assert!(c > 0.0);
    }

    #[test]
    fn shape_mismatch_reported() {
        let spec = ConfSpec::new(4, 3);
        let (params, buffers) = init_conf_params::<f64>(&spec, 5);
        assert!(matches!(
            conf_forward(&params, &buffers, &spec, &[0.0; 5], &[0.0; 3]),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
