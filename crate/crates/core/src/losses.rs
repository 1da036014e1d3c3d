//! Training objectives.
//!
//! Each loss is recorded on a [`Graph`]. Targets, gates and (for the
//! consistency loss) confidences enter as constant tensors, so the gradient
//! routing is fixed by construction: nothing here can push gradient into a
//! pseudo-label or into the branch that produced a confidence.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::confidence::ConfidencePair;
use crate::error::{Error, Result};
use crate::model::{argmax, sharpen, ProbVec};
use crate::pseudo::PseudoMode;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Non-negative weights of every loss term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default)]
    pub sup: f64,
    #[serde(default)]
    pub un: f64,
    #[serde(default)]
    pub ccr: f64,
    #[serde(default)]
    pub conf: f64,
    #[serde(default)]
    pub conf_sup: f64,
    /// Feature-level pull-together term between the two strong views.
    #[serde(default)]
    pub self_sup: f64,
}

impl LossWeights {
    pub const ZERO: LossWeights = LossWeights {
        sup: 0.0,
        un: 0.0,
        ccr: 0.0,
        conf: 0.0,
        conf_sup: 0.0,
        self_sup: 0.0,
    };

    /// Encoder pre-training: `λ_sup = λ_un = 1`.
    pub fn encoder_pretrain() -> Self {
        Self {
            sup: 1.0,
            un: 1.0,
            ..Self::ZERO
        }
    }

    /// Estimator pre-training: `λ_conf = 0.1`, `λ_conf_sup = 1`.
    pub fn conf_pretrain() -> Self {
        Self {
            conf: 0.1,
            conf_sup: 1.0,
            ..Self::ZERO
        }
    }

    /// Fine-tuning: every term at 1.
    pub fn finetune() -> Self {
        Self {
            sup: 1.0,
            un: 1.0,
            ccr: 1.0,
            conf: 1.0,
            conf_sup: 1.0,
            self_sup: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("sup", self.sup),
            ("un", self.un),
            ("ccr", self.ccr),
            ("conf", self.conf),
            ("conf_sup", self.conf_sup),
            ("self_sup", self.self_sup),
        ];
        for (name, w) in all {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::invalid(format!(
                    "loss weight `{name}` must be finite and non-negative, got {w}"
                )));
            }
        }
        Ok(())
    }
}

/// Logged value of every term plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sup: f64,
    pub un: f64,
    pub ccr: f64,
    pub conf: f64,
    pub conf_sup: f64,
    pub self_sup: f64,
    pub total: f64,
}

/// `λ_sup·L_sup + λ_un·L_un + λ_ccr·L_ccr`.
pub fn total_np(components: &LossBreakdown, w: &LossWeights) -> f64 {
    w.sup * components.sup + w.un * components.un + w.ccr * components.ccr
}

/// `λ_sup·L_sup + λ_un·L_un + λ_conf·L_conf + λ_conf_sup·L_conf_sup + λ_ccr·L_ccr`.
pub fn total_p(components: &LossBreakdown, w: &LossWeights) -> f64 {
    total_np(components, w) + w.conf * components.conf + w.conf_sup * components.conf_sup
}

/// One-hot rows for class labels.
pub fn one_hot_rows<T: Scalar>(labels: &[usize], n_classes: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(labels.len(), n_classes);
    for (r, &y) in labels.iter().enumerate() {
        t.set(r, y, T::one());
    }
    t
}

/// Pseudo-label targets derived from prediction rows (values only).
pub fn pseudo_targets<T: Scalar>(probs: &Tensor<T>, mode: PseudoMode, temperature: T) -> Result<Tensor<T>> {
    match mode {
        PseudoMode::OneHot => {
            let hard: Vec<usize> = probs.iter_rows().map(argmax).collect();
            Ok(one_hot_rows(&hard, probs.cols()))
        }
        PseudoMode::Sharpen => {
            let mut out = Tensor::zeros(probs.rows(), probs.cols());
            for r in 0..probs.rows() {
                let p = ProbVec::new(probs.row(r).to_vec())?;
                out.row_mut(r).copy_from_slice(sharpen(&p, temperature)?.as_slice());
            }
            Ok(out)
        }
    }
}

/// Mean over the labeled batch of `H(one_hot(y_b), P(α(x_b)))`.
pub fn loss_sup<T: Scalar>(graph: &mut Graph<T>, probs: NodeId, labels: &[u32]) -> Result<NodeId> {
    let n_classes = graph.value(probs).cols();
    if labels.is_empty() {
        return Err(Error::invalid("supervised loss needs a non-empty labeled batch"));
    }
    if labels.len() != graph.value(probs).rows() {
        return Err(Error::LengthMismatch {
            left: labels.len(),
            right: graph.value(probs).rows(),
        });
    }
    let ys: Vec<usize> = labels.iter().map(|&y| y as usize).collect();
    let ce = graph.cross_entropy_rows(probs, one_hot_rows(&ys, n_classes));
    Ok(graph.mean(ce))
}

/// Mean over `μB` of `w(r)·H(q(r), P(A_i(r)))`. `weights` is the gate (and
/// optionally a confidence), `targets` the pseudo-labels; both constant.
pub fn loss_un<T: Scalar>(
    graph: &mut Graph<T>,
    strong_probs: NodeId,
    targets: Tensor<T>,
    weights: &[T],
) -> Result<NodeId> {
    if weights.len() != targets.rows() {
        return Err(Error::LengthMismatch {
            left: weights.len(),
            right: targets.rows(),
        });
    }
    let ce = graph.cross_entropy_rows(strong_probs, targets);
    let gated = graph.mul_const(ce, Tensor::column(weights.to_vec()));
    Ok(graph.mean(gated))
}

/// Mean over `μB` of `c_i·H(q_i, P(A_j)) + c_j·H(q_j, P(A_i))` with
/// constant pseudo-labels `q_i`, `q_j` and constant confidences.
pub fn loss_ccr<T: Scalar>(
    graph: &mut Graph<T>,
    probs_i: NodeId,
    probs_j: NodeId,
    targets_i: Tensor<T>,
    targets_j: Tensor<T>,
    pairs: &[ConfidencePair<T>],
) -> Result<NodeId> {
    let n = graph.value(probs_i).rows();
    if pairs.len() != n || graph.value(probs_j).rows() != n {
        return Err(Error::LengthMismatch {
            left: pairs.len(),
            right: n,
        });
    }
    let c_i = Tensor::column(pairs.iter().map(|p| p.c_i).collect());
    let c_j = Tensor::column(pairs.iter().map(|p| p.c_j).collect());
    let ce_ij = graph.cross_entropy_rows(probs_j, targets_i);
    let ce_ji = graph.cross_entropy_rows(probs_i, targets_j);
    let a = graph.mul_const(ce_ij, c_i);
    let b = graph.mul_const(ce_ji, c_j);
    let s = graph.add(a, b);
    Ok(graph.mean(s))
}

/// Mean of `c·H + log(1/c)`, where `confidences` is an `n × 1` node and
/// `cross_entropies` the constant frozen-model `H(P(α(r)), P(A(r)))`.
pub fn loss_conf<T: Scalar>(
    graph: &mut Graph<T>,
    confidences: NodeId,
    cross_entropies: &[T],
) -> Result<NodeId> {
    let cv = graph.value(confidences);
    if cv.cols() != 1 || cv.rows() != cross_entropies.len() {
        return Err(Error::LengthMismatch {
            left: cv.rows(),
            right: cross_entropies.len(),
        });
    }
    if cv.data().iter().any(|&c| !(c > T::zero())) {
        return Err(Error::DomainError("confidence must be positive".into()));
    }
    let weighted = graph.mul_const(confidences, Tensor::column(cross_entropies.to_vec()));
    let log_c = graph.log(confidences);
    let per = graph.sub(weighted, log_c);
    Ok(graph.mean(per))
}

/// Mean binary cross-entropy between constant `c_GT` and the estimator.
pub fn loss_conf_sup<T: Scalar>(
    graph: &mut Graph<T>,
    confidences: NodeId,
    targets: &[T],
) -> Result<NodeId> {
    let cv = graph.value(confidences);
    if cv.cols() != 1 || cv.rows() != targets.len() {
        return Err(Error::LengthMismatch {
            left: cv.rows(),
            right: targets.len(),
        });
    }
    let bce = graph.bce_rows(confidences, Tensor::column(targets.to_vec()));
    Ok(graph.mean(bce))
}

/// Feature-level pull-together term: mean of `1 − cos(F_i, F_j)`.
pub fn loss_self<T: Scalar>(graph: &mut Graph<T>, features_i: NodeId, features_j: NodeId) -> NodeId {
    let cos = graph.row_cosine(features_i, features_j);
    let m = graph.mean(cos);
    let one = graph.constant(Tensor::scalar(T::one()));
    graph.sub(one, m)
}

/// Per-sample `L_conf` value at confidence `c` and cross-entropy `h`.
pub fn conf_objective(c: f64, h: f64) -> f64 {
    c * h + (1.0 / c).ln()
}

/// Closed-form minimizer of [`conf_objective`] over `c ∈ (0, 1 − δ]`.
pub fn conf_minimizer(h: f64, delta: f64) -> f64 {
    let ceiling = 1.0 - delta;
    if h <= 0.0 {
        ceiling
    } else {
        (1.0 / h).min(ceiling)
    }
}

/// `c_GT = 1` where the weak prediction of a labeled sample is right.
pub fn confidence_targets<T: Scalar>(probs: &Tensor<T>, labels: &[u32]) -> Vec<T> {
    probs
        .iter_rows()
        .zip(labels)
        .map(|(p, &y)| if argmax(p) == y as usize { T::one() } else { T::zero() })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn probs(g: &mut Graph<f64>, rows: &[Vec<f64>]) -> NodeId {
        g.constant(Tensor::from_rows(rows))
    }

    #[test]
    fn sup_examples() {
        let mut g = Graph::new();
        let perfect = probs(&mut g, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let l = loss_sup(&mut g, perfect, &[0, 1]).unwrap();
        // log floor leaves ln(1 + (Y−1)·1e-12)
        assert!(g.value(l).item().abs() < 1e-11);
        let uniform = probs(&mut g, &vec![vec![0.25; 4]; 3]);
        let l = loss_sup(&mut g, uniform, &[0, 2, 3]).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);
        // per-sample values 0.2 and 0.6 ⇒ mean 0.4
        let (a, b) = ((-0.2f64).exp(), (-0.6f64).exp());
        let two = probs(&mut g, &[vec![a, 1.0 - a], vec![1.0 - b, b]]);
        let l = loss_sup(&mut g, two, &[0, 1]).unwrap();
        assert!((g.value(l).item() - 0.4).abs() < 1e-12);
        assert!(loss_sup(&mut g, two, &[]).is_err());
    }

    #[test]
    fn un_examples() {
        let mut g = Graph::new();
        let strong = probs(&mut g, &[vec![0.25, 0.5, 0.25], vec![0.1, 0.1, 0.8]]);
        let q = Tensor::from_rows(&[vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let l = loss_un(&mut g, strong, q.clone(), &[0.0, 0.0]).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let l = loss_un(&mut g, strong, q.clone(), &[1.0, 0.0]).unwrap();
        // single admitted contribution ln 2, averaged over μB = 2
        assert!((g.value(l).item() - LN_2 / 2.0).abs() < 1e-12);
        let exact = probs(&mut g, &[vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let l = loss_un(&mut g, exact, q, &[1.0, 1.0]).unwrap();
        assert!(g.value(l).item().abs() < 1e-11);
    }

    #[test]
    fn ccr_examples() {
        let mut g = Graph::new();
        let p = probs(&mut g, &[vec![0.5, 0.5]]);
        let q = pseudo_targets(g.value(p), PseudoMode::OneHot, 1.0).unwrap();
        let zero = loss_ccr(&mut g, p, p, q.clone(), q.clone(), &[ConfidencePair::constant(0.0)]).unwrap();
        assert_eq!(g.value(zero).item(), 0.0);
        let half = loss_ccr(&mut g, p, p, q.clone(), q, &[ConfidencePair::constant(0.5)]).unwrap();
        assert!((g.value(half).item() - LN_2).abs() < 1e-12);
    }

    #[test]
    fn conf_examples() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::column(vec![1.0, 0.5]));
        let l = loss_conf(&mut g, c, &[0.7, 2.0]).unwrap();
        let expect = (0.7 + (0.5 * 2.0 + 2f64.ln())) / 2.0;
        assert!((g.value(l).item() - expect).abs() < 1e-12);
        assert_eq!(conf_objective(1.0, 0.7), 0.7);
        assert_eq!(conf_minimizer(2.0, 1e-6), 0.5);
        assert_eq!(conf_minimizer(0.0, 1e-6), 1.0 - 1e-6);
        let bad = g.constant(Tensor::column(vec![0.0]));
        assert!(matches!(loss_conf(&mut g, bad, &[1.0]), Err(Error::DomainError(_))));
    }

    #[test]
    fn conf_sup_examples() {
        let mut g = Graph::<f64>::new();
        let exact = g.constant(Tensor::column(vec![1.0, 0.0]));
        let l = loss_conf_sup(&mut g, exact, &[1.0, 0.0]).unwrap();
        assert!(g.value(l).item().abs() < 1e-11);
        let half = g.constant(Tensor::column(vec![0.5; 3]));
        let l = loss_conf_sup(&mut g, half, &[1.0, 0.0, 1.0]).unwrap();
        assert!((g.value(l).item() - LN_2).abs() < 1e-12);
        let c = g.constant(Tensor::column(vec![0.9]));
        let l = loss_conf_sup(&mut g, c, &[1.0]).unwrap();
        assert!((g.value(l).item() - 0.105_360_515_657_826_3).abs() < 1e-12);
    }

    #[test]
    fn totals() {
        let c = LossBreakdown {
            sup: 0.4,
            un: 0.2,
            ccr: 0.1,
            ..Default::default()
        };
        let ones = LossWeights {
            sup: 1.0,
            un: 1.0,
            ccr: 1.0,
            ..LossWeights::ZERO
        };
        assert!((total_np(&c, &ones) - 0.7).abs() < 1e-15);
        let no_ccr = LossWeights { ccr: 0.0, ..ones };
        assert!((total_np(&c, &no_ccr) - 0.6).abs() < 1e-15);
        assert_eq!(total_np(&LossBreakdown::default(), &ones), 0.0);
        assert_eq!(total_p(&LossBreakdown::default(), &LossWeights::finetune()), 0.0);
        let ft = LossWeights::finetune();
        assert_eq!((ft.sup, ft.un, ft.ccr, ft.conf, ft.conf_sup), (1.0, 1.0, 1.0, 1.0, 1.0));
        let cp = LossWeights::conf_pretrain();
        assert_eq!((cp.conf, cp.conf_sup), (0.1, 1.0));
    }

    #[test]
    fn self_loss_of_parallel_features_is_zero() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, 3.0]]));
        let b = g.constant(Tensor::from_rows(&[vec![2.0, 4.0], vec![0.0, 0.5]]));
        let l = loss_self(&mut g, a, b);
        assert!(g.value(l).item().abs() < 1e-12);
    }
}
