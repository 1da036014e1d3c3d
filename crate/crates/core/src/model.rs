//! Encoder `f`, classifier `g`, and the probability primitives around them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Activation, Bound, Graph, NodeId, LOG_FLOOR};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Non-negative vector summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVec<T>(Vec<T>);

impl<T: Scalar> ProbVec<T> {
    fn tolerance(len: usize) -> T {
        let scaled = T::epsilon() * T::lit(64.0 * len.max(1) as f64);
        scaled.max(T::lit(1e-9))
    }

    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::DomainError("empty probability vector".into()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < T::zero()) {
            return Err(Error::DomainError(
                "probabilities must be finite and non-negative".into(),
            ));
        }
        let s: T = values.iter().copied().sum();
        if (s - T::one()).abs() > Self::tolerance(values.len()) {
            return Err(Error::DomainError(format!(
                "probabilities sum to {s}, not 1"
            )));
        }
        Ok(Self(values))
    }

    pub fn uniform(n: usize) -> Self {
        let v = T::one() / T::from_usize(n).expect("class count fits");
        Self(vec![v; n])
    }

    pub fn one_hot(n: usize, k: usize) -> Self {
        let mut v = vec![T::zero(); n];
        v[k] = T::one();
        Self(v)
    }

    pub fn from_logits(logits: &[T]) -> Self {
        Self(autodiff::softmax(logits))
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<T> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max_prob(&self) -> T {
        self.0.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    /// `max(p, 1e-12)` renormalized; strictly positive.
    pub fn floored(&self) -> Self {
        let floor = T::lit(LOG_FLOOR);
        let m: Vec<T> = self.0.iter().map(|&v| v.max(floor)).collect();
        let s: T = m.iter().copied().sum();
        Self(m.into_iter().map(|v| v / s).collect())
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `−Σ q_y log p̃_y` with `p̃` the floored, renormalized `p`.
pub fn cross_entropy<T: Scalar>(q: &ProbVec<T>, p: &ProbVec<T>) -> T {
    autodiff::floored_cross_entropy(q.as_slice(), p.as_slice())
}

/// Temperature sharpening `p^{1/T} / Σ p^{1/T}`, computed in log space so
/// small temperatures stay finite.
pub fn sharpen<T: Scalar>(p: &ProbVec<T>, temperature: T) -> Result<ProbVec<T>> {
    if !(temperature > T::zero()) {
        return Err(Error::DomainError("sharpening temperature must be positive".into()));
    }
    let floor = T::lit(LOG_FLOOR);
    let logits: Vec<T> = p
        .as_slice()
        .iter()
        .map(|&v| v.max(floor).ln() / temperature)
        .collect();
    let mut out = autodiff::softmax(&logits);
    // exact zeros stay zero
    for (o, &v) in out.iter_mut().zip(p.as_slice()) {
        if v == T::zero() {
            *o = T::zero();
        }
    }
    let s: T = out.iter().copied().sum();
    Ok(ProbVec(out.into_iter().map(|v| v / s).collect()))
}

/// Layer layout of the MLP encoder plus linear classifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    /// Encoder widths; the last one is the feature dimension `D`.
    pub hidden: Vec<usize>,
    pub n_classes: usize,
    pub activation: Activation,
}

impl ModelSpec {
    /// Desk-scale reference: `input → 32 → 32` ReLU encoder, linear head.
    pub fn reference(input_dim: usize, n_classes: usize) -> Self {
        Self {
            input_dim,
            hidden: vec![32, 32],
            n_classes,
            activation: Activation::Relu,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.hidden.last().copied().unwrap_or(self.input_dim)
    }

    pub fn encoder_weight(i: usize) -> String {
        format!("model.encoder.{i}.weight")
    }

    pub fn encoder_bias(i: usize) -> String {
        format!("model.encoder.{i}.bias")
    }

    pub const CLASSIFIER_WEIGHT: &'static str = "model.classifier.weight";
    pub const CLASSIFIER_BIAS: &'static str = "model.classifier.bias";
    pub const PREFIX: &'static str = "model.";

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.n_classes == 0 || self.hidden.contains(&0) {
            return Err(Error::invalid("model widths must be positive"));
        }
        Ok(())
    }

    /// Checks every parameter shape against the layer spec.
    pub fn check_params<T: Scalar>(&self, params: &ParamStore<T>) -> Result<()> {
        let mut fan_in = self.input_dim;
        let expect = |name: String, shape: (usize, usize)| -> Result<()> {
            let t = params.require(&name)?;
            if t.shape() != shape {
                return Err(Error::ShapeMismatch {
                    context: name,
                    expected: format!("{}x{}", shape.0, shape.1),
                    found: format!("{}x{}", t.rows(), t.cols()),
                });
            }
            Ok(())
        };
        for (i, &w) in self.hidden.iter().enumerate() {
            expect(Self::encoder_weight(i), (fan_in, w))?;
            expect(Self::encoder_bias(i), (1, w))?;
            fan_in = w;
        }
        expect(Self::CLASSIFIER_WEIGHT.into(), (fan_in, self.n_classes))?;
        expect(Self::CLASSIFIER_BIAS.into(), (1, self.n_classes))
    }
}

/// He-uniform weights, zero biases.
pub fn init_model_params<T: Scalar>(spec: &ModelSpec, seed: u64) -> ParamStore<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let mut fan_in = spec.input_dim;
    for (i, &w) in spec.hidden.iter().enumerate() {
        params.insert(ModelSpec::encoder_weight(i), he_uniform(&mut rng, fan_in, w));
        params.insert(ModelSpec::encoder_bias(i), Tensor::zeros(1, w));
        fan_in = w;
    }
    params.insert(
        ModelSpec::CLASSIFIER_WEIGHT,
        he_uniform(&mut rng, fan_in, spec.n_classes),
    );
    params.insert(ModelSpec::CLASSIFIER_BIAS, Tensor::zeros(1, spec.n_classes));
    params
}

pub(crate) fn he_uniform<T: Scalar, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| T::lit(rng.random_range(-bound..bound)))
        .collect();
    Tensor::from_vec(fan_in, fan_out, data)
}

/// Graph nodes of one model evaluation.
#[derive(Debug, Clone, Copy)]
pub struct ForwardNodes {
    pub features: NodeId,
    pub logits: NodeId,
    pub probs: NodeId,
}

/// Records `F = f(x)`, `L = g(F)`, `P = softmax(L)` on `graph`.
pub fn forward_graph<T: Scalar>(
    graph: &mut Graph<T>,
    bound: &Bound,
    spec: &ModelSpec,
    x: NodeId,
) -> Result<ForwardNodes> {
    if graph.value(x).cols() != spec.input_dim {
        return Err(Error::ShapeMismatch {
            context: "model input".into(),
            expected: spec.input_dim.to_string(),
            found: graph.value(x).cols().to_string(),
        });
    }
    let mut h = x;
    for i in 0..spec.hidden.len() {
        let z = graph.matmul(h, bound.id(&ModelSpec::encoder_weight(i))?);
        let z = graph.add_bias(z, bound.id(&ModelSpec::encoder_bias(i))?);
        h = graph.activation(z, spec.activation);
    }
    let l = graph.matmul(h, bound.id(ModelSpec::CLASSIFIER_WEIGHT)?);
    let logits = graph.add_bias(l, bound.id(ModelSpec::CLASSIFIER_BIAS)?);
    let probs = graph.softmax_rows(logits);
    Ok(ForwardNodes {
        features: h,
        logits,
        probs,
    })
}

/// Model outputs for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOut<T> {
    pub features: Vec<T>,
    pub logits: Vec<T>,
    pub probs: ProbVec<T>,
}

/// Model outputs for a batch, one row per input.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOut<T> {
    pub features: Tensor<T>,
    pub logits: Tensor<T>,
    pub probs: Tensor<T>,
}

impl<T: Scalar> BatchOut<T> {
    pub fn prob_vec(&self, r: usize) -> ProbVec<T> {
        ProbVec(self.probs.row(r).to_vec())
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.probs.iter_rows().map(argmax).collect()
    }
}

pub fn forward_batch<T: Scalar>(
    params: &ParamStore<T>,
    spec: &ModelSpec,
    x: &Tensor<T>,
) -> Result<BatchOut<T>> {
    spec.check_params(params)?;
    let mut graph = Graph::new();
    let bound = graph.bind(params, |_| true);
    let xin = graph.constant(x.clone());
    let nodes = forward_graph(&mut graph, &bound, spec, xin)?;
    Ok(BatchOut {
        features: graph.value(nodes.features).clone(),
        logits: graph.value(nodes.logits).clone(),
        probs: graph.value(nodes.probs).clone(),
    })
}

pub fn forward<T: Scalar>(params: &ParamStore<T>, spec: &ModelSpec, x: &[T]) -> Result<ForwardOut<T>> {
    if x.len() != spec.input_dim {
        return Err(Error::ShapeMismatch {
            context: "model input".into(),
            expected: spec.input_dim.to_string(),
            found: x.len().to_string(),
        });
    }
    let out = forward_batch(params, spec, &Tensor::row_vector(x.to_vec()))?;
    Ok(ForwardOut {
        features: out.features.row(0).to_vec(),
        logits: out.logits.row(0).to_vec(),
        probs: out.prob_vec(0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_give_bias_logits() {
        let spec = ModelSpec::reference(3, 4);
        let mut params = init_model_params::<f64>(&spec, 1);
        for (_, t) in params.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let bias = Tensor::row_vector(vec![0.5, -1.0, 2.0, 0.0]);
        params.insert(ModelSpec::CLASSIFIER_BIAS, bias.clone());
        for x in [[1.0, 2.0, 3.0], [-7.0, 0.0, 0.1]] {
            let out = forward(&params, &spec, &x).unwrap();
            assert_eq!(out.logits, bias.data());
        }
    }

    #[test]
    fn identity_network_is_softmax() {
        let spec = ModelSpec {
            input_dim: 3,
            hidden: vec![3],
            n_classes: 3,
            activation: Activation::Identity,
        };
        let mut params = ParamStore::new();
        let eye = Tensor::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ]);
        params.insert(ModelSpec::encoder_weight(0), eye.clone());
        params.insert(ModelSpec::encoder_bias(0), Tensor::zeros(1, 3));
        params.insert(ModelSpec::CLASSIFIER_WEIGHT, eye);
        params.insert(ModelSpec::CLASSIFIER_BIAS, Tensor::zeros(1, 3));
        let x = [1.0f64, 0.0, 0.0];
        let out = forward(&params, &spec, &x).unwrap();
        let expect = autodiff::softmax(&x);
        for (a, b) in out.probs.as_slice().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_is_deterministic_and_checks_shape() {
        let spec = ModelSpec::reference(5, 3);
        let params = init_model_params::<f64>(&spec, 9);
        let x = [0.1, -0.4, 0.3, 2.0, 1.0];
        assert_eq!(forward(&params, &spec, &x).unwrap(), forward(&params, &spec, &x).unwrap());
        assert!(matches!(
            forward(&params, &spec, &x[..4]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn cross_entropy_examples() {
        let q = ProbVec::<f64>::one_hot(3, 0);
        let p = ProbVec::new(vec![0.5, 0.25, 0.25]).unwrap();
        assert!((cross_entropy(&q, &p) - 0.693_147_180_559_945_3).abs() < 1e-12);
        let u = ProbVec::<f64>::uniform(4);
        assert!((cross_entropy(&u, &u) - 1.386_294_361_119_890_6).abs() < 1e-12);
        let near = ProbVec::new(vec![1e-15, 1.0 - 1e-15]).unwrap();
        assert!(cross_entropy(&ProbVec::one_hot(2, 1), &near) < 1e-12);
    }

    #[test]
    fn sharpen_examples() {
        let p = ProbVec::new(vec![0.6f64, 0.4]).unwrap();
        assert!(sharpen(&p, 1.0).unwrap().as_slice().iter().zip(p.as_slice()).all(|(a, b)| (a - b).abs() < 1e-15));
        let hard = sharpen(&p, 1e-3).unwrap();
        assert!(hard.as_slice()[0] > 1.0 - 1e-12);
        assert_eq!(hard.argmax(), 0);
        let u = ProbVec::<f64>::uniform(5);
        for t in [0.1, 0.5, 3.0] {
            for v in sharpen(&u, t).unwrap().as_slice() {
                assert!((v - 0.2).abs() < 1e-15);
            }
        }
        assert!(sharpen(&p, 0.0).is_err());
    }

    #[test]
    fn probvec_validation() {
        assert!(ProbVec::new(vec![0.5f64, 0.6]).is_err());
        assert!(ProbVec::new(vec![-0.1f64, 1.1]).is_err());
        assert!(ProbVec::<f64>::new(vec![]).is_err());
        let f = ProbVec::new(vec![1.0f64, 0.0]).unwrap().floored();
        assert!(f.as_slice().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn argmax_ties_take_lowest() {
        assert_eq!(argmax(&[0.25, 0.25, 0.25, 0.25]), 0);
        assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);
    }
}
