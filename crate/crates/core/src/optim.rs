//! Momentum SGD and the cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
}

/// `lr(t) = lr0 · cos(7πt / (16·total_steps))`.
pub fn cosine_lr(lr0: f64, step: u64, total_steps: u64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    lr0 * (7.0 * std::f64::consts::PI * step as f64 / (16.0 * total_steps as f64)).cos()
}

/// One SGD step over every parameter named in `grads`.
///
/// With `d = g + wd·θ` and buffer `b ← m·b + d`, the update is
/// `θ ← θ − lr·(d + m·b)` under Nesterov and `θ ← θ − lr·b` otherwise.
/// Buffers missing from `buffers` start at zero.
pub fn sgd_update<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &Gradients<T>,
    buffers: &mut ParamStore<T>,
    opt: &Sgd,
) -> Result<()> {
    let lr = T::lit(opt.lr);
    let m = T::lit(opt.momentum);
    let wd = T::lit(opt.weight_decay);
    for (name, g) in grads.iter() {
        let theta = params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))?;
        if theta.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                context: format!("gradient of `{name}`"),
                expected: format!("{:?}", theta.shape()),
                found: format!("{:?}", g.shape()),
            });
        }
        if buffers.get(name).is_none() {
            buffers.insert(name, Tensor::zeros(g.rows(), g.cols()));
        }
        let buf = buffers.get_mut(name).expect("inserted above");
        for ((t, &gi), b) in theta.data_mut().iter_mut().zip(g.data()).zip(buf.data_mut()) {
            let d = gi + wd * *t;
            *b = m * *b + d;
            let step = if opt.nesterov { d + m * *b } else { *b };
            *t = *t - lr * step;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: Vec<f64>) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::row_vector(v));
        s
    }

    #[test]
    fn plain_step() {
        let mut p = store(vec![1.0, -2.0]);
        let g = store(vec![0.5, 0.25]);
        let mut b = ParamStore::new();
        let opt = Sgd {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
            nesterov: true,
        };
        sgd_update(&mut p, &g, &mut b, &opt).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.0 - 0.05, -2.0 - 0.025]);
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = store(vec![1.0, -2.0]);
        let g = store(vec![0.0, 0.0]);
        let mut b = ParamStore::new();
        let opt = Sgd {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            nesterov: true,
        };
        sgd_update(&mut p, &g, &mut b, &opt).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.0, -2.0]);
    }

    #[test]
    fn nesterov_two_steps() {
        let mut p = store(vec![1.0]);
        let g = store(vec![1.0]);
        let mut b = ParamStore::new();
        let opt = Sgd {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            nesterov: true,
        };
        sgd_update(&mut p, &g, &mut b, &opt).unwrap();
        // b = 1, step = 1 + 0.9
        assert!((p.get("w").unwrap().data()[0] - (1.0 - 0.19)).abs() < 1e-15);
        sgd_update(&mut p, &g, &mut b, &opt).unwrap();
        // b = 1.9, step = 1 + 1.71
        assert!((p.get("w").unwrap().data()[0] - (0.81 - 0.271)).abs() < 1e-15);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0.03, 0, 3000), 0.03);
        let end = cosine_lr(0.03, 3000, 3000);
        assert!((end / 0.03 - (7.0 * std::f64::consts::PI / 16.0).cos()).abs() < 1e-15);
        assert!((end / 0.03 - 0.195).abs() < 1e-3);
    }
}
