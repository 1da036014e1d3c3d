//! Pseudo-labels and the gates deciding which ones enter the unsupervised loss.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{sharpen, ProbVec};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoMode {
    OneHot,
    Sharpen,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel<T> {
    pub q: ProbVec<T>,
    pub hard_class: usize,
    /// Threshold gate; `None` until a gate has been applied.
    pub mask: Option<bool>,
}

impl<T: Scalar> PseudoLabel<T> {
    pub fn with_mask(mut self, mask: bool) -> Self {
        self.mask = Some(mask);
        self
    }
}

pub fn make_pseudo_label<T: Scalar>(
    p: &ProbVec<T>,
    mode: PseudoMode,
    temperature: T,
) -> Result<PseudoLabel<T>> {
    let hard_class = p.argmax();
    let q = match mode {
        PseudoMode::OneHot => ProbVec::one_hot(p.len(), hard_class),
        PseudoMode::Sharpen => sharpen(p, temperature)?,
    };
    Ok(PseudoLabel {
        q,
        hard_class,
        mask: None,
    })
}

/// Fixed gate: admit iff `max_y p_y ≥ τ`.
pub fn fixed_threshold_mask<T: Scalar>(p: &ProbVec<T>, tau: f64) -> bool {
    p.max_prob() >= T::lit(tau)
}

/// Per-class curriculum thresholds over a sliding window of recent
/// unlabeled predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdState {
    pub tau: f64,
    pub window: usize,
    /// Confident class of each recent prediction, `None` when not confident.
    recent: VecDeque<Option<u32>>,
    per_class_sigma: Vec<u64>,
    per_class_t: Vec<f64>,
}

pub const DEFAULT_WINDOW: usize = 1024;

impl ThresholdState {
    /// Fresh state: no confident predictions yet, so every threshold is 0.
    pub fn new(n_classes: usize, tau: f64, window: usize) -> Result<Self> {
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(Error::invalid(format!("tau must lie in (0, 1], got {tau}")));
        }
        if n_classes == 0 || window == 0 {
            return Err(Error::invalid("threshold state needs classes and a window"));
        }
        let mut s = Self {
            tau,
            window,
            recent: VecDeque::with_capacity(window),
            per_class_sigma: vec![0; n_classes],
            per_class_t: vec![0.0; n_classes],
        };
        s.recompute();
        Ok(s)
    }

    /// State with the given confident counts, as if the window held them.
    pub fn from_counts(tau: f64, sigma: &[u64]) -> Result<Self> {
        let total: u64 = sigma.iter().sum();
        let mut s = Self::new(sigma.len(), tau, (total as usize).max(DEFAULT_WINDOW))?;
        for (class, &n) in sigma.iter().enumerate() {
            for _ in 0..n {
                s.recent.push_back(Some(class as u32));
            }
        }
        s.recompute();
        Ok(s)
    }

    pub fn n_classes(&self) -> usize {
        self.per_class_t.len()
    }

    pub fn sigma(&self) -> &[u64] {
        &self.per_class_sigma
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.per_class_t
    }

    fn recompute(&mut self) {
        self.per_class_sigma.iter_mut().for_each(|s| *s = 0);
        for &c in self.recent.iter().flatten() {
            self.per_class_sigma[c as usize] += 1;
        }
        let peak = self.per_class_sigma.iter().copied().max().unwrap_or(0).max(1) as f64;
        for (t, &s) in self.per_class_t.iter_mut().zip(&self.per_class_sigma) {
            *t = (s as f64 / peak) * self.tau;
        }
    }
}

/// Pushes one batch of unlabeled predictions into the window and refreshes
/// `σ`, `β = σ / max(max σ, 1)` and `T = β·τ`.
pub fn update_class_thresholds<T: Scalar>(
    mut state: ThresholdState,
    batch_preds: &[ProbVec<T>],
) -> ThresholdState {
    let tau = T::lit(state.tau);
    for p in batch_preds {
        let entry = (p.max_prob() >= tau).then(|| p.argmax() as u32);
        if state.recent.len() == state.window {
            state.recent.pop_front();
        }
        state.recent.push_back(entry);
    }
    state.recompute();
    state
}

/// Curriculum gate: admit iff `max_y p_y ≥ T[argmax p]`.
pub fn curriculum_mask<T: Scalar>(p: &ProbVec<T>, state: &ThresholdState) -> bool {
    p.max_prob() >= T::lit(state.per_class_t[p.argmax()])
}
