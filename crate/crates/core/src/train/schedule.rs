//! Piecewise-constant learning rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `lr(step) = initial · Π factors[i]` over every `i` with
/// `decay_steps[i] <= step`; a decay step already uses the new value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    #[serde(default)]
    pub decay_steps: Vec<usize>,
    #[serde(default)]
    pub decay_factors: Vec<f64>,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            initial: lr,
            decay_steps: Vec::new(),
            decay_factors: Vec::new(),
        }
    }

    /// 0.1, then 0.01 from 75% and 0.001 from 87.5% of `total` steps.
    /// Boundaries that coincide in very short runs merge into one decay.
    pub fn desk_scale(total: usize) -> Self {
        let (a, b) = (total * 3 / 4, total * 7 / 8);
        let (decay_steps, decay_factors) = if a == b { (vec![a], vec![0.01]) } else { (vec![a, b], vec![0.1, 0.1]) };
        Self {
            initial: 0.1,
            decay_steps,
            decay_factors,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial > 0.0 && self.initial.is_finite()) {
            return Err(Error::Config(format!("initial learning rate must be positive, got {}", self.initial)));
        }
        if self.decay_steps.len() != self.decay_factors.len() {
            return Err(Error::Config(format!(
                "{} decay steps but {} decay factors",
                self.decay_steps.len(),
                self.decay_factors.len()
            )));
        }
        if self.decay_steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("decay steps must be strictly increasing, got {:?}", self.decay_steps)));
        }
        if self.decay_factors.iter().any(|f| !(*f > 0.0 && f.is_finite())) {
            return Err(Error::Config(format!("decay factors must be positive, got {:?}", self.decay_factors)));
        }
        Ok(())
    }

    pub fn lr(&self, step: usize) -> f64 {
        self.decay_steps
            .iter()
            .zip(&self.decay_factors)
            .filter(|(s, _)| **s <= step)
            .fold(self.initial, |lr, (_, f)| lr * f)
    }

    /// `Σ lr(s)` for `s` in `0..steps`, by whole segments.
    pub fn sum(&self, steps: usize) -> f64 {
        let mut bounds = vec![0];
        bounds.extend(self.decay_steps.iter().map(|&s| s.min(steps)));
        bounds.push(steps);
        bounds.windows(2).map(|w| (w[1] - w[0]) as f64 * self.lr(w[0])).sum()
    }
}
