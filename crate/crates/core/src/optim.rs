//! Heavy-ball SGD on the parameter delta:
//!
//! ```text
//! W[i+1] = W[i] + μ · (W[i] − W[i−1]) − γ · ∂e/∂W[i]
//! ```
//!
//! with a constant, polynomial-decay or step-on-plateau learning rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
    /// `γ₀ · (1 − iter / max_iter)^power`.
    Poly {
        #[serde(default = "default_power")]
        power: f64,
        max_iter: u64,
    },
    /// Divide by `factor` once the validation score has failed to improve by
    /// `min_improve` for `patience` consecutive evaluations.
    Plateau {
        #[serde(default = "default_factor")]
        factor: f64,
        #[serde(default = "default_patience")]
        patience: u32,
        #[serde(default = "default_min_improve")]
        min_improve: f64,
    },
}

fn default_power() -> f64 {
    0.9
}
fn default_factor() -> f64 {
    10.0
}
fn default_patience() -> u32 {
    3
}
fn default_min_improve() -> f64 {
    0.001
}

impl Schedule {
    pub fn plateau() -> Self {
        Schedule::Plateau {
            factor: default_factor(),
            patience: default_patience(),
            min_improve: default_min_improve(),
        }
    }

    pub fn poly(max_iter: u64) -> Self {
        Schedule::Poly {
            power: default_power(),
            max_iter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdState {
    pub mu: f64,
    pub gamma: f64,
    pub schedule: Schedule,
    pub iter: u64,
    /// `W[i] − W[i−1]` for every parameter slice, zero before the first step.
    pub prev_delta: Vec<Vec<f64>>,
    /// Number of plateau reductions applied so far.
    pub decays: u32,
    pub best_score: Option<f64>,
    pub stale_evals: u32,
    pub finished: bool,
}

impl SgdState {
    /// `shapes` lists the length of every parameter slice, in the order
    /// [`step`](Self::step) will receive them.
    pub fn new(mu: f64, gamma: f64, schedule: Schedule, shapes: &[usize]) -> Result<Self> {
        if !(0.0..1.0).contains(&mu) {
            return Err(Error::Config(format!("momentum {mu} must lie in [0, 1)")));
        }
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {gamma} must be positive"
            )));
        }
        match schedule {
            Schedule::Poly { power, max_iter } if power <= 0.0 || max_iter == 0 => {
                return Err(Error::Config(
                    "poly schedule needs power > 0 and max_iter ≥ 1".into(),
                ));
            }
            Schedule::Plateau { factor, .. } if factor <= 1.0 => {
                return Err(Error::Config(format!(
                    "plateau factor {factor} must exceed 1"
                )));
            }
            _ => {}
        }
        Ok(Self {
            mu,
            gamma,
            schedule,
            iter: 0,
            prev_delta: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            decays: 0,
            best_score: None,
            stale_evals: 0,
            finished: false,
        })
    }

    /// Learning rate for the current iteration. Under the poly schedule this
    /// reaches exactly zero at `max_iter` and stays there, flagging the run
    /// as finished.
    pub fn current_lr(&mut self) -> f64 {
        match self.schedule {
            Schedule::Constant => self.gamma,
            Schedule::Poly { power, max_iter } => {
                if self.iter >= max_iter {
                    self.finished = true;
                    0.0
                } else {
                    self.gamma * (1.0 - self.iter as f64 / max_iter as f64).powf(power)
                }
            }
            Schedule::Plateau { factor, .. } => self.gamma / factor.powi(self.decays as i32),
        }
    }

    /// Feeds one validation score to the plateau schedule. Returns `true`
    /// when this evaluation triggered a reduction.
    pub fn report_validation(&mut self, score: f64) -> bool {
        let Schedule::Plateau {
            patience,
            min_improve,
            ..
        } = self.schedule
        else {
            return false;
        };
        match self.best_score {
            Some(best) if score - best < min_improve => {
                self.best_score = Some(best.max(score));
                self.stale_evals += 1;
                if self.stale_evals >= patience {
                    self.decays += 1;
                    self.stale_evals = 0;
                    return true;
                }
                false
            }
            _ => {
                self.best_score = Some(score);
                self.stale_evals = 0;
                false
            }
        }
    }

    /// Applies one update in place. Parameters and gradients are matched
    /// slice by slice with the shapes given at construction.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.prev_delta.len() || grads.len() != self.prev_delta.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} parameter slices, got {} parameters and {} gradients",
                self.prev_delta.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, ((p, g), d)) in params.iter().zip(grads).zip(&self.prev_delta).enumerate() {
            if p.len() != d.len() || g.len() != d.len() {
                return Err(Error::Shape(format!(
                    "slice {i}: optimizer expects {} values, got {} parameters and {} gradients",
                    d.len(),
                    p.len(),
                    g.len()
                )));
            }
        }
        let lr = self.current_lr();
        let mu = self.mu;
        for ((p, g), d) in params.iter_mut().zip(grads).zip(self.prev_delta.iter_mut()) {
            for ((w, &grad), delta) in p.iter_mut().zip(g.iter()).zip(d.iter_mut()) {
                let old = *w;
                let new = old + mu * *delta - lr * grad;
                *delta = new - old;
                *w = new;
            }
        }
        self.iter += 1;
        Ok(())
    }
}
