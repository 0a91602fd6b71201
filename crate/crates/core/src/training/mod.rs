//! Training one (config, strategy) pair: subsampling, batching, learning
//! rate search, Adadelta, rotation-based gradient balancing and EMA early
//! stopping.

mod adadelta;
mod batches;
mod lr_finder;
mod rotograd;
mod trial;

pub use adadelta::Adadelta;
pub use batches::{make_context_batches, make_mixed_batches, subsample, Batch};
pub use lr_finder::{
    find_lr, lr_range_test, pick_lr, LrSweep, LR_FALLBACK, LR_SWEEP_END, LR_SWEEP_START,
    LR_SWEEP_STEPS,
};
pub use rotograd::{alignment, expm, orthogonality_error, rotograd_update, ROTOGRAD_ETA};
pub use trial::{evaluate_loss, predict, train_trial, trial_seed, EpochRecord, Predictions, TrialOutcome};

pub use crate::model::Strategy as StrategyKind;

use serde::{Deserialize, Serialize};

use crate::model::N_CONTEXTS;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainPlan {
    pub subsample_fraction: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub ema_window: usize,
    pub seed: u64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            subsample_fraction: 0.001,
            batch_size: 10,
            max_epochs: 40,
            patience: 20,
            ema_window: 15,
            seed: 0,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "subsample fraction {} outside (0, 1]",
                self.subsample_fraction
            )));
        }
        if self.batch_size == 0
            || self.max_epochs == 0
            || self.patience == 0
            || self.ema_window == 0
        {
            return Err(Error::Config(
                "batch size, epochs, patience and window must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Exponential moving average with `alpha = 2 / (window + 1)`, seeded with
/// the first value; returns the whole smoothed series.
pub fn ema_series(series: &[f64], window: usize) -> Vec<f64> {
    let alpha = 2.0 / (window as f64 + 1.0);
    let mut out = Vec::with_capacity(series.len());
    for &x in series {
        let s = match out.last() {
            Some(&prev) => alpha * x + (1.0 - alpha) * prev,
            None => x,
        };
        out.push(s);
    }
    out
}

/// Final EMA value of a non-empty series.
pub fn ema(series: &[f64], window: usize) -> Result<f64> {
    ema_series(series, window)
        .last()
        .copied()
        .ok_or_else(|| Error::Domain("EMA of an empty series".into()))
}

/// Tracks the smoothed validation loss and decides when to stop.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    alpha: f64,
    patience: usize,
    smoothed: Option<f64>,
    best: f64,
    since_best: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StopDecision {
    pub smoothed: f64,
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopper {
    pub fn new(window: usize, patience: usize) -> Self {
        EarlyStopper {
            alpha: 2.0 / (window as f64 + 1.0),
            patience,
            smoothed: None,
            best: f64::INFINITY,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, loss: f64) -> StopDecision {
        let s = match self.smoothed {
            Some(prev) => self.alpha * loss + (1.0 - self.alpha) * prev,
            None => loss,
        };
        self.smoothed = Some(s);
        let improved = s < self.best;
        if improved {
            self.best = s;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        StopDecision {
            smoothed: s,
            improved,
            stop: self.since_best >= self.patience,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

/// Mean absolute error and its gradient w.r.t. the estimates.
pub fn l1_loss(estimates: &[f64], targets: &[f64]) -> (f64, Vec<f64>) {
    let n = estimates.len() as f64;
    let loss = estimates
        .iter()
        .zip(targets)
        .map(|(e, t)| (e - t).abs())
        .sum::<f64>()
        / n;
    let grad = estimates
        .iter()
        .zip(targets)
        .map(|(e, t)| {
            let d = e - t;
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    (loss, grad)
}

const PROB_FLOOR: f64 = 1e-12;

/// Mean cross-entropy of class probabilities and its gradient w.r.t. them.
pub fn cross_entropy(
    probs: &[[f64; N_CONTEXTS]],
    labels: &[usize],
) -> (f64, Vec<[f64; N_CONTEXTS]>) {
    let n = probs.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![[0.0; N_CONTEXTS]; probs.len()];
    for ((p, &y), g) in probs.iter().zip(labels).zip(&mut grad) {
        let q = p[y].max(PROB_FLOOR);
        loss -= q.ln();
        g[y] = -1.0 / (q * n);
    }
    (loss / n, grad)
}
