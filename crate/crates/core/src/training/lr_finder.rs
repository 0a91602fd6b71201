use crate::Result;

pub const LR_SWEEP_START: f64 = 1e-7;
pub const LR_SWEEP_END: f64 = 1.0;
pub const LR_SWEEP_STEPS: usize = 100;
pub const LR_FALLBACK: f64 = 1e-5;
const SMOOTHING_WINDOW: f64 = 5.0;
const DIVERGENCE: f64 = 4.0;
const MIN_DESCENT: f64 = 0.99;

#[derive(Clone, Debug, PartialEq)]
pub struct LrSweep {
    pub lrs: Vec<f64>,
    pub losses: Vec<f64>,
    pub smoothed: Vec<f64>,
    pub chosen: f64,
    pub fell_back: bool,
}

fn sweep_lr(i: usize) -> f64 {
    LR_SWEEP_START * (LR_SWEEP_END / LR_SWEEP_START).powf(i as f64 / (LR_SWEEP_STEPS - 1) as f64)
}

/// Chooses a learning rate from raw sweep losses.
///
/// Losses are EMA-smoothed (window 5); the sweep is cut at the first
/// non-finite loss or once the smoothed loss exceeds 4x its running minimum.
/// The answer is the rate where the log smoothed loss falls fastest, or the
/// fallback when the sweep diverges at once or never improves by 1%.
pub fn pick_lr(lrs: &[f64], losses: &[f64]) -> (f64, Vec<f64>, bool) {
    let alpha = 2.0 / (SMOOTHING_WINDOW + 1.0);
    let mut smoothed: Vec<f64> = Vec::new();
    let mut min = f64::INFINITY;
    for &l in losses {
        if !l.is_finite() {
            break;
        }
        let s = match smoothed.last() {
            Some(&p) => p + alpha * (l - p),
            None => l,
        };
        smoothed.push(s);
        min = min.min(s);
        if s > DIVERGENCE * min {
            break;
        }
    }
    if smoothed.len() < 3
        || smoothed.iter().all(|&s| s > MIN_DESCENT * smoothed[0])
        || smoothed[0] <= 0.0
    {
        return (LR_FALLBACK, smoothed, true);
    }
    let mut best = (f64::INFINITY, LR_FALLBACK);
    for i in 1..smoothed.len() {
        let slope = (smoothed[i].max(f64::MIN_POSITIVE)).ln()
            - (smoothed[i - 1].max(f64::MIN_POSITIVE)).ln();
        if slope < best.0 {
            best = (slope, lrs[i]);
        }
    }
    (best.1, smoothed, false)
}

/// Runs the exponential sweep, calling `step(lr)` once per mini-step; the
/// closure trains with that rate and returns the resulting loss.
pub fn lr_range_test(mut step: impl FnMut(f64) -> Result<f64>) -> LrSweep {
    let mut lrs = Vec::with_capacity(LR_SWEEP_STEPS);
    let mut losses = Vec::with_capacity(LR_SWEEP_STEPS);
    for i in 0..LR_SWEEP_STEPS {
        let lr = sweep_lr(i);
        let loss = step(lr).unwrap_or(f64::NAN);
        lrs.push(lr);
        losses.push(loss);
        if !loss.is_finite() {
            break;
        }
    }
    let (chosen, smoothed, fell_back) = pick_lr(&lrs, &losses);
    LrSweep {
        lrs,
        losses,
        smoothed,
        chosen,
        fell_back,
    }
}

pub use super::trial::find_lr;
