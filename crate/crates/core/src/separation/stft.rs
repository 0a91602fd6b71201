use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::{Error, Result};

/// Magnitude spectrogram, `F x T` with `F = window / 2 + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub magnitudes: Array2<f64>,
    pub sr: u32,
    pub hop: usize,
    pub window: usize,
}

impl Spectrogram {
    pub fn n_bins(&self) -> usize {
        self.magnitudes.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.magnitudes.ncols()
    }
}

/// Periodic-Hann magnitude STFT computed one frame at a time.
pub struct StftPlan {
    window: usize,
    hop: usize,
    hann: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    buf: Vec<Complex64>,
}

impl StftPlan {
    pub fn new(window: usize, hop: usize) -> Result<Self> {
        if window < 2 || hop == 0 {
            return Err(Error::Domain(format!(
                "invalid STFT window {window} / hop {hop}"
            )));
        }
        let hann = (0..window)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / window as f64).cos())
            .collect();
        Ok(StftPlan {
            window,
            hop,
            hann,
            fft: FftPlanner::new().plan_fft_forward(window),
            buf: vec![Complex64::default(); window],
        })
    }

    pub fn n_bins(&self) -> usize {
        self.window / 2 + 1
    }

    /// Frames that fit entirely inside `len` samples.
    pub fn n_frames(&self, len: usize) -> usize {
        if len < self.window {
            0
        } else {
            (len - self.window) / self.hop + 1
        }
    }

    /// Magnitudes of frame `t`, which covers `[t * hop, t * hop + window)`.
    pub fn frame(&mut self, signal: &[f64], t: usize, out: &mut [f64]) {
        let start = t * self.hop;
        let seg = &signal[start..start + self.window];
        for ((b, &x), &w) in self.buf.iter_mut().zip(seg).zip(&self.hann) {
            *b = Complex64::new(x * w, 0.0);
        }
        self.fft.process(&mut self.buf);
        for (o, c) in out.iter_mut().zip(&self.buf) {
            *o = c.norm();
        }
    }
}

pub fn stft(waveform: &[f64], sr: u32, window: usize, hop: usize) -> Result<Spectrogram> {
    let mut plan = StftPlan::new(window, hop)?;
    if waveform.len() < window {
        return Err(Error::Domain(format!(
            "waveform of {} samples is shorter than the {window}-sample window",
            waveform.len()
        )));
    }
    let frames = plan.n_frames(waveform.len());
    let bins = plan.n_bins();
    let mut magnitudes = Array2::zeros((bins, frames));
    let mut col = vec![0.0; bins];
    for t in 0..frames {
        plan.frame(waveform, t, &mut col);
        magnitudes
            .column_mut(t)
            .iter_mut()
            .zip(&col)
            .for_each(|(m, &c)| *m = c);
    }
    Ok(Spectrogram {
        magnitudes,
        sr,
        hop,
        window,
    })
}
