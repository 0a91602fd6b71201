use ndarray::Array2;

pub const N_MELS: usize = 40;
pub const N_MFCC: usize = 13;
pub const LOG_FLOOR: f64 = 1e-10;
const F_MIN: f64 = 30.0;

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-mel filters from 30 Hz to Nyquist, peak weight 1,
/// stored sparsely as (first bin, weights).
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    filters: Vec<(usize, Vec<f64>)>,
    n_bins: usize,
    dct: Array2<f64>,
}

impl MelFilterbank {
    pub fn new(sr: u32, n_fft: usize) -> Self {
        let n_bins = n_fft / 2 + 1;
        let (lo, hi) = (hz_to_mel(F_MIN), hz_to_mel(sr as f64 / 2.0));
        let edges: Vec<f64> = (0..N_MELS + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (N_MELS + 1) as f64))
            .collect();
        let bin_hz = sr as f64 / n_fft as f64;
        let filters = (0..N_MELS)
            .map(|m| {
                let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
                let first = (l / bin_hz).ceil() as usize;
                let weights = (first..n_bins)
                    .map(|k| k as f64 * bin_hz)
                    .take_while(|&f| f < r)
                    .map(|f| {
                        if f <= c {
                            (f - l) / (c - l)
                        } else {
                            (r - f) / (r - c)
                        }
                    })
                    .collect();
                (first, weights)
            })
            .collect();
        let n = N_MELS as f64;
        let dct = Array2::from_shape_fn((N_MFCC, N_MELS), |(k, i)| {
            let scale = if k == 0 {
                (1.0 / n).sqrt()
            } else {
                (2.0 / n).sqrt()
            };
            scale * (std::f64::consts::PI * k as f64 * (2.0 * i as f64 + 1.0) / (2.0 * n)).cos()
        });
        MelFilterbank {
            filters,
            n_bins,
            dct,
        }
    }

    /// Dense filter weights, `N_MELS x n_bins`.
    pub fn dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((N_MELS, self.n_bins));
        for (m, (first, w)) in self.filters.iter().enumerate() {
            for (j, &v) in w.iter().enumerate() {
                out[[m, first + j]] = v;
            }
        }
        out
    }

    /// First 13 orthonormal DCT-II coefficients of the log mel energies of
    /// every column.
    pub fn mfcc13(&self, spec: &Array2<f64>) -> Array2<f64> {
        assert_eq!(spec.nrows(), self.n_bins, "spectrogram bins");
        let mut log_mel = Array2::zeros((N_MELS, spec.ncols()));
        for (t, col) in spec.columns().into_iter().enumerate() {
            for (m, (first, w)) in self.filters.iter().enumerate() {
                let e: f64 = w.iter().enumerate().map(|(j, v)| v * col[first + j]).sum();
                log_mel[[m, t]] = (e + LOG_FLOOR).ln();
            }
        }
        self.dct.dot(&log_mel)
    }
}

/// MFCCs of a note spectrogram with the default analysis settings.
pub fn mfcc13(note_spec: &Array2<f64>, sr: u32, n_fft: usize) -> Array2<f64> {
    MelFilterbank::new(sr, n_fft).mfcc13(note_spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn zero_column_is_dct_of_floor() {
        let out = mfcc13(&Array2::zeros((1025, 30)), 22_050, 2048);
        assert_eq!(out.dim(), (13, 30));
        let c0 = 40f64.sqrt() * LOG_FLOOR.ln();
        for col in out.columns() {
            assert!((col[0] - c0).abs() < 1e-9);
            assert!(col.iter().skip(1).all(|v| v.abs() < 1e-9));
        }
    }

    #[test]
    fn every_filter_covers_a_bin() {
        let bank = MelFilterbank::new(22_050, 2048);
        let dense = bank.dense();
        for row in dense.rows() {
            assert!(row.iter().any(|&v| v > 0.0));
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn scaling_shifts_only_c0() {
        let mut rng = crate::rng::substream(4, "mfcc");
        let x = Array2::from_shape_fn((1025, 30), |_| rng.random_range(0.1..2.0));
        let a = mfcc13(&x, 22_050, 2048);
        let b = mfcc13(&(&x * 10.0), 22_050, 2048);
        let d = &b - &a;
        for col in d.columns() {
            assert!((col[0] - 40f64.sqrt() * 10f64.ln()).abs() < 1e-6);
            assert!(col.iter().skip(1).all(|v| v.abs() < 1e-6));
        }
    }

    #[test]
    fn matches_brute_force() {
        let sr = 22_050.0;
        let mut rng = crate::rng::substream(8, "mfcc");
        let x = Array2::from_shape_fn((1025, 3), |_| rng.random_range(0.0..1.0));
        let got = mfcc13(&x, 22_050, 2048);
        let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
        let inv = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
        for t in 0..3 {
            let mut logs = [0.0; 40];
            for (m, slot) in logs.iter_mut().enumerate() {
                let step = (mel(sr / 2.0) - mel(30.0)) / 41.0;
                let l = inv(mel(30.0) + step * m as f64);
                let c = inv(mel(30.0) + step * (m + 1) as f64);
                let r = inv(mel(30.0) + step * (m + 2) as f64);
                let mut e = 0.0;
                for k in 0..1025 {
                    let f = k as f64 * sr / 2048.0;
                    let w = if f > l && f <= c {
                        (f - l) / (c - l)
                    } else if f > c && f < r {
                        (r - f) / (r - c)
                    } else {
                        0.0
                    };
                    e += w * x[[k, t]];
                }
                *slot = (e + 1e-10).ln();
            }
            for k in 0..13 {
                let mut acc = 0.0;
                for (i, v) in logs.iter().enumerate() {
                    acc += v * (std::f64::consts::PI * k as f64 * (i as f64 + 0.5) / 40.0).cos();
                }
                acc *= if k == 0 {
                    (1.0f64 / 40.0).sqrt()
                } else {
                    (2.0f64 / 40.0).sqrt()
                };
                assert!((acc - got[[k, t]]).abs() < 1e-6, "k={k} t={t}");
            }
        }
    }
}
