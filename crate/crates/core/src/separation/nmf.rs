use ndarray::{s, Array2, Zip};

use super::stft::StftPlan;
use crate::dataset::{NoteEvent, Performance, LOWEST_PITCH, N_KEYS};
use crate::{Error, Result};

pub const ACTIVATION_EPS: f64 = 1e-4;
pub const DECAY_TAIL_S: f64 = 1.0;
pub const NMF_DELTA: f64 = 1e-9;
const TEMPLATE_FLOOR: f64 = 1e-6;

fn frame_of(time: f64, sr: u32, hop: usize) -> usize {
    (time * sr as f64 / hop as f64).floor().max(0.0) as usize
}

fn frame_ceil(time: f64, sr: u32, hop: usize) -> usize {
    (time * sr as f64 / hop as f64).ceil().max(0.0) as usize
}

/// Frames `[first, end)` whose start lies inside the sounding note.
pub fn note_frame_span(note: &NoteEvent, sr: u32, hop: usize) -> (usize, usize) {
    (
        frame_of(note.onset, sr, hop),
        frame_ceil(note.offset, sr, hop),
    )
}

/// Per-key spectral templates learned from a calibration recording.
///
/// Column `r` is the mean magnitude spectrum over every frame starting inside
/// a note of pitch `21 + r`, floored at 1e-6 and scaled to unit L2 norm.
/// Frames are computed on demand, so the full spectrogram is never held.
pub fn build_template(
    audio: &[f64],
    perf: &Performance,
    sr: u32,
    window: usize,
    hop: usize,
) -> Result<Array2<f64>> {
    let mut plan = StftPlan::new(window, hop)?;
    let bins = plan.n_bins();
    let total_frames = plan.n_frames(audio.len());
    let mut sums = Array2::<f64>::zeros((bins, N_KEYS));
    let mut counts = [0usize; N_KEYS];
    let mut col = vec![0.0; bins];
    for note in &perf.notes {
        let r = note.key_index();
        let (first, end) = note_frame_span(note, sr, hop);
        let first = if first * hop < (note.onset * sr as f64).round() as usize {
            first + 1
        } else {
            first
        };
        for t in first..end.min(total_frames) {
            plan.frame(audio, t, &mut col);
            sums.column_mut(r)
                .iter_mut()
                .zip(&col)
                .for_each(|(s, c)| *s += c);
            counts[r] += 1;
        }
    }
    let missing: Vec<u8> = (0..N_KEYS)
        .filter(|&r| counts[r] == 0)
        .map(|r| LOWEST_PITCH + r as u8)
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingData(format!(
            "calibration lacks pitches {missing:?}"
        )));
    }
    for (r, mut column) in sums.columns_mut().into_iter().enumerate() {
        column.mapv_inplace(|v| v / counts[r] as f64 + TEMPLATE_FLOOR);
        let norm = column.iter().map(|v| v * v).sum::<f64>().sqrt();
        column.mapv_inplace(|v| v / norm);
    }
    Ok(sums)
}

/// Pianoroll initialization: 1 from each note's onset frame through one
/// second past its offset, `ACTIVATION_EPS` elsewhere.
pub fn init_activations(perf: &Performance, n_frames: usize, sr: u32, hop: usize) -> Array2<f64> {
    let mut h = Array2::from_elem((N_KEYS, n_frames), ACTIVATION_EPS);
    for note in &perf.notes {
        let first = frame_of(note.onset, sr, hop).min(n_frames);
        let end = frame_ceil(note.offset + DECAY_TAIL_S, sr, hop).min(n_frames);
        h.slice_mut(s![note.key_index(), first..end]).fill(1.0);
    }
    h
}

pub fn reconstruction_error(s: &Array2<f64>, w: &Array2<f64>, h: &Array2<f64>) -> f64 {
    let wh = w.dot(h);
    Zip::from(s)
        .and(&wh)
        .fold(0.0, |acc, &a, &b| acc + (a - b) * (a - b))
        .sqrt()
}

fn check_inputs(s: &Array2<f64>, w: &Array2<f64>, h: &Array2<f64>) -> Result<()> {
    if w.nrows() != s.nrows() || h.ncols() != s.ncols() || w.ncols() != h.nrows() {
        return Err(Error::Shape(format!(
            "S {:?}, W {:?}, H {:?} do not agree",
            s.dim(),
            w.dim(),
            h.dim()
        )));
    }
    for (name, m) in [("S", s), ("W", w), ("H", h)] {
        if m.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Domain(format!("{name} has negative or NaN entries")));
        }
    }
    Ok(())
}

fn step(s: &Array2<f64>, w: &mut Array2<f64>, h: &mut Array2<f64>) {
    let num = w.t().dot(s);
    let den = w.t().dot(&*w).dot(&*h);
    Zip::from(&mut *h)
        .and(&num)
        .and(&den)
        .for_each(|h, &n, &d| *h *= n / (d + NMF_DELTA));
    let num = s.dot(&h.t());
    let den = w.dot(&h.dot(&h.t()));
    Zip::from(&mut *w)
        .and(&num)
        .and(&den)
        .for_each(|w, &n, &d| *w *= n / (d + NMF_DELTA));
}

/// Euclidean multiplicative updates of both factors, H first.
pub fn nmf_update(
    s: &Array2<f64>,
    w: &Array2<f64>,
    h: &Array2<f64>,
    iterations: usize,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_inputs(s, w, h)?;
    let (mut w, mut h) = (w.clone(), h.clone());
    for _ in 0..iterations {
        step(s, &mut w, &mut h);
    }
    if w.iter().chain(h.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("NMF produced non-finite factors".into()));
    }
    Ok((w, h))
}

/// Like [`nmf_update`], also returning `||S - WH||_F` before the first and
/// after every iteration.
pub fn nmf_update_traced(
    s: &Array2<f64>,
    w: &Array2<f64>,
    h: &Array2<f64>,
    iterations: usize,
) -> Result<(Array2<f64>, Array2<f64>, Vec<f64>)> {
    check_inputs(s, w, h)?;
    let (mut w, mut h) = (w.clone(), h.clone());
    let mut trace = vec![reconstruction_error(s, &w, &h)];
    for _ in 0..iterations {
        step(s, &mut w, &mut h);
        trace.push(reconstruction_error(s, &w, &h));
    }
    if trace.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("NMF produced non-finite factors".into()));
    }
    Ok((w, h, trace))
}

/// `W[:, r]` times `H[r, onset .. onset + frames]`, keeping only the frames
/// inside the note and zero-padding the rest.
pub fn extract_note_spectrogram(
    w: &Array2<f64>,
    h: &Array2<f64>,
    note: &NoteEvent,
    sr: u32,
    hop: usize,
    frames: usize,
) -> Result<Array2<f64>> {
    let r = note.key_index();
    if r >= h.nrows() || r >= w.ncols() {
        return Err(Error::Shape(format!("no row for key {r}")));
    }
    let (first, end) = note_frame_span(note, sr, hop);
    if first >= h.ncols() {
        return Err(Error::Domain(format!(
            "onset frame {first} beyond spectrogram of {} frames",
            h.ncols()
        )));
    }
    let last = end.max(first + 1).min(first + frames).min(h.ncols());
    let mut out = Array2::zeros((w.nrows(), frames));
    let template = w.column(r);
    for (j, t) in (first..last).enumerate() {
        let a = h[[r, t]];
        out.column_mut(j)
            .iter_mut()
            .zip(template)
            .for_each(|(o, &v)| *o = v * a);
    }
    Ok(out)
}
