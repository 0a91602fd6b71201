//! Score-informed NMF note separation and per-note MFCC features.

mod features;
mod mfcc;
mod nmf;
mod stft;

pub use features::{
    read_feature_store, write_feature_store, NoteFeatures, FEATURE_COLS, FEATURE_ROWS,
};
pub use mfcc::{mfcc13, MelFilterbank, LOG_FLOOR, N_MELS};
pub use nmf::{
    build_template, extract_note_spectrogram, init_activations, nmf_update, nmf_update_traced,
    note_frame_span, reconstruction_error, ACTIVATION_EPS, DECAY_TAIL_S, NMF_DELTA,
};
pub use stft::{stft, Spectrogram, StftPlan};

use ndarray::Array2;

use crate::dataset::Performance;
use crate::Result;

pub const WINDOW: usize = 2048;
pub const HOP: usize = 512;
pub const NOTE_FRAMES: usize = 30;
pub const NMF_ITERATIONS: usize = 100;

/// Runs the full chain on one recording: STFT, pianoroll-initialized NMF
/// starting from `template`, then one 13x30 MFCC matrix per note, in the
/// performance's note order.
pub fn separate_recording(
    audio: &[f64],
    perf: &Performance,
    template: &Array2<f64>,
    sr: u32,
    iterations: usize,
) -> Result<Vec<Array2<f64>>> {
    let spec = stft(audio, sr, WINDOW, HOP)?;
    let h = init_activations(perf, spec.n_frames(), sr, HOP);
    let (w, h) = nmf_update(&spec.magnitudes, template, &h, iterations)?;
    let bank = MelFilterbank::new(sr, WINDOW);
    perf.notes
        .iter()
        .map(|note| {
            let note_spec = extract_note_spectrogram(&w, &h, note, sr, HOP, NOTE_FRAMES)?;
            Ok(bank.mfcc13(&note_spec))
        })
        .collect()
}
