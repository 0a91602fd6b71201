//! Deterministic additive piano renderer with six acoustic presets.
//!
//! A preset combines a velocity map, a reverb and an instrument model. The
//! renderer is a pure function of its inputs: the same performance, preset
//! and sample rate always produce bit-identical samples.

use std::sync::Arc;

use rand::Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dataset::{NoteEvent, Performance, HIGHEST_PITCH, LOWEST_PITCH};
use crate::{Error, Result};

pub const SAMPLE_RATE: u32 = 22_050;
/// -1 dBFS.
pub const PEAK_LEVEL: f64 = 0.891;
const ATTACK_S: f64 = 0.003;
const RELEASE_S: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VelocityMap {
    Linear,
    Logarithmic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Reverb {
    Studio,
    Cathedral,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Instrument {
    InstrumentA,
    InstrumentB,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AcousticPreset {
    pub id: u8,
    pub velocity_map: VelocityMap,
    pub reverb: Reverb,
    pub instrument: Instrument,
}

impl AcousticPreset {
    pub const COUNT: usize = 6;

    /// The six canonical presets, indexed by id.
    pub fn all() -> [AcousticPreset; 6] {
        use Instrument::*;
        use Reverb::*;
        use VelocityMap::*;
        let row = |id, velocity_map, reverb, instrument| AcousticPreset {
            id,
            velocity_map,
            reverb,
            instrument,
        };
        [
            row(0, Linear, Studio, InstrumentA),
            row(1, Logarithmic, Studio, InstrumentA),
            row(2, Logarithmic, Cathedral, InstrumentA),
            row(3, Linear, Studio, InstrumentB),
            row(4, Logarithmic, Studio, InstrumentB),
            row(5, Logarithmic, Cathedral, InstrumentB),
        ]
    }

    pub fn by_id(id: u8) -> Result<AcousticPreset> {
        Self::all()
            .get(id as usize)
            .copied()
            .ok_or_else(|| Error::Domain(format!("no preset with id {id}")))
    }
}

/// Maps a MIDI velocity to a linear amplitude gain in (0, 1].
///
/// Linear: `v / 127`. Logarithmic: `log2(1 + 15 v / 127) / 4`. Both reach 1 at 127.
pub fn velocity_to_gain(velocity: u8, map: VelocityMap) -> Result<f64> {
    if !(1..=127).contains(&velocity) {
        return Err(Error::Domain(format!(
            "velocity {velocity} outside 1..=127"
        )));
    }
    let x = velocity as f64 / 127.0;
    Ok(match map {
        VelocityMap::Linear => x,
        VelocityMap::Logarithmic => (1.0 + x * 15.0).log2() / 4.0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstrumentProfile {
    /// Stiffness coefficient B: partial n sits at `n f0 sqrt(1 + B n^2)`.
    pub inharmonicity: f64,
    pub partial_count: usize,
    /// Amplitude drop per partial at zero gain, in dB.
    pub partial_rolloff_db: f64,
    /// Decay rate of the fundamental of middle C, 1/s.
    pub decay_rate_base: f64,
    /// How much a full-gain strike flattens the rolloff (0 = no coupling).
    pub brightness_sensitivity: f64,
}

impl InstrumentProfile {
    pub fn instrument_a() -> Self {
        InstrumentProfile {
            inharmonicity: 3.8e-4,
            partial_count: 24,
            partial_rolloff_db: 2.5,
            decay_rate_base: 1.2,
            brightness_sensitivity: 0.6,
        }
    }

    pub fn instrument_b() -> Self {
        InstrumentProfile {
            inharmonicity: 1.5e-4,
            partial_count: 16,
            partial_rolloff_db: 4.0,
            decay_rate_base: 2.0,
            brightness_sensitivity: 0.45,
        }
    }

    /// The separate instrument used to learn NMF templates.
    pub fn calibration() -> Self {
        InstrumentProfile {
            inharmonicity: 2.5e-4,
            partial_count: 20,
            partial_rolloff_db: 3.2,
            decay_rate_base: 1.5,
            brightness_sensitivity: 0.5,
        }
    }

    pub fn for_instrument(instrument: Instrument) -> Self {
        match instrument {
            Instrument::InstrumentA => Self::instrument_a(),
            Instrument::InstrumentB => Self::instrument_b(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImpulseResponse {
    pub samples: Vec<f64>,
    pub rt60: f64,
}

impl ImpulseResponse {
    /// A unit direct path followed by exponentially decaying uniform noise
    /// that loses 60 dB over `rt60`. Seeded, so reproducible.
    pub fn synthetic(rt60: f64, wet: f64, seed: u64, sr: u32) -> Self {
        let len = (rt60 * sr as f64).ceil() as usize + 1;
        let mut rng = crate::rng::substream(seed, "impulse-response");
        let rate = 60.0 / 20.0 * std::f64::consts::LN_10 / (rt60 * sr as f64);
        let mut samples = Vec::with_capacity(len);
        samples.push(1.0);
        for k in 1..len {
            let noise: f64 = rng.random_range(-1.0..1.0);
            samples.push(wet * noise * (-rate * k as f64).exp());
        }
        ImpulseResponse { samples, rt60 }
    }

    pub fn for_reverb(reverb: Reverb, sr: u32) -> Self {
        match reverb {
            Reverb::Studio => Self::synthetic(0.4, 0.05, 0x5757, sr),
            Reverb::Cathedral => Self::synthetic(2.5, 0.03, 0xCA7, sr),
        }
    }
}

pub fn fundamental(pitch: u8) -> f64 {
    440.0 * 2f64.powf((pitch as f64 - 69.0) / 12.0)
}

/// Renders one note: inharmonic partials with a gain-dependent spectral
/// tilt, per-partial exponential decay and short attack/release ramps.
///
/// Output length is `duration + 50 ms` of release.
pub fn render_note(
    pitch: u8,
    velocity: u8,
    duration: f64,
    profile: &InstrumentProfile,
    map: VelocityMap,
    sr: u32,
) -> Result<Vec<f64>> {
    if !(LOWEST_PITCH..=HIGHEST_PITCH).contains(&pitch) {
        return Err(Error::Domain(format!("pitch {pitch} outside 21..=108")));
    }
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(Error::Domain(format!(
            "note duration {duration} must be positive"
        )));
    }
    let gain = velocity_to_gain(velocity, map)?;
    let srf = sr as f64;
    let hold = (duration * srf).round().max(1.0) as usize;
    let release = (RELEASE_S * srf).round() as usize;
    let attack = ((ATTACK_S * srf).round() as usize).max(1);
    let len = hold + release;
    let f0 = fundamental(pitch);
    let rolloff_db = profile.partial_rolloff_db * (1.0 - profile.brightness_sensitivity * gain);
    let pitch_decay = 2f64.powf((pitch as f64 - 60.0) / 24.0);

    let mut out = vec![0.0; len];
    for n in 1..=profile.partial_count {
        let nf = n as f64;
        let freq = nf * f0 * (1.0 + profile.inharmonicity * nf * nf).sqrt();
        if freq >= 0.45 * srf {
            break;
        }
        let amp = gain * 10f64.powf(-rolloff_db * (nf - 1.0) / 20.0);
        let decay = profile.decay_rate_base * pitch_decay * (1.0 + 0.08 * (nf - 1.0));
        // Damped phasor: z <- z * r e^{i w}; the imaginary part is the partial.
        let step = Complex64::from_polar(
            (-decay / srf).exp(),
            2.0 * std::f64::consts::PI * freq / srf,
        );
        let mut z = Complex64::new(amp, 0.0);
        for s in out.iter_mut() {
            *s += z.im;
            z *= step;
        }
    }
    for (i, s) in out.iter_mut().enumerate() {
        let env = if i < attack {
            i as f64 / attack as f64
        } else if i >= hold {
            1.0 - (i - hold) as f64 / release as f64
        } else {
            1.0
        };
        *s *= env;
    }
    Ok(out)
}

fn onset_sample(note: &NoteEvent, sr: u32) -> usize {
    (note.onset * sr as f64).round() as usize
}

/// Sum of per-note renders at their onsets, without room or normalization.
pub fn render_dry(
    perf: &Performance,
    profile: &InstrumentProfile,
    map: VelocityMap,
    sr: u32,
) -> Result<Vec<f64>> {
    perf.validate()?;
    let mut out: Vec<f64> = Vec::new();
    for note in &perf.notes {
        let wave = render_note(note.pitch, note.velocity, note.duration(), profile, map, sr)?;
        let start = onset_sample(note, sr);
        if out.len() < start + wave.len() {
            out.resize(start + wave.len(), 0.0);
        }
        for (o, w) in out[start..].iter_mut().zip(&wave) {
            *o += w;
        }
    }
    Ok(out)
}

/// Linear convolution through zero-padded FFTs.
pub fn fft_convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let out_len = a.len() + b.len() - 1;
    let n = out_len.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let spectrum = |x: &[f64], fft: &Arc<dyn rustfft::Fft<f64>>| {
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        buf.resize(n, Complex64::new(0.0, 0.0));
        fft.process(&mut buf);
        buf
    };
    let fa = spectrum(a, &fwd);
    let mut prod: Vec<Complex64> = spectrum(b, &fwd)
        .iter()
        .zip(&fa)
        .map(|(x, y)| x * y)
        .collect();
    inv.process(&mut prod);
    prod.truncate(out_len);
    prod.into_iter().map(|c| c.re / n as f64).collect()
}

/// The dry render convolved with the preset's room, before normalization.
pub fn render_performance_unnormalized(
    perf: &Performance,
    preset: &AcousticPreset,
    sr: u32,
) -> Result<Vec<f64>> {
    let profile = InstrumentProfile::for_instrument(preset.instrument);
    let dry = render_dry(perf, &profile, preset.velocity_map, sr)?;
    let ir = ImpulseResponse::for_reverb(preset.reverb, sr);
    Ok(fft_convolve(&dry, &ir.samples))
}

/// Renders a performance under a preset, peak-normalized to -1 dBFS.
/// An empty performance renders to an empty waveform.
pub fn render_performance(
    perf: &Performance,
    preset: &AcousticPreset,
    sr: u32,
) -> Result<Vec<f64>> {
    let mut wave = render_performance_unnormalized(perf, preset, sr)?;
    let peak = wave.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let scale = PEAK_LEVEL / peak;
        wave.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(wave)
}

pub const CALIBRATION_VELOCITIES: [u8; 4] = [16, 48, 80, 112];
pub const CALIBRATION_DURATIONS: [f64; 2] = [0.2, 1.0];
pub const CALIBRATION_GAP_S: f64 = 1.5;

/// The score used to learn NMF templates: every key at four velocities and
/// two durations, each note followed by 1.5 s of silence.
pub fn calibration_performance() -> Performance {
    let mut notes = Vec::with_capacity(88 * 8);
    let mut t = 0.0;
    for pitch in LOWEST_PITCH..=HIGHEST_PITCH {
        for &velocity in &CALIBRATION_VELOCITIES {
            for &duration in &CALIBRATION_DURATIONS {
                notes.push(NoteEvent {
                    pitch,
                    onset: t,
                    offset: t + duration,
                    velocity,
                });
                t += duration + CALIBRATION_GAP_S;
            }
        }
    }
    Performance::new("calibration", notes)
}

/// Calibration score and its dry render with the calibration instrument.
pub fn render_calibration_sequence(sr: u32) -> Result<(Performance, Vec<f64>)> {
    let perf = calibration_performance();
    let wave = render_dry(
        &perf,
        &InstrumentProfile::calibration(),
        VelocityMap::Linear,
        sr,
    )?;
    Ok((perf, wave))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    fn spectrum(x: &[f64]) -> Vec<f64> {
        let n = x.len().next_power_of_two();
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        buf.resize(n, Complex64::new(0.0, 0.0));
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        buf[..n / 2 + 1].iter().map(|c| c.norm()).collect()
    }

    #[test]
    fn presets_match_the_table() {
        let p = AcousticPreset::all();
        let rows: Vec<_> = p
            .iter()
            .map(|p| (p.id, p.velocity_map, p.reverb, p.instrument))
            .collect();
        use Instrument::*;
        use Reverb::*;
        use VelocityMap::*;
        assert_eq!(
            rows,
            vec![
                (0, Linear, Studio, InstrumentA),
                (1, Logarithmic, Studio, InstrumentA),
                (2, Logarithmic, Cathedral, InstrumentA),
                (3, Linear, Studio, InstrumentB),
                (4, Logarithmic, Studio, InstrumentB),
                (5, Logarithmic, Cathedral, InstrumentB),
            ]
        );
        assert!(AcousticPreset::by_id(6).is_err());
    }

    #[test]
    fn gain_curves() {
        assert_eq!(velocity_to_gain(127, VelocityMap::Linear).unwrap(), 1.0);
        assert_eq!(
            velocity_to_gain(127, VelocityMap::Logarithmic).unwrap(),
            1.0
        );
        let g = velocity_to_gain(64, VelocityMap::Logarithmic).unwrap();
        // log2(1 + 15*64/127)/4
        assert!((g - 0.7744).abs() < 1e-4, "{g}");
        assert!(velocity_to_gain(0, VelocityMap::Linear).is_err());
        assert!(velocity_to_gain(128, VelocityMap::Logarithmic).is_err());
        for map in [VelocityMap::Linear, VelocityMap::Logarithmic] {
            for v in 1..127u8 {
                let a = velocity_to_gain(v, map).unwrap();
                let b = velocity_to_gain(v + 1, map).unwrap();
                assert!(b > a && a > 0.0);
            }
        }
    }

    #[test]
    fn a440_fundamental_dominates() {
        let sr = SAMPLE_RATE;
        for preset in AcousticPreset::all() {
            let profile = InstrumentProfile::for_instrument(preset.instrument);
            let wave = render_note(69, 90, 1.0, &profile, preset.velocity_map, sr).unwrap();
            let spec = spectrum(&wave);
            let n = (wave.len().next_power_of_two()) as f64;
            let peak = (0..spec.len())
                .max_by(|&a, &b| spec[a].total_cmp(&spec[b]))
                .unwrap();
            let expected = 440.0 * n / sr as f64;
            assert!(
                (peak as f64 - expected).abs() <= 1.0,
                "peak bin {peak} vs {expected}"
            );
        }
    }

    #[test]
    fn louder_and_brighter_with_velocity() {
        let profile = InstrumentProfile::instrument_a();
        let soft = render_note(60, 16, 0.5, &profile, VelocityMap::Linear, SAMPLE_RATE).unwrap();
        let hard = render_note(60, 127, 0.5, &profile, VelocityMap::Linear, SAMPLE_RATE).unwrap();
        assert!(rms(&hard) > rms(&soft));
        let centroid = |x: &[f64]| {
            let s = spectrum(x);
            let num: f64 = s.iter().enumerate().map(|(k, m)| k as f64 * m).sum();
            num / s.iter().sum::<f64>()
        };
        assert!(centroid(&hard) > centroid(&soft));
    }

    #[test]
    fn rms_strictly_increasing_in_velocity() {
        for preset in AcousticPreset::all() {
            let profile = InstrumentProfile::for_instrument(preset.instrument);
            let mut last = 0.0;
            for v in (1..=127).step_by(6) {
                let r = rms(
                    &render_note(45, v, 0.3, &profile, preset.velocity_map, SAMPLE_RATE).unwrap(),
                );
                assert!(r > last);
                last = r;
            }
        }
    }

    #[test]
    fn note_domain_errors() {
        let p = InstrumentProfile::instrument_a();
        assert!(render_note(20, 64, 0.5, &p, VelocityMap::Linear, SAMPLE_RATE).is_err());
        assert!(render_note(109, 64, 0.5, &p, VelocityMap::Linear, SAMPLE_RATE).is_err());
    }

    #[test]
    fn impulse_response_properties() {
        let studio = ImpulseResponse::for_reverb(Reverb::Studio, SAMPLE_RATE);
        let cathedral = ImpulseResponse::for_reverb(Reverb::Cathedral, SAMPLE_RATE);
        assert_eq!(studio.rt60, 0.4);
        assert_eq!(cathedral.rt60, 2.5);
        assert_eq!(
            studio,
            ImpulseResponse::for_reverb(Reverb::Studio, SAMPLE_RATE)
        );
        for ir in [&studio, &cathedral] {
            assert!(ir.samples.iter().all(|v| v.is_finite()));
            let early = ir.samples[1..101]
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            let late = ir.samples[ir.samples.len() - 100..]
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(late < 1.2e-3 * early, "{late} vs {early}");
        }
    }

    fn single(pitch: u8, onset: f64, dur: f64, vel: u8) -> Performance {
        Performance::new(
            "t",
            vec![NoteEvent::new(pitch, onset, onset + dur, vel).unwrap()],
        )
    }

    #[test]
    fn performance_render_length_and_level() {
        for preset in AcousticPreset::all() {
            let ir = ImpulseResponse::for_reverb(preset.reverb, SAMPLE_RATE);
            let w = render_performance(&single(60, 0.0, 0.5, 100), &preset, SAMPLE_RATE).unwrap();
            assert!(w.len() as f64 / SAMPLE_RATE as f64 >= 0.5 + ir.rt60);
            let peak = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!((peak - PEAK_LEVEL).abs() < 1e-12);
        }
        let empty = render_performance(
            &Performance::default(),
            &AcousticPreset::all()[0],
            SAMPLE_RATE,
        )
        .unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn presets_change_the_waveform() {
        let perf = single(60, 0.0, 0.5, 100);
        let p = AcousticPreset::all();
        let a = render_performance(&perf, &p[0], SAMPLE_RATE).unwrap();
        let b = render_performance(&perf, &p[2], SAMPLE_RATE).unwrap();
        let n = a.len().max(b.len());
        let d: f64 = (0..n)
            .map(|i| (a.get(i).unwrap_or(&0.0) - b.get(i).unwrap_or(&0.0)).powi(2))
            .sum();
        assert!(d > 0.0);
    }

    #[test]
    fn render_chain_is_linear() {
        let preset = AcousticPreset::all()[2];
        let n1 = NoteEvent::new(50, 0.1, 0.4, 70).unwrap();
        let n2 = NoteEvent::new(74, 1.0, 1.3, 30).unwrap();
        let both = render_performance_unnormalized(
            &Performance::new("b", vec![n1, n2]),
            &preset,
            SAMPLE_RATE,
        )
        .unwrap();
        let a =
            render_performance_unnormalized(&Performance::new("a", vec![n1]), &preset, SAMPLE_RATE)
                .unwrap();
        let b =
            render_performance_unnormalized(&Performance::new("c", vec![n2]), &preset, SAMPLE_RATE)
                .unwrap();
        for (i, v) in both.iter().enumerate() {
            let s = a.get(i).unwrap_or(&0.0) + b.get(i).unwrap_or(&0.0);
            assert!((v - s).abs() < 1e-6, "sample {i}");
        }
    }

    #[test]
    fn rendering_is_bit_identical() {
        let perf = crate::dataset::generate_synthetic_performance(3, 10).unwrap();
        let p = AcousticPreset::all()[5];
        let a = render_performance(&perf, &p, SAMPLE_RATE).unwrap();
        let b = render_performance(&perf, &p, SAMPLE_RATE).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn calibration_score_layout() {
        let perf = calibration_performance();
        assert_eq!(perf.len(), 704);
        let pitches: std::collections::BTreeSet<u8> = perf.notes.iter().map(|n| n.pitch).collect();
        assert_eq!(pitches, (21..=108).collect());
        for w in perf.notes.windows(2) {
            assert!(w[1].onset - w[0].onset >= w[0].duration() + CALIBRATION_GAP_S - 1e-9);
        }
    }
}
