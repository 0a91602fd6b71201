use rand::Rng;

use super::{NoteEvent, Performance, HIGHEST_PITCH, LOWEST_PITCH};
use crate::rng::StreamRng;
use crate::{Error, Result};

const PITCH_STEP: i32 = 7;
const VELOCITY_STEP: i32 = 24;
const IOI_RANGE: (f64, f64) = (0.05, 0.5);
const DURATION_RANGE: (f64, f64) = (0.1, 1.2);
const FIRST_ONSET: f64 = 0.1;

fn reflect(value: i32, lo: i32, hi: i32) -> i32 {
    let v = if value < lo {
        2 * lo - value
    } else if value > hi {
        2 * hi - value
    } else {
        value
    };
    v.clamp(lo, hi)
}

fn log_uniform(rng: &mut StreamRng, (lo, hi): (f64, f64)) -> f64 {
    (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp()
}

/// A bounded random walk over pitch and velocity with log-uniform timing.
///
/// Deterministic in `seed`; `source_id` is `synthetic-<seed>`.
pub fn generate_synthetic_performance(seed: u64, n_notes: usize) -> Result<Performance> {
    if n_notes == 0 {
        return Err(Error::Domain(
            "a performance needs at least one note".into(),
        ));
    }
    let mut rng = crate::rng::substream(seed, "synthetic-performance");
    let (lo_p, hi_p) = (LOWEST_PITCH as i32, HIGHEST_PITCH as i32);
    let mut pitch = rng.random_range(lo_p + 12..=hi_p - 12);
    let mut velocity = rng.random_range(1..=127);
    let mut onset = FIRST_ONSET;
    let mut notes = Vec::with_capacity(n_notes);
    for i in 0..n_notes {
        if i > 0 {
            pitch = reflect(
                pitch + rng.random_range(-PITCH_STEP..=PITCH_STEP),
                lo_p,
                hi_p,
            );
            velocity = reflect(
                velocity + rng.random_range(-VELOCITY_STEP..=VELOCITY_STEP),
                1,
                127,
            );
            onset += log_uniform(&mut rng, IOI_RANGE);
        }
        let duration = log_uniform(&mut rng, DURATION_RANGE);
        notes.push(NoteEvent {
            pitch: pitch as u8,
            onset,
            offset: onset + duration,
            velocity: velocity as u8,
        });
    }
    Ok(Performance::new(format!("synthetic-{seed}"), notes))
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    #[test]
    fn deterministic_given_seed() {
        let a = generate_synthetic_performance(0, 100).unwrap();
        let b = generate_synthetic_performance(0, 100).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_synthetic_performance(1, 100).unwrap());
        assert!(a.validate().is_ok());
    }

    #[test]
    fn velocities_in_range_and_well_spread() {
        let mut seen = HashSet::new();
        for seed in 0..100 {
            let p = generate_synthetic_performance(seed, 100).unwrap();
            for n in &p.notes {
                assert!((1..=127).contains(&n.velocity));
                assert!((21..=108).contains(&n.pitch));
                seen.insert(n.velocity);
            }
        }
        assert!(seen.len() >= 100, "only {} distinct velocities", seen.len());
    }

    #[test]
    fn zero_notes_rejected() {
        assert!(generate_synthetic_performance(0, 0).is_err());
    }
}
