//! Performances, MIDI ingestion and cluster-stratified preset assignment.

mod clustering;
mod generate;
mod smf;
mod splits;

pub use clustering::{
    cluster, cluster_count, extract_clustering_features, partition_into_subsets,
    robin_hood_redistribute, standardize, Clustering, FEATURE_DIM,
};
pub use generate::generate_synthetic_performance;
pub use smf::parse_smf;
pub use splits::{assign_presets, split_performances, Split, SplitAssignment, N_SUBSETS};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const LOWEST_PITCH: u8 = 21;
pub const HIGHEST_PITCH: u8 = 108;
pub const N_KEYS: usize = 88;

/// One note of an aligned score: the ground truth the transcriber must recover.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoteEvent {
    pub pitch: u8,
    /// Seconds.
    pub onset: f64,
    /// Seconds, strictly after `onset`.
    pub offset: f64,
    pub velocity: u8,
}

impl NoteEvent {
    pub fn new(pitch: u8, onset: f64, offset: f64, velocity: u8) -> Result<Self> {
        let note = NoteEvent {
            pitch,
            onset,
            offset,
            velocity,
        };
        note.validate()?;
        Ok(note)
    }

    pub fn validate(&self) -> Result<()> {
        if !(LOWEST_PITCH..=HIGHEST_PITCH).contains(&self.pitch) {
            return Err(Error::Domain(format!(
                "pitch {} outside 21..=108",
                self.pitch
            )));
        }
        if !(1..=127).contains(&self.velocity) {
            return Err(Error::Domain(format!(
                "velocity {} outside 1..=127",
                self.velocity
            )));
        }
        if !(self.onset.is_finite() && self.offset.is_finite()) || self.onset < 0.0 {
            return Err(Error::Domain(format!(
                "bad note timing {}..{}",
                self.onset, self.offset
            )));
        }
        if self.offset <= self.onset {
            return Err(Error::Domain(format!(
                "offset {} not after onset {}",
                self.offset, self.onset
            )));
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        self.offset - self.onset
    }

    /// Row of the 88-key piano roll.
    pub fn key_index(&self) -> usize {
        (self.pitch - LOWEST_PITCH) as usize
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Performance {
    pub source_id: String,
    pub notes: Vec<NoteEvent>,
}

impl Performance {
    /// Builds a performance, sorting notes by onset (then pitch).
    pub fn new(source_id: impl Into<String>, mut notes: Vec<NoteEvent>) -> Self {
        sort_notes(&mut notes);
        Performance {
            source_id: source_id.into(),
            notes,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.notes.is_empty()
    }

    pub fn len(&self) -> usize {
        self.notes.len()
    }

    /// Offset of the last-ending note, 0 for an empty performance.
    pub fn end_time(&self) -> f64 {
        self.notes.iter().map(|n| n.offset).fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<()> {
        for n in &self.notes {
            n.validate()?;
        }
        if self.notes.windows(2).any(|w| w[1].onset < w[0].onset) {
            return Err(Error::Domain(format!(
                "performance {} is not sorted by onset",
                self.source_id
            )));
        }
        Ok(())
    }
}

pub(crate) fn sort_notes(notes: &mut [NoteEvent]) {
    notes.sort_by(|a, b| {
        a.onset
            .total_cmp(&b.onset)
            .then(a.pitch.cmp(&b.pitch))
            .then(a.offset.total_cmp(&b.offset))
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn note_validation() {
        assert!(NoteEvent::new(60, 0.0, 0.5, 64).is_ok());
        assert!(NoteEvent::new(20, 0.0, 0.5, 64).is_err());
        assert!(NoteEvent::new(109, 0.0, 0.5, 64).is_err());
        assert!(NoteEvent::new(60, 0.5, 0.5, 64).is_err());
        assert!(NoteEvent::new(60, 0.0, 0.5, 0).is_err());
        assert!(NoteEvent::new(60, 0.0, 0.5, 128).is_err());
    }

    #[test]
    fn performance_sorts_notes() {
        let p = Performance::new(
            "x",
            vec![
                NoteEvent::new(64, 1.0, 2.0, 10).unwrap(),
                NoteEvent::new(60, 0.0, 1.0, 10).unwrap(),
            ],
        );
        assert_eq!(p.notes[0].pitch, 60);
        assert!(p.validate().is_ok());
        assert_eq!(p.end_time(), 2.0);
    }
}
