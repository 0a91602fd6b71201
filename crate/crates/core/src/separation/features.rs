use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::Split;
use crate::pipeline::atomic_write;
use crate::{Error, Result};

pub const FEATURE_ROWS: usize = 13;
pub const FEATURE_COLS: usize = 30;
const MAGIC: &[u8; 8] = b"ASCVFEAT";
const VERSION: u32 = 1;
const BIN_NAME: &str = "features.bin";
const JSON_NAME: &str = "features.json";

/// One note's 13x30 MFCC matrix with its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct NoteFeatures {
    pub note_id: String,
    pub preset_id: u8,
    pub velocity_target: u8,
    pub split: Split,
    /// Row-major 13x30.
    pub mfcc: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    note_id: String,
    preset_id: u8,
    velocity_target: u8,
    split: Split,
}

impl NoteFeatures {
    pub fn new(
        note_id: String,
        preset_id: u8,
        velocity_target: u8,
        split: Split,
        mfcc: &Array2<f64>,
    ) -> Result<Self> {
        if mfcc.dim() != (FEATURE_ROWS, FEATURE_COLS) {
            return Err(Error::Shape(format!(
                "features must be 13x30, got {:?}",
                mfcc.dim()
            )));
        }
        if !(1..=127).contains(&velocity_target) || preset_id > 5 {
            return Err(Error::Domain(format!(
                "bad labels: velocity {velocity_target}, preset {preset_id}"
            )));
        }
        Ok(NoteFeatures {
            note_id,
            preset_id,
            velocity_target,
            split,
            mfcc: mfcc.iter().copied().collect(),
        })
    }

    pub fn matrix(&self) -> Array2<f64> {
        Array2::from_shape_vec((FEATURE_ROWS, FEATURE_COLS), self.mfcc.clone()).expect("13x30")
    }
}

/// Writes `features.bin` (f64 little-endian matrices behind a small header)
/// and the `features.json` label sidecar into `dir`.
pub fn write_feature_store(dir: &Path, features: &[NoteFeatures]) -> Result<()> {
    let mut bin = Vec::with_capacity(24 + features.len() * FEATURE_ROWS * FEATURE_COLS * 8);
    bin.extend(MAGIC);
    bin.extend(VERSION.to_le_bytes());
    bin.extend((FEATURE_ROWS as u32).to_le_bytes());
    bin.extend((FEATURE_COLS as u32).to_le_bytes());
    bin.extend((features.len() as u32).to_le_bytes());
    for f in features {
        for v in &f.mfcc {
            bin.extend(v.to_le_bytes());
        }
    }
    let sidecar: Vec<Sidecar> = features
        .iter()
        .map(|f| Sidecar {
            note_id: f.note_id.clone(),
            preset_id: f.preset_id,
            velocity_target: f.velocity_target,
            split: f.split,
        })
        .collect();
    atomic_write(&dir.join(BIN_NAME), &bin)?;
    atomic_write(
        &dir.join(JSON_NAME),
        serde_json::to_string_pretty(&sidecar)?.as_bytes(),
    )
}

pub fn read_feature_store(dir: &Path) -> Result<Vec<NoteFeatures>> {
    let bin_path = dir.join(BIN_NAME);
    let json_path = dir.join(JSON_NAME);
    let bin = std::fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let json = std::fs::read(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let sidecar: Vec<Sidecar> = serde_json::from_slice(&json)?;
    let bad = |offset, message: &str| Error::Parse {
        offset,
        message: message.to_string(),
    };
    if bin.len() < 24 || &bin[..8] != MAGIC {
        return Err(bad(0, "not a feature store"));
    }
    let word = |i: usize| u32::from_le_bytes(bin[i..i + 4].try_into().unwrap()) as usize;
    if word(8) != VERSION as usize || word(12) != FEATURE_ROWS || word(16) != FEATURE_COLS {
        return Err(bad(8, "unsupported feature store layout"));
    }
    let count = word(20);
    let per = FEATURE_ROWS * FEATURE_COLS;
    if bin.len() != 24 + count * per * 8 {
        return Err(bad(24, "truncated feature store"));
    }
    if sidecar.len() != count {
        return Err(Error::MissingData(format!(
            "sidecar lists {} notes, binary holds {count}",
            sidecar.len()
        )));
    }
    Ok(sidecar
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let start = 24 + i * per * 8;
            let mfcc = bin[start..start + per * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            NoteFeatures {
                note_id: s.note_id,
                preset_id: s.preset_id,
                velocity_target: s.velocity_target,
                split: s.split,
                mfcc,
            }
        })
        .collect())
}
