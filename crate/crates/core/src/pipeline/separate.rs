use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{dataset_dir, load_recording, read_dataset_manifest, MANIFEST_FILE};
use super::{read_json, sha256_file, write_if_changed, RunConfig};
use crate::separation::{
    build_template, read_feature_store, separate_recording, write_feature_store, NoteFeatures,
    HOP, WINDOW,
};
use crate::synth::render_calibration_sequence;
use crate::{Error, Result};

pub const FEATURES_DIR: &str = "features";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlaggedRecording {
    pub id: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureManifest {
    pub dataset_manifest_sha256: String,
    pub nmf_iterations: usize,
    pub n_features: usize,
    pub flagged: Vec<FlaggedRecording>,
    pub features_sha256: String,
    pub labels_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeparateSummary {
    pub n_features: usize,
    pub flagged: Vec<FlaggedRecording>,
    /// False when an up-to-date store was found and left alone.
    pub recomputed: bool,
}

pub fn features_dir(out: &Path) -> PathBuf {
    out.join(FEATURES_DIR)
}

pub fn read_feature_manifest(out: &Path) -> Result<FeatureManifest> {
    read_json(&features_dir(out).join(MANIFEST_FILE))
}

/// The feature store, after checking it against its manifest.
pub fn load_features(out: &Path) -> Result<Vec<NoteFeatures>> {
    let dir = features_dir(out);
    let manifest = read_feature_manifest(out)?;
    if sha256_file(&dir.join("features.bin"))? != manifest.features_sha256
        || sha256_file(&dir.join("features.json"))? != manifest.labels_sha256
    {
        return Err(Error::MissingData(
            "feature store does not match its manifest; rerun separate".into(),
        ));
    }
    read_feature_store(&dir)
}

fn store_is_current(out: &Path, dataset_sha: &str, iterations: usize) -> bool {
    read_feature_manifest(out).is_ok_and(|m| {
        m.dataset_manifest_sha256 == dataset_sha
            && m.nmf_iterations == iterations
            && load_features(out).is_ok_and(|f| f.len() == m.n_features)
    })
}

/// Calibration template, then per-recording NMF and per-note MFCCs.
///
/// Recordings whose separation fails or produces non-finite values are
/// flagged in the manifest and left out of the store.
pub fn cmd_separate(cfg: &RunConfig, out: &Path) -> Result<SeparateSummary> {
    cfg.validate()?;
    let dataset = read_dataset_manifest(out).map_err(|e| {
        Error::MissingData(format!("dataset not built ({e}); run dataset-build first"))
    })?;
    let dataset_sha = sha256_file(&dataset_dir(out).join(MANIFEST_FILE))?;
    let iterations = cfg.nmf.iterations;
    if store_is_current(out, &dataset_sha, iterations) {
        let m = read_feature_manifest(out)?;
        log::info!("separate: store is current ({} features)", m.n_features);
        return Ok(SeparateSummary {
            n_features: m.n_features,
            flagged: m.flagged,
            recomputed: false,
        });
    }

    let sr = dataset.sr;
    let (cal_perf, cal_audio) = render_calibration_sequence(sr)?;
    let template = build_template(&cal_audio, &cal_perf, sr, WINDOW, HOP)?;
    drop(cal_audio);

    let per_recording: Vec<std::result::Result<Vec<NoteFeatures>, FlaggedRecording>> = dataset
        .recordings
        .par_iter()
        .map(|entry| -> Result<_> {
            let (perf, audio) = load_recording(out, entry)?;
            let flag = |reason: String| FlaggedRecording {
                id: entry.id.clone(),
                reason,
            };
            let mats = match separate_recording(&audio, &perf, &template, sr, iterations) {
                Ok(m) => m,
                Err(e @ (Error::NonFinite(_) | Error::Domain(_) | Error::Shape(_))) => {
                    return Ok(Err(flag(e.to_string())))
                }
                Err(e) => return Err(e),
            };
            if mats.iter().any(|m| m.iter().any(|v| !v.is_finite())) {
                return Ok(Err(flag("non-finite features".into())));
            }
            perf.notes
                .iter()
                .zip(&mats)
                .enumerate()
                .map(|(k, (note, m))| {
                    NoteFeatures::new(
                        format!("{}/{k:04}", entry.id),
                        entry.preset_id,
                        note.velocity,
                        entry.split,
                        m,
                    )
                })
                .collect::<Result<Vec<_>>>()
                .map(Ok)
        })
        .collect::<Result<_>>()?;

    let mut features = Vec::with_capacity(dataset.n_notes());
    let mut flagged = Vec::new();
    for r in per_recording {
        match r {
            Ok(f) => features.extend(f),
            Err(flag) => {
                log::warn!("separate: flagged {}: {}", flag.id, flag.reason);
                flagged.push(flag);
            }
        }
    }
    let dir = features_dir(out);
    write_feature_store(&dir, &features)?;
    let manifest = FeatureManifest {
        dataset_manifest_sha256: dataset_sha,
        nmf_iterations: iterations,
        n_features: features.len(),
        flagged: flagged.clone(),
        features_sha256: sha256_file(&dir.join("features.bin"))?,
        labels_sha256: sha256_file(&dir.join("features.json"))?,
    };
    write_if_changed(
        &dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    log::info!(
        "separate: {} features, {} recordings flagged",
        features.len(),
        flagged.len()
    );
    Ok(SeparateSummary {
        n_features: features.len(),
        flagged,
        recomputed: true,
    })
}
