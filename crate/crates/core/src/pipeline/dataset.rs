use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{read_json, sha256_file, write_if_changed, RunConfig};
use crate::dataset::{
    assign_presets, extract_clustering_features, generate_synthetic_performance, parse_smf,
    split_performances, standardize, Performance, Split, SplitAssignment,
};
use crate::rng::{derive_seed, sha256_hex};
use crate::synth::{render_performance, AcousticPreset};
use crate::wav::encode_wav;
use crate::{Error, Result};

pub const DATASET_DIR: &str = "dataset";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Where one performance ended up and the checksums of its files.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordingEntry {
    pub id: String,
    /// MIDI file it came from; `None` for generated performances.
    pub source: Option<PathBuf>,
    pub split: Split,
    pub preset_id: u8,
    pub n_notes: usize,
    pub score_sha256: String,
    pub audio_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Hash of every config field that shapes the dataset.
    pub config_hash: String,
    pub seed: u64,
    pub sr: u32,
    pub recordings: Vec<RecordingEntry>,
    pub assignments: Vec<SplitAssignment>,
}

impl DatasetManifest {
    pub fn n_notes(&self) -> usize {
        self.recordings.iter().map(|r| r.n_notes).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSummary {
    pub n_recordings: usize,
    pub n_notes: usize,
    pub rendered: usize,
    pub files_written: usize,
}

pub fn dataset_dir(out: &Path) -> PathBuf {
    out.join(DATASET_DIR)
}

pub fn dataset_config_hash(cfg: &RunConfig) -> String {
    let key = serde_json::json!({
        "seed": cfg.seed,
        "dataset": cfg.dataset,
        "synthesis": cfg.synthesis,
    });
    sha256_hex(key.to_string().as_bytes())
}

pub fn read_dataset_manifest(out: &Path) -> Result<DatasetManifest> {
    read_json(&dataset_dir(out).join(MANIFEST_FILE))
}

fn performance_id(i: usize) -> String {
    format!("perf-{i:04}")
}

fn load_performances(cfg: &RunConfig) -> Result<Vec<(Performance, Option<PathBuf>)>> {
    let d = &cfg.dataset;
    if d.smf_paths.is_empty() {
        return (0..d.n_performances)
            .map(|i| {
                let seed = derive_seed(cfg.seed, &format!("dataset/performance/{i}"));
                let mut perf = generate_synthetic_performance(seed, d.notes_per_performance)?;
                perf.source_id = performance_id(i);
                Ok((perf, None))
            })
            .collect();
    }
    d.smf_paths
        .iter()
        .enumerate()
        .map(|(i, path)| {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            let perf = parse_smf(&bytes, &performance_id(i))?;
            if perf.is_empty() {
                return Err(Error::MissingData(format!(
                    "{} holds no notes",
                    path.display()
                )));
            }
            Ok((perf, Some(path.clone())))
        })
        .collect()
}

/// Generates or ingests performances, deals them into splits and preset
/// subsets and renders each one under its preset.
///
/// Rerunning with the same config rewrites nothing: renders whose score
/// and audio checksums match the previous manifest are skipped.
pub fn cmd_dataset_build(cfg: &RunConfig, out: &Path) -> Result<DatasetSummary> {
    cfg.validate()?;
    let dir = dataset_dir(out);
    let config_hash = dataset_config_hash(cfg);
    let previous = read_dataset_manifest(out).ok();

    let perfs = load_performances(cfg)?;
    let raw: Vec<_> = perfs
        .iter()
        .map(|(p, _)| extract_clustering_features(p))
        .collect::<Result<_>>()?;
    let features = standardize(&raw);
    let ids: Vec<String> = perfs.iter().map(|(p, _)| p.source_id.clone()).collect();
    let splits = split_performances(
        perfs.len(),
        cfg.dataset.split_fractions,
        derive_seed(cfg.seed, "dataset/split"),
    )?;
    let preset_seed = derive_seed(cfg.seed, "dataset/presets");
    let mut assignments = Vec::new();
    let mut placement: BTreeMap<String, (Split, u8)> = BTreeMap::new();
    for (split, members) in Split::ALL.into_iter().zip(&splits) {
        let split_ids: Vec<String> = members.iter().map(|&i| ids[i].clone()).collect();
        let split_feats: Vec<Vec<f64>> = members.iter().map(|&i| features[i].clone()).collect();
        for a in assign_presets(split, &split_ids, &split_feats, preset_seed)? {
            for id in &a.performance_ids {
                placement.insert(id.clone(), (split, a.preset_id));
            }
            assignments.push(a);
        }
    }

    let mut files_written = 0;
    for a in &assignments {
        let path = dir
            .join("splits")
            .join(format!("{}-{}.json", a.split.name(), a.preset_id));
        files_written += write_if_changed(&path, serde_json::to_string_pretty(a)?.as_bytes())? as usize;
    }

    let old: BTreeMap<&str, &RecordingEntry> = previous
        .as_ref()
        .filter(|m| m.sr == cfg.synthesis.sr)
        .map(|m| m.recordings.iter().map(|r| (r.id.as_str(), r)).collect())
        .unwrap_or_default();
    let sr = cfg.synthesis.sr;
    let entries: Vec<(RecordingEntry, usize, bool)> = perfs
        .par_iter()
        .map(|(perf, source)| -> Result<_> {
            let &(split, preset_id) = placement.get(&perf.source_id).ok_or_else(|| {
                Error::Infeasible(format!("{} was not dealt to a subset", perf.source_id))
            })?;
            let score = serde_json::to_string_pretty(perf)?;
            let score_sha256 = sha256_hex(score.as_bytes());
            let mut written = write_if_changed(
                &dir.join("performances").join(format!("{}.json", perf.source_id)),
                score.as_bytes(),
            )? as usize;
            let audio_path = dir.join("audio").join(format!("{}.wav", perf.source_id));
            let reusable = old.get(perf.source_id.as_str()).and_then(|r| {
                (r.score_sha256 == score_sha256 && r.preset_id == preset_id)
                    .then(|| r.audio_sha256.clone())
            });
            let on_disk = reusable
                .as_ref()
                .and_then(|want| sha256_file(&audio_path).ok().filter(|have| have == want));
            let (audio_sha256, rendered) = match on_disk {
                Some(sha) => (sha, false),
                None => {
                    let wave = render_performance(perf, &AcousticPreset::by_id(preset_id)?, sr)?;
                    let bytes = encode_wav(&wave, sr);
                    written += write_if_changed(&audio_path, &bytes)? as usize;
                    (sha256_hex(&bytes), true)
                }
            };
            Ok((
                RecordingEntry {
                    id: perf.source_id.clone(),
                    source: source.clone(),
                    split,
                    preset_id,
                    n_notes: perf.len(),
                    score_sha256,
                    audio_sha256,
                },
                written,
                rendered,
            ))
        })
        .collect::<Result<_>>()?;

    let rendered = entries.iter().filter(|e| e.2).count();
    files_written += entries.iter().map(|e| e.1).sum::<usize>();
    let manifest = DatasetManifest {
        config_hash,
        seed: cfg.seed,
        sr,
        recordings: entries.into_iter().map(|e| e.0).collect(),
        assignments,
    };
    files_written += write_if_changed(
        &dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )? as usize;
    log::info!(
        "dataset: {} recordings, {} notes, {rendered} rendered, {files_written} files written",
        manifest.recordings.len(),
        manifest.n_notes()
    );
    Ok(DatasetSummary {
        n_recordings: manifest.recordings.len(),
        n_notes: manifest.n_notes(),
        rendered,
        files_written,
    })
}

/// Loads one recording's score and audio, checking both against the manifest.
pub fn load_recording(out: &Path, entry: &RecordingEntry) -> Result<(Performance, Vec<f64>)> {
    let dir = dataset_dir(out);
    let score_path = dir.join("performances").join(format!("{}.json", entry.id));
    let audio_path = dir.join("audio").join(format!("{}.wav", entry.id));
    let score = std::fs::read(&score_path).map_err(|e| Error::io(&score_path, e))?;
    let audio = std::fs::read(&audio_path).map_err(|e| Error::io(&audio_path, e))?;
    if sha256_hex(&score) != entry.score_sha256 || sha256_hex(&audio) != entry.audio_sha256 {
        return Err(Error::MissingData(format!(
            "recording {} does not match the dataset manifest",
            entry.id
        )));
    }
    let perf: Performance = serde_json::from_slice(&score)?;
    perf.validate()?;
    let (wave, _) = crate::wav::decode_wav(&audio)?;
    Ok((perf, wave))
}
