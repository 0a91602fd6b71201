//! Experiment orchestration over a JSON run configuration.
//!
//! An output directory holds, after the full chain of commands:
//!
//! ```text
//! dataset/{manifest.json, performances/, audio/, splits/}
//! features/{manifest.json, features.bin, features.json}
//! run_config.json
//! runs/<config-hash>/<strategy>/{checkpoint.bin, manifest.json, history.csv, result.json}
//! results.csv
//! report/
//! ```

mod config;
mod dataset;
mod separate;
mod trials;

pub use config::{
    ConfigKnobs, DatasetConfig, GridName, GridSpec, NmfConfig, RunConfig, SynthesisConfig,
    RUN_CONFIG_SCHEMA, WORKERS_ENV,
};
pub use dataset::{
    cmd_dataset_build, dataset_config_hash, dataset_dir, load_recording, read_dataset_manifest,
    DatasetManifest, DatasetSummary, RecordingEntry,
};
pub use separate::{
    cmd_separate, features_dir, load_features, read_feature_manifest, FeatureManifest,
    FlaggedRecording, SeparateSummary,
};
pub use trials::{
    cmd_gridsearch, cmd_train, cmd_worker, collect_results, execute_trial, prepare_data,
    run_key, schedule, Executor, TrainSummary, TrialData, TrialKey, TrialRecord, RECORD_FILE,
    RUNS_DIR, RUN_CONFIG_FILE,
};

use std::path::Path;

use serde::de::DeserializeOwned;

use crate::evaluation::{make_report, read_results, ReportBundle};
use crate::{Error, Result};

pub const REPORT_DIR: &str = "report";

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Like [`atomic_write`] but leaves an identical file untouched.
/// Returns whether the file was written.
pub fn write_if_changed(path: &Path, bytes: &[u8]) -> Result<bool> {
    match std::fs::read(path) {
        Ok(existing) if existing == bytes => Ok(false),
        _ => atomic_write(path, bytes).map(|_| true),
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(crate::rng::sha256_hex(&bytes))
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Renders the report bundle for the results store in `out`.
pub fn cmd_report(out: &Path) -> Result<ReportBundle> {
    let results = match read_results(out) {
        Ok(r) => r,
        Err(Error::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::NoValidTrials)
        }
        Err(e) => return Err(e),
    };
    make_report(&results, &out.join(REPORT_DIR))
}

/// Process exit code for a failed command: 1 usage, 2 data, 3 no valid trials.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 1,
        Error::NoValidTrials => 3,
        _ => 2,
    }
}
