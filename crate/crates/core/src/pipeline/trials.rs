use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::config::GridSpec;
use super::separate::{load_features, read_feature_manifest};
use super::{atomic_write, read_json, RunConfig};
use crate::dataset::Split;
use crate::evaluation::{evaluate_trial, sort_results, write_results, TrialResult};
use crate::model::{write_checkpoint, ModelConfig, Strategy, VelocityModel};
use crate::rng::sha256_hex;
use crate::separation::NoteFeatures;
use crate::training::{subsample, train_trial, trial_seed};
use crate::{Error, Result};

pub const RUNS_DIR: &str = "runs";
pub const RECORD_FILE: &str = "result.json";
pub const RUN_CONFIG_FILE: &str = "run_config.json";
const POLL: Duration = Duration::from_millis(50);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TrialKey {
    pub config: ModelConfig,
    pub strategy: Strategy,
}

impl TrialKey {
    /// `<config-hash>/<strategy>`, also the run directory below `runs/`.
    pub fn label(&self) -> String {
        format!("{}/{}", self.config.hash(), self.strategy.name())
    }

    pub fn dir(&self, out: &Path) -> PathBuf {
        out.join(RUNS_DIR)
            .join(self.config.hash())
            .join(self.strategy.name())
    }
}

/// Every (config, strategy) pair the run config asks for, in store order.
pub fn schedule(cfg: &RunConfig) -> Vec<TrialKey> {
    let strategies = cfg.strategies_sorted();
    cfg.grid
        .configs()
        .into_iter()
        .flat_map(|config| {
            strategies
                .iter()
                .map(move |&strategy| TrialKey { config, strategy })
        })
        .collect()
}

/// The finished state of one trial, written last into its run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    /// Hash of everything the trial depends on; a mismatch forces a rerun.
    pub run_key: String,
    pub result: TrialResult,
    /// Why an invalid trial failed.
    pub reason: Option<String>,
    pub lr: Option<f64>,
    pub best_epoch: Option<usize>,
    /// The worker died before writing a record; retried on resume.
    #[serde(default)]
    pub crashed: bool,
}

pub fn run_key(cfg: &RunConfig, features_sha256: &str, key: TrialKey) -> String {
    let v = serde_json::json!({
        "features": features_sha256,
        "plan": cfg.train_plan(),
        "config": key.config,
        "strategy": key.strategy,
    });
    sha256_hex(v.to_string().as_bytes())
}

/// Subsampled train, validation and test notes shared by every trial.
pub struct TrialData {
    pub train: Vec<NoteFeatures>,
    pub validation: Vec<NoteFeatures>,
    pub test: Vec<NoteFeatures>,
    pub features_sha256: String,
}

pub fn prepare_data(cfg: &RunConfig, out: &Path) -> Result<TrialData> {
    let manifest = read_feature_manifest(out).map_err(|e| {
        Error::MissingData(format!("no feature store ({e}); run separate first"))
    })?;
    let all = load_features(out)?;
    let plan = cfg.train_plan();
    let labels: Vec<(Split, u8)> = all.iter().map(|f| (f.split, f.preset_id)).collect();
    let keep = subsample(&labels, plan.subsample_fraction, plan.seed)?;
    let mut data = TrialData {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        features_sha256: manifest.features_sha256,
    };
    for i in keep {
        let f = all[i].clone();
        match f.split {
            Split::Train => data.train.push(f),
            Split::Validation => data.validation.push(f),
            Split::Test => data.test.push(f),
        }
    }
    for (name, part) in [
        ("train", &data.train),
        ("validation", &data.validation),
        ("test", &data.test),
    ] {
        if part.is_empty() {
            return Err(Error::MissingData(format!("no {name} notes after subsampling")));
        }
    }
    Ok(data)
}

fn read_record(dir: &Path) -> Option<TrialRecord> {
    read_json(&dir.join(RECORD_FILE)).ok()
}

fn invalid_record(
    cfg: &RunConfig,
    run_key: String,
    key: TrialKey,
    reason: String,
    crashed: bool,
) -> TrialRecord {
    let seed = trial_seed(cfg.seed, key.config, key.strategy);
    TrialRecord {
        run_key,
        result: TrialResult::invalid(key.config, key.strategy, seed, 0),
        reason: Some(reason),
        lr: None,
        best_epoch: None,
        crashed,
    }
}

fn write_record(dir: &Path, record: &TrialRecord) -> Result<()> {
    atomic_write(
        &dir.join(RECORD_FILE),
        serde_json::to_string_pretty(record)?.as_bytes(),
    )
}

fn train_and_score(
    cfg: &RunConfig,
    data: &TrialData,
    key: TrialKey,
    run_key: &str,
    dir: &Path,
) -> Result<TrialRecord> {
    let plan = cfg.train_plan();
    let seed = trial_seed(plan.seed, key.config, key.strategy);
    let untrained = VelocityModel::new(key.config, key.strategy, seed)?;
    let untrained_l1 = evaluate_trial(&untrained, &data.test)?.mean_l1;
    drop(untrained);
    let outcome = train_trial(key.config, key.strategy, &plan, &data.train, &data.validation)?;
    let mut result = evaluate_trial(&outcome.model, &data.test)?;
    result.epochs_ran = outcome.history.len();
    result.untrained_l1 = untrained_l1;
    write_checkpoint(dir, &outcome.model, outcome.best_epoch, outcome.best_ema)?;
    atomic_write(&dir.join("history.csv"), outcome.history_csv().as_bytes())?;
    Ok(TrialRecord {
        run_key: run_key.to_string(),
        reason: (!result.valid).then(|| "non-finite test error".to_string()),
        result,
        lr: Some(outcome.lr),
        best_epoch: Some(outcome.best_epoch),
        crashed: false,
    })
}

/// Trains and scores one trial and writes its run directory. Training
/// failures and panics become an invalid record rather than an error.
pub fn execute_trial(
    cfg: &RunConfig,
    data: &TrialData,
    key: TrialKey,
    out: &Path,
) -> Result<TrialRecord> {
    let dir = &key.dir(out);
    let rk = run_key(cfg, &data.features_sha256, key);
    let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
        train_and_score(cfg, data, key, &rk, dir)
    }));
    let record = match outcome {
        Ok(Ok(r)) => r,
        Ok(Err(e)) => invalid_record(cfg, rk, key, e.to_string(), false),
        Err(panic) => {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            invalid_record(cfg, rk, key, format!("panicked: {msg}"), false)
        }
    };
    if let Some(reason) = &record.reason {
        log::warn!("{}: invalid: {reason}", key.label());
    } else {
        log::info!(
            "{} {}: L1 {:.3} after {} epochs",
            key.config.label(),
            key.strategy.name(),
            record.result.mean_l1.unwrap_or(f64::NAN),
            record.result.epochs_ran
        );
    }
    write_record(dir, &record)?;
    Ok(record)
}

/// How trials are run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Executor {
    /// One after another in this process.
    InProcess,
    /// Up to `workers` child processes of `exe`, each invoked as
    /// `exe worker --config <out>/run_config.json --output <out> --trial <label>`.
    Processes { exe: PathBuf, workers: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub scheduled: usize,
    /// Trials skipped because an up-to-date record already existed.
    pub resumed: usize,
    pub ran: usize,
    pub invalid: usize,
    /// The whole results store after the run.
    pub results: Vec<TrialResult>,
}

/// Runs the trials the config asks for, skipping finished ones, then
/// rewrites `results.csv` from every record under `runs/`.
pub fn cmd_train(cfg: &RunConfig, out: &Path, executor: &Executor) -> Result<TrainSummary> {
    cfg.validate()?;
    let data = prepare_data(cfg, out)?;
    atomic_write(&out.join(RUN_CONFIG_FILE), cfg.to_json().as_bytes())?;
    let trials = schedule(cfg);
    let mut pending = Vec::new();
    for &key in &trials {
        let rk = run_key(cfg, &data.features_sha256, key);
        match read_record(&key.dir(out)) {
            Some(r) if r.run_key == rk && !r.crashed => {}
            _ => pending.push(key),
        }
    }
    let resumed = trials.len() - pending.len();
    log::info!(
        "{} trials scheduled, {resumed} already done, {} to run",
        trials.len(),
        pending.len()
    );
    match executor {
        Executor::InProcess => {
            for &key in &pending {
                execute_trial(cfg, &data, key, out)?;
            }
        }
        Executor::Processes { exe, workers } => {
            run_processes(cfg, out, exe, (*workers).max(1), &pending, &data.features_sha256)?;
        }
    }
    let results = collect_results(out)?;
    write_results(out, &results)?;
    let invalid = trials
        .iter()
        .filter_map(|k| read_record(&k.dir(out)))
        .filter(|r| !r.result.valid)
        .count();
    if !results.iter().any(|r| r.valid) {
        return Err(Error::NoValidTrials);
    }
    Ok(TrainSummary {
        scheduled: trials.len(),
        resumed,
        ran: pending.len(),
        invalid,
        results,
    })
}

/// `cmd_train` over the full 36-config grid.
pub fn cmd_gridsearch(cfg: &RunConfig, out: &Path, executor: &Executor) -> Result<TrainSummary> {
    let full = RunConfig {
        grid: GridSpec::default(),
        ..cfg.clone()
    };
    cmd_train(&full, out, executor)
}

/// Entry point of a worker process: runs the single trial named `label`.
pub fn cmd_worker(cfg: &RunConfig, out: &Path, label: &str) -> Result<TrialRecord> {
    let key = schedule(cfg)
        .into_iter()
        .find(|k| k.label() == label)
        .ok_or_else(|| Error::Config(format!("trial {label} is not in the run config")))?;
    let data = prepare_data(cfg, out)?;
    execute_trial(cfg, &data, key, out)
}

fn spawn_worker(exe: &Path, out: &Path, key: TrialKey) -> std::io::Result<Child> {
    Command::new(exe)
        .arg("worker")
        .arg("--config")
        .arg(out.join(RUN_CONFIG_FILE))
        .arg("--output")
        .arg(out)
        .arg("--trial")
        .arg(key.label())
        .stdin(Stdio::null())
        .spawn()
}

fn run_processes(
    cfg: &RunConfig,
    out: &Path,
    exe: &Path,
    workers: usize,
    pending: &[TrialKey],
    features_sha256: &str,
) -> Result<()> {
    let mut queue = pending.iter().copied();
    let mut running: Vec<(TrialKey, Child)> = Vec::new();
    let finish = |key: TrialKey, failure: Option<String>| -> Result<()> {
        let rk = run_key(cfg, features_sha256, key);
        let dir = key.dir(out);
        let ok = read_record(&dir).is_some_and(|r| r.run_key == rk);
        if !ok {
            let reason = failure.unwrap_or_else(|| "worker wrote no result".into());
            log::warn!("{}: invalid: {reason}", key.label());
            write_record(&dir, &invalid_record(cfg, rk, key, reason, true))?;
        }
        Ok(())
    };
    loop {
        while running.len() < workers {
            let Some(key) = queue.next() else { break };
            match spawn_worker(exe, out, key) {
                Ok(child) => running.push((key, child)),
                Err(e) => finish(key, Some(format!("could not start worker: {e}")))?,
            }
        }
        if running.is_empty() {
            return Ok(());
        }
        let mut i = 0;
        while i < running.len() {
            let status = running[i].1.try_wait().map_err(|e| Error::io(exe, e))?;
            match status {
                Some(status) => {
                    let (key, _) = running.swap_remove(i);
                    let failure = (!status.success()).then(|| format!("worker exited with {status}"));
                    finish(key, failure)?;
                }
                None => i += 1,
            }
        }
        std::thread::sleep(POLL);
    }
}

/// Every trial record under `runs/`, as a sorted results store.
pub fn collect_results(out: &Path) -> Result<Vec<TrialResult>> {
    let runs = out.join(RUNS_DIR);
    let mut results = Vec::new();
    let Ok(configs) = std::fs::read_dir(&runs) else {
        return Ok(results);
    };
    for config_dir in configs {
        let config_dir = config_dir.map_err(|e| Error::io(&runs, e))?.path();
        let Ok(strategies) = std::fs::read_dir(&config_dir) else { continue };
        for s in strategies {
            let s = s.map_err(|e| Error::io(&config_dir, e))?.path();
            if let Some(r) = read_record(&s) {
                results.push(r.result);
            }
        }
    }
    sort_results(&mut results);
    Ok(results)
}
