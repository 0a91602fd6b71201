use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::{enumerate_grid, ModelConfig, Strategy};
use crate::training::TrainPlan;
use crate::{Error, Result};

/// JSON schema for [`RunConfig`] files.
pub const RUN_CONFIG_SCHEMA: &str = include_str!("../../../../schema/run_config.schema.json");

/// Environment variable that overrides [`RunConfig::workers`].
pub const WORKERS_ENV: &str = "ASCVEL_WORKERS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Synthetic performances to generate when no MIDI files are given.
    pub n_performances: usize,
    pub notes_per_performance: usize,
    /// Standard MIDI files, one performance each; replaces generation.
    pub smf_paths: Vec<PathBuf>,
    /// Train, validation, test.
    pub split_fractions: [f64; 3],
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_performances: 120,
            notes_per_performance: 25,
            smf_paths: Vec::new(),
            split_fractions: [0.7, 0.15, 0.15],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    pub sr: u32,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            sr: crate::synth::SAMPLE_RATE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NmfConfig {
    pub iterations: usize,
}

impl Default for NmfConfig {
    fn default() -> Self {
        NmfConfig {
            iterations: crate::separation::NMF_ITERATIONS,
        }
    }
}

/// Either the whole 36-config grid or an explicit list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridSpec {
    Named(GridName),
    Configs { configs: Vec<ConfigKnobs> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridName {
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigKnobs {
    pub k0_encoder: usize,
    pub k0_performer: usize,
    pub k2_encoder: usize,
    pub k2_performer: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::Named(GridName::Full)
    }
}

impl GridSpec {
    /// Configs in grid order, without duplicates.
    pub fn configs(&self) -> Vec<ModelConfig> {
        match self {
            GridSpec::Named(GridName::Full) => enumerate_grid(),
            GridSpec::Configs { configs } => {
                let mut v: Vec<ModelConfig> = configs
                    .iter()
                    .map(|k| ModelConfig::new(k.k0_encoder, k.k0_performer, k.k2_encoder, k.k2_performer))
                    .collect();
                v.sort();
                v.dedup();
                v
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root of every random substream.
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub synthesis: SynthesisConfig,
    pub nmf: NmfConfig,
    pub grid: GridSpec,
    pub strategies: Vec<Strategy>,
    /// Training settings; its `seed` is replaced by the root seed.
    pub plan: TrainPlan,
    pub workers: usize,
    /// Default output directory; the command line wins when both are set.
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            dataset: DatasetConfig::default(),
            synthesis: SynthesisConfig::default(),
            nmf: NmfConfig::default(),
            grid: GridSpec::default(),
            strategies: Strategy::ALL.to_vec(),
            plan: TrainPlan::default(),
            workers: 1,
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.smf_paths.is_empty() && (d.n_performances == 0 || d.notes_per_performance == 0) {
            return Err(Error::Config(
                "dataset needs performances and notes per performance".into(),
            ));
        }
        if self.synthesis.sr < 8000 {
            return Err(Error::Config(format!(
                "sample rate {} is too low",
                self.synthesis.sr
            )));
        }
        if self.nmf.iterations == 0 {
            return Err(Error::Config("NMF needs at least one iteration".into()));
        }
        if self.strategies.is_empty() {
            return Err(Error::Config("no strategies selected".into()));
        }
        let mut s = self.strategies.clone();
        s.sort();
        s.dedup();
        if s.len() != self.strategies.len() {
            return Err(Error::Config("duplicate strategies".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        let configs = self.grid.configs();
        if configs.is_empty() {
            return Err(Error::Config("empty grid".into()));
        }
        let grid = enumerate_grid();
        if let Some(c) = configs.iter().find(|c| !grid.contains(c)) {
            return Err(Error::Config(format!("{} is not in the grid", c.label())));
        }
        self.plan.validate()
    }

    /// The training plan with the root seed applied.
    pub fn train_plan(&self) -> TrainPlan {
        TrainPlan {
            seed: self.seed,
            ..self.plan.clone()
        }
    }

    /// Worker count after the environment override.
    pub fn effective_workers(&self) -> Result<usize> {
        match std::env::var(WORKERS_ENV) {
            Ok(v) => match v.trim().parse::<usize>() {
                Ok(n) if n > 0 => Ok(n),
                _ => Err(Error::Config(format!("{WORKERS_ENV}={v:?} is not a positive integer"))),
            },
            Err(_) => Ok(self.workers),
        }
    }

    /// Strategies in canonical order.
    pub fn strategies_sorted(&self) -> Vec<Strategy> {
        let mut s = self.strategies.clone();
        s.sort();
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_paper() {
        let c = RunConfig::default();
        assert_eq!(c.plan.subsample_fraction, 0.001);
        assert_eq!(c.plan.batch_size, 10);
        assert_eq!(c.plan.patience, 20);
        assert_eq!(c.plan.ema_window, 15);
        assert_eq!(c.plan.max_epochs, 40);
        assert_eq!(c.grid.configs().len(), 36);
        assert_eq!(c.strategies.len(), 4);
        c.validate().unwrap();
    }

    #[test]
    fn json_round_trip_and_partial_files() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        let partial = r#"{"seed": 7, "grid": {"configs": [{"k0_encoder": 5, "k0_performer": 3, "k2_encoder": 1, "k2_performer": 2}, {"k0_encoder": 3, "k0_performer": 3, "k2_encoder": 1, "k2_performer": 1}]}, "strategies": ["single-without", "multiple-with"], "plan": {"max_epochs": 3}}"#;
        let p = RunConfig::from_json(partial).unwrap();
        assert_eq!(p.seed, 7);
        assert_eq!(p.plan.max_epochs, 3);
        assert_eq!(p.plan.patience, 20);
        assert_eq!(p.grid.configs(), vec![ModelConfig::new(3, 3, 1, 1), ModelConfig::new(5, 3, 1, 2)]);
        assert_eq!(p.train_plan().seed, 7);
        assert!(RunConfig::from_json(r#"{"grid": "full"}"#).is_ok());
    }

    #[test]
    fn rejects_bad_configs() {
        for bad in [
            r#"{"sede": 1}"#,
            r#"{"strategies": []}"#,
            r#"{"strategies": ["single-with", "single-with"]}"#,
            r#"{"workers": 0}"#,
            r#"{"grid": {"configs": [{"k0_encoder": 4, "k0_performer": 3, "k2_encoder": 1, "k2_performer": 1}]}}"#,
            r#"{"plan": {"subsample_fraction": 0}}"#,
            r#"{"grid": "half"}"#,
        ] {
            assert!(matches!(RunConfig::from_json(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn schema_is_valid_json() {
        let v: serde_json::Value = serde_json::from_str(RUN_CONFIG_SCHEMA).unwrap();
        let props = v["properties"].as_object().unwrap();
        let cfg: serde_json::Value = serde_json::from_str(&RunConfig::default().to_json()).unwrap();
        for key in cfg.as_object().unwrap().keys() {
            assert!(props.contains_key(key), "schema lacks {key}");
        }
    }
}
