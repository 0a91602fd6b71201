//! Python bindings: the model grid, synthesis, statistics, win analysis and
//! the pipeline commands. Imported in Python as `ascvel`.

use std::path::PathBuf;

use ascvel::dataset::{generate_synthetic_performance, NoteEvent, Performance};
use ascvel::evaluation::{self as ev, Alternative};
use ascvel::model::{self, Strategy};
use ascvel::pipeline::{self, Executor, RunConfig as CoreRunConfig};
use ascvel::synth::{self, AcousticPreset};
use ascvel::Error;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

pyo3::create_exception!(ascvel, NoValidTrialsError, PyRuntimeError);

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Domain(_) | Error::Shape(_) | Error::Config(_) | Error::Infeasible(_) => {
            PyValueError::new_err(e.to_string())
        }
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::NoValidTrials => NoValidTrialsError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse_strategy(name: &str) -> PyResult<Strategy> {
    Strategy::ALL
        .into_iter()
        .find(|s| s.name() == name || s.short() == name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown strategy {name:?}")))
}

/// One model shape of the grid.
#[pyclass(frozen, eq, hash, module = "ascvel")]
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
struct ModelConfig(model::ModelConfig);

#[pymethods]
impl ModelConfig {
    #[new]
    fn new(k0_encoder: usize, k0_performer: usize, k2_encoder: usize, k2_performer: usize) -> Self {
        ModelConfig(model::ModelConfig::new(
            k0_encoder,
            k0_performer,
            k2_encoder,
            k2_performer,
        ))
    }

    #[getter]
    fn k0_encoder(&self) -> usize {
        self.0.k0_encoder
    }
    #[getter]
    fn k0_performer(&self) -> usize {
        self.0.k0_performer
    }
    #[getter]
    fn k2_encoder(&self) -> usize {
        self.0.k2_encoder
    }
    #[getter]
    fn k2_performer(&self) -> usize {
        self.0.k2_performer
    }
    #[getter]
    fn k1(&self) -> usize {
        self.0.k1
    }

    fn label(&self) -> String {
        self.0.label()
    }

    fn hash_id(&self) -> String {
        self.0.hash()
    }

    /// `(k1, k2)` of the context classifier.
    fn classifier_knobs(&self) -> (usize, usize) {
        self.0.classifier_knobs()
    }

    fn __repr__(&self) -> String {
        format!("ModelConfig({})", self.0.label())
    }
}

/// A freshly initialized model.
#[pyclass(module = "ascvel")]
struct VelocityModel(model::VelocityModel);

#[pymethods]
impl VelocityModel {
    #[new]
    fn new(config: ModelConfig, strategy: &str, seed: u64) -> PyResult<Self> {
        let m = model::VelocityModel::new(config.0, parse_strategy(strategy)?, seed).map_err(py_err)?;
        Ok(VelocityModel(m))
    }

    fn n_params(&self) -> usize {
        self.0.n_params()
    }

    fn latent_len(&self) -> usize {
        self.0.latent_len()
    }

    fn n_performers(&self) -> usize {
        self.0.performers.len()
    }

    fn has_classifier(&self) -> bool {
        self.0.classifier.is_some()
    }
}

/// Run configuration, validated on construction.
#[pyclass(module = "ascvel")]
#[derive(Clone)]
struct RunConfig(CoreRunConfig);

#[pymethods]
impl RunConfig {
    #[new]
    #[pyo3(signature = (json = None))]
    fn new(json: Option<&str>) -> PyResult<Self> {
        match json {
            Some(text) => CoreRunConfig::from_json(text).map(RunConfig).map_err(py_err),
            None => Ok(RunConfig(CoreRunConfig::default())),
        }
    }

    fn to_json(&self) -> String {
        self.0.to_json()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.0.seed
    }

    /// Labels `<config-hash>/<strategy>` of every scheduled trial.
    fn schedule(&self) -> Vec<String> {
        pipeline::schedule(&self.0).iter().map(|k| k.label()).collect()
    }
}

#[pyfunction]
fn enumerate_grid() -> Vec<ModelConfig> {
    model::enumerate_grid().into_iter().map(ModelConfig).collect()
}

#[pyfunction]
fn strategies() -> Vec<&'static str> {
    Strategy::ALL.iter().map(|s| s.name()).collect()
}

#[pyfunction]
fn run_config_schema() -> &'static str {
    pipeline::RUN_CONFIG_SCHEMA
}

/// Notes as `(pitch, onset, offset, velocity)` tuples.
#[pyfunction]
fn generate_performance(seed: u64, n_notes: usize) -> PyResult<Vec<(u8, f64, f64, u8)>> {
    let p = generate_synthetic_performance(seed, n_notes).map_err(py_err)?;
    Ok(p.notes
        .iter()
        .map(|n| (n.pitch, n.onset, n.offset, n.velocity))
        .collect())
}

/// Renders `(pitch, onset, offset, velocity)` notes under one of the six presets.
#[pyfunction]
#[pyo3(signature = (notes, preset_id, sr = synth::SAMPLE_RATE))]
fn render_performance(notes: Vec<(u8, f64, f64, u8)>, preset_id: u8, sr: u32) -> PyResult<Vec<f64>> {
    let notes = notes
        .into_iter()
        .map(|(p, on, off, v)| NoteEvent::new(p, on, off, v))
        .collect::<ascvel::Result<Vec<_>>>()
        .map_err(py_err)?;
    let perf = Performance::new("python", notes);
    let preset = AcousticPreset::by_id(preset_id).map_err(py_err)?;
    synth::render_performance(&perf, &preset, sr).map_err(py_err)
}

/// `(W, p)`.
#[pyfunction]
fn shapiro_wilk(x: Vec<f64>) -> PyResult<(f64, f64)> {
    let r = ev::shapiro_wilk(&x).map_err(py_err)?;
    Ok((r.statistic, r.p))
}

/// `(H, p)`.
#[pyfunction]
fn kruskal_wallis(groups: Vec<Vec<f64>>) -> PyResult<(f64, f64)> {
    let r = ev::kruskal_wallis(&groups).map_err(py_err)?;
    Ok((r.statistic, r.p))
}

/// `(W+, p)`; `alternative` is `two-sided`, `less` or `greater`.
#[pyfunction]
#[pyo3(signature = (x, y, alternative = "two-sided"))]
fn wilcoxon(x: Vec<f64>, y: Vec<f64>, alternative: &str) -> PyResult<(f64, f64)> {
    let alt = match alternative {
        "two-sided" => Alternative::TwoSided,
        "less" => Alternative::Less,
        "greater" => Alternative::Greater,
        other => return Err(PyValueError::new_err(format!("unknown alternative {other:?}"))),
    };
    let r = ev::wilcoxon_signed_rank(&x, &y, alt).map_err(py_err)?;
    Ok((r.statistic, r.p))
}

#[pyfunction]
fn holm(pvalues: Vec<f64>) -> PyResult<Vec<f64>> {
    ev::holm_bonferroni(&pvalues).map_err(py_err)
}

/// Win counts from per-config mean errors, one row per config in strategy
/// order (SW, MW, Sw, Mw); `None` marks an invalid trial. Returns four rows
/// of five cells, the last being the "All" column.
#[pyfunction]
fn win_table(rows: Vec<[Option<f64>; 4]>) -> Vec<Vec<Option<usize>>> {
    ev::win_table_from_rows(&rows)
        .cells
        .iter()
        .map(|r| r.to_vec())
        .collect()
}

#[pyfunction]
fn dataset_build(config: &RunConfig, output: PathBuf) -> PyResult<(usize, usize, usize)> {
    let s = pipeline::cmd_dataset_build(&config.0, &output).map_err(py_err)?;
    Ok((s.n_recordings, s.n_notes, s.rendered))
}

/// Number of note features in the store.
#[pyfunction]
fn separate(config: &RunConfig, output: PathBuf) -> PyResult<usize> {
    pipeline::cmd_separate(&config.0, &output)
        .map(|s| s.n_features)
        .map_err(py_err)
}

/// Trains in this process; returns `results.csv` text.
#[pyfunction]
fn train(py: Python<'_>, config: &RunConfig, output: PathBuf) -> PyResult<String> {
    let cfg = config.0.clone();
    let results = py
        .detach(|| pipeline::cmd_train(&cfg, &output, &Executor::InProcess))
        .map_err(py_err)?
        .results;
    ev::results_to_csv(&results).map_err(py_err)
}

/// Writes the report bundle; returns the written paths.
#[pyfunction]
fn report(output: PathBuf) -> PyResult<Vec<PathBuf>> {
    pipeline::cmd_report(&output)
        .map(|b| b.files)
        .map_err(py_err)
}

#[pymodule]
#[pyo3(name = "ascvel")]
pub fn ascvel_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<ModelConfig>()?;
    m.add_class::<VelocityModel>()?;
    m.add_class::<RunConfig>()?;
    m.add("NoValidTrialsError", m.py().get_type::<NoValidTrialsError>())?;
    m.add_function(wrap_pyfunction!(enumerate_grid, m)?)?;
    m.add_function(wrap_pyfunction!(strategies, m)?)?;
    m.add_function(wrap_pyfunction!(run_config_schema, m)?)?;
    m.add_function(wrap_pyfunction!(generate_performance, m)?)?;
    m.add_function(wrap_pyfunction!(render_performance, m)?)?;
    m.add_function(wrap_pyfunction!(shapiro_wilk, m)?)?;
    m.add_function(wrap_pyfunction!(kruskal_wallis, m)?)?;
    m.add_function(wrap_pyfunction!(wilcoxon, m)?)?;
    m.add_function(wrap_pyfunction!(holm, m)?)?;
    m.add_function(wrap_pyfunction!(win_table, m)?)?;
    m.add_function(wrap_pyfunction!(dataset_build, m)?)?;
    m.add_function(wrap_pyfunction!(separate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    Ok(())
}
