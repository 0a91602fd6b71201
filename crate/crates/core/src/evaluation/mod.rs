//! Trial scoring, win analysis, statistics and the report bundle.

mod report;
mod stats;
mod wins;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use report::{box_stats, make_report, render_box_plot, BoxStats, ReportBundle};
pub use stats::{
    average_ranks, holm_bonferroni, kruskal_wallis, shapiro_wilk, wilcoxon_signed_rank,
    Alternative, TestResult, KRUSKAL_EXACT_LIMIT, WILCOXON_EXACT_MAX,
};
pub use wins::{
    rows_by_config, win_table, win_table_from_rows, ConfigRow, WinTable, WIN_TABLE_ALL,
};

use crate::model::{ModelConfig, Strategy, VelocityModel, N_CONTEXTS};
use crate::separation::NoteFeatures;
use crate::training::predict;
use crate::{Error, Result};

pub const RESULTS_FILE: &str = "results.csv";
pub const ALPHA: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub config: ModelConfig,
    pub strategy: Strategy,
    /// Mean absolute velocity error on the test set, 0..127 units.
    pub mean_l1: Option<f64>,
    pub n_test_notes: usize,
    pub valid: bool,
    pub seed: u64,
    pub epochs_ran: usize,
    /// Same measure for the freshly initialized model.
    pub untrained_l1: Option<f64>,
    pub context_accuracy: Option<f64>,
}

impl TrialResult {
    /// A trial that produced no usable model.
    pub fn invalid(config: ModelConfig, strategy: Strategy, seed: u64, epochs_ran: usize) -> Self {
        TrialResult {
            config,
            strategy,
            mean_l1: None,
            n_test_notes: 0,
            valid: false,
            seed,
            epochs_ran,
            untrained_l1: None,
            context_accuracy: None,
        }
    }

    /// Mean L1 if the trial counts.
    pub fn score(&self) -> Option<f64> {
        self.mean_l1.filter(|_| self.valid)
    }
}

/// Scores a trained model on the test notes. Multiple strategies route each
/// note to the performer of its context. `epochs_ran` and `untrained_l1` are
/// left for the caller.
pub fn evaluate_trial(model: &VelocityModel, test: &[NoteFeatures]) -> Result<TrialResult> {
    if let Some(f) = test.iter().find(|f| f.preset_id as usize >= N_CONTEXTS) {
        return Err(Error::MissingData(format!(
            "note {} has no context among the {N_CONTEXTS} presets",
            f.note_id
        )));
    }
    if test.is_empty() {
        return Err(Error::MissingData("no test notes".into()));
    }
    let pred = predict(model, test)?;
    let estimates: Vec<f64> = pred.velocity.iter().map(|v| v * 127.0).collect();
    let targets: Vec<u8> = test.iter().map(|f| f.velocity_target).collect();
    let mean = mean_abs_error(&estimates, &targets);
    let accuracy = pred.context.map(|c| {
        let hits = c
            .iter()
            .zip(test)
            .filter(|(k, f)| **k == f.preset_id as usize)
            .count();
        hits as f64 / test.len() as f64
    });
    let valid = mean.is_finite();
    Ok(TrialResult {
        config: model.config,
        strategy: model.strategy,
        mean_l1: valid.then_some(mean),
        n_test_notes: test.len(),
        valid,
        seed: model.seed,
        epochs_ran: 0,
        untrained_l1: None,
        context_accuracy: accuracy,
    })
}

/// Mean |estimate - target| in velocity units.
pub fn mean_abs_error(estimates: &[f64], targets: &[u8]) -> f64 {
    assert_eq!(estimates.len(), targets.len(), "one estimate per target");
    let sum: f64 = estimates
        .iter()
        .zip(targets)
        .map(|(e, &t)| (e - t as f64).abs())
        .sum();
    sum / targets.len() as f64
}

#[derive(Debug, Serialize, Deserialize)]
struct ResultRow {
    k0_encoder: usize,
    k0_performer: usize,
    k2_encoder: usize,
    k2_performer: usize,
    k1: usize,
    strategy: Strategy,
    mean_l1: Option<f64>,
    n_notes: usize,
    valid: bool,
    seed: u64,
    epochs_ran: usize,
    untrained_l1: Option<f64>,
    context_accuracy: Option<f64>,
}

/// Sorts by grid order, then strategy order.
pub fn sort_results(results: &mut [TrialResult]) {
    results.sort_by_key(|r| (r.config, r.strategy));
}

pub fn results_to_csv(results: &[TrialResult]) -> Result<String> {
    let mut sorted = results.to_vec();
    sort_results(&mut sorted);
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &sorted {
        w.serialize(ResultRow {
            k0_encoder: r.config.k0_encoder,
            k0_performer: r.config.k0_performer,
            k2_encoder: r.config.k2_encoder,
            k2_performer: r.config.k2_performer,
            k1: r.config.k1,
            strategy: r.strategy,
            mean_l1: r.mean_l1,
            n_notes: r.n_test_notes,
            valid: r.valid,
            seed: r.seed,
            epochs_ran: r.epochs_ran,
            untrained_l1: r.untrained_l1,
            context_accuracy: r.context_accuracy,
        })
        .map_err(csv_error)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| csv_error(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn results_from_csv(text: &str) -> Result<Vec<TrialResult>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for row in r.deserialize::<ResultRow>() {
        let row = row.map_err(csv_error)?;
        let config = ModelConfig {
            k0_encoder: row.k0_encoder,
            k0_performer: row.k0_performer,
            k2_encoder: row.k2_encoder,
            k2_performer: row.k2_performer,
            k1: row.k1,
        };
        if row.valid != row.mean_l1.is_some() {
            return Err(Error::Parse {
                offset: 0,
                message: format!(
                    "{} {}: validity and mean_l1 disagree",
                    config.label(),
                    row.strategy.name()
                ),
            });
        }
        out.push(TrialResult {
            config,
            strategy: row.strategy,
            mean_l1: row.mean_l1,
            n_test_notes: row.n_notes,
            valid: row.valid,
            seed: row.seed,
            epochs_ran: row.epochs_ran,
            untrained_l1: row.untrained_l1,
            context_accuracy: row.context_accuracy,
        });
    }
    Ok(out)
}

fn csv_error(e: csv::Error) -> Error {
    let offset = e.position().map(|p| p.byte() as usize).unwrap_or(0);
    Error::Parse {
        offset,
        message: e.to_string(),
    }
}

pub fn write_results(dir: &Path, results: &[TrialResult]) -> Result<()> {
    crate::pipeline::atomic_write(&dir.join(RESULTS_FILE), results_to_csv(results)?.as_bytes())
}

pub fn read_results(dir: &Path) -> Result<Vec<TrialResult>> {
    let path = dir.join(RESULTS_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    results_from_csv(&text)
}

/// Baseline error minus strategy error on one config; positive when the
/// strategy beats Single-w/o.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorReduction {
    pub config: ModelConfig,
    pub strategy: Strategy,
    pub r: f64,
}

pub fn error_reductions(results: &[TrialResult]) -> Vec<ErrorReduction> {
    let mut out = Vec::new();
    for (config, row) in rows_by_config(results) {
        let Some(base) = row[0] else { continue };
        for (k, v) in Strategy::ALL.iter().zip(row).skip(1) {
            if let Some(v) = v {
                out.push(ErrorReduction {
                    config,
                    strategy: *k,
                    r: base - v,
                });
            }
        }
    }
    out
}

/// Per config, the best acoustics-specific result against Single-w/o.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleComparison {
    pub configs: Vec<ModelConfig>,
    pub best_strategy: Vec<Strategy>,
    pub oracle: Vec<f64>,
    pub baseline: Vec<f64>,
    /// Paired two-sided test across configs, when there are at least 5.
    pub wilcoxon: Option<TestResult>,
    /// Same pairs, alternative "oracle below baseline".
    pub wilcoxon_less: Option<TestResult>,
}

impl OracleComparison {
    /// Configs where the oracle is at least as good as the baseline.
    pub fn wins(&self) -> usize {
        self.oracle
            .iter()
            .zip(&self.baseline)
            .filter(|(o, b)| o <= b)
            .count()
    }
}

pub fn oracle_best(results: &[TrialResult]) -> OracleComparison {
    let mut cmp = OracleComparison {
        configs: Vec::new(),
        best_strategy: Vec::new(),
        oracle: Vec::new(),
        baseline: Vec::new(),
        wilcoxon: None,
        wilcoxon_less: None,
    };
    for (config, row) in rows_by_config(results) {
        let Some(base) = row[0] else { continue };
        let best = Strategy::ALL
            .iter()
            .zip(row)
            .skip(1)
            .filter_map(|(k, v)| v.map(|v| (*k, v)))
            .min_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((k, v)) = best {
            cmp.configs.push(config);
            cmp.best_strategy.push(k);
            cmp.oracle.push(v);
            cmp.baseline.push(base);
        }
    }
    if cmp.oracle.len() >= 5 {
        cmp.wilcoxon = wilcoxon_signed_rank(&cmp.oracle, &cmp.baseline, Alternative::TwoSided).ok();
        cmp.wilcoxon_less =
            wilcoxon_signed_rank(&cmp.oracle, &cmp.baseline, Alternative::Less).ok();
    }
    cmp
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: Strategy,
    pub n: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub median: Option<f64>,
    pub shapiro_wilk: Option<TestResult>,
    pub normal: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairwiseTest {
    pub a: Strategy,
    pub b: Strategy,
    pub n_pairs: usize,
    pub wilcoxon: Option<TestResult>,
    pub holm_p: Option<f64>,
    pub significant: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatisticsBattery {
    pub alpha: f64,
    pub strategies: Vec<StrategySummary>,
    pub kruskal_wallis: Option<TestResult>,
    pub pairwise: Vec<PairwiseTest>,
    pub oracle: OracleComparison,
    pub error_reductions: Vec<ErrorReduction>,
}

pub fn strategy_scores(results: &[TrialResult], strategy: Strategy) -> Vec<f64> {
    let mut v: Vec<&TrialResult> = results.iter().filter(|r| r.strategy == strategy).collect();
    v.sort_by_key(|r| r.config);
    v.iter().filter_map(|r| r.score()).collect()
}

pub fn mean_std(v: &[f64]) -> Option<(f64, f64)> {
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Some((mean, var.sqrt()))
}

/// Normality per strategy, the omnibus test, Holm-corrected pairwise tests
/// on mutually valid configs, and the oracle comparison.
pub fn statistics(results: &[TrialResult]) -> StatisticsBattery {
    let strategies = Strategy::ALL
        .iter()
        .map(|&k| {
            let v = strategy_scores(results, k);
            let ms = mean_std(&v);
            let sw = shapiro_wilk(&v).ok();
            StrategySummary {
                strategy: k,
                n: v.len(),
                mean: ms.map(|m| m.0),
                std: ms.map(|m| m.1),
                median: box_stats(&v).map(|b| b.median),
                shapiro_wilk: sw,
                normal: sw.map(|t| t.p >= ALPHA),
            }
        })
        .collect();
    let groups: Vec<Vec<f64>> = Strategy::ALL
        .iter()
        .map(|&k| strategy_scores(results, k))
        .filter(|g| g.len() >= 2)
        .collect();
    let kruskal = (groups.len() >= 2)
        .then(|| kruskal_wallis(&groups).ok())
        .flatten();

    let rows = rows_by_config(results);
    let mut pairwise = Vec::new();
    for i in 0..4 {
        for j in i + 1..4 {
            let (x, y): (Vec<f64>, Vec<f64>) = rows
                .iter()
                .filter_map(|(_, r)| Some((r[i]?, r[j]?)))
                .unzip();
            pairwise.push(PairwiseTest {
                a: Strategy::ALL[i],
                b: Strategy::ALL[j],
                n_pairs: x.len(),
                wilcoxon: wilcoxon_signed_rank(&x, &y, Alternative::TwoSided).ok(),
                holm_p: None,
                significant: false,
            });
        }
    }
    let raw: Vec<f64> = pairwise
        .iter()
        .filter_map(|p| p.wilcoxon.map(|t| t.p))
        .collect();
    if let Ok(adj) = holm_bonferroni(&raw) {
        let mut adj = adj.into_iter();
        for p in pairwise.iter_mut().filter(|p| p.wilcoxon.is_some()) {
            let a = adj.next().unwrap();
            p.holm_p = Some(a);
            p.significant = a < ALPHA;
        }
    }
    StatisticsBattery {
        alpha: ALPHA,
        strategies,
        kruskal_wallis: kruskal,
        pairwise,
        oracle: oracle_best(results),
        error_reductions: error_reductions(results),
    }
}

#[cfg(test)]
mod tests;
