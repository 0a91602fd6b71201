use proptest::prelude::{prop_assert, proptest};

use super::wins::tests::{published_rows, PUBLISHED};
use super::*;
use crate::dataset::Split;
use crate::model::enumerate_grid;
use crate::model::Strategy;

pub(crate) fn results_from_rows(rows: &[ConfigRow]) -> Vec<TrialResult> {
    let grid = enumerate_grid();
    let mut out = Vec::new();
    for (config, row) in grid.iter().zip(rows) {
        for (k, v) in Strategy::ALL.iter().zip(row) {
            out.push(match v {
                Some(v) => TrialResult {
                    config: *config,
                    strategy: *k,
                    mean_l1: Some(*v),
                    n_test_notes: 10,
                    valid: true,
                    seed: 1,
                    epochs_ran: 3,
                    untrained_l1: Some(40.0),
                    context_accuracy: k.with_classifier().then_some(0.5),
                },
                None => TrialResult::invalid(*config, *k, 1, 0),
            });
        }
    }
    out
}

#[test]
fn mean_abs_error_examples() {
    assert_eq!(mean_abs_error(&[1.0, 127.0, 64.0], &[1, 127, 64]), 0.0);
    assert_eq!(mean_abs_error(&[64.0, 64.0], &[1, 127]), 63.0);
    let t: Vec<u8> = (1..=100).collect();
    let e: Vec<f64> = t.iter().map(|&v| v as f64 + 1.0).collect();
    assert!((mean_abs_error(&e, &t) - 1.0).abs() < 1e-12);
}

fn note(i: usize, preset: u8) -> NoteFeatures {
    NoteFeatures {
        note_id: format!("n{i}"),
        preset_id: preset,
        velocity_target: (20 + 7 * i % 100) as u8,
        split: Split::Test,
        mfcc: (0..390)
            .map(|j| ((i * 31 + j) as f64 * 0.37).sin())
            .collect(),
    }
}

#[test]
fn evaluate_trial_routes_and_scores() {
    let test: Vec<NoteFeatures> = (0..24).map(|i| note(i, (i % 6) as u8)).collect();
    for k in Strategy::ALL {
        let model = VelocityModel::new(ModelConfig::new(3, 3, 1, 1), k, 9).unwrap();
        let r = evaluate_trial(&model, &test).unwrap();
        let (l1, acc) = crate::training::evaluate_loss(&model, &test).unwrap();
        assert!(r.valid);
        assert!((r.mean_l1.unwrap() - 127.0 * l1).abs() < 1e-9);
        assert_eq!(r.context_accuracy, acc);
        assert_eq!(r.n_test_notes, 24);
        assert_eq!(r.context_accuracy.is_some(), k.with_classifier());
    }
    let model =
        VelocityModel::new(ModelConfig::new(3, 3, 1, 1), Strategy::MultipleWithout, 9).unwrap();
    let mut bad = test.clone();
    bad[3].preset_id = 6;
    assert!(matches!(
        evaluate_trial(&model, &bad),
        Err(Error::MissingData(_))
    ));
    assert!(evaluate_trial(&model, &[]).is_err());
}

#[test]
fn results_store_round_trip() {
    let mut rows = published_rows();
    rows[2][1] = None;
    rows[5] = [None; 4];
    let results = results_from_rows(&rows);
    let text = results_to_csv(&results).unwrap();
    assert!(text.starts_with("k0_encoder,k0_performer,k2_encoder,k2_performer,k1,strategy,mean_l1,n_notes,valid,seed,epochs_ran"));
    let back = results_from_csv(&text).unwrap();
    assert_eq!(back, results);
    let mut shuffled = results.clone();
    shuffled.reverse();
    assert_eq!(results_to_csv(&shuffled).unwrap(), text);
    let broken = text.replacen(",true,", ",false,", 1);
    assert!(results_from_csv(&broken).is_err());
}

#[test]
fn oracle_is_the_elementwise_best() {
    let mut rows = Vec::new();
    for i in 0..6 {
        let f = i as f64;
        rows.push(if i < 3 {
            [
                Some(20.0 + f),
                Some(10.0 + f),
                Some(15.0 + f),
                Some(18.0 + f),
            ]
        } else {
            [
                Some(20.0 + f),
                Some(15.0 + f),
                Some(10.0 + f),
                Some(18.0 + f),
            ]
        });
    }
    let cmp = oracle_best(&results_from_rows(&rows));
    assert_eq!(
        cmp.oracle,
        (0..6).map(|i| 10.0 + i as f64).collect::<Vec<_>>()
    );
    assert_eq!(&cmp.best_strategy[..3], &[Strategy::MultipleWithout; 3]);
    assert_eq!(&cmp.best_strategy[3..], &[Strategy::SingleWith; 3]);
    let mw = strategy_scores(&results_from_rows(&rows), Strategy::MultipleWithout);
    assert!(cmp.oracle.iter().zip(&mw).any(|(o, m)| o < m));
    assert_eq!(cmp.wins(), 6);
    let w = cmp.wilcoxon.unwrap();
    assert!((w.p - 2.0 / 64.0).abs() < 1e-12);
    assert!((cmp.wilcoxon_less.unwrap().p - 1.0 / 64.0).abs() < 1e-12);
}

#[test]
fn error_reduction_sign() {
    let rows = published_rows();
    for e in error_reductions(&results_from_rows(&rows)) {
        let i = enumerate_grid()
            .iter()
            .position(|c| *c == e.config)
            .unwrap();
        let k = Strategy::ALL.iter().position(|s| *s == e.strategy).unwrap();
        assert_eq!(e.r > 0.0, rows[i][k].unwrap() < rows[i][0].unwrap());
    }
}

#[test]
fn statistics_battery_on_published_fixture() {
    let st = statistics(&results_from_rows(&published_rows()));
    assert_eq!(st.pairwise.len(), 6);
    assert!(st
        .pairwise
        .iter()
        .all(|p| p.n_pairs == 26 && p.holm_p.unwrap() >= p.wilcoxon.unwrap().p));
    assert!(st.kruskal_wallis.is_some());
    assert_eq!(st.oracle.oracle.len(), 26);
    assert_eq!(st.strategies.len(), 4);
}

#[test]
fn report_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let results = results_from_rows(&published_rows());
    let bundle = make_report(&results, dir.path()).unwrap();
    assert_eq!(bundle.win_table.cells, PUBLISHED);
    let svg = std::fs::read_to_string(dir.path().join("strategies.svg")).unwrap();
    assert_eq!(svg.matches(r#"<g class="box">"#).count(), 4);
    assert_eq!(svg.matches("<polygon").count(), 4);
    let csv = std::fs::read_to_string(dir.path().join("win_table.csv")).unwrap();
    assert_eq!(WinTable::from_csv(&csv).unwrap(), bundle.win_table);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("statistics.json")).unwrap())
            .unwrap();
    assert_eq!(json["pairwise"].as_array().unwrap().len(), 6);
    assert!(std::fs::read_to_string(dir.path().join("summary.txt"))
        .unwrap()
        .contains("Kruskal-Wallis"));

    let none: Vec<TrialResult> = results
        .iter()
        .map(|r| TrialResult::invalid(r.config, r.strategy, 1, 0))
        .collect();
    assert!(matches!(
        make_report(&none, dir.path()),
        Err(Error::NoValidTrials)
    ));
}

#[test]
fn box_stats_quartiles() {
    let b = box_stats(&[1.0, 2.0, 3.0, 4.0, 100.0]).unwrap();
    assert_eq!((b.q1, b.median, b.q3), (2.0, 3.0, 4.0));
    assert_eq!(b.whisker_high, 4.0);
    assert_eq!(b.outliers, vec![100.0]);
    assert_eq!(b.mean, 22.0);
    assert!(box_stats(&[]).is_none());
}

proptest! {
    #[test]
    fn oracle_dominates_each_acoustic_strategy(
        rows in proptest::collection::vec(proptest::array::uniform4(proptest::option::weighted(0.85, 0.0f64..50.0)), 1..30)
    ) {
        let results = results_from_rows(&rows);
        let cmp = oracle_best(&results);
        let by_config = rows_by_config(&results);
        for (c, o) in cmp.configs.iter().zip(&cmp.oracle) {
            let row = by_config.iter().find(|(k, _)| k == c).unwrap().1;
            for v in row[1..].iter().flatten() {
                prop_assert!(o <= v);
            }
        }
    }
}
