use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{
    mean_std, statistics, strategy_scores, win_table, StatisticsBattery, TrialResult, WinTable,
};
use crate::model::Strategy;
use crate::pipeline::atomic_write;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoxStats {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    /// Most extreme points within 1.5 IQR of the box.
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn box_stats(values: &[f64]) -> Option<BoxStats> {
    let (mean, std) = mean_std(values)?;
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let (q1, median, q3) = (quantile(&v, 0.25), quantile(&v, 0.5), quantile(&v, 0.75));
    let iqr = q3 - q1;
    let (lo, hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside: Vec<f64> = v
        .iter()
        .copied()
        .filter(|x| (lo..=hi).contains(x))
        .collect();
    Some(BoxStats {
        q1,
        median,
        q3,
        whisker_low: inside.first().copied().unwrap_or(q1),
        whisker_high: inside.last().copied().unwrap_or(q3),
        outliers: v
            .iter()
            .copied()
            .filter(|x| !(lo..=hi).contains(x))
            .collect(),
        mean,
        std,
    })
}

const PLOT_H: f64 = 360.0;
const TOP: f64 = 30.0;
const LEFT: f64 = 70.0;
const SLOT: f64 = 130.0;

/// Box plots with the median as a solid line and mean +- std as a dotted
/// rhombus. Series without data leave an empty slot.
pub fn render_box_plot(title: &str, series: &[(String, Vec<f64>)]) -> String {
    let all: Vec<f64> = series.iter().flat_map(|(_, v)| v.iter().copied()).collect();
    let stats: Vec<Option<BoxStats>> = series.iter().map(|(_, v)| box_stats(v)).collect();
    let mut lo = all.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for b in stats.iter().flatten() {
        lo = lo.min(b.mean - b.std);
        hi = hi.max(b.mean + b.std);
    }
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        (lo, hi) = (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let y = |v: f64| TOP + PLOT_H * (hi - v) / (hi - lo);
    let width = LEFT + SLOT * series.len() as f64 + 20.0;
    let height = TOP + PLOT_H + 50.0;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="18" text-anchor="middle" font-size="14">{}</text>"#,
        width / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{:.1}" stroke="black"/>"#,
        TOP + PLOT_H
    );
    for i in 0..=5 {
        let v = lo + (hi - lo) * i as f64 / 5.0;
        let yy = y(v);
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{yy:.1}" x2="{LEFT}" y2="{yy:.1}" stroke="black"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"#,
            LEFT - 5.0,
            LEFT - 8.0,
            yy + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" transform="rotate(-90 16 {:.1})" text-anchor="middle">mean L1 (velocity)</text>"#,
        TOP + PLOT_H / 2.0,
        TOP + PLOT_H / 2.0
    );
    for (i, ((name, _), st)) in series.iter().zip(&stats).enumerate() {
        let cx = LEFT + SLOT * (i as f64 + 0.5);
        let _ = writeln!(
            s,
            r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            TOP + PLOT_H + 20.0,
            escape(name)
        );
        let Some(b) = st else { continue };
        let half = 30.0;
        let _ = writeln!(
            s,
            r##"<g class="box"><rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="#cfe0f3" stroke="black"/>"##,
            cx - half,
            y(b.q3),
            2.0 * half,
            (y(b.q1) - y(b.q3)).max(0.5)
        );
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{m:.1}" x2="{:.1}" y2="{m:.1}" stroke="black" stroke-width="2"/>"#,
            cx - half,
            cx + half,
            m = y(b.median)
        );
        for (from, to) in [(b.q3, b.whisker_high), (b.q1, b.whisker_low)] {
            let _ = writeln!(
                s,
                r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/><line x1="{:.1}" y1="{t:.1}" x2="{:.1}" y2="{t:.1}" stroke="black"/>"#,
                y(from),
                y(to),
                cx - half / 2.0,
                cx + half / 2.0,
                t = y(to)
            );
        }
        for o in &b.outliers {
            let _ = writeln!(
                s,
                r#"<circle cx="{cx:.1}" cy="{:.1}" r="3" fill="none" stroke="black"/>"#,
                y(*o)
            );
        }
        let (top, mid, bottom) = (y(b.mean + b.std), y(b.mean), y(b.mean - b.std));
        let _ = writeln!(
            s,
            r#"<polygon points="{cx:.1},{top:.1} {:.1},{mid:.1} {cx:.1},{bottom:.1} {:.1},{mid:.1}" fill="none" stroke="crimson" stroke-dasharray="3,3"/></g>"#,
            cx + half * 0.8,
            cx - half * 0.8
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

#[derive(Clone, Debug)]
pub struct ReportBundle {
    pub files: Vec<PathBuf>,
    pub win_table: WinTable,
    pub statistics: StatisticsBattery,
}

fn display_name(k: Strategy) -> &'static str {
    match k {
        Strategy::SingleWithout => "Single-w/o",
        Strategy::MultipleWithout => "Multiple-w/o",
        Strategy::SingleWith => "Single-with",
        Strategy::MultipleWith => "Multiple-with",
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into())
}

fn fmt_p(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.3e}"))
        .unwrap_or_else(|| "n/a".into())
}

fn summary_text(results: &[TrialResult], table: &WinTable, st: &StatisticsBattery) -> String {
    let valid = results.iter().filter(|r| r.valid).count();
    let configs = super::rows_by_config(results).len();
    let mut s = format!(
        "{valid} valid trials over {configs} configs\n\nPer strategy (mean L1, velocity units)\n"
    );
    for k in &st.strategies {
        let _ = writeln!(
            s,
            "  {:<14} n={:<3} mean={} std={} median={} shapiro_p={}",
            display_name(k.strategy),
            k.n,
            fmt_opt(k.mean),
            fmt_opt(k.std),
            fmt_opt(k.median),
            fmt_p(k.shapiro_wilk.map(|t| t.p))
        );
    }
    let _ = writeln!(
        s,
        "\nKruskal-Wallis p = {}",
        fmt_p(st.kruskal_wallis.map(|t| t.p))
    );
    s.push_str("\nPairwise Wilcoxon (Holm-corrected)\n");
    for p in &st.pairwise {
        let _ = writeln!(
            s,
            "  {:<14} vs {:<14} pairs={:<3} p={} holm={}{}",
            display_name(p.a),
            display_name(p.b),
            p.n_pairs,
            fmt_p(p.wilcoxon.map(|t| t.p)),
            fmt_p(p.holm_p),
            if p.significant { " *" } else { "" }
        );
    }
    let o = &st.oracle;
    let (om, bm) = (mean_std(&o.oracle), mean_std(&o.baseline));
    let _ = writeln!(
        s,
        "\nOracle-best acoustics-specific vs Single-w/o over {} configs\n  oracle mean={} baseline mean={} oracle<=baseline in {} configs\n  Wilcoxon p={} (one-sided p={})",
        o.oracle.len(),
        fmt_opt(om.map(|m| m.0)),
        fmt_opt(bm.map(|m| m.0)),
        o.wins(),
        fmt_p(o.wilcoxon.map(|t| t.p)),
        fmt_p(o.wilcoxon_less.map(|t| t.p))
    );
    s.push_str("\nWin analysis (row beats column in n configs)\n");
    s.push_str(&table.render());
    s
}

/// Writes the plots, win table, statistics and summary into `dir`.
pub fn make_report(results: &[TrialResult], dir: &Path) -> Result<ReportBundle> {
    if !results.iter().any(|r| r.valid) {
        return Err(Error::NoValidTrials);
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let table = win_table(results);
    let st = statistics(results);
    let series: Vec<(String, Vec<f64>)> = Strategy::ALL
        .iter()
        .map(|&k| (display_name(k).to_string(), strategy_scores(results, k)))
        .collect();
    let oracle_series = vec![
        (
            "Best acoustics-specific".to_string(),
            st.oracle.oracle.clone(),
        ),
        ("Single-w/o".to_string(), st.oracle.baseline.clone()),
    ];
    let files: Vec<(&str, Vec<u8>)> = vec![
        (
            "strategies.svg",
            render_box_plot("Mean L1 per strategy", &series).into_bytes(),
        ),
        (
            "oracle.svg",
            render_box_plot("Oracle-best vs Single-w/o", &oracle_series).into_bytes(),
        ),
        ("win_table.csv", table.to_csv().into_bytes()),
        ("win_table.txt", table.render().into_bytes()),
        ("statistics.json", serde_json::to_vec_pretty(&st)?),
        (
            "summary.txt",
            summary_text(results, &table, &st).into_bytes(),
        ),
    ];
    let mut paths = Vec::new();
    for (name, bytes) in files {
        let p = dir.join(name);
        atomic_write(&p, &bytes)?;
        paths.push(p);
    }
    Ok(ReportBundle {
        files: paths,
        win_table: table,
        statistics: st,
    })
}
