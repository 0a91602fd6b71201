//! Nonparametric tests used in the strategy comparison.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::{Error, Result};

/// Above this many distinct group-label assignments Kruskal-Wallis falls back
/// to the chi-square approximation.
pub const KRUSKAL_EXACT_LIMIT: f64 = 200_000.0;
/// Largest sample for which the Wilcoxon p-value is computed exactly.
pub const WILCOXON_EXACT_MAX: usize = 25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Alternative {
    TwoSided,
    /// First sample tends to be smaller.
    Less,
    /// First sample tends to be larger.
    Greater,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p: f64,
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Average ranks (1-based) and the sizes of tied groups.
pub fn average_ranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        if j - i > 1 {
            ties.push(j - i);
        }
        i = j;
    }
    (ranks, ties)
}

fn poly(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &v| acc * x + v)
}

/// Shapiro-Wilk W and p-value (Royston's approximation).
pub fn shapiro_wilk(samples: &[f64]) -> Result<TestResult> {
    const C1: [f64; 6] = [0.0, 0.221157, -0.147981, -2.07119, 4.434685, -2.706056];
    const C2: [f64; 6] = [0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633];
    const C3: [f64; 4] = [0.544, -0.39978, 0.025054, -6.714e-4];
    const C4: [f64; 4] = [1.3822, -0.77857, 0.062767, -0.0020322];
    const C5: [f64; 4] = [-1.5861, -0.31082, -0.083751, 0.0038915];
    const C6: [f64; 3] = [-0.4803, -0.082676, 0.0030302];
    const G: [f64; 2] = [-2.273, 0.459];

    let n = samples.len();
    if !(3..=5000).contains(&n) {
        return Err(Error::Domain(format!(
            "Shapiro-Wilk needs 3..=5000 samples, got {n}"
        )));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Shapiro-Wilk sample".into()));
    }
    let mut x = samples.to_vec();
    x.sort_by(f64::total_cmp);
    if x[n - 1] - x[0] < 1e-19 {
        return Err(Error::Domain("Shapiro-Wilk sample has zero range".into()));
    }
    let half = n / 2;
    let an = n as f64;
    let norm = std_normal();

    // a[i] weights the pair (x[n-1-i] - x[i]).
    let mut a = vec![0.0; half];
    if n == 3 {
        a[0] = 0.5f64.sqrt();
    } else {
        let m: Vec<f64> = (1..=half)
            .map(|i| norm.inverse_cdf((i as f64 - 0.375) / (an + 0.25)))
            .collect();
        let summ2 = 2.0 * m.iter().map(|v| v * v).sum::<f64>();
        let ssumm2 = summ2.sqrt();
        let rsn = 1.0 / an.sqrt();
        let a1 = poly(&C1, rsn) - m[0] / ssumm2;
        let (first, fac) = if n > 5 {
            let a2 = -m[1] / ssumm2 + poly(&C2, rsn);
            let fac = ((summ2 - 2.0 * m[0] * m[0] - 2.0 * m[1] * m[1])
                / (1.0 - 2.0 * a1 * a1 - 2.0 * a2 * a2))
                .sqrt();
            a[1] = a2;
            (2, fac)
        } else {
            let fac = ((summ2 - 2.0 * m[0] * m[0]) / (1.0 - 2.0 * a1 * a1)).sqrt();
            (1, fac)
        };
        a[0] = a1;
        for i in first..half {
            a[i] = -m[i] / fac;
        }
    }

    let mean = x.iter().sum::<f64>() / an;
    let ss: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
    let num: f64 = (0..half).map(|i| a[i] * (x[n - 1 - i] - x[i])).sum();
    let w = (num * num / ss).min(1.0);

    if n == 3 {
        let p = (6.0 / std::f64::consts::PI) * (w.sqrt().asin() - (0.75f64).sqrt().asin());
        return Ok(TestResult {
            statistic: w,
            p: p.max(0.0),
        });
    }
    let mut y = (1.0 - w).ln();
    let (m, s) = if n <= 11 {
        let gamma = poly(&G, an);
        if y >= gamma {
            return Ok(TestResult {
                statistic: w,
                p: 1e-99,
            });
        }
        y = -(gamma - y).ln();
        (poly(&C3, an), poly(&C4, an).exp())
    } else {
        let xx = an.ln();
        (poly(&C5, xx), poly(&C6, xx).exp())
    };
    Ok(TestResult {
        statistic: w,
        p: norm.sf((y - m) / s),
    })
}

/// Number of distinct assignments of group labels to pooled positions.
fn assignment_count(sizes: &[usize]) -> f64 {
    let mut count = 1.0;
    let mut placed = 0usize;
    for &s in sizes {
        for j in 1..=s {
            placed += 1;
            count = count * placed as f64 / j as f64;
        }
    }
    count
}

/// Kruskal-Wallis H with tie correction. The p-value is exact (all distinct
/// label assignments) up to [`KRUSKAL_EXACT_LIMIT`] assignments, chi-square
/// with k-1 degrees of freedom beyond.
pub fn kruskal_wallis(groups: &[Vec<f64>]) -> Result<TestResult> {
    if groups.len() < 2 || groups.iter().any(|g| g.len() < 2) {
        return Err(Error::Domain(
            "Kruskal-Wallis needs at least 2 groups of at least 2 samples".into(),
        ));
    }
    let pooled: Vec<f64> = groups.iter().flatten().copied().collect();
    if pooled.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Kruskal-Wallis sample".into()));
    }
    let n = pooled.len() as f64;
    let (ranks, ties) = average_ranks(&pooled);
    let tie_term: f64 = ties.iter().map(|&t| (t as f64).powi(3) - t as f64).sum();
    let correction = 1.0 - tie_term / (n.powi(3) - n);
    if correction <= 0.0 {
        return Ok(TestResult {
            statistic: 0.0,
            p: 1.0,
        });
    }
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let h_of = |score: f64| (12.0 / (n * (n + 1.0)) * score - 3.0 * (n + 1.0)) / correction;
    let mut score = 0.0;
    let mut start = 0;
    for &s in &sizes {
        let r: f64 = ranks[start..start + s].iter().sum();
        score += r * r / s as f64;
        start += s;
    }
    let h = h_of(score).max(0.0);

    let p = if assignment_count(&sizes) <= KRUSKAL_EXACT_LIMIT {
        let mut counter = AssignmentCounter {
            ranks: &ranks,
            sizes: &sizes,
            remaining: sizes.clone(),
            sums: vec![0.0; sizes.len()],
            threshold: score - 1e-9 * score.abs().max(1.0),
            hits: 0,
            total: 0,
        };
        counter.visit(0);
        counter.hits as f64 / counter.total as f64
    } else {
        let chi = ChiSquared::new((groups.len() - 1) as f64).expect("positive dof");
        chi.sf(h)
    };
    Ok(TestResult { statistic: h, p })
}

struct AssignmentCounter<'a> {
    ranks: &'a [f64],
    sizes: &'a [usize],
    remaining: Vec<usize>,
    sums: Vec<f64>,
    threshold: f64,
    hits: u64,
    total: u64,
}

impl AssignmentCounter<'_> {
    fn visit(&mut self, pos: usize) {
        if pos == self.ranks.len() {
            let score: f64 = self
                .sums
                .iter()
                .zip(self.sizes)
                .map(|(r, &s)| r * r / s as f64)
                .sum();
            self.total += 1;
            if score >= self.threshold {
                self.hits += 1;
            }
            return;
        }
        for g in 0..self.sizes.len() {
            if self.remaining[g] == 0 {
                continue;
            }
            self.remaining[g] -= 1;
            self.sums[g] += self.ranks[pos];
            self.visit(pos + 1);
            self.sums[g] -= self.ranks[pos];
            self.remaining[g] += 1;
        }
    }
}

/// Wilcoxon signed-rank test on paired samples; W is the sum of ranks of
/// positive differences `x - y`. Zero differences are dropped.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64], alternative: Alternative) -> Result<TestResult> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!(
            "paired samples differ in length: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 5 {
        return Err(Error::Domain(format!(
            "Wilcoxon needs at least 5 pairs, got {}",
            x.len()
        )));
    }
    let d: Vec<f64> = x
        .iter()
        .zip(y)
        .map(|(a, b)| a - b)
        .filter(|v| *v != 0.0)
        .collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Wilcoxon difference".into()));
    }
    if d.is_empty() {
        return Ok(TestResult {
            statistic: 0.0,
            p: 1.0,
        });
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let (ranks, ties) = average_ranks(&abs);
    let w: f64 = ranks
        .iter()
        .zip(&d)
        .filter(|(_, v)| **v > 0.0)
        .map(|(r, _)| r)
        .sum();
    let n = d.len();
    let (lower, upper) = if n <= WILCOXON_EXACT_MAX {
        exact_tails(&ranks, w)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let tie_term: f64 = ties.iter().map(|&t| (t as f64).powi(3) - t as f64).sum();
        let sd = (nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0).sqrt();
        let norm = std_normal();
        // continuity correction toward the mean
        let lower = norm.cdf((w - mean + 0.5) / sd);
        let upper = norm.sf((w - mean - 0.5) / sd);
        (lower, upper)
    };
    let p = match alternative {
        Alternative::TwoSided => (2.0 * lower.min(upper)).min(1.0),
        Alternative::Less => lower,
        Alternative::Greater => upper,
    };
    Ok(TestResult { statistic: w, p })
}

/// P(S <= w) and P(S >= w) for the signed-rank sum S under random signs.
/// Ranks are multiples of 1/2, so the distribution is built on doubled ranks.
fn exact_tails(ranks: &[f64], w: f64) -> (f64, f64) {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut counts = vec![0.0f64; max + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let total = 2f64.powi(ranks.len() as i32);
    let w2 = (2.0 * w).round() as usize;
    let lower: f64 = counts[..=w2.min(max)].iter().sum();
    let upper: f64 = counts[w2.min(max + 1)..].iter().sum();
    (lower / total, upper / total)
}

/// Holm step-down adjustment, returned in input order.
pub fn holm_bonferroni(pvalues: &[f64]) -> Result<Vec<f64>> {
    if pvalues.is_empty() {
        return Err(Error::Domain("no p-values to adjust".into()));
    }
    if let Some(p) = pvalues.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Domain(format!("p-value {p} outside [0, 1]")));
    }
    let m = pvalues.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| pvalues[a].total_cmp(&pvalues[b]));
    let mut adjusted = vec![0.0; m];
    let mut running = 0.0f64;
    for (j, &i) in order.iter().enumerate() {
        running = running.max(((m - j) as f64 * pvalues[i]).min(1.0));
        adjusted[i] = running;
    }
    Ok(adjusted)
}
