//! Feature extraction, k-means, "Robin Hood" cluster balancing and stratified dealing.

use rand::seq::SliceRandom;
use rand::Rng;

use super::Performance;
use crate::rng::StreamRng;
use crate::{Error, Result};

pub const FEATURE_DIM: usize = 8;
const KMEANS_RESTARTS: usize = 50;
const KMEANS_MAX_ITER: usize = 100;

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

/// `[pitch mean, pitch std, velocity mean, velocity std, duration mean,
/// duration std, note density (notes/s), onset-interval std]`, population
/// statistics throughout.
pub fn extract_clustering_features(perf: &Performance) -> Result<[f64; FEATURE_DIM]> {
    if perf.is_empty() {
        return Err(Error::Domain(format!(
            "performance {} has no notes",
            perf.source_id
        )));
    }
    let notes = &perf.notes;
    let (pm, ps) = mean_std(notes.iter().map(|n| n.pitch as f64));
    let (vm, vs) = mean_std(notes.iter().map(|n| n.velocity as f64));
    let (dm, ds) = mean_std(notes.iter().map(|n| n.duration()));
    let span = perf.end_time() - notes[0].onset;
    let density = notes.len() as f64 / span;
    let (_, ioi_std) = mean_std(notes.windows(2).map(|w| w[1].onset - w[0].onset));
    Ok([pm, ps, vm, vs, dm, ds, density, ioi_std])
}

/// Column-wise z-scores; constant columns map to 0.
pub fn standardize(features: &[[f64; FEATURE_DIM]]) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = features.iter().map(|f| f.to_vec()).collect();
    for d in 0..FEATURE_DIM {
        let (m, s) = mean_std(features.iter().map(|f| f[d]));
        for row in &mut out {
            row[d] = if s > 0.0 { (row[d] - m) / s } else { 0.0 };
        }
    }
    out
}

/// `C = max(1, floor(K / 6))`.
pub fn cluster_count(n_points: usize) -> usize {
    (n_points / 6).max(1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    /// Cluster index of every point.
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
}

impl Clustering {
    pub fn n_clusters(&self) -> usize {
        self.centroids.len()
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        cardinalities(&self.assignment, self.n_clusters())
    }
}

pub(crate) fn cardinalities(assignment: &[usize], n_clusters: usize) -> Vec<usize> {
    let mut counts = vec![0; n_clusters];
    for &a in assignment {
        counts[a] += 1;
    }
    counts
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn kmeans_once(points: &[Vec<f64>], c: usize, rng: &mut StreamRng) -> Clustering {
    let n = points.len();
    // k-means++ seeding
    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < c {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.push(points[idx].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }

    let dim = points[0].len();
    let mut assignment = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let (k, _) = nearest(p, &centroids);
            if assignment[i] != k {
                assignment[i] = k;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; dim]; c];
        let mut counts = vec![0usize; c];
        for (p, &a) in points.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for k in 0..c {
            if counts[k] == 0 {
                // Re-seed an empty cluster at the point farthest from its centroid.
                let far = (0..n)
                    .max_by(|&i, &j| {
                        sq_dist(&points[i], &centroids[assignment[i]])
                            .total_cmp(&sq_dist(&points[j], &centroids[assignment[j]]))
                            .then(j.cmp(&i))
                    })
                    .unwrap();
                centroids[k] = points[far].clone();
                assignment[far] = k;
                changed = true;
            } else {
                centroids[k] = sums[k].iter().map(|s| s / counts[k] as f64).collect();
            }
        }
        if !changed {
            break;
        }
    }
    let inertia = points
        .iter()
        .zip(&assignment)
        .map(|(p, &a)| sq_dist(p, &centroids[a]))
        .sum();
    Clustering {
        assignment,
        centroids,
        inertia,
    }
}

/// k-means (Euclidean) with k-means++ seeding; the best of 50 seeded restarts.
pub fn cluster(points: &[Vec<f64>], c: usize, seed: u64) -> Result<Clustering> {
    if c == 0 {
        return Err(Error::Domain("need at least one cluster".into()));
    }
    if c > points.len() {
        return Err(Error::Domain(format!(
            "{c} clusters requested for {} points",
            points.len()
        )));
    }
    let mut rng = crate::rng::substream(seed, "kmeans");
    let mut best: Option<Clustering> = None;
    for _ in 0..KMEANS_RESTARTS {
        let candidate = kmeans_once(points, c, &mut rng);
        if best.as_ref().is_none_or(|b| candidate.inertia < b.inertia) {
            best = Some(candidate);
        }
    }
    Ok(best.unwrap())
}

/// Moves points from rich clusters (cardinality > `t`) into poor ones
/// (cardinality < `t`) until every cluster holds at least `t` points.
///
/// The poorest cluster is served first (lowest index on ties) and receives
/// the donor-eligible point nearest to its centroid (lowest index on ties).
/// Centroids stay fixed. Returns the new assignment and the number of moves.
pub fn robin_hood_redistribute(
    points: &[Vec<f64>],
    assignment: &[usize],
    centroids: &[Vec<f64>],
    t: usize,
) -> Result<(Vec<usize>, usize)> {
    let c = centroids.len();
    if points.len() != assignment.len() {
        return Err(Error::Shape(format!(
            "{} points but {} assignments",
            points.len(),
            assignment.len()
        )));
    }
    if assignment.iter().any(|&a| a >= c) {
        return Err(Error::Domain(
            "assignment refers to a missing cluster".into(),
        ));
    }
    if c * t > points.len() {
        return Err(Error::Infeasible(format!(
            "{c} clusters x target {t} exceeds {} points",
            points.len()
        )));
    }
    let mut assignment = assignment.to_vec();
    let mut counts = cardinalities(&assignment, c);
    let mut moves = 0;
    loop {
        let poor = (0..c)
            .filter(|&k| counts[k] < t)
            .min_by_key(|&k| (counts[k], k));
        let Some(poor) = poor else { break };
        let donor_point = (0..points.len())
            .filter(|&i| counts[assignment[i]] > t)
            .min_by(|&i, &j| {
                sq_dist(&points[i], &centroids[poor])
                    .total_cmp(&sq_dist(&points[j], &centroids[poor]))
                    .then(i.cmp(&j))
            })
            .expect("feasibility guarantees a rich cluster while one is poor");
        counts[assignment[donor_point]] -= 1;
        counts[poor] += 1;
        assignment[donor_point] = poor;
        moves += 1;
    }
    Ok((assignment, moves))
}

/// Deals the points of every cluster across `n_subsets` subsets.
///
/// Subset and cluster orders are shuffled; each cluster's points are drawn
/// uniformly at random and handed to consecutive subsets, continuing the
/// subset cycle from one cluster to the next. Every subset therefore gets one
/// point per cluster per round, and subset sizes differ by at most one.
pub fn partition_into_subsets(
    assignment: &[usize],
    n_clusters: usize,
    n_subsets: usize,
    rng: &mut StreamRng,
) -> Vec<Vec<usize>> {
    let mut subset_order: Vec<usize> = (0..n_subsets).collect();
    subset_order.shuffle(rng);
    let mut cluster_order: Vec<usize> = (0..n_clusters).collect();
    cluster_order.shuffle(rng);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_clusters];
    for (i, &a) in assignment.iter().enumerate() {
        members[a].push(i);
    }
    let mut subsets = vec![Vec::new(); n_subsets];
    let mut cursor = 0;
    for &k in &cluster_order {
        let mut remaining = members[k].clone();
        while !remaining.is_empty() {
            let pick = rng.random_range(0..remaining.len());
            let point = remaining.swap_remove(pick);
            subsets[subset_order[cursor % n_subsets]].push(point);
            cursor += 1;
        }
    }
    for s in &mut subsets {
        s.sort_unstable();
    }
    subsets
}
