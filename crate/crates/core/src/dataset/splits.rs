//! Train/validation/test splits and their six preset subsets.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::clustering::{cluster, cluster_count, partition_into_subsets, robin_hood_redistribute};
use crate::{Error, Result};

pub const N_SUBSETS: usize = 6;
const TARGET_CARDINALITY: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

/// The performances of one split rendered under one preset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub split: Split,
    pub preset_id: u8,
    pub performance_ids: Vec<String>,
    pub seed: u64,
}

/// Shuffles `n` item indices and cuts them by `fractions` (train, validation,
/// test). Rounding leftovers go to the training split.
pub fn split_performances(n: usize, fractions: [f64; 3], seed: u64) -> Result<[Vec<usize>; 3]> {
    let total: f64 = fractions.iter().sum();
    if fractions.iter().any(|&f| !(f > 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must be positive and sum to 1"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut crate::rng::substream(seed, "split"));
    let n_val = (fractions[1] * n as f64).round() as usize;
    let n_test = (fractions[2] * n as f64).round() as usize;
    if n_val == 0 || n_test == 0 || n_val + n_test >= n {
        return Err(Error::Config(format!(
            "{n} performances cannot fill all three splits"
        )));
    }
    let test = order.split_off(n - n_test);
    let val = order.split_off(n - n_test - n_val);
    let mut splits = [order, val, test];
    for s in &mut splits {
        s.sort_unstable();
    }
    Ok(splits)
}

/// Clusters the (already standardized) features of one split, balances the
/// clusters and deals them into the six preset subsets.
///
/// `ids[i]` names the performance whose features are `features[i]`.
pub fn assign_presets(
    split: Split,
    ids: &[String],
    features: &[Vec<f64>],
    seed: u64,
) -> Result<Vec<SplitAssignment>> {
    if ids.len() != features.len() {
        return Err(Error::Shape(format!(
            "{} ids for {} feature rows",
            ids.len(),
            features.len()
        )));
    }
    if ids.is_empty() {
        return Err(Error::MissingData(format!(
            "split {} is empty",
            split.name()
        )));
    }
    let stream = format!("presets/{}", split.name());
    let k = ids.len();
    let c = cluster_count(k);
    let clustering = cluster(features, c, crate::rng::derive_seed(seed, &stream))?;
    // Splits smaller than the target cannot reach it; one cluster then holds all.
    let t = TARGET_CARDINALITY.min(k / c);
    let (balanced, _) =
        robin_hood_redistribute(features, &clustering.assignment, &clustering.centroids, t)?;
    let mut rng = crate::rng::substream(seed, &format!("{stream}/deal"));
    let subsets = partition_into_subsets(&balanced, c, N_SUBSETS, &mut rng);
    Ok(subsets
        .into_iter()
        .enumerate()
        .map(|(preset, members)| SplitAssignment {
            split,
            preset_id: preset as u8,
            performance_ids: members.into_iter().map(|i| ids[i].clone()).collect(),
            seed,
        })
        .collect())
}
