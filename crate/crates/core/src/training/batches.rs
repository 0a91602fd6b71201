use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};

use crate::dataset::Split;
use crate::model::N_CONTEXTS;
use crate::rng::StreamRng;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    /// The single context of a context-pure batch.
    pub context: Option<usize>,
    pub indices: Vec<usize>,
}

/// Uniform subsampling without replacement, independently per
/// (split, context) group; keeps `round(fraction * group size)` items.
/// Returns sorted item indices.
pub fn subsample(labels: &[(Split, u8)], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "subsample fraction {fraction} outside (0, 1]"
        )));
    }
    let mut groups: BTreeMap<(Split, u8), Vec<usize>> = BTreeMap::new();
    for (i, &key) in labels.iter().enumerate() {
        groups.entry(key).or_default().push(i);
    }
    let mut out = Vec::new();
    for ((split, ctx), members) in groups {
        let keep = (fraction * members.len() as f64).round() as usize;
        if keep == 0 {
            return Err(Error::MissingData(format!(
                "subsampling leaves no {} notes for context {ctx}",
                split.name()
            )));
        }
        if keep == members.len() {
            out.extend(members);
            continue;
        }
        let mut rng = crate::rng::substream(seed, &format!("subsample/{}/{ctx}", split.name()));
        out.extend(
            index::sample(&mut rng, members.len(), keep)
                .into_iter()
                .map(|j| members[j]),
        );
    }
    out.sort_unstable();
    Ok(out)
}

/// Shuffled batches of any context.
pub fn make_mixed_batches(n: usize, batch_size: usize, rng: &mut StreamRng) -> Vec<Batch> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1))
        .map(|c| Batch {
            context: None,
            indices: c.to_vec(),
        })
        .collect()
}

/// Context-pure batches cycling through contexts 0..5 in order.
///
/// Each context's items are shuffled and chunked; contexts with fewer
/// batches repeat theirs cyclically so every context contributes the same
/// number per epoch.
pub fn make_context_batches(
    contexts: &[usize],
    batch_size: usize,
    rng: &mut StreamRng,
) -> Result<Vec<Batch>> {
    let mut per: Vec<Vec<Vec<usize>>> = vec![Vec::new(); N_CONTEXTS];
    for (k, slot) in per.iter_mut().enumerate() {
        let mut idx: Vec<usize> = (0..contexts.len()).filter(|&i| contexts[i] == k).collect();
        if idx.is_empty() {
            return Err(Error::MissingData(format!(
                "no training notes for context {k}"
            )));
        }
        idx.shuffle(rng);
        *slot = idx
            .chunks(batch_size.max(1))
            .map(<[usize]>::to_vec)
            .collect();
    }
    let rounds = per.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = Vec::with_capacity(rounds * N_CONTEXTS);
    for r in 0..rounds {
        for (k, batches) in per.iter().enumerate() {
            out.push(Batch {
                context: Some(k),
                indices: batches[r % batches.len()].clone(),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> StreamRng {
        crate::rng::substream(1, "batches")
    }

    #[test]
    fn full_fraction_is_identity() {
        let labels: Vec<(Split, u8)> = (0..30)
            .map(|i| (Split::ALL[i % 3], (i % 6) as u8))
            .collect();
        assert_eq!(
            subsample(&labels, 1.0, 3).unwrap(),
            (0..30).collect::<Vec<_>>()
        );
    }

    #[test]
    fn paper_scale_counts() {
        // 18 groups whose sizes sum to 7 030 000, each a multiple of 1000.
        let mut sizes = vec![390_000usize; 18];
        sizes[0] += 10_000;
        let labels: Vec<(Split, u8)> = sizes
            .iter()
            .enumerate()
            .flat_map(|(g, &s)| std::iter::repeat_n((Split::ALL[g / 6], (g % 6) as u8), s))
            .collect();
        assert_eq!(labels.len(), 7_030_000);
        let kept = subsample(&labels, 0.001, 9).unwrap();
        assert_eq!(kept.len(), 7030);
        assert_eq!(kept.len() / 10, 703);
    }

    #[test]
    fn per_group_counts_and_determinism() {
        let labels: Vec<(Split, u8)> = (0..997)
            .map(|i| (Split::ALL[i % 3], ((i / 3) % 6) as u8))
            .collect();
        let a = subsample(&labels, 0.3, 5).unwrap();
        assert_eq!(a, subsample(&labels, 0.3, 5).unwrap());
        for split in Split::ALL {
            for ctx in 0..6u8 {
                let size = labels.iter().filter(|&&l| l == (split, ctx)).count();
                let got = a.iter().filter(|&&i| labels[i] == (split, ctx)).count();
                assert!((got as f64 - 0.3 * size as f64).abs() <= 1.0);
            }
        }
        assert!(subsample(&labels, 0.0001, 5).is_err());
    }

    #[test]
    fn sixty_notes_make_six_batches() {
        let contexts: Vec<usize> = (0..60).map(|i| i / 10).collect();
        let b = make_context_batches(&contexts, 10, &mut rng()).unwrap();
        assert_eq!(
            b.iter().map(|b| b.context.unwrap()).collect::<Vec<_>>(),
            (0..6).collect::<Vec<_>>()
        );
        for batch in &b {
            assert!(batch
                .indices
                .iter()
                .all(|&i| contexts[i] == batch.context.unwrap()));
        }
    }

    #[test]
    fn skewed_contexts_balance() {
        let sizes = [3usize, 40, 17, 9, 25, 1];
        let contexts: Vec<usize> = sizes
            .iter()
            .enumerate()
            .flat_map(|(k, &s)| std::iter::repeat_n(k, s))
            .collect();
        let b = make_context_batches(&contexts, 4, &mut rng()).unwrap();
        let mut counts = [0usize; 6];
        for (i, batch) in b.iter().enumerate() {
            assert_eq!(batch.context, Some(i % 6));
            counts[batch.context.unwrap()] += 1;
            assert!(batch.indices.iter().all(|&j| contexts[j] == i % 6));
        }
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1);
        assert!(make_context_batches(&[0, 1, 2], 4, &mut rng()).is_err());
    }

    #[test]
    fn mixed_batches_cover_everything_once() {
        let b = make_mixed_batches(23, 10, &mut rng());
        let mut all: Vec<usize> = b.iter().flat_map(|b| b.indices.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        assert_eq!(b.len(), 3);
    }
}
