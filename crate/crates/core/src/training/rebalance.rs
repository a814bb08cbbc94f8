//! Over- and under-sampling to the geometric mean class count.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract_err, Result};

/// Target count per class: the rounded geometric mean of `counts`.
pub fn rebalance_target(counts: &[usize]) -> Result<usize> {
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(contract_err!("class {c} has no samples to rebalance"));
    }
    if counts.is_empty() {
        return Err(contract_err!("no classes to rebalance"));
    }
    let mean_log = counts.iter().map(|&n| (n as f64).ln()).sum::<f64>() / counts.len() as f64;
    Ok(mean_log.exp().round() as usize)
}

/// Indices into `labels` after rebalancing. Larger classes are subsampled
/// without replacement; smaller ones keep every sample and add draws with
/// replacement. Kept samples stay in their original order, extra draws
/// follow.
pub fn rebalance_indices(labels: &[usize], classes: usize, seed: u64) -> Result<Vec<usize>> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(contract_err!("label {l} out of range for {classes} classes"));
        }
        by_class[l].push(i);
    }
    let counts: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let target = rebalance_target(&counts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; labels.len()];
    let mut extra = Vec::new();
    for members in &by_class {
        if members.len() > target {
            for k in sample(&mut rng, members.len(), target).into_iter() {
                keep[members[k]] = true;
            }
        } else {
            for &i in members {
                keep[i] = true;
            }
            for _ in members.len()..target {
                extra.push(members[rng.gen_range(0..members.len())]);
            }
        }
    }
    let mut out: Vec<usize> = (0..labels.len()).filter(|&i| keep[i]).collect();
    out.extend(extra);
    Ok(out)
}

/// Rebalanced copy of `samples` labelled by `label_of`.
pub fn rebalance_dataset<T: Clone>(
    samples: &[T],
    label_of: impl Fn(&T) -> usize,
    classes: usize,
    seed: u64,
) -> Result<Vec<T>> {
    let labels: Vec<usize> = samples.iter().map(label_of).collect();
    Ok(rebalance_indices(&labels, classes, seed)?
        .into_iter()
        .map(|i| samples[i].clone())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count(idx: &[usize], labels: &[usize], c: usize) -> usize {
        idx.iter().filter(|&&i| labels[i] == c).count()
    }

    #[test]
    fn geometric_mean_target() {
        let labels: Vec<usize> = (0..500).map(|i| usize::from(i >= 100)).collect();
        let idx = rebalance_indices(&labels, 2, 7).unwrap();
        assert_eq!(count(&idx, &labels, 0), 200);
        assert_eq!(count(&idx, &labels, 1), 200);
        // majority side has no repeats
        let mut major: Vec<usize> = idx.iter().copied().filter(|&i| labels[i] == 1).collect();
        major.sort_unstable();
        major.dedup();
        assert_eq!(major.len(), 200);
    }

    #[test]
    fn balanced_is_unchanged() {
        let labels = vec![0, 1, 1, 0, 1, 0];
        assert_eq!(rebalance_indices(&labels, 2, 3).unwrap(), vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn deterministic_and_checked() {
        let labels = vec![0, 0, 0, 0, 0, 0, 0, 0, 1];
        assert_eq!(
            rebalance_indices(&labels, 2, 5).unwrap(),
            rebalance_indices(&labels, 2, 5).unwrap()
        );
        assert!(rebalance_indices(&[0, 0], 2, 1).is_err());
    }
}
