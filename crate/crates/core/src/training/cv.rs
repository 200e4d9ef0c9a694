//! Stratified k-fold splits with a train/validation/test partition per fold.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Deals each class's shuffled members round-robin into `k` buckets, carrying
/// the position across classes so bucket sizes differ by at most one. Fold
/// `i` tests on bucket `i`, validates on bucket `i+1` and trains on the rest.
pub fn stratified_kfold(labels: &[usize], k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 3 {
        return Err(Error::invalid(format!("need k ≥ 3 for train/val/test splits, got {k}")));
    }
    let n_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut slot = 0;
    for class in 0..n_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < k {
            return Err(Error::ClassTooSmall {
                class,
                count: members.len(),
                k,
            });
        }
        members.shuffle(&mut rng);
        for m in members {
            buckets[slot % k].push(m);
            slot += 1;
        }
    }
    for b in &mut buckets {
        b.sort_unstable();
    }
    Ok((0..k)
        .map(|i| {
            let v = (i + 1) % k;
            let mut train: Vec<usize> = (0..k)
                .filter(|&j| j != i && j != v)
                .flat_map(|j| buckets[j].iter().copied())
                .collect();
            train.sort_unstable();
            Fold {
                train,
                val: buckets[v].clone(),
                test: buckets[i].clone(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn counts(idx: &[usize], labels: &[usize]) -> (usize, usize) {
        let pos = idx.iter().filter(|&&i| labels[i] == 1).count();
        (idx.len() - pos, pos)
    }

    #[test]
    fn balanced_cohort_gives_five_plus_five() {
        let labels: Vec<usize> = (0..100).map(|i| i % 2).collect();
        for f in stratified_kfold(&labels, 10, 1).unwrap() {
            assert_eq!(counts(&f.test, &labels), (5, 5));
            assert_eq!(f.train.len(), 80);
            assert_eq!(f.val.len(), 10);
        }
    }

    #[test]
    fn forty_sixty_gives_four_plus_six() {
        let labels: Vec<usize> = (0..100).map(|i| usize::from(i >= 40)).collect();
        for f in stratified_kfold(&labels, 10, 2).unwrap() {
            assert_eq!(counts(&f.test, &labels), (4, 6));
        }
    }

    #[test]
    fn small_class_is_rejected() {
        let labels = [0, 0, 0, 0, 1, 1];
        assert!(matches!(
            stratified_kfold(&labels, 3, 0),
            Err(Error::ClassTooSmall { class: 1, count: 2, k: 3 })
        ));
    }

    proptest! {
        #[test]
        fn folds_partition_the_cohort(
            n0 in 10usize..40, n1 in 10usize..40, k in 3usize..10, seed in 0u64..1000
        ) {
            let mut labels = vec![0; n0];
            labels.extend(vec![1; n1]);
            let folds = stratified_kfold(&labels, k, seed).unwrap();
            prop_assert_eq!(&folds, &stratified_kfold(&labels, k, seed).unwrap());
            let mut seen = vec![0; labels.len()];
            for f in &folds {
                for &i in &f.test { seen[i] += 1; }
                let mut all: Vec<usize> = f.train.iter().chain(&f.val).chain(&f.test).copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
                let (c0, c1) = counts(&f.test, &labels);
                prop_assert!((c0 as f64 - n0 as f64 / k as f64).abs() < 1.0 + 1e-9);
                prop_assert!((c1 as f64 - n1 as f64 / k as f64).abs() < 1.0 + 1e-9);
            }
            prop_assert!(seen.iter().all(|&s| s == 1));
        }
    }
}
