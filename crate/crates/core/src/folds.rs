//! Seeded k-fold assignment shared by the cross-validated fitters.

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;

/// Partition `0..n` into `k` near-equal folds by a seeded shuffle.
///
/// Fold sizes differ by at most one; assignment depends only on `(n, k,
/// seed)`. Each fold's indices come back sorted.
pub fn kfold_indices(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || k > n {
        return Err(Error::FoldTooSmall { rows: n, folds: k });
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = SeededRng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let base = n / k;
    let extra = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let mut fold: Vec<usize> = order[start..start + size].to_vec();
        fold.sort_unstable();
        folds.push(fold);
        start += size;
    }
    Ok(folds)
}

/// Complement of one fold: the training rows for that fold.
pub fn fold_complement(folds: &[Vec<usize>], fold: usize, n: usize) -> Vec<usize> {
    let mut in_fold = vec![false; n];
    for &i in &folds[fold] {
        in_fold[i] = true;
    }
    (0..n).filter(|&i| !in_fold[i]).collect()
}
