use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{Error, Result};

/// Stratified draw of `n` indices, returned in ascending order.
///
/// Each class gets `n / M`; the remainder, and any quota a small class
/// cannot fill, goes one sample at a time to classes in index order that
/// still have unused samples.
pub fn subset_indices(labels: &[usize], classes: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n > labels.len() {
        return Err(Error::Config(format!(
            "subset of {n} from {} samples",
            labels.len()
        )));
    }
    if classes == 0 {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        pools[y].push(i);
    }
    for p in &mut pools {
        p.shuffle(&mut rng);
    }
    let mut take: Vec<usize> = pools.iter().map(|p| p.len().min(n / classes)).collect();
    let mut left = n - take.iter().sum::<usize>();
    while left > 0 {
        for (m, p) in pools.iter().enumerate() {
            if left > 0 && take[m] < p.len() {
                take[m] += 1;
                left -= 1;
            }
        }
    }
    let mut out: Vec<usize> = pools
        .iter()
        .zip(&take)
        .flat_map(|(p, &t)| p[..t].iter().copied())
        .collect();
    out.sort_unstable();
    Ok(out)
}

pub fn subset(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n == ds.len() {
        return Ok(ds.clone());
    }
    ds.select(&subset_indices(&ds.labels, ds.classes, n, seed)?)
}

/// Stratified holdout: `n_test` samples go to the second dataset.
pub fn split(ds: &Dataset, n_test: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let test = subset_indices(&ds.labels, ds.classes, n_test, seed)?;
    let mut in_test = vec![false; ds.len()];
    for &i in &test {
        in_test[i] = true;
    }
    let train: Vec<usize> = (0..ds.len()).filter(|&i| !in_test[i]).collect();
    let mut tr = ds.select(&train)?;
    let mut te = ds.select(&test)?;
    tr.split = "train".into();
    te.split = "test".into();
    Ok((tr, te))
}
