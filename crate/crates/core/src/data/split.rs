use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

/// Per-column feature statistics and label statistics, fitted on training rows only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub label_mean: f64,
    pub label_std: f64,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    // Constant columns keep their scale.
    let std = if std > 1e-12 * mean.abs().max(1.0) {
        std
    } else {
        1.0
    };
    (mean, std)
}

impl Standardizer {
    pub fn fit(ds: &Dataset, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("cannot standardize with no rows"));
        }
        let q = ds.q();
        let mut feature_mean = Vec::with_capacity(q);
        let mut feature_std = Vec::with_capacity(q);
        for c in 0..q {
            let (m, s) = mean_std(rows.iter().map(|&r| ds.row(r)[c]));
            feature_mean.push(m);
            feature_std.push(s);
        }
        let (label_mean, label_std) = mean_std(rows.iter().map(|&r| ds.label(r)));
        Ok(Standardizer {
            feature_mean,
            feature_std,
            label_mean,
            label_std,
        })
    }

    pub fn apply(&self, ds: &Dataset, rows: &[usize]) -> Dataset {
        let q = ds.q();
        let mut features = Vec::with_capacity(rows.len() * q);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            features.extend(
                ds.row(r)
                    .iter()
                    .enumerate()
                    .map(|(c, v)| (v - self.feature_mean[c]) / self.feature_std[c]),
            );
            labels.push(self.standardize_label(ds.label(r)));
        }
        Dataset::new(ds.name(), features, q, labels).expect("standardized data stays finite")
    }

    pub fn standardize_label(&self, y: f64) -> f64 {
        (y - self.label_mean) / self.label_std
    }

    pub fn destandardize_label(&self, z: f64) -> f64 {
        z * self.label_std + self.label_mean
    }
}

/// Disjoint train / validation / test row indices of one repeat.
///
/// The standardizer is fitted on `train` only; when `val` is non-empty it is
/// excluded from the statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub standardizer: Standardizer,
}

/// Standardized partitions of one split.
#[derive(Clone, Debug)]
pub struct SplitData {
    pub train: Dataset,
    pub val: Option<Dataset>,
    pub test: Dataset,
}

impl DatasetSplit {
    pub fn materialize(&self, ds: &Dataset) -> SplitData {
        SplitData {
            train: self.standardizer.apply(ds, &self.train),
            val: (!self.val.is_empty()).then(|| self.standardizer.apply(ds, &self.val)),
            test: self.standardizer.apply(ds, &self.test),
        }
    }
}

/// `repeats` random splits. Each repeat permutes the rows, takes the first
/// `round(test_frac·N)` as test, then `round(val_frac·(N - n_test))` of the
/// rest as validation. Test sets for a given seed do not depend on `val_frac`.
pub fn make_splits(
    ds: &Dataset,
    repeats: usize,
    test_frac: f64,
    val_frac: f64,
    seed: u64,
) -> Result<Vec<DatasetSplit>> {
    if !(0.0..1.0).contains(&test_frac) || !(0.0..1.0).contains(&val_frac) {
        return Err(Error::invalid("split fractions must lie in [0, 1)"));
    }
    if repeats == 0 {
        return Err(Error::invalid("need at least one repeat"));
    }
    let n = ds.len();
    let n_test = (test_frac * n as f64).round() as usize;
    let n_val = (val_frac * (n - n_test.min(n)) as f64).round() as usize;
    if n_test == 0 || n_test + n_val >= n {
        return Err(Error::invalid(format!(
            "dataset of {n} rows is too small for test fraction {test_frac} and validation fraction {val_frac}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut splits = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let test = perm[..n_test].to_vec();
        let val = perm[n_test..n_test + n_val].to_vec();
        let train = perm[n_test + n_val..].to_vec();
        let standardizer = Standardizer::fit(ds, &train)?;
        splits.push(DatasetSplit {
            train,
            val,
            test,
            standardizer,
        });
    }
    Ok(splits)
}
