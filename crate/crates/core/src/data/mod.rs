//! Datasets, standardization, split generation and the dropout-rate grid search.

mod csv_io;
mod grid;
mod manifest;
mod split;
mod toy;

pub use csv_io::{load_csv, load_csv_with, ColumnSelection};
pub use grid::{grid_search_dropout, GridSearchOutcome, ProtocolConfig, DROPOUT_GRID};
pub use manifest::{Manifest, ManifestEntry};
pub use split::{make_splits, DatasetSplit, SplitData, Standardizer};
pub use toy::{toy_function, toy_generate, toy_label, TOY_DEFAULT_N};

use crate::error::{Error, Result};

/// `N × Q` features (row-major) and `N` labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    name: String,
    features: Vec<f64>,
    q: usize,
    labels: Vec<f64>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        features: Vec<f64>,
        q: usize,
        labels: Vec<f64>,
    ) -> Result<Self> {
        if q == 0 {
            return Err(Error::invalid("dataset needs at least one feature"));
        }
        if features.len() != labels.len() * q {
            return Err(Error::DimensionMismatch {
                context: "Dataset rows",
                expected: labels.len() * q,
                found: features.len(),
            });
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!(
                "feature at row {}, column {}",
                i / q,
                i % q
            )));
        }
        if let Some(i) = labels.iter().position(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("label at row {i}")));
        }
        Ok(Dataset {
            name: name.into(),
            features,
            q,
            labels,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Number of examples `N`.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Feature dimension `Q`.
    pub fn q(&self) -> usize {
        self.q
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.q..(i + 1) * self.q]
    }

    pub fn label(&self, i: usize) -> f64 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// Rows `idx`, in order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(idx.len() * self.q);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            name: self.name.clone(),
            features,
            q: self.q,
            labels,
        }
    }
}

/// Mixes a base seed with tags (split index, grid point, ...) into an independent stream seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    tags.iter()
        .fold(splitmix(base), |acc, &t| splitmix(acc ^ splitmix(t)))
}
