//! Dataset manifest: name → CSV path, column selection and expected shape.
//!
//! ```json
//! {
//!   "datasets": {
//!     "boston": { "path": "boston.csv", "rows": 506, "features": 13 },
//!     "naval": { "path": "naval.csv", "label_column": 16, "drop_columns": [17],
//!                "rows": 11934, "features": 16 }
//!   }
//! }
//! ```
//!
//! Relative paths resolve against the manifest's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_csv_with, ColumnSelection, Dataset};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_column: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub drop_columns: Vec<usize>,
    /// Expected `N`.
    pub rows: usize,
    /// Expected `Q`.
    pub features: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub datasets: BTreeMap<String, ManifestEntry>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: Manifest = serde_json::from_str(&text)?;
        manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(manifest)
    }

    pub fn from_entries(
        datasets: BTreeMap<String, ManifestEntry>,
        base_dir: impl Into<PathBuf>,
    ) -> Self {
        Manifest {
            datasets,
            base_dir: base_dir.into(),
        }
    }

    pub fn entry(&self, name: &str) -> Result<&ManifestEntry> {
        self.datasets
            .get(name)
            .ok_or_else(|| Error::invalid(format!("dataset {name:?} is not in the manifest")))
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.base_dir.join(&entry.path)
        }
    }

    /// Loads a dataset and verifies its `N` and `Q` against the manifest.
    pub fn load_dataset(&self, name: &str) -> Result<Dataset> {
        let entry = self.entry(name)?;
        let selection = ColumnSelection {
            label_column: entry.label_column,
            drop_columns: entry.drop_columns.clone(),
        };
        let ds = load_csv_with(self.resolve(entry), &selection)?;
        if (ds.len(), ds.q()) != (entry.rows, entry.features) {
            return Err(Error::DatasetShape {
                dataset: name.to_string(),
                expected: (entry.rows, entry.features),
                found: (ds.len(), ds.q()),
            });
        }
        let features = ds.features().to_vec();
        let labels = ds.labels().to_vec();
        Dataset::new(name, features, entry.features, labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loads_and_verifies_shape() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("d.csv"), "x1,x2,y\n1,2,3\n4,5,6\n").unwrap();
        std::fs::write(
            dir.path().join("manifest.json"),
            r#"{"datasets": {"good": {"path": "d.csv", "rows": 2, "features": 2},
                             "bad": {"path": "d.csv", "rows": 3, "features": 2}}}"#,
        )
        .unwrap();
        let m = Manifest::load(dir.path().join("manifest.json")).unwrap();
        let d = m.load_dataset("good").unwrap();
        assert_eq!((d.name(), d.len(), d.q()), ("good", 2, 2));
        assert!(matches!(
            m.load_dataset("bad"),
            Err(Error::DatasetShape { .. })
        ));
        assert!(m.load_dataset("missing").is_err());
    }
}
