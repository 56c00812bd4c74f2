//! Flat JSON model documents.
//!
//! ```json
//! {
//!   "format": "mpgelu-model",
//!   "version": 1,
//!   "covariance_mode": "full",
//!   "head": "heteroscedastic2",
//!   "hidden_width": 20,
//!   "layers": [{"type": "dropout", "rate": 0.01}, {"type": "dense", "in": 13, "out": 20}, ...],
//!   "dense": [{"rows": 20, "cols": 13, "weights": [...], "bias": [...]}, ...]
//! }
//! ```
//!
//! `weights` is row-major `rows × cols` (output units × input units).

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{DenseParams, HeadKind, LayerSpec, Model, ModelConfig, ParameterSet};
use crate::error::{Error, Result};
use crate::moment_core::CovarianceMode;

pub const MODEL_FORMAT: &str = "mpgelu-model";
const MODEL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseRecord {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub covariance_mode: CovarianceMode,
    pub head: HeadKind,
    pub hidden_width: usize,
    pub layers: Vec<LayerSpec>,
    pub dense: Vec<DenseRecord>,
}

impl From<&Model> for ModelFile {
    fn from(model: &Model) -> Self {
        let dense = model
            .params
            .dense
            .iter()
            .map(|d| {
                let (rows, cols) = d.weights.shape();
                let mut weights = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for c in 0..cols {
                        weights.push(d.weights[(r, c)]);
                    }
                }
                DenseRecord {
                    rows,
                    cols,
                    weights,
                    bias: d.bias.iter().copied().collect(),
                }
            })
            .collect();
        ModelFile {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            covariance_mode: model.config.covariance_mode,
            head: model.config.head,
            hidden_width: model.config.hidden_width,
            layers: model.config.layers.clone(),
            dense,
        }
    }
}

impl TryFrom<ModelFile> for Model {
    type Error = Error;

    fn try_from(file: ModelFile) -> Result<Model> {
        if file.format != MODEL_FORMAT {
            return Err(Error::invalid(format!(
                "unexpected model format {:?}",
                file.format
            )));
        }
        if file.version != MODEL_VERSION {
            return Err(Error::invalid(format!(
                "unsupported model version {}",
                file.version
            )));
        }
        let config = ModelConfig {
            layers: file.layers,
            covariance_mode: file.covariance_mode,
            head: file.head,
            hidden_width: file.hidden_width,
        };
        let mut dense = Vec::with_capacity(file.dense.len());
        for rec in file.dense {
            if rec.weights.len() != rec.rows * rec.cols || rec.bias.len() != rec.rows {
                return Err(Error::DimensionMismatch {
                    context: "model file dense record",
                    expected: rec.rows * rec.cols,
                    found: rec.weights.len(),
                });
            }
            if !rec.weights.iter().chain(&rec.bias).all(|v| v.is_finite()) {
                return Err(Error::non_finite("model file parameters"));
            }
            dense.push(DenseParams {
                weights: DMatrix::from_row_slice(rec.rows, rec.cols, &rec.weights),
                bias: DVector::from_vec(rec.bias),
            });
        }
        Model::new(config, ParameterSet { dense })
    }
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(&ModelFile::from(model))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ModelFile = serde_json::from_str(&text)?;
    Model::try_from(file)
}
