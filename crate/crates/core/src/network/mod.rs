//! Layer sequences, parameters and the deterministic forward moment pass.

mod model_file;

pub use model_file::{load_model, save_model, ModelFile, MODEL_FORMAT};

use nalgebra::{DMatrix, DVector};
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moment_core::{
    check_rate, dense_propagate, dropout_propagate, lift_deterministic, mp_gelu_propagate,
    relu_propagate, CovarianceMode, MomentVector,
};

pub const DEFAULT_HIDDEN_WIDTH: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        #[serde(rename = "in")]
        input: usize,
        #[serde(rename = "out")]
        output: usize,
    },
    Dropout {
        rate: f64,
    },
    MpGelu,
    Relu,
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::MpGelu => "mp_gelu",
            LayerSpec::Relu => "relu",
        }
    }
}

/// Output head: `(h₁, h₂)` with `p(y|h) = N(y | h₁, exp(h₂))`, or a single mean unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Heteroscedastic2,
    Homoscedastic1,
}

impl HeadKind {
    pub fn output_dim(self) -> usize {
        match self {
            HeadKind::Heteroscedastic2 => 2,
            HeadKind::Homoscedastic1 => 1,
        }
    }

    pub fn from_outputs(units: usize) -> Result<Self> {
        match units {
            2 => Ok(HeadKind::Heteroscedastic2),
            1 => Ok(HeadKind::Homoscedastic1),
            other => Err(Error::invalid(format!(
                "unsupported head with {other} output units"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    MpGelu,
    Relu,
}

impl Architecture {
    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::MpGelu => "mp_gelu",
            Architecture::Relu => "relu",
        }
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mp_gelu" | "mp-gelu" | "mpgelu" => Ok(Architecture::MpGelu),
            "relu" => Ok(Architecture::Relu),
            other => Err(Error::invalid(format!("unknown architecture {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: Vec<LayerSpec>,
    pub covariance_mode: CovarianceMode,
    pub head: HeadKind,
    pub hidden_width: usize,
}

impl ModelConfig {
    /// Checks that dimensions chain, rates are valid and the head matches the last layer.
    pub fn validate(&self) -> Result<()> {
        let mut current: Option<usize> = None;
        let mut last_dense_out = None;
        for (idx, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Dense { input, output } => {
                    if input == 0 || output == 0 {
                        return Err(Error::invalid(format!(
                            "layer {idx}: dense dimensions must be positive"
                        )));
                    }
                    if let Some(cur) = current {
                        if cur != input {
                            return Err(Error::DimensionMismatch {
                                context: "ModelConfig layer chain",
                                expected: cur,
                                found: input,
                            });
                        }
                    }
                    current = Some(output);
                    last_dense_out = Some((idx, output));
                }
                LayerSpec::Dropout { rate } => check_rate(rate)?,
                LayerSpec::MpGelu | LayerSpec::Relu => {}
            }
        }
        let (idx, out) =
            last_dense_out.ok_or_else(|| Error::invalid("model has no dense layer"))?;
        if idx + 1 != self.layers.len() {
            return Err(Error::invalid("the final layer must be dense"));
        }
        if out != self.head.output_dim() {
            return Err(Error::DimensionMismatch {
                context: "ModelConfig head",
                expected: self.head.output_dim(),
                found: out,
            });
        }
        Ok(())
    }

    /// Input dimension `Q` (the first dense layer's fan-in).
    pub fn input_dim(&self) -> usize {
        self.layers
            .iter()
            .find_map(|l| match l {
                LayerSpec::Dense { input, .. } => Some(*input),
                _ => None,
            })
            .unwrap_or(0)
    }

    pub fn architecture(&self) -> Option<Architecture> {
        if self.layers.contains(&LayerSpec::MpGelu) {
            Some(Architecture::MpGelu)
        } else if self.layers.contains(&LayerSpec::Relu) {
            Some(Architecture::Relu)
        } else {
            None
        }
    }

    pub fn dense_shapes(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Dense { input, output } => Some((*input, *output)),
                _ => None,
            })
            .collect()
    }

    /// Replaces the rate of every dropout layer.
    pub fn with_dropout_rate(mut self, rate: f64) -> Result<Self> {
        check_rate(rate)?;
        for layer in &mut self.layers {
            if let LayerSpec::Dropout { rate: r } = layer {
                *r = rate;
            }
        }
        Ok(self)
    }

    pub fn with_covariance_mode(mut self, mode: CovarianceMode) -> Self {
        self.covariance_mode = mode;
        self
    }
}

fn check_build_args(q: usize, width: usize, rate: f64) -> Result<()> {
    if q == 0 {
        return Err(Error::invalid("input dimension must be at least 1"));
    }
    if width == 0 {
        return Err(Error::invalid("hidden width must be at least 1"));
    }
    check_rate(rate)
}

/// `Dropout → Dense → MP-GELU → Dense → MP-GELU → Dense`.
pub fn build_mp_gelu_model(
    q: usize,
    width: usize,
    dropout_rate: f64,
    mode: CovarianceMode,
    head: HeadKind,
) -> Result<ModelConfig> {
    check_build_args(q, width, dropout_rate)?;
    let layers = vec![
        LayerSpec::Dropout { rate: dropout_rate },
        LayerSpec::Dense {
            input: q,
            output: width,
        },
        LayerSpec::MpGelu,
        LayerSpec::Dense {
            input: width,
            output: width,
        },
        LayerSpec::MpGelu,
        LayerSpec::Dense {
            input: width,
            output: head.output_dim(),
        },
    ];
    Ok(ModelConfig {
        layers,
        covariance_mode: mode,
        head,
        hidden_width: width,
    })
}

/// `Dropout → Dense → ReLU → Dropout → Dense → ReLU → Dropout → Dense`, one shared rate.
pub fn build_relu_model(
    q: usize,
    width: usize,
    dropout_rate: f64,
    mode: CovarianceMode,
    head: HeadKind,
) -> Result<ModelConfig> {
    check_build_args(q, width, dropout_rate)?;
    let drop = LayerSpec::Dropout { rate: dropout_rate };
    let layers = vec![
        drop,
        LayerSpec::Dense {
            input: q,
            output: width,
        },
        LayerSpec::Relu,
        drop,
        LayerSpec::Dense {
            input: width,
            output: width,
        },
        LayerSpec::Relu,
        drop,
        LayerSpec::Dense {
            input: width,
            output: head.output_dim(),
        },
    ];
    Ok(ModelConfig {
        layers,
        covariance_mode: mode,
        head,
        hidden_width: width,
    })
}

pub fn build_model(
    arch: Architecture,
    q: usize,
    width: usize,
    dropout_rate: f64,
    mode: CovarianceMode,
    head: HeadKind,
) -> Result<ModelConfig> {
    match arch {
        Architecture::MpGelu => build_mp_gelu_model(q, width, dropout_rate, mode, head),
        Architecture::Relu => build_relu_model(q, width, dropout_rate, mode, head),
    }
}

/// Weights (`out × in`) and bias of one dense layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl DenseParams {
    pub fn zeros(input: usize, output: usize) -> Self {
        DenseParams {
            weights: DMatrix::zeros(output, input),
            bias: DVector::zeros(output),
        }
    }
}

/// Parameters of every dense layer, in layer order. Gradients use the same type.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet {
    pub dense: Vec<DenseParams>,
}

impl ParameterSet {
    pub fn zeros(config: &ModelConfig) -> Self {
        ParameterSet {
            dense: config
                .dense_shapes()
                .into_iter()
                .map(|(i, o)| DenseParams::zeros(i, o))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ParameterSet {
            dense: self
                .dense
                .iter()
                .map(|d| DenseParams::zeros(d.weights.ncols(), d.weights.nrows()))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.dense
            .iter()
            .map(|d| d.weights.len() + d.bias.len())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Visits every scalar parameter: weights row-major, then bias, per layer.
    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.dense.iter().flat_map(|d| {
            let (rows, cols) = d.weights.shape();
            (0..rows)
                .flat_map(move |r| (0..cols).map(move |c| d.weights[(r, c)]))
                .chain(d.bias.iter().copied())
        })
    }

    /// Mutable access to the `index`-th scalar in [`ParameterSet::iter`] order.
    pub fn get_mut(&mut self, mut index: usize) -> Option<&mut f64> {
        for d in &mut self.dense {
            let (rows, cols) = d.weights.shape();
            if index < rows * cols {
                return Some(&mut d.weights[(index / cols, index % cols)]);
            }
            index -= rows * cols;
            if index < rows {
                return Some(&mut d.bias[index]);
            }
            index -= rows;
        }
        None
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(f64::is_finite)
    }

    fn check_against(&self, config: &ModelConfig) -> Result<()> {
        let shapes = config.dense_shapes();
        if shapes.len() != self.dense.len() {
            return Err(Error::DimensionMismatch {
                context: "ParameterSet dense layer count",
                expected: shapes.len(),
                found: self.dense.len(),
            });
        }
        for ((input, output), d) in shapes.into_iter().zip(&self.dense) {
            if d.weights.shape() != (output, input) || d.bias.len() != output {
                return Err(Error::DimensionMismatch {
                    context: "ParameterSet dense shape",
                    expected: output * input,
                    found: d.weights.len(),
                });
            }
        }
        Ok(())
    }
}

/// Glorot-uniform weights `U(±√(6/(fan_in+fan_out)))`, zero biases, seeded.
pub fn init_parameters(config: &ModelConfig, seed: u64) -> ParameterSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dense = config
        .dense_shapes()
        .into_iter()
        .map(|(input, output)| {
            let limit = (6.0 / (input + output) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
            let mut weights = DMatrix::zeros(output, input);
            for r in 0..output {
                for c in 0..input {
                    weights[(r, c)] = dist.sample(&mut rng);
                }
            }
            DenseParams {
                weights,
                bias: DVector::zeros(output),
            }
        })
        .collect();
    ParameterSet { dense }
}

/// Runs one layer's moment propagation. `dense_idx` advances past dense layers.
pub(crate) fn propagate_layer(
    layer: &LayerSpec,
    params: &ParameterSet,
    dense_idx: &mut usize,
    input: &MomentVector,
) -> Result<MomentVector> {
    match *layer {
        LayerSpec::Dense { .. } => {
            let p = &params.dense[*dense_idx];
            *dense_idx += 1;
            dense_propagate(input, &p.weights, &p.bias)
        }
        LayerSpec::Dropout { rate } => dropout_propagate(input, rate),
        LayerSpec::MpGelu => mp_gelu_propagate(input),
        LayerSpec::Relu => relu_propagate(input),
    }
}

fn check_input(config: &ModelConfig, params: &ParameterSet, x: &[f64]) -> Result<()> {
    config.validate()?;
    params.check_against(config)?;
    if x.len() != config.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "forward input",
            expected: config.input_dim(),
            found: x.len(),
        });
    }
    Ok(())
}

/// Output-head moments for a deterministic input `x`.
pub fn forward(config: &ModelConfig, params: &ParameterSet, x: &[f64]) -> Result<MomentVector> {
    check_input(config, params, x)?;
    forward_unchecked(config, params, x)
}

pub(crate) fn forward_unchecked(
    config: &ModelConfig,
    params: &ParameterSet,
    x: &[f64],
) -> Result<MomentVector> {
    let mut h = lift_deterministic(x, config.covariance_mode)?;
    let mut dense_idx = 0;
    for layer in &config.layers {
        h = propagate_layer(layer, params, &mut dense_idx, &h)?;
    }
    Ok(h)
}

/// Forward pass that keeps every layer input; the last element is the head.
pub(crate) fn forward_trace(
    config: &ModelConfig,
    params: &ParameterSet,
    x: &[f64],
) -> Result<Vec<MomentVector>> {
    let mut trace = Vec::with_capacity(config.layers.len() + 1);
    trace.push(lift_deterministic(x, config.covariance_mode)?);
    let mut dense_idx = 0;
    for (idx, layer) in config.layers.iter().enumerate() {
        let next =
            propagate_layer(layer, params, &mut dense_idx, &trace[idx]).map_err(|e| match e {
                Error::NonFinite { context } => Error::NonFinite {
                    context: format!("layer {idx} ({}): {context}", layer.name()),
                },
                other => other,
            })?;
        trace.push(next);
    }
    Ok(trace)
}

/// A configuration together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParameterSet,
}

impl Model {
    pub fn new(config: ModelConfig, params: ParameterSet) -> Result<Self> {
        config.validate()?;
        params.check_against(&config)?;
        Ok(Model { config, params })
    }

    pub fn initialized(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_parameters(&config, seed);
        Ok(Model { config, params })
    }

    pub fn forward(&self, x: &[f64]) -> Result<MomentVector> {
        if x.len() != self.config.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "forward input",
                expected: self.config.input_dim(),
                found: x.len(),
            });
        }
        forward_unchecked(&self.config, &self.params, x)
    }
}

pub(crate) fn check_params(config: &ModelConfig, params: &ParameterSet) -> Result<()> {
    config.validate()?;
    params.check_against(config)
}
