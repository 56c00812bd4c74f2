//! Exact gradients of the expected log-likelihood and plain SGD training.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::moment_core::{dense_backward, dropout_backward, mp_gelu_backward, relu_backward};
use crate::network::{
    check_params, forward_trace, init_parameters, LayerSpec, ModelConfig, ParameterSet,
};
use crate::objective::loss_and_head_grad;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Toy regression setting: lr 0.1, 1000 epochs, batch 100.
    pub fn toy(seed: u64) -> Self {
        TrainConfig {
            learning_rate: 0.1,
            epochs: 1000,
            batch_size: 100,
            seed,
        }
    }

    /// UCI setting: lr 0.001, 500 epochs, batch 256.
    pub fn uci(seed: u64) -> Self {
        TrainConfig {
            learning_rate: 0.001,
            epochs: 500,
            batch_size: 256,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        Ok(())
    }
}

/// Mean negative expected log-likelihood over `batch` and its parameter gradient.
pub fn loss_and_gradients(
    config: &ModelConfig,
    params: &ParameterSet,
    batch: &[(&[f64], f64)],
) -> Result<(f64, ParameterSet)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    check_params(config, params)?;
    let mut grads = params.zeros_like();
    let mut total = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for &(x, y) in batch {
        if x.len() != config.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "training example",
                expected: config.input_dim(),
                found: x.len(),
            });
        }
        total += accumulate_example(config, params, x, y, scale, &mut grads)?;
    }
    let loss = total * scale;
    if !loss.is_finite() {
        return Err(Error::non_finite("batch loss"));
    }
    Ok((loss, grads))
}

fn accumulate_example(
    config: &ModelConfig,
    params: &ParameterSet,
    x: &[f64],
    y: f64,
    scale: f64,
    grads: &mut ParameterSet,
) -> Result<f64> {
    let trace = forward_trace(config, params, x)?;
    let head = trace.last().expect("trace holds the input");
    let (loss, mut upstream) = loss_and_head_grad(head, config.head, y)?;
    if !loss.is_finite() {
        return Err(Error::non_finite("example loss"));
    }
    let mut dense_idx = params.dense.len();
    for (idx, layer) in config.layers.iter().enumerate().rev() {
        let input = &trace[idx];
        upstream = match *layer {
            LayerSpec::Dense { .. } => {
                dense_idx -= 1;
                let p = &params.dense[dense_idx];
                let (g_in, g_param) = dense_backward(input, &p.weights, &upstream)?;
                let acc = &mut grads.dense[dense_idx];
                acc.weights += &g_param.weights * scale;
                acc.bias.axpy(scale, &g_param.bias, 1.0);
                if !(acc.weights.iter().all(|v| v.is_finite())
                    && acc.bias.iter().all(|v| v.is_finite()))
                {
                    return Err(Error::non_finite(format!(
                        "gradient of layer {idx} (dense)"
                    )));
                }
                g_in
            }
            LayerSpec::Dropout { rate } => dropout_backward(input, rate, &upstream)?,
            LayerSpec::MpGelu => mp_gelu_backward(input, &upstream)?,
            LayerSpec::Relu => relu_backward(input, &upstream)?,
        };
        if !upstream.is_finite() {
            return Err(Error::non_finite(format!(
                "gradient of layer {idx} ({})",
                layer.name()
            )));
        }
    }
    Ok(loss)
}

/// `w ← w − lr·g` for every parameter.
pub fn sgd_step(params: &mut ParameterSet, grads: &ParameterSet, lr: f64) {
    for (p, g) in params.dense.iter_mut().zip(&grads.dense) {
        p.weights -= &g.weights * lr;
        p.bias.axpy(-lr, &g.bias, 1.0);
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParameterSet,
    /// Mean per-example loss of each epoch.
    pub loss_trace: Vec<f64>,
}

/// Trains from the seeded initialization.
pub fn train(
    config: &ModelConfig,
    train_config: &TrainConfig,
    data: &Dataset,
) -> Result<TrainOutcome> {
    config.validate()?;
    let params = init_parameters(config, train_config.seed);
    train_from(config, params, train_config, data)
}

/// Seeded mini-batch SGD: one full permutation per epoch, last batch may be short.
pub fn train_from(
    config: &ModelConfig,
    mut params: ParameterSet,
    train_config: &TrainConfig,
    data: &Dataset,
) -> Result<TrainOutcome> {
    train_config.validate()?;
    check_params(config, &params)?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if data.q() != config.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "training features",
            expected: config.input_dim(),
            found: data.q(),
        });
    }
    // Stream distinct from the initializer's, which also derives from `seed`.
    let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed ^ 0x5DEE_CE66_D1CE_5EED);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut loss_trace = Vec::with_capacity(train_config.epochs);
    let mut batch: Vec<(&[f64], f64)> = Vec::with_capacity(train_config.batch_size);
    for _ in 0..train_config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(train_config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| (data.row(i), data.label(i))));
            let (loss, grads) = loss_and_gradients(config, &params, &batch)?;
            sgd_step(&mut params, &grads, train_config.learning_rate);
            epoch_loss += loss * chunk.len() as f64;
        }
        loss_trace.push(epoch_loss / data.len() as f64);
    }
    Ok(TrainOutcome { params, loss_trace })
}
