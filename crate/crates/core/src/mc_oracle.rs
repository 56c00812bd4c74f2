//! Monte-Carlo reference for the analytic moment formulas.
//!
//! Inputs are sampled from the Gaussian described by a [`MomentVector`], pushed
//! through the sampling semantics of a layer (or a whole network), and
//! summarized by empirical moments with standard errors. Samples are drawn in
//! fixed-size chunks, each with its own RNG stream derived from the seed, so the
//! result does not depend on the number of worker threads.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::data::derive_seed;
use crate::error::{Error, Result};
use crate::moment_core::{mp_gelu_rates, Covariance, MomentVector, VARIANCE_CLAMP};
use crate::network::{
    check_params, forward_trace, DenseParams, LayerSpec, ModelConfig, ParameterSet,
};

const CHUNK: usize = 4096;
/// Smallest sample count accepted by the oracle entry points.
pub const MIN_SAMPLES: usize = 1000;

/// Empirical moments of an output random vector.
#[derive(Clone, Debug, PartialEq)]
pub struct McEstimate {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub standard_error_mean: DVector<f64>,
    /// Standard error of each covariance entry.
    pub standard_error_cov: DMatrix<f64>,
    pub samples: usize,
}

/// A layer together with whatever parameters its sampling semantics need.
#[derive(Clone, Debug, PartialEq)]
pub enum OracleLayer {
    Dense(DenseParams),
    Dropout(f64),
    MpGelu,
    Relu,
}

impl OracleLayer {
    pub fn from_spec(spec: &LayerSpec, dense: Option<&DenseParams>) -> Result<Self> {
        Ok(match *spec {
            LayerSpec::Dense { .. } => OracleLayer::Dense(
                dense
                    .cloned()
                    .ok_or_else(|| Error::invalid("dense oracle layer needs parameters"))?,
            ),
            LayerSpec::Dropout { rate } => OracleLayer::Dropout(rate),
            LayerSpec::MpGelu => OracleLayer::MpGelu,
            LayerSpec::Relu => OracleLayer::Relu,
        })
    }

    fn output_dim(&self, input_dim: usize) -> usize {
        match self {
            OracleLayer::Dense(p) => p.weights.nrows(),
            _ => input_dim,
        }
    }
}

/// Draws `N(mean, cov)` samples through a PSD square root of the covariance.
#[derive(Clone, Debug)]
pub struct GaussianSampler {
    mean: DVector<f64>,
    root: Root,
}

#[derive(Clone, Debug)]
enum Root {
    Diagonal(DVector<f64>),
    Full(DMatrix<f64>),
}

impl GaussianSampler {
    pub fn new(input: &MomentVector) -> Result<Self> {
        let root = match input.cov() {
            Covariance::Diagonal(v) => Root::Diagonal(v.map(f64::sqrt)),
            Covariance::Full(c) => {
                let eig = SymmetricEigen::new(c.clone());
                let scale = eig.eigenvalues.amax().max(1.0);
                let mut roots = DVector::zeros(eig.eigenvalues.len());
                for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
                    if lambda < -VARIANCE_CLAMP * scale {
                        return Err(Error::invalid(format!(
                            "covariance is not positive semi-definite (eigenvalue {lambda:e})"
                        )));
                    }
                    roots[k] = lambda.max(0.0).sqrt();
                }
                Root::Full(&eig.eigenvectors * DMatrix::from_diagonal(&roots))
            }
        };
        Ok(GaussianSampler {
            mean: input.mean().clone(),
            root,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sample_into<R: Rng>(&self, rng: &mut R, z: &mut [f64], out: &mut [f64]) {
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        match &self.root {
            Root::Diagonal(s) => {
                for i in 0..out.len() {
                    out[i] = self.mean[i] + s[i] * z[i];
                }
            }
            Root::Full(l) => {
                for i in 0..out.len() {
                    let mut acc = self.mean[i];
                    for (k, zk) in z.iter().enumerate() {
                        acc += l[(i, k)] * zk;
                    }
                    out[i] = acc;
                }
            }
        }
    }
}

/// Applies one layer's sampling semantics in place. `keep` holds the gate keep
/// probabilities for dropout and MP-GELU layers.
fn apply_layer<R: Rng>(layer: &OracleLayer, keep: &[f64], rng: &mut R, h: &mut Vec<f64>) {
    match layer {
        OracleLayer::Dense(p) => {
            let out: Vec<f64> = (0..p.weights.nrows())
                .map(|k| {
                    let mut acc = p.bias[k];
                    for (j, hj) in h.iter().enumerate() {
                        acc += p.weights[(k, j)] * hj;
                    }
                    acc
                })
                .collect();
            *h = out;
        }
        OracleLayer::Dropout(_) | OracleLayer::MpGelu => {
            for (hi, &q) in h.iter_mut().zip(keep) {
                if rng.random::<f64>() >= q {
                    *hi = 0.0;
                }
            }
        }
        OracleLayer::Relu => {
            for hi in h.iter_mut() {
                *hi = hi.max(0.0);
            }
        }
    }
}

/// Streams samples through `draw` in parallel chunks and summarizes them.
fn estimate<F>(dim: usize, samples: usize, seed: u64, draw: F) -> Result<McEstimate>
where
    F: Fn(&mut ChaCha8Rng, &mut Vec<f64>) + Sync,
{
    if samples < 2 {
        return Err(Error::invalid("need at least two samples"));
    }
    let chunks = samples.div_ceil(CHUNK);
    let values: Vec<Vec<f64>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[c as u64]));
            let n = CHUNK.min(samples - c * CHUNK);
            let mut block = Vec::with_capacity(n * dim);
            let mut h = Vec::with_capacity(dim);
            for _ in 0..n {
                draw(&mut rng, &mut h);
                block.extend_from_slice(&h);
            }
            block
        })
        .collect();
    let rows = || values.iter().flat_map(|b| b.chunks_exact(dim));

    let n = samples as f64;
    let mut mean = DVector::zeros(dim);
    for r in rows() {
        for i in 0..dim {
            mean[i] += r[i];
        }
    }
    mean /= n;

    // Covariance entries are means of centered products; their standard errors
    // come from the spread of those products.
    let mut sum = DMatrix::<f64>::zeros(dim, dim);
    let mut sum_sq = DMatrix::<f64>::zeros(dim, dim);
    let mut d = vec![0.0; dim];
    for r in rows() {
        for i in 0..dim {
            d[i] = r[i] - mean[i];
        }
        for i in 0..dim {
            for j in i..dim {
                let p = d[i] * d[j];
                sum[(i, j)] += p;
                sum_sq[(i, j)] += p * p;
            }
        }
    }
    let mut cov = DMatrix::zeros(dim, dim);
    let mut se_cov = DMatrix::zeros(dim, dim);
    for i in 0..dim {
        for j in i..dim {
            let m = sum[(i, j)] / n;
            let spread = (sum_sq[(i, j)] / n - m * m).max(0.0);
            let c = sum[(i, j)] / (n - 1.0);
            cov[(i, j)] = c;
            cov[(j, i)] = c;
            let se = (spread / (n - 1.0)).sqrt();
            se_cov[(i, j)] = se;
            se_cov[(j, i)] = se;
        }
    }
    let standard_error_mean = DVector::from_fn(dim, |i, _| (cov[(i, i)] / n).sqrt());
    Ok(McEstimate {
        mean,
        cov,
        standard_error_mean,
        standard_error_cov: se_cov,
        samples,
    })
}

fn check_samples(samples: usize) -> Result<()> {
    if samples < MIN_SAMPLES {
        return Err(Error::invalid(format!(
            "oracle needs at least {MIN_SAMPLES} samples, got {samples}"
        )));
    }
    Ok(())
}

/// Empirical output moments of `layer` applied to `h ~ N(input)`.
///
/// MP-GELU masks use rates computed once from the analytic input moments, so
/// the gate is independent of the realized `h`.
pub fn mc_layer_moments(
    layer: &OracleLayer,
    input: &MomentVector,
    samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    check_samples(samples)?;
    let sampler = GaussianSampler::new(input)?;
    let n_in = input.dim();
    if let OracleLayer::Dense(p) = layer {
        if p.weights.ncols() != n_in || p.bias.len() != p.weights.nrows() {
            return Err(Error::DimensionMismatch {
                context: "oracle dense layer",
                expected: n_in,
                found: p.weights.ncols(),
            });
        }
    }
    let keep = match layer {
        OracleLayer::Dropout(rate) => {
            crate::moment_core::check_rate(*rate)?;
            vec![1.0 - rate; n_in]
        }
        OracleLayer::MpGelu => mp_gelu_rates(input)?.keep_rates().to_vec(),
        _ => Vec::new(),
    };
    estimate(layer.output_dim(n_in), samples, seed, |rng, h| {
        let mut z = vec![0.0; n_in];
        h.resize(n_in, 0.0);
        sampler.sample_into(rng, &mut z, h);
        apply_layer(layer, &keep, rng, h);
    })
}

/// Empirical head moments of a whole network for the deterministic input `x`:
/// every dropout layer draws a fresh mask, MP-GELU layers gate with the rates
/// of the analytic forward pass, ReLU layers rectify.
pub fn mc_network_moments(
    config: &ModelConfig,
    params: &ParameterSet,
    x: &[f64],
    samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    check_samples(samples)?;
    check_params(config, params)?;
    let trace = forward_trace(config, params, x)?;
    let mut dense_idx = 0;
    let mut layers = Vec::with_capacity(config.layers.len());
    for (idx, spec) in config.layers.iter().enumerate() {
        let dense = match spec {
            LayerSpec::Dense { .. } => {
                dense_idx += 1;
                Some(&params.dense[dense_idx - 1])
            }
            _ => None,
        };
        let layer = OracleLayer::from_spec(spec, dense)?;
        let keep = match spec {
            LayerSpec::Dropout { rate } => vec![1.0 - rate; trace[idx].dim()],
            LayerSpec::MpGelu => mp_gelu_rates(&trace[idx])?.keep_rates().to_vec(),
            _ => Vec::new(),
        };
        layers.push((layer, keep));
    }
    let out_dim = config.head.output_dim();
    estimate(out_dim, samples, seed, |rng, h| {
        h.clear();
        h.extend_from_slice(x);
        for (layer, keep) in &layers {
            apply_layer(layer, keep, rng, h);
        }
    })
}

/// Monte-Carlo estimate of `E[log N(y | h₁, e^{h₂})]` for `h ~ N(head)`, with its standard error.
pub fn mc_expected_ll(
    head: &MomentVector,
    y: f64,
    samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if head.dim() != 2 {
        return Err(Error::DimensionMismatch {
            context: "mc_expected_ll head",
            expected: 2,
            found: head.dim(),
        });
    }
    let sampler = GaussianSampler::new(head)?;
    let est = estimate(1, samples, seed, |rng, out| {
        let mut z = [0.0; 2];
        let mut h = [0.0; 2];
        sampler.sample_into(rng, &mut z, &mut h);
        let r = y - h[0];
        out.clear();
        out.push(-0.5 * (std::f64::consts::TAU.ln() + h[1] + r * r * (-h[1]).exp()));
    })?;
    Ok((est.mean[0], est.standard_error_mean[0]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_identity_reproduces_input() {
        let input = MomentVector::full(vec![0.5, -1.0], vec![1.0, 0.3, 0.3, 2.0]).unwrap();
        let layer = OracleLayer::Dense(DenseParams {
            weights: DMatrix::identity(2, 2),
            bias: DVector::zeros(2),
        });
        let est = mc_layer_moments(&layer, &input, 100_000, 3).unwrap();
        for i in 0..2 {
            assert!((est.mean[i] - input.mean()[i]).abs() < 4.0 * est.standard_error_mean[i]);
            for j in 0..2 {
                let want = input.cov().entry(i, j);
                assert!((est.cov[(i, j)] - want).abs() < 4.0 * est.standard_error_cov[(i, j)]);
            }
        }
    }

    #[test]
    fn relu_at_standard_normal() {
        let input = MomentVector::diagonal(vec![0.0], vec![1.0]).unwrap();
        let est = mc_layer_moments(&OracleLayer::Relu, &input, 200_000, 1).unwrap();
        assert!((est.mean[0] - 0.398_942_280_4).abs() < 4.0 * est.standard_error_mean[0]);
    }

    #[test]
    fn degenerate_head_gives_exact_log_density() {
        let head = MomentVector::diagonal(vec![0.3, -0.4], vec![0.0, 0.0]).unwrap();
        let (est, se) = mc_expected_ll(&head, 1.0, 1000, 0).unwrap();
        let want = -0.5 * (std::f64::consts::TAU.ln() - 0.4 + 0.49 * 0.4f64.exp());
        assert!((est - want).abs() < 1e-12);
        assert!(se < 1e-12);
    }

    #[test]
    fn estimates_do_not_depend_on_thread_count() {
        let input = MomentVector::diagonal(vec![0.1, 0.2], vec![1.0, 0.5]).unwrap();
        let a = mc_layer_moments(&OracleLayer::MpGelu, &input, 10_000, 5).unwrap();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(3)
            .build()
            .unwrap();
        let b = pool
            .install(|| mc_layer_moments(&OracleLayer::MpGelu, &input, 10_000, 5))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_inputs() {
        let input = MomentVector::diagonal(vec![0.0], vec![1.0]).unwrap();
        assert!(mc_layer_moments(&OracleLayer::Relu, &input, 10, 0).is_err());
        let bad = MomentVector::full(vec![0.0, 0.0], vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        assert!(GaussianSampler::new(&bad).is_err());
    }
}
