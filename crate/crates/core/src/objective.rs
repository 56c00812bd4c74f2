//! Closed-form expected log-likelihood, predictive moments and metrics.

use std::f64::consts::PI;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::moment_core::{Covariance, MomentGrad, MomentVector};
use crate::network::{forward, HeadKind, ModelConfig, ParameterSet};

/// Floor applied wherever a variance is inverted or logged.
pub const VARIANCE_FLOOR: f64 = 1e-12;

fn ln_2pi() -> f64 {
    (2.0 * PI).ln()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictiveMoments {
    pub mean: f64,
    pub variance: f64,
}

fn check_head(head: &MomentVector, units: usize) -> Result<()> {
    if head.dim() != units {
        return Err(Error::DimensionMismatch {
            context: "output head",
            expected: units,
            found: head.dim(),
        });
    }
    Ok(())
}

/// Symmetric average of the two stored cross-covariance entries; zero in diagonal mode.
fn cross_cov(cov: &Covariance) -> f64 {
    match cov {
        Covariance::Full(c) => 0.5 * (c[(0, 1)] + c[(1, 0)]),
        Covariance::Diagonal(_) => 0.0,
    }
}

/// `E_{h ~ N(E[h], Σ)}[log N(y | h₁, exp(h₂))]` for a two-unit head.
///
/// Equals `-½ [log 2π + E[h₂] + (Σ₁₁ + (E[h₁] - Σ₁₂ - y)²) / exp(E[h₂] - Σ₂₂/2)]`.
pub fn expected_log_likelihood(head: &MomentVector, y: f64) -> Result<f64> {
    check_head(head, 2)?;
    let (m1, m2) = (head.mean()[0], head.mean()[1]);
    let s11 = head.variance(0);
    let s22 = head.variance(1);
    let s12 = cross_cov(head.cov());
    let d = m1 - s12 - y;
    let value = -0.5 * (ln_2pi() + m2 + (s11 + d * d) * (-(m2 - 0.5 * s22)).exp());
    if !value.is_finite() {
        return Err(Error::non_finite("expected log-likelihood"));
    }
    Ok(value)
}

/// Gaussian log-density with the head's epistemic variance only.
pub fn expected_log_likelihood_1out(head: &MomentVector, y: f64) -> Result<f64> {
    check_head(head, 1)?;
    let var = head.variance(0) + VARIANCE_FLOOR;
    let d = y - head.mean()[0];
    let value = -0.5 * (ln_2pi() + var.ln() + d * d / var);
    if !value.is_finite() {
        return Err(Error::non_finite("one-output log-likelihood"));
    }
    Ok(value)
}

pub fn log_likelihood(head: &MomentVector, kind: HeadKind, y: f64) -> Result<f64> {
    match kind {
        HeadKind::Heteroscedastic2 => expected_log_likelihood(head, y),
        HeadKind::Homoscedastic1 => expected_log_likelihood_1out(head, y),
    }
}

/// Negative log-likelihood for one example and its gradient with respect to the head moments.
pub(crate) fn loss_and_head_grad(
    head: &MomentVector,
    kind: HeadKind,
    y: f64,
) -> Result<(f64, MomentGrad)> {
    let ll = log_likelihood(head, kind, y)?;
    let mut grad = MomentGrad::zeros_like(head);
    match kind {
        HeadKind::Heteroscedastic2 => {
            let (m1, m2) = (head.mean()[0], head.mean()[1]);
            let s11 = head.variance(0);
            let s22 = head.variance(1);
            let s12 = cross_cov(head.cov());
            let d = m1 - s12 - y;
            let e = (-(m2 - 0.5 * s22)).exp();
            let t = (s11 + d * d) * e;
            grad.mean[0] = e * d;
            grad.mean[1] = 0.5 * (1.0 - t);
            match &mut grad.cov {
                Covariance::Full(g) => {
                    g[(0, 0)] = 0.5 * e;
                    g[(1, 1)] = 0.25 * t;
                    g[(0, 1)] = -0.5 * e * d;
                    g[(1, 0)] = -0.5 * e * d;
                }
                Covariance::Diagonal(g) => {
                    g[0] = 0.5 * e;
                    g[1] = 0.25 * t;
                }
            }
        }
        HeadKind::Homoscedastic1 => {
            let var = head.variance(0) + VARIANCE_FLOOR;
            let d = head.mean()[0] - y;
            grad.mean[0] = d / var;
            let gv = 0.5 * (1.0 / var - d * d / (var * var));
            match &mut grad.cov {
                Covariance::Full(g) => g[(0, 0)] = gv,
                Covariance::Diagonal(g) => g[0] = gv,
            }
        }
    }
    Ok((-ll, grad))
}

/// Moment-matched Gaussian predictive distribution for `y`.
pub fn predictive_moments(head: &MomentVector, kind: HeadKind) -> Result<PredictiveMoments> {
    check_head(head, kind.output_dim())?;
    let mean = head.mean()[0];
    let variance = match kind {
        HeadKind::Heteroscedastic2 => {
            head.variance(0) + aleatoric_variance(head.mean()[1], head.variance(1))
        }
        HeadKind::Homoscedastic1 => head.variance(0) + VARIANCE_FLOOR,
    };
    Ok(PredictiveMoments {
        mean,
        variance: variance.max(VARIANCE_FLOOR),
    })
}

/// `E[exp(h₂)]` for `h₂ ~ N(mean, var)`.
pub fn aleatoric_variance(mean: f64, var: f64) -> f64 {
    (mean + 0.5 * var).exp()
}

/// `-log N(y | mean, variance)`.
pub fn nll_metric(pm: PredictiveMoments, y: f64) -> f64 {
    let var = pm.variance.max(VARIANCE_FLOOR);
    let d = y - pm.mean;
    0.5 * (ln_2pi() + var.ln() + d * d / var)
}

pub fn rmse(preds: &[f64], ys: &[f64]) -> Result<f64> {
    if preds.len() != ys.len() {
        return Err(Error::DimensionMismatch {
            context: "rmse",
            expected: ys.len(),
            found: preds.len(),
        });
    }
    if preds.is_empty() {
        return Err(Error::invalid("rmse of an empty set"));
    }
    let sse: f64 = preds.iter().zip(ys).map(|(p, y)| (p - y) * (p - y)).sum();
    Ok((sse / preds.len() as f64).sqrt())
}

/// Test-set metrics in standardized label space.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub nll: f64,
    pub rmse: f64,
    pub predictions: Vec<PredictiveMoments>,
}

/// Forward + predictive pass over every row of `data`.
pub fn predict_all(
    config: &ModelConfig,
    params: &ParameterSet,
    data: &Dataset,
) -> Result<Vec<PredictiveMoments>> {
    (0..data.len())
        .map(|i| predictive_moments(&forward(config, params, data.row(i))?, config.head))
        .collect()
}

pub fn evaluate(config: &ModelConfig, params: &ParameterSet, data: &Dataset) -> Result<Evaluation> {
    let predictions = predict_all(config, params, data)?;
    let n = predictions.len() as f64;
    let nll = predictions
        .iter()
        .zip(data.labels())
        .map(|(pm, &y)| nll_metric(*pm, y))
        .sum::<f64>()
        / n;
    let means: Vec<f64> = predictions.iter().map(|p| p.mean).collect();
    let rmse = rmse(&means, data.labels())?;
    Ok(Evaluation {
        nll,
        rmse,
        predictions,
    })
}

/// Convenience for building two-unit heads in tests and examples.
pub fn head2(mean: [f64; 2], cov: [[f64; 2]; 2]) -> Result<MomentVector> {
    MomentVector::full(
        mean.to_vec(),
        vec![cov[0][0], cov[0][1], cov[1][0], cov[1][1]],
    )
}
