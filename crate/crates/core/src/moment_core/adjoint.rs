//! Reverse-mode adjoints of the moment propagation formulas.
//!
//! Covariance gradients use the convention that every stored entry `C[i][j]`
//! is an independent variable. Forward ops only ever produce symmetric
//! matrices, and the dense adjoint symmetrizes the incoming gradient, so the
//! gradients flowing back are symmetric as well.

use nalgebra::{DMatrix, DVector};

use super::{
    check_rate, mp_gelu_rate, relu_unit, symmetrize, Covariance, MomentVector, SIGMA_FLOOR,
};
use crate::error::{Error, Result};
use crate::special::{norm_pdf, sqrt};

/// Gradient of a scalar loss with respect to a [`MomentVector`].
#[derive(Clone, Debug, PartialEq)]
pub struct MomentGrad {
    pub mean: DVector<f64>,
    pub cov: Covariance,
}

impl MomentGrad {
    pub fn zeros_like(m: &MomentVector) -> Self {
        MomentGrad {
            mean: DVector::zeros(m.dim()),
            cov: Covariance::zeros(m.mode(), m.dim()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().all(|x| x.is_finite()) && self.cov.is_finite()
    }
}

/// Parameter gradients of one dense layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrad {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

fn check_grad_shape(input: &MomentVector, upstream_dim: usize, up_mode_ok: bool) -> Result<()> {
    if !up_mode_ok {
        return Err(Error::ModeMismatch {
            context: "backward pass",
        });
    }
    if upstream_dim != input.dim() {
        return Err(Error::DimensionMismatch {
            context: "backward pass",
            expected: input.dim(),
            found: upstream_dim,
        });
    }
    Ok(())
}

pub fn dense_backward(
    input: &MomentVector,
    weights: &DMatrix<f64>,
    upstream: &MomentGrad,
) -> Result<(MomentGrad, DenseGrad)> {
    if upstream.mean.len() != weights.nrows() || upstream.cov.mode() != input.mode() {
        return Err(Error::DimensionMismatch {
            context: "dense_backward",
            expected: weights.nrows(),
            found: upstream.mean.len(),
        });
    }
    let m = input.mean();
    let gmean_out = &upstream.mean;
    let mut gw = gmean_out * m.transpose();
    let gmean = weights.tr_mul(gmean_out);
    let gcov = match (&upstream.cov, input.cov()) {
        (Covariance::Full(g), Covariance::Full(c)) => {
            let mut gs = g.clone();
            symmetrize(&mut gs);
            // d/dW tr(Gᵀ W C Wᵀ) = 2 G W C for symmetric G and C.
            let gsw = &gs * weights;
            gw += (&gsw * c) * 2.0;
            Covariance::Full(weights.tr_mul(&gsw))
        }
        (Covariance::Diagonal(gv), Covariance::Diagonal(v)) => {
            let (rows, cols) = weights.shape();
            let mut gin = DVector::zeros(cols);
            for j in 0..cols {
                let mut acc = 0.0;
                for k in 0..rows {
                    let w = weights[(k, j)];
                    acc += gv[k] * w * w;
                    gw[(k, j)] += 2.0 * gv[k] * w * v[j];
                }
                gin[j] = acc;
            }
            Covariance::Diagonal(gin)
        }
        _ => {
            return Err(Error::ModeMismatch {
                context: "dense_backward",
            })
        }
    };
    Ok((
        MomentGrad {
            mean: gmean,
            cov: gcov,
        },
        DenseGrad {
            weights: gw,
            bias: gmean_out.clone(),
        },
    ))
}

/// Per-unit gate values and the sensitivities of the keep rate.
struct Gate {
    drop: f64,
    keep: f64,
    dkeep_dmean: f64,
    dkeep_dvar: f64,
}

fn gate_backward(input: &MomentVector, gates: &[Gate], upstream: &MomentGrad) -> MomentGrad {
    let n = input.dim();
    let m = input.mean();
    let mut gmean = DVector::zeros(n);
    let mut gkeep = vec![0.0; n];
    for i in 0..n {
        gkeep[i] = upstream.mean[i] * m[i];
    }
    let gcov = match (&upstream.cov, input.cov()) {
        (Covariance::Full(g), Covariance::Full(c)) => {
            let mut gin = DMatrix::zeros(n, n);
            for j in 0..n {
                for i in 0..n {
                    if i == j {
                        continue;
                    }
                    let gij = g[(i, j)];
                    gin[(i, j)] = gates[i].keep * gates[j].keep * gij;
                    // d C'_ij / d q_i = q_j C_ij
                    gkeep[i] += gij * gates[j].keep * c[(i, j)];
                    gkeep[j] += gij * gates[i].keep * c[(i, j)];
                }
            }
            for i in 0..n {
                let gii = g[(i, i)];
                let Gate { drop, keep, .. } = gates[i];
                gin[(i, i)] = keep * gii;
                gmean[i] += gii * 2.0 * drop * keep * m[i];
                gkeep[i] += gii * (c[(i, i)] + (1.0 - 2.0 * keep) * m[i] * m[i]);
            }
            Covariance::Full(gin)
        }
        (Covariance::Diagonal(gv), Covariance::Diagonal(v)) => {
            let mut gin = DVector::zeros(n);
            for i in 0..n {
                let Gate { drop, keep, .. } = gates[i];
                gin[i] = keep * gv[i];
                gmean[i] += gv[i] * 2.0 * drop * keep * m[i];
                gkeep[i] += gv[i] * (v[i] + (1.0 - 2.0 * keep) * m[i] * m[i]);
            }
            Covariance::Diagonal(gin)
        }
        _ => unreachable!("mode checked by caller"),
    };
    let mut out = MomentGrad {
        mean: gmean,
        cov: gcov,
    };
    for i in 0..n {
        out.mean[i] += gates[i].keep * upstream.mean[i] + gkeep[i] * gates[i].dkeep_dmean;
        let dv = gkeep[i] * gates[i].dkeep_dvar;
        match &mut out.cov {
            Covariance::Full(c) => c[(i, i)] += dv,
            Covariance::Diagonal(v) => v[i] += dv,
        }
    }
    out
}

pub fn dropout_backward(
    input: &MomentVector,
    rate: f64,
    upstream: &MomentGrad,
) -> Result<MomentGrad> {
    check_rate(rate)?;
    check_grad_shape(
        input,
        upstream.mean.len(),
        upstream.cov.mode() == input.mode(),
    )?;
    let gates: Vec<Gate> = (0..input.dim())
        .map(|_| Gate {
            drop: rate,
            keep: 1.0 - rate,
            dkeep_dmean: 0.0,
            dkeep_dvar: 0.0,
        })
        .collect();
    Ok(gate_backward(input, &gates, upstream))
}

pub fn mp_gelu_backward(input: &MomentVector, upstream: &MomentGrad) -> Result<MomentGrad> {
    check_grad_shape(
        input,
        upstream.mean.len(),
        upstream.cov.mode() == input.mode(),
    )?;
    let gates: Vec<Gate> = (0..input.dim())
        .map(|i| {
            let mu = input.mean()[i];
            let var = input.variance(i);
            let (drop, keep) = mp_gelu_rate(mu, var);
            let s = sqrt(var);
            let (dkeep_dmean, dkeep_dvar) = if s < SIGMA_FLOOR {
                (0.0, 0.0)
            } else {
                // q = Φ(μ/σ): dq/dμ = φ/σ, dq/dv = -φ μ / (2 σ³)
                let pdf = norm_pdf(mu / s);
                (pdf / s, -pdf * mu / (2.0 * s * var))
            };
            Gate {
                drop,
                keep,
                dkeep_dmean,
                dkeep_dvar,
            }
        })
        .collect();
    Ok(gate_backward(input, &gates, upstream))
}

pub fn relu_backward(input: &MomentVector, upstream: &MomentGrad) -> Result<MomentGrad> {
    check_grad_shape(
        input,
        upstream.mean.len(),
        upstream.cov.mode() == input.mode(),
    )?;
    let n = input.dim();
    let m = input.mean();

    struct Unit {
        mean_out: f64,
        s: f64,
        gain: f64,
        pdf: f64,
        degenerate: bool,
    }
    let units: Vec<Unit> = (0..n)
        .map(|i| {
            let var = input.variance(i);
            let (mean_out, _, gain) = relu_unit(m[i], var);
            let s = sqrt(var);
            let degenerate = s < SIGMA_FLOOR;
            let pdf = if degenerate { 0.0 } else { norm_pdf(m[i] / s) };
            Unit {
                mean_out,
                s,
                gain,
                pdf,
                degenerate,
            }
        })
        .collect();

    let mut gmean = DVector::zeros(n);
    let mut gvar = vec![0.0; n];
    let mut ggain = vec![0.0; n];
    let gvar_out: Vec<f64> = match &upstream.cov {
        Covariance::Full(g) => (0..n).map(|i| g[(i, i)]).collect(),
        Covariance::Diagonal(g) => g.iter().copied().collect(),
    };

    let gcov = match (&upstream.cov, input.cov()) {
        (Covariance::Full(g), Covariance::Full(c)) => {
            let mut gin = DMatrix::zeros(n, n);
            for j in 0..n {
                for i in 0..n {
                    if i == j {
                        continue;
                    }
                    let gij = g[(i, j)];
                    gin[(i, j)] = units[i].gain * units[j].gain * gij;
                    ggain[i] += gij * units[j].gain * c[(i, j)];
                    ggain[j] += gij * units[i].gain * c[(i, j)];
                }
            }
            Some(gin)
        }
        (Covariance::Diagonal(_), Covariance::Diagonal(_)) => None,
        _ => {
            return Err(Error::ModeMismatch {
                context: "relu_backward",
            })
        }
    };

    for i in 0..n {
        let u = &units[i];
        let gm_out = upstream.mean[i];
        let gv_out = gvar_out[i];
        if u.degenerate {
            gmean[i] = gm_out * u.gain;
            gvar[i] = gv_out * u.gain;
            continue;
        }
        let cdf = u.gain;
        // mean' = μΦ + σφ ; var' = E[r²] - mean'²
        let dmean_dmu = cdf;
        let dmean_ds = u.pdf;
        let dvar_dmu = 2.0 * u.mean_out * (1.0 - cdf);
        let dvar_ds = 2.0 * u.s * cdf - 2.0 * u.mean_out * u.pdf;
        let mut gm = gm_out * dmean_dmu + gv_out * dvar_dmu;
        let gs = gm_out * dmean_ds + gv_out * dvar_ds;
        let var = u.s * u.s;
        let mut gv = gs / (2.0 * u.s);
        if ggain[i] != 0.0 {
            gm += ggain[i] * u.pdf / u.s;
            gv -= ggain[i] * u.pdf * m[i] / (2.0 * u.s * var);
        }
        gmean[i] = gm;
        gvar[i] = gv;
    }

    let cov = match gcov {
        Some(mut gin) => {
            for i in 0..n {
                gin[(i, i)] = gvar[i];
            }
            Covariance::Full(gin)
        }
        None => Covariance::Diagonal(DVector::from_vec(gvar)),
    };
    Ok(MomentGrad { mean: gmean, cov })
}
