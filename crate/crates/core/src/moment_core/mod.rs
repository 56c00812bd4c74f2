//! Analytic propagation of Gaussian moments through network layers.
//!
//! An activation is summarised by its mean vector and either a full covariance
//! matrix or a vector of per-unit variances. Every layer maps these moments to
//! the moments of its output in closed form:
//!
//! * dense layers have deterministic weights, so `m' = W m + b` and
//!   `C' = W C Wᵀ`;
//! * dropout multiplies each unit by an independent `Bernoulli(1 - p)` gate;
//! * MP-GELU is a dropout whose per-unit drop rate `Φ(-μ/σ)` is computed from
//!   the input statistics, so the same gated-product algebra applies;
//! * ReLU uses rectified-Gaussian moments for the diagonal and a first-order
//!   gain `Φ(αᵢ)Φ(αⱼ)` for off-diagonal covariances.
//!
//! No inverted-dropout rescaling is applied anywhere: a gate keeps `h` as is.

mod adjoint;

pub use adjoint::{
    dense_backward, dropout_backward, mp_gelu_backward, relu_backward, DenseGrad, MomentGrad,
};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::{norm_cdf, norm_pdf, sqrt};

/// Standard deviations below this are treated as exactly zero.
pub const SIGMA_FLOOR: f64 = 1e-12;
/// Variances in `(-VARIANCE_CLAMP, 0)` are rounding noise and become 0.
pub const VARIANCE_CLAMP: f64 = 1e-10;
/// Relative tolerance for the symmetry check on full covariances.
pub const SYMMETRY_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceMode {
    Full,
    #[serde(alias = "diag")]
    Diagonal,
}

impl CovarianceMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CovarianceMode::Full => "full",
            CovarianceMode::Diagonal => "diag",
        }
    }
}

impl std::str::FromStr for CovarianceMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(CovarianceMode::Full),
            "diag" | "diagonal" => Ok(CovarianceMode::Diagonal),
            other => Err(Error::invalid(format!("unknown covariance mode {other:?}"))),
        }
    }
}

/// Covariance of an activation vector.
#[derive(Clone, Debug, PartialEq)]
pub enum Covariance {
    Full(DMatrix<f64>),
    Diagonal(DVector<f64>),
}

impl Covariance {
    pub fn zeros(mode: CovarianceMode, n: usize) -> Self {
        match mode {
            CovarianceMode::Full => Covariance::Full(DMatrix::zeros(n, n)),
            CovarianceMode::Diagonal => Covariance::Diagonal(DVector::zeros(n)),
        }
    }

    pub fn mode(&self) -> CovarianceMode {
        match self {
            Covariance::Full(_) => CovarianceMode::Full,
            Covariance::Diagonal(_) => CovarianceMode::Diagonal,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Covariance::Full(c) => c.nrows(),
            Covariance::Diagonal(v) => v.len(),
        }
    }

    #[inline]
    pub fn variance(&self, i: usize) -> f64 {
        match self {
            Covariance::Full(c) => c[(i, i)],
            Covariance::Diagonal(v) => v[i],
        }
    }

    /// Entry `(i, j)`; off-diagonal entries of a diagonal covariance are zero.
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        match self {
            Covariance::Full(c) => c[(i, j)],
            Covariance::Diagonal(v) if i == j => v[i],
            Covariance::Diagonal(_) => 0.0,
        }
    }

    pub fn variances(&self) -> DVector<f64> {
        match self {
            Covariance::Full(c) => c.diagonal(),
            Covariance::Diagonal(v) => v.clone(),
        }
    }

    /// Dense `n × n` view, expanding a diagonal representation.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        match self {
            Covariance::Full(c) => c.clone(),
            Covariance::Diagonal(v) => DMatrix::from_diagonal(v),
        }
    }

    fn is_finite(&self) -> bool {
        match self {
            Covariance::Full(c) => c.iter().all(|x| x.is_finite()),
            Covariance::Diagonal(v) => v.iter().all(|x| x.is_finite()),
        }
    }
}

/// Mean and covariance of a Gaussian-approximated activation vector.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentVector {
    mean: DVector<f64>,
    cov: Covariance,
}

impl MomentVector {
    /// Validates dimensions, finiteness, variance sign and (full mode) symmetry.
    ///
    /// Slightly negative variances within [`VARIANCE_CLAMP`] are set to zero.
    pub fn new(mean: DVector<f64>, mut cov: Covariance) -> Result<Self> {
        if cov.dim() != mean.len() {
            return Err(Error::DimensionMismatch {
                context: "MomentVector::new",
                expected: mean.len(),
                found: cov.dim(),
            });
        }
        if !mean.iter().all(|x| x.is_finite()) {
            return Err(Error::non_finite("moment mean"));
        }
        if !cov.is_finite() {
            return Err(Error::non_finite("moment covariance"));
        }
        if let Covariance::Full(c) = &cov {
            let n = c.nrows();
            for i in 0..n {
                for j in (i + 1)..n {
                    let (a, b) = (c[(i, j)], c[(j, i)]);
                    let scale = a.abs().max(b.abs()).max(f64::MIN_POSITIVE);
                    if (a - b).abs() > SYMMETRY_TOL * scale {
                        return Err(Error::Asymmetric { row: i, col: j });
                    }
                }
            }
        }
        clamp_variances(&mut cov)?;
        Ok(MomentVector { mean, cov })
    }

    /// Constructs without validation; callers guarantee the invariants.
    pub(crate) fn from_parts(mean: DVector<f64>, cov: Covariance) -> Self {
        debug_assert_eq!(mean.len(), cov.dim());
        MomentVector { mean, cov }
    }

    pub fn diagonal(mean: Vec<f64>, variances: Vec<f64>) -> Result<Self> {
        Self::new(
            DVector::from_vec(mean),
            Covariance::Diagonal(DVector::from_vec(variances)),
        )
    }

    /// `cov` is row-major `n × n`.
    pub fn full(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let n = mean.len();
        if cov.len() != n * n {
            return Err(Error::DimensionMismatch {
                context: "MomentVector::full",
                expected: n * n,
                found: cov.len(),
            });
        }
        Self::new(
            DVector::from_vec(mean),
            Covariance::Full(DMatrix::from_row_slice(n, n, &cov)),
        )
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &Covariance {
        &self.cov
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mode(&self) -> CovarianceMode {
        self.cov.mode()
    }

    pub fn variance(&self, i: usize) -> f64 {
        self.cov.variance(i)
    }

    pub fn into_parts(self) -> (DVector<f64>, Covariance) {
        (self.mean, self.cov)
    }
}

fn clamp_one(index: usize, v: &mut f64) -> Result<()> {
    if *v < 0.0 {
        if *v > -VARIANCE_CLAMP {
            *v = 0.0;
        } else {
            return Err(Error::NegativeVariance { index, value: *v });
        }
    }
    Ok(())
}

fn clamp_variances(cov: &mut Covariance) -> Result<()> {
    match cov {
        Covariance::Full(c) => {
            for i in 0..c.nrows() {
                clamp_one(i, &mut c[(i, i)])?;
            }
        }
        Covariance::Diagonal(v) => {
            for (i, x) in v.iter_mut().enumerate() {
                clamp_one(i, x)?;
            }
        }
    }
    Ok(())
}

/// Per-unit drop probabilities `p` and keep probabilities `q = 1 - p`.
///
/// Both are stored so that whichever is tiny keeps full relative precision.
#[derive(Clone, Debug, PartialEq)]
pub struct GateRates {
    drop: Vec<f64>,
    keep: Vec<f64>,
}

impl GateRates {
    pub fn uniform(n: usize, rate: f64) -> Result<Self> {
        check_rate(rate)?;
        Ok(GateRates {
            drop: vec![rate; n],
            keep: vec![1.0 - rate; n],
        })
    }

    pub fn from_drop_rates(drop: Vec<f64>) -> Result<Self> {
        for &p in &drop {
            check_rate(p)?;
        }
        let keep = drop.iter().map(|p| 1.0 - p).collect();
        Ok(GateRates { drop, keep })
    }

    pub fn drop_rates(&self) -> &[f64] {
        &self.drop
    }

    pub fn keep_rates(&self) -> &[f64] {
        &self.keep
    }

    pub fn len(&self) -> usize {
        self.drop.len()
    }

    pub fn is_empty(&self) -> bool {
        self.drop.is_empty()
    }
}

pub(crate) fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidRate(rate));
    }
    Ok(())
}

/// Deterministic input: zero covariance in the requested mode.
pub fn lift_deterministic(x: &[f64], mode: CovarianceMode) -> Result<MomentVector> {
    if x.is_empty() {
        return Err(Error::invalid("cannot lift an empty input vector"));
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::non_finite(format!("input feature {i}")));
    }
    Ok(MomentVector::from_parts(
        DVector::from_column_slice(x),
        Covariance::zeros(mode, x.len()),
    ))
}

/// Dense layer with deterministic weights (`weights` is `out × in`).
pub fn dense_propagate(
    input: &MomentVector,
    weights: &DMatrix<f64>,
    bias: &DVector<f64>,
) -> Result<MomentVector> {
    let n = input.dim();
    if weights.ncols() != n {
        return Err(Error::DimensionMismatch {
            context: "dense_propagate (weight columns)",
            expected: n,
            found: weights.ncols(),
        });
    }
    if bias.len() != weights.nrows() {
        return Err(Error::DimensionMismatch {
            context: "dense_propagate (bias)",
            expected: weights.nrows(),
            found: bias.len(),
        });
    }
    let mut mean = weights * &input.mean;
    mean += bias;
    let mut cov = match &input.cov {
        Covariance::Full(c) => {
            let wc = weights * c;
            let mut out = &wc * weights.transpose();
            symmetrize(&mut out);
            Covariance::Full(out)
        }
        Covariance::Diagonal(v) => {
            let m = weights.nrows();
            let mut out = DVector::zeros(m);
            for k in 0..m {
                let mut acc = 0.0;
                for j in 0..n {
                    let w = weights[(k, j)];
                    acc += w * w * v[j];
                }
                out[k] = acc;
            }
            Covariance::Diagonal(out)
        }
    };
    clamp_variances(&mut cov)?;
    Ok(MomentVector::from_parts(mean, cov))
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Moments of `diag(ε) h` with independent `εᵢ ~ Bernoulli(keepᵢ)`, `ε ⫫ h`.
pub fn gate_propagate(input: &MomentVector, gates: &GateRates) -> Result<MomentVector> {
    let n = input.dim();
    if gates.len() != n {
        return Err(Error::DimensionMismatch {
            context: "gate_propagate",
            expected: n,
            found: gates.len(),
        });
    }
    let (p, q) = (&gates.drop, &gates.keep);
    let m = &input.mean;
    let mean = DVector::from_fn(n, |i, _| q[i] * m[i]);
    let cov = match &input.cov {
        Covariance::Full(c) => {
            let mut out = DMatrix::zeros(n, n);
            for j in 0..n {
                for i in 0..n {
                    out[(i, j)] = if i == j {
                        q[i] * c[(i, i)] + p[i] * q[i] * m[i] * m[i]
                    } else {
                        q[i] * q[j] * c[(i, j)]
                    };
                }
            }
            Covariance::Full(out)
        }
        Covariance::Diagonal(v) => Covariance::Diagonal(DVector::from_fn(n, |i, _| {
            q[i] * v[i] + p[i] * q[i] * m[i] * m[i]
        })),
    };
    Ok(MomentVector::from_parts(mean, cov))
}

/// Dropout with a shared rate `p`; no `1/(1-p)` rescaling.
pub fn dropout_propagate(input: &MomentVector, rate: f64) -> Result<MomentVector> {
    let gates = GateRates::uniform(input.dim(), rate)?;
    gate_propagate(input, &gates)
}

/// Drop probability of one unit, `Φ(-μ/σ)`, with the σ → 0 limit below [`SIGMA_FLOOR`].
///
/// Returns `(drop, keep)`.
#[inline]
pub(crate) fn mp_gelu_rate(mu: f64, var: f64) -> (f64, f64) {
    let s = sqrt(var);
    if s < SIGMA_FLOOR {
        return if mu > 0.0 {
            (0.0, 1.0)
        } else if mu < 0.0 {
            (1.0, 0.0)
        } else {
            (0.5, 0.5)
        };
    }
    let alpha = mu / s;
    // One CDF evaluation; the complement is taken on the side where it is not tiny.
    if alpha >= 0.0 {
        let p = norm_cdf(-alpha);
        (p, 1.0 - p)
    } else {
        let q = norm_cdf(alpha);
        (1.0 - q, q)
    }
}

/// MP-GELU gate rates computed from the input statistics.
pub fn mp_gelu_rates(input: &MomentVector) -> Result<GateRates> {
    let n = input.dim();
    let mut drop = Vec::with_capacity(n);
    let mut keep = Vec::with_capacity(n);
    for i in 0..n {
        let v = input.variance(i);
        if v < 0.0 {
            return Err(Error::NegativeVariance { index: i, value: v });
        }
        let (p, q) = mp_gelu_rate(input.mean[i], v);
        drop.push(p);
        keep.push(q);
    }
    Ok(GateRates { drop, keep })
}

pub fn mp_gelu_propagate(input: &MomentVector) -> Result<MomentVector> {
    let gates = mp_gelu_rates(input)?;
    gate_propagate(input, &gates)
}

/// Rectified-Gaussian moments of one unit: `(mean, variance, gain)` where
/// `gain = Φ(μ/σ)` scales off-diagonal covariances.
#[inline]
pub(crate) fn relu_unit(mu: f64, var: f64) -> (f64, f64, f64) {
    let s = sqrt(var);
    if s < SIGMA_FLOOR {
        let gain = if mu > 0.0 {
            1.0
        } else if mu < 0.0 {
            0.0
        } else {
            0.5
        };
        return (mu.max(0.0), 0.0, gain);
    }
    let alpha = mu / s;
    let cdf = norm_cdf(alpha);
    let pdf = norm_pdf(alpha);
    let mean = mu * cdf + s * pdf;
    let second = (mu * mu + var) * cdf + mu * s * pdf;
    let variance = (second - mean * mean).max(0.0);
    (mean, variance, cdf)
}

pub fn relu_propagate(input: &MomentVector) -> Result<MomentVector> {
    let n = input.dim();
    let mut mean = DVector::zeros(n);
    let mut var = vec![0.0; n];
    let mut gain = vec![0.0; n];
    for i in 0..n {
        let v = input.variance(i);
        if v < 0.0 {
            return Err(Error::NegativeVariance { index: i, value: v });
        }
        let (m, vv, g) = relu_unit(input.mean[i], v);
        mean[i] = m;
        var[i] = vv;
        gain[i] = g;
    }
    let cov = match &input.cov {
        Covariance::Full(c) => {
            let mut out = DMatrix::zeros(n, n);
            for j in 0..n {
                for i in 0..n {
                    out[(i, j)] = if i == j {
                        var[i]
                    } else {
                        gain[i] * gain[j] * c[(i, j)]
                    };
                }
            }
            Covariance::Full(out)
        }
        Covariance::Diagonal(_) => Covariance::Diagonal(DVector::from_vec(var)),
    };
    Ok(MomentVector::from_parts(mean, cov))
}
