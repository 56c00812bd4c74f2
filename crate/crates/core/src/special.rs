//! Gaussian CDF/PDF helpers with per-thread call counters.
//!
//! Every transcendental call made by the moment propagation code goes through
//! this module so that the operation-count comparison between nonlinearities
//! can be measured rather than asserted.

use std::cell::Cell;

pub const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

thread_local! {
    static ERF_CALLS: Cell<u64> = const { Cell::new(0) };
    static EXP_CALLS: Cell<u64> = const { Cell::new(0) };
    static SQRT_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Snapshot of the transcendental call counters on the current thread.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct OpCounts {
    pub erf: u64,
    pub exp: u64,
    pub sqrt: u64,
}

impl OpCounts {
    pub fn transcendental(&self) -> u64 {
        self.erf + self.exp + self.sqrt
    }
}

impl std::ops::Sub for OpCounts {
    type Output = OpCounts;
    fn sub(self, rhs: OpCounts) -> OpCounts {
        OpCounts {
            erf: self.erf - rhs.erf,
            exp: self.exp - rhs.exp,
            sqrt: self.sqrt - rhs.sqrt,
        }
    }
}

pub fn reset_counters() {
    ERF_CALLS.with(|c| c.set(0));
    EXP_CALLS.with(|c| c.set(0));
    SQRT_CALLS.with(|c| c.set(0));
}

pub fn counters() -> OpCounts {
    OpCounts {
        erf: ERF_CALLS.with(Cell::get),
        exp: EXP_CALLS.with(Cell::get),
        sqrt: SQRT_CALLS.with(Cell::get),
    }
}

#[inline]
fn bump(counter: &'static std::thread::LocalKey<Cell<u64>>) {
    counter.with(|c| c.set(c.get() + 1));
}

/// Standard normal CDF, computed through `erfc` so both tails keep relative precision.
#[inline]
pub fn norm_cdf(x: f64) -> f64 {
    bump(&ERF_CALLS);
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Standard normal density.
#[inline]
pub fn norm_pdf(x: f64) -> f64 {
    bump(&EXP_CALLS);
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

#[inline]
pub fn sqrt(x: f64) -> f64 {
    bump(&SQRT_CALLS);
    x.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cdf_tails_keep_precision() {
        // Phi(-10) = 7.619853024160527e-24
        let p = norm_cdf(-10.0);
        assert!((p - 7.619_853_024_160_527e-24).abs() < 1e-36);
        assert_eq!(norm_cdf(0.0), 0.5);
    }

    #[test]
    fn counters_track_calls() {
        reset_counters();
        norm_cdf(0.3);
        norm_cdf(0.1);
        norm_pdf(0.2);
        sqrt(4.0);
        assert_eq!(
            counters(),
            OpCounts {
                erf: 2,
                exp: 1,
                sqrt: 1
            }
        );
        reset_counters();
        assert_eq!(counters().transcendental(), 0);
    }
}
