use mpgelu::moment_core::{
    dense_propagate, dropout_propagate, mp_gelu_propagate, mp_gelu_rates, relu_propagate,
    Covariance, CovarianceMode, MomentVector,
};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

fn std_normal_cdf(x: f64) -> f64 {
    Normal::new(0.0, 1.0).unwrap().cdf(x)
}

fn diag_input(n: usize) -> impl Strategy<Value = MomentVector> {
    (
        prop::collection::vec(-3.0..3.0f64, n),
        prop::collection::vec(0.0..4.0f64, n),
    )
        .prop_map(|(m, v)| MomentVector::diagonal(m, v).unwrap())
}

fn full_input(n: usize) -> impl Strategy<Value = MomentVector> {
    (
        prop::collection::vec(-3.0..3.0f64, n),
        prop::collection::vec(-1.5..1.5f64, n * n),
    )
        .prop_map(move |(m, a)| {
            let a = DMatrix::from_row_slice(n, n, &a);
            let c = &a * a.transpose();
            MomentVector::full(m, c.as_slice().to_vec()).unwrap()
        })
}

fn as_full(input: &MomentVector) -> MomentVector {
    let c = input.cov().to_matrix();
    MomentVector::new(input.mean().clone(), Covariance::Full(c)).unwrap()
}

fn min_eig_ratio(c: &DMatrix<f64>) -> f64 {
    let e = SymmetricEigen::new(c.clone()).eigenvalues;
    let max = e.max();
    if max <= 0.0 {
        return 0.0;
    }
    e.min() / max
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn diagonal_of_full_matches_diagonal_mode(input in diag_input(5), rate in 0.0..1.0f64) {
        let full = as_full(&input);
        let pairs = [
            (dropout_propagate(&full, rate).unwrap(), dropout_propagate(&input, rate).unwrap()),
            (mp_gelu_propagate(&full).unwrap(), mp_gelu_propagate(&input).unwrap()),
        ];
        for (f, d) in pairs {
            for i in 0..5 {
                prop_assert!((f.mean()[i] - d.mean()[i]).abs() <= 1e-12);
                prop_assert!((f.variance(i) - d.variance(i)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn dense_keeps_covariance_psd(input in full_input(4), w in prop::collection::vec(-2.0..2.0f64, 12)) {
        let w = DMatrix::from_row_slice(3, 4, &w);
        let out = dense_propagate(&input, &w, &DVector::zeros(3)).unwrap();
        let c = out.cov().to_matrix();
        prop_assert!(min_eig_ratio(&c) >= -1e-8);
        prop_assert_eq!(&c, &c.transpose());
    }

    #[test]
    fn gelu_rate_at_unit_scale(mu in -6.0..6.0f64) {
        let input = MomentVector::diagonal(vec![mu], vec![1.0]).unwrap();
        let rates = mp_gelu_rates(&input).unwrap();
        let want = std_normal_cdf(-mu);
        let got = rates.drop_rates()[0];
        // statrs is only good to about 1e-10 here; the tabulated test below is tight.
        prop_assert!((got - want).abs() <= 1e-15 + 1e-9 * want, "{got:e} vs {want:e}");
    }

    #[test]
    fn zero_variance_mp_gelu_is_relu(mean in prop::collection::vec(-5.0..5.0f64, 6), full in any::<bool>()) {
        let input = if full {
            MomentVector::full(mean.clone(), vec![0.0; 36]).unwrap()
        } else {
            MomentVector::diagonal(mean.clone(), vec![0.0; 6]).unwrap()
        };
        prop_assert_eq!(mp_gelu_propagate(&input).unwrap(), relu_propagate(&input).unwrap());
    }

    #[test]
    fn gates_shrink_means_and_keep_variances_nonnegative(input in full_input(4), rate in 0.0..1.0f64) {
        for out in [
            dropout_propagate(&input, rate).unwrap(),
            mp_gelu_propagate(&input).unwrap(),
            relu_propagate(&input).unwrap(),
        ] {
            for i in 0..4 {
                prop_assert!(out.variance(i) >= 0.0);
            }
            let c = out.cov().to_matrix();
            prop_assert_eq!(&c, &c.transpose());
        }
        let d = dropout_propagate(&input, rate).unwrap();
        for i in 0..4 {
            prop_assert!(d.mean()[i].abs() <= input.mean()[i].abs());
        }
    }

    #[test]
    fn dropout_extremes(input in full_input(3)) {
        prop_assert_eq!(dropout_propagate(&input, 0.0).unwrap(), input.clone());
        let gone = dropout_propagate(&input, 1.0).unwrap();
        prop_assert!(gone.mean().iter().all(|m| *m == 0.0));
        prop_assert!(gone.cov().to_matrix().iter().all(|c| *c == 0.0));
    }

    #[test]
    fn relu_mean_dominates_identity_and_zero(input in diag_input(4)) {
        // E[max(0, h)] ≥ max(0, E[h]) by Jensen.
        let out = relu_propagate(&input).unwrap();
        for i in 0..4 {
            prop_assert!(out.mean()[i] >= input.mean()[i].max(0.0) - 1e-12);
        }
    }
}

/// Rectified-Gaussian moments by trapezoidal quadrature, independent of the closed form.
fn relu_moments_by_quadrature(mu: f64, sigma: f64) -> (f64, f64) {
    let n = 200_000;
    let lo = 0.0f64.max(mu - 12.0 * sigma);
    let hi = (mu + 12.0 * sigma).max(lo);
    let h = (hi - lo) / n as f64;
    let density = |x: f64| {
        let z = (x - mu) / sigma;
        (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
    };
    let (mut m1, mut m2) = (0.0, 0.0);
    for k in 0..=n {
        let x = lo + k as f64 * h;
        let w = if k == 0 || k == n { 0.5 } else { 1.0 };
        m1 += w * x * density(x) * h;
        m2 += w * x * x * density(x) * h;
    }
    (m1, m2 - m1 * m1)
}

#[test]
fn relu_closed_form_matches_quadrature() {
    for &(mu, var) in &[
        (0.0, 1.0),
        (1.3, 0.4),
        (-0.7, 2.5),
        (-2.0, 0.3),
        (3.0, 0.01),
    ] {
        let out = relu_propagate(&MomentVector::diagonal(vec![mu], vec![var]).unwrap()).unwrap();
        let (m, v) = relu_moments_by_quadrature(mu, f64::sqrt(var));
        assert!((out.mean()[0] - m).abs() < 1e-8, "mean at {mu},{var}");
        assert!((out.variance(0) - v).abs() < 1e-8, "var at {mu},{var}");
    }
    let std = relu_propagate(&MomentVector::diagonal(vec![0.0], vec![1.0]).unwrap()).unwrap();
    assert!((std.mean()[0] - 0.398942).abs() < 1e-6);
    assert!((std.variance(0) - 0.340845).abs() < 1e-6);
}

#[test]
fn mp_gelu_standard_normal_example() {
    let out = mp_gelu_propagate(&MomentVector::diagonal(vec![0.0], vec![1.0]).unwrap()).unwrap();
    assert_eq!(out.mean()[0], 0.0);
    assert!((out.variance(0) - 0.5).abs() < 1e-15);
}

#[test]
fn gelu_rate_matches_high_precision_table() {
    // Φ(−μ) from 30-digit arithmetic, rounded to 17 significant digits.
    let table = [
        (-5.5, 0.999_999_981_010_437_5),
        (-2.0, 0.977_249_868_051_820_8),
        (-0.3, 0.617_911_422_188_952_6),
        (0.0, 0.5),
        (0.8539252813230889, 0.196_573_195_349_873_7),
        (1.7, 0.044_565_462_758_543_04),
        (4.2, 1.334_574_901_590_633_8e-5),
        (8.0, 6.220_960_574_271_784e-16),
    ];
    for (mu, want) in table {
        let rates = mp_gelu_rates(&MomentVector::diagonal(vec![mu], vec![1.0]).unwrap()).unwrap();
        let got = rates.drop_rates()[0];
        assert!(
            (got - want).abs() <= 1e-14 * want,
            "mu={mu}: {got:e} vs {want:e}"
        );
    }
}

#[test]
fn mp_gelu_far_tail_rate() {
    let rates = mp_gelu_rates(&MomentVector::diagonal(vec![10.0], vec![1.0]).unwrap()).unwrap();
    let p = rates.drop_rates()[0];
    assert!((p - 7.619853024160527e-24).abs() < 1e-30, "{p:e}");
}

#[test]
fn mode_mismatch_and_shape_errors() {
    let x = MomentVector::diagonal(vec![0.0, 1.0], vec![1.0, 1.0]).unwrap();
    assert!(dense_propagate(&x, &DMatrix::zeros(2, 3), &DVector::zeros(2)).is_err());
    assert!(dense_propagate(&x, &DMatrix::zeros(2, 2), &DVector::zeros(3)).is_err());
    assert!(dropout_propagate(&x, -0.1).is_err());
    assert!(MomentVector::diagonal(vec![0.0], vec![-1.0]).is_err());
    assert_eq!(x.mode(), CovarianceMode::Diagonal);
}
