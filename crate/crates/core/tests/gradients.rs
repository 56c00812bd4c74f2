use mpgelu::moment_core::CovarianceMode;
use mpgelu::network::{build_model, init_parameters, ModelConfig, ParameterSet};
use mpgelu::training::{loss_and_gradients, sgd_step};
use mpgelu::{Architecture, HeadKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;

fn batch(q: usize, n: usize, seed: u64) -> Vec<(Vec<f64>, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let x = (0..q).map(|_| rng.random_range(-1.5..1.5)).collect();
            (x, rng.random_range(-2.0..2.0))
        })
        .collect()
}

fn loss(config: &ModelConfig, params: &ParameterSet, data: &[(Vec<f64>, f64)]) -> f64 {
    let refs: Vec<(&[f64], f64)> = data.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
    loss_and_gradients(config, params, &refs).unwrap().0
}

/// Central differences over every parameter; returns the worst deviation as a
/// multiple of `max(1e-4·|g|, 1e-7)`.
fn fd_worst(config: &ModelConfig, params: &ParameterSet, data: &[(Vec<f64>, f64)]) -> f64 {
    let refs: Vec<(&[f64], f64)> = data.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
    let (_, grads) = loss_and_gradients(config, params, &refs).unwrap();
    let analytic: Vec<f64> = grads.iter().collect();
    let mut worst: f64 = 0.0;
    for (k, &g) in analytic.iter().enumerate() {
        let mut plus = params.clone();
        *plus.get_mut(k).unwrap() += STEP;
        let mut minus = params.clone();
        *minus.get_mut(k).unwrap() -= STEP;
        let fd = (loss(config, &plus, data) - loss(config, &minus, data)) / (2.0 * STEP);
        let tol = (1e-4 * g.abs().max(fd.abs())).max(1e-7);
        worst = worst.max((g - fd).abs() / tol);
    }
    worst
}

fn perturbed_params(config: &ModelConfig, seed: u64) -> ParameterSet {
    let mut params = init_parameters(config, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    for d in &mut params.dense {
        for b in d.bias.iter_mut() {
            *b = rng.random_range(-0.3..0.3);
        }
    }
    params
}

#[test]
fn every_variant_matches_central_differences() {
    for arch in [Architecture::MpGelu, Architecture::Relu] {
        for mode in [CovarianceMode::Full, CovarianceMode::Diagonal] {
            for head in [HeadKind::Heteroscedastic2, HeadKind::Homoscedastic1] {
                let config = build_model(arch, 3, 6, 0.1, mode, head).unwrap();
                let params = perturbed_params(&config, 21);
                let worst = fd_worst(&config, &params, &batch(3, 4, 5));
                assert!(worst <= 1.0, "{arch:?}/{mode:?}/{head:?}: {worst}");
            }
        }
    }
}

#[test]
fn gradient_descends_the_loss() {
    let config = build_model(
        Architecture::MpGelu,
        2,
        10,
        0.05,
        CovarianceMode::Full,
        HeadKind::Heteroscedastic2,
    )
    .unwrap();
    let mut params = init_parameters(&config, 3);
    let data = batch(2, 16, 8);
    let refs: Vec<(&[f64], f64)> = data.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
    let (before, grads) = loss_and_gradients(&config, &params, &refs).unwrap();
    sgd_step(&mut params, &grads, 1e-3);
    let after = loss(&config, &params, &data);
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn batch_loss_is_the_mean() {
    let config = build_model(
        Architecture::Relu,
        2,
        5,
        0.1,
        CovarianceMode::Diagonal,
        HeadKind::Heteroscedastic2,
    )
    .unwrap();
    let params = init_parameters(&config, 1);
    let data = batch(2, 6, 2);
    let whole = loss(&config, &params, &data);
    let parts: f64 = data
        .iter()
        .map(|d| loss(&config, &params, std::slice::from_ref(d)))
        .sum::<f64>()
        / 6.0;
    assert!((whole - parts).abs() < 1e-12);
}
