use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::Dataset;

pub const TOY_DEFAULT_N: usize = 100;

/// Noise-free toy target `sin(2x)·cos(7x)`.
pub fn toy_function(x: f64) -> f64 {
    (2.0 * x).sin() * (7.0 * x).cos()
}

/// Label for input `x` given a standard-normal draw `z`: noise std is `|sin x|`.
pub fn toy_label(x: f64, z: f64) -> f64 {
    toy_function(x) + x.sin().abs() * z
}

/// `x ~ U(-0.5, 0.5)`, `y = sin(2x)cos(7x) + ε`, `ε ~ N(0, sin²x)`.
pub fn toy_generate(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ux = Uniform::new_inclusive(-0.5, 0.5).expect("valid bounds");
    let std_normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x: f64 = ux.sample(&mut rng);
        xs.push(x);
        ys.push(toy_label(x, std_normal.sample(&mut rng)));
    }
    Dataset::new("toy", xs, 1, ys).expect("toy data is finite")
}
