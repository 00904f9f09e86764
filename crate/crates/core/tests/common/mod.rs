#![allow(dead_code)]

pub mod grad;
pub mod oracle;

use rand::Rng as _;
use rehearsal_core::netcore::{forward, softmax};
use rehearsal_core::rng::{seeded, Rng};
use rehearsal_core::{DenseMatrix, MlpParams, PredictionBatch};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> Rng {
    seeded(seed, 99)
}

pub fn random_matrix(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> DenseMatrix {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    DenseMatrix::new(rows, cols, data).unwrap()
}

pub fn random_labels(rng: &mut Rng, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

/// A random MLP with at most `max_params` parameters and nonzero biases.
pub fn random_net(rng: &mut Rng, max_params: usize) -> MlpParams {
    loop {
        let input = rng.random_range(2..=5);
        let k = rng.random_range(2..=5);
        let hidden: Vec<usize> = match rng.random_range(0..3) {
            0 => vec![rng.random_range(3..=10)],
            1 => vec![rng.random_range(3..=8), rng.random_range(3..=6)],
            _ => vec![],
        };
        let mut p = MlpParams::init(input, &hidden, k, rng).unwrap();
        if p.num_params() > max_params {
            continue;
        }
        let flat: Vec<f64> = p
            .flatten()
            .iter()
            .map(|w| w + rng.random_range(-0.1..0.1))
            .collect();
        p = p.with_flat(&flat).unwrap();
        return p;
    }
}

/// Smallest |pre-activation| over every hidden unit and row.
pub fn kink_margin(params: &MlpParams, x: &DenseMatrix) -> f64 {
    forward(params, x)
        .unwrap()
        .pre_activations
        .iter()
        .flat_map(|z| z.data().iter().map(|v| v.abs()).collect::<Vec<_>>())
        .fold(f64::INFINITY, f64::min)
}

/// Random inputs that keep every hidden unit away from the ReLU kink, so a
/// central difference never straddles it.
pub fn safe_inputs(rng: &mut Rng, params: &MlpParams, rows: usize) -> DenseMatrix {
    loop {
        let x = random_matrix(rng, rows, params.input_dim(), 1.5);
        if kink_margin(params, &x) > 1e-3 {
            return x;
        }
    }
}

pub fn probs_of(params: &MlpParams, x: &DenseMatrix) -> PredictionBatch {
    softmax(&forward(params, x).unwrap().logits).unwrap()
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Largest relative error between `analytic` and central differences of `f`
/// over `coords` random coordinates of `theta`.
pub fn fd_worst(
    rng: &mut Rng,
    theta: &[f64],
    analytic: &[f64],
    coords: usize,
    f: impl Fn(&[f64]) -> f64,
) -> f64 {
    assert_eq!(theta.len(), analytic.len());
    let mut worst: f64 = 0.0;
    let mut probe = theta.to_vec();
    for _ in 0..coords {
        let i = rng.random_range(0..theta.len());
        probe[i] = theta[i] + FD_STEP;
        let up = f(&probe);
        probe[i] = theta[i] - FD_STEP;
        let down = f(&probe);
        probe[i] = theta[i];
        let numeric = (up - down) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    worst
}

/// Random rows on the simplex: mostly softmax of random logits, sometimes
/// peaked, one-hot or uniform.
pub fn random_prediction_batch(rng: &mut Rng, b: usize, k: usize) -> PredictionBatch {
    let mut data = Vec::with_capacity(b * k);
    for _ in 0..b {
        match rng.random_range(0..6) {
            0 => {
                let hot = rng.random_range(0..k);
                data.extend((0..k).map(|c| if c == hot { 1.0 } else { 0.0 }));
            }
            1 => data.extend(std::iter::repeat_n(1.0 / k as f64, k)),
            kind => {
                let scale = if kind == 2 { 30.0 } else { 3.0 };
                let z: Vec<f64> = (0..k).map(|_| rng.random_range(-scale..scale)).collect();
                let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                data.extend(e.iter().map(|v| v / s));
            }
        }
    }
    PredictionBatch::new(DenseMatrix::new(b, k, data).unwrap()).unwrap()
}
