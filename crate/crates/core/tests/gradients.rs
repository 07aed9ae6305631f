//! Analytic gradients against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use samlab_core::datasets::{gen_1d_regression, gen_linear_classification, gen_sparse_regression};
use samlab_core::model_zoo::{
    DiagNet, LinearMargin, MarginLoss, QuadraticObjective, QuadraticSpec, ReluNet1D, ReluRegression,
};
use samlab_core::Objective;

const POINTS: usize = 100;
const TOL: f64 = 1e-5;

fn fd_grad<O: Objective>(obj: &O, w: &[f64], h: f64) -> Vec<f64> {
    let mut x = w.to_vec();
    (0..w.len())
        .map(|j| {
            x[j] = w[j] + h;
            let up = obj.loss(&x);
            x[j] = w[j] - h;
            let down = obj.loss(&x);
            x[j] = w[j];
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / scale.max(1e-8)
}

fn normal_point(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn check_family<O: Objective>(obj: &O, points: impl Iterator<Item = Vec<f64>>, h: f64) {
    let mut worst = 0.0f64;
    for w in points {
        let g = obj.grad(&w);
        let e = rel_err(g.as_slice(), &fd_grad(obj, &w, h));
        worst = worst.max(e);
    }
    assert!(worst <= TOL, "worst relative error {worst:e}");
}

#[test]
fn diagonal_network() {
    let obj = DiagNet::new(gen_sparse_regression(20, 10, 3, 1).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let pts: Vec<_> = (0..POINTS).map(|_| normal_point(&mut rng, 40, 0.5)).collect();
    check_family(&obj, pts.into_iter(), 1e-6);
}

#[test]
fn relu_network_away_from_kinks() {
    let data = gen_1d_regression(0);
    let width = 10;
    let obj = ReluRegression::new(data.clone(), width).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut pts = Vec::new();
    while pts.len() < POINTS {
        let net = ReluNet1D::init(width, rng.random());
        // Keep every pre-activation at least 1e-6 away from zero.
        let near_kink = (0..data.n()).any(|i| {
            let x = data.row(i)[0];
            (0..width).any(|j| (net.u[j] * x + net.b[j]).abs() < 1e-6)
        });
        if !near_kink {
            pts.push(net.to_flat().as_slice().to_vec());
        }
    }
    check_family(&obj, pts.into_iter(), 1e-8);
}

#[test]
fn linear_margin_losses() {
    let data = gen_linear_classification(8, 30, 3).unwrap();
    for kind in [MarginLoss::Logistic, MarginLoss::Exponential] {
        let obj = LinearMargin::new(data.clone(), kind).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let pts: Vec<_> = (0..POINTS).map(|_| normal_point(&mut rng, 8, 0.7)).collect();
        check_family(&obj, pts.into_iter(), 1e-6);
    }
}

#[test]
fn quadratic() {
    let q = QuadraticObjective::random(
        &QuadraticSpec {
            dim: 12,
            num_examples: 9,
            smoothness: 3.0,
            min_eigenvalue: 0.05,
            zero_eigenvalues: 2,
            noise: 1.0,
        },
        5,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let pts: Vec<_> = (0..POINTS).map(|_| normal_point(&mut rng, 12, 2.0)).collect();
    check_family(&q, pts.into_iter(), 1e-5);
}

#[test]
fn per_example_gradients_match_batch_mean() {
    let obj = DiagNet::new(gen_sparse_regression(6, 5, 2, 2).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let w = normal_point(&mut rng, 12, 0.5);
    let mut acc = [0.0; 12];
    let mut g = vec![0.0; 12];
    for i in 0..5 {
        obj.example_grad(&w, i, &mut g);
        for (a, b) in acc.iter_mut().zip(&g) {
            *a += b / 5.0;
        }
    }
    let full = obj.grad(&w);
    for (a, b) in acc.iter().zip(full.iter()) {
        assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
    }
}
