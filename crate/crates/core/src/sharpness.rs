//! m-sharpness by projected gradient ascent and the closed-form 1-sharpness
//! of linear models.
//!
//! Every value computed by ascent is a lower bound on the true maximum over
//! the ball; reports carry that label.

use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{check_len, contract};
use crate::exec::Execution;
use crate::model_zoo::{check_params, LinearMargin, MarginLoss, Objective};
use crate::optimizers::projected_ascent;
use crate::rng::{self, Purpose};
use crate::Result;

pub const VALUE_LABEL: &str = "PGA lower bound";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharpnessOptions {
    #[serde(default = "default_fraction")]
    pub step_fraction: f64,
    /// Shuffle the evaluated examples before partitioning.
    #[serde(default)]
    pub shuffle_seed: Option<u64>,
    /// Seed for random restarts on batches with a vanishing gradient.
    #[serde(default)]
    pub restart_seed: u64,
    #[serde(skip)]
    pub execution: Execution,
}

fn default_fraction() -> f64 {
    0.1
}

impl Default for SharpnessOptions {
    fn default() -> Self {
        SharpnessOptions {
            step_fraction: 0.1,
            shuffle_seed: None,
            restart_seed: 0,
            execution: Execution::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharpnessReport {
    pub m: usize,
    pub rho: f64,
    pub ascent_iters: usize,
    pub per_batch_values: Vec<f64>,
    pub mean_sharpness: f64,
    /// Batches whose gradient vanished at δ = 0; their ascent started from a
    /// seeded random point on the sphere.
    pub flagged_batches: Vec<usize>,
    pub suboptimality_factor: Option<f64>,
    pub label: String,
}

fn batches(n_eval: usize, m: usize, shuffle: Option<u64>) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n_eval).collect();
    if let Some(seed) = shuffle {
        use rand::seq::SliceRandom;
        idx.shuffle(&mut rng::stream(seed, Purpose::Shuffle));
    }
    idx.chunks(m).map(|c| c.to_vec()).collect()
}

/// Mean over consecutive size-`m` batches of the first `eval_points`
/// examples of `max_{‖δ‖≤ρ} L_batch(w + δ) − L_batch(w)`, each maximum
/// approximated by `iters` steps of [`projected_ascent`] (best point kept).
pub fn m_sharpness<O: Objective + ?Sized>(
    obj: &O,
    w: &[f64],
    m: usize,
    rho: f64,
    iters: usize,
    eval_points: usize,
    opts: &SharpnessOptions,
) -> Result<SharpnessReport> {
    check_params(obj, w)?;
    if m == 0 || iters == 0 {
        return Err(contract("m-sharpness needs m >= 1 and iters >= 1"));
    }
    if !(rho > 0.0) || !rho.is_finite() {
        return Err(contract("m-sharpness needs a positive radius"));
    }
    if eval_points == 0 || eval_points > obj.num_examples() {
        return Err(contract(format!(
            "eval_points {eval_points} must lie in [1, {}]",
            obj.num_examples()
        )));
    }
    let parts = batches(eval_points, m, opts.shuffle_seed);
    let results = opts.execution.map(parts.len(), |b| {
        let mut restart = rng::substream(opts.restart_seed, Purpose::Restart, b as u64);
        let s = projected_ascent(obj, w, &parts[b], rho, iters, opts.step_fraction, Some(&mut restart));
        (s.best_gain, s.zero_gradient)
    });
    let per_batch_values: Vec<f64> = results.iter().map(|r| r.0).collect();
    let flagged_batches = results
        .iter()
        .enumerate()
        .filter(|(_, r)| r.1)
        .map(|(b, _)| b)
        .collect();
    let mean_sharpness = per_batch_values.iter().sum::<f64>() / per_batch_values.len() as f64;
    Ok(SharpnessReport {
        m,
        rho,
        ascent_iters: iters,
        per_batch_values,
        mean_sharpness,
        flagged_batches,
        suboptimality_factor: None,
        label: VALUE_LABEL.into(),
    })
}

/// `m_sharpness(100 iterations) / m_sharpness(1 iteration)`, `None` when the
/// single-step value is not positive.
pub fn ascent_suboptimality<O: Objective + ?Sized>(
    obj: &O,
    w: &[f64],
    m: usize,
    rho: f64,
    eval_points: usize,
    opts: &SharpnessOptions,
) -> Result<Option<f64>> {
    let many = m_sharpness(obj, w, m, rho, 100, eval_points, opts)?.mean_sharpness;
    let one = m_sharpness(obj, w, m, rho, 1, eval_points, opts)?.mean_sharpness;
    Ok((one > 0.0).then(|| many / one))
}

/// `(1/n) Σ ℓ(y_i⟨w, x_i⟩ − ρ‖x_i‖) − ℓ(y_i⟨w, x_i⟩)`.
pub fn linear_1_sharpness_closed_form(w: &[f64], data: &Dataset, rho: f64, kind: MarginLoss) -> Result<f64> {
    let model = LinearMargin::new(data.clone(), kind)?;
    check_len("linear weights", data.d(), w.len())?;
    let n = data.n();
    let total: f64 = (0..n)
        .map(|i| {
            let m = model.margin(w, i);
            let nx = data.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            kind.value(m - rho * nx) - kind.value(m)
        })
        .sum();
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::DatasetMeta;
    use crate::model_zoo::QuadraticObjective;
    use nalgebra::{DMatrix, DVector};

    fn single(x: Vec<f64>, y: f64) -> Dataset {
        Dataset::new(
            vec![x],
            vec![y],
            None,
            DatasetMeta {
                seed: 0,
                generator: "hand".into(),
                sparsity: None,
                rng: String::new(),
            },
        )
        .unwrap()
    }

    #[test]
    fn closed_form_hand_value() {
        let ds = single(vec![1.0, 0.0], 1.0);
        let v = linear_1_sharpness_closed_form(&[0.0, 0.0], &ds, 1.0, MarginLoss::Logistic).unwrap();
        let expected = (1.0 + std::f64::consts::E).ln() - std::f64::consts::LN_2;
        assert!((v - expected).abs() < 1e-15);
        assert!((v - 0.620115).abs() < 1e-6);
        assert_eq!(
            linear_1_sharpness_closed_form(&[0.3, 0.2], &ds, 0.0, MarginLoss::Logistic).unwrap(),
            0.0
        );
    }

    #[test]
    fn half_square_at_its_minimum() {
        let q = QuadraticObjective::from_parts(
            vec![1.0],
            &DMatrix::identity(1, 1),
            DVector::zeros(1),
            vec![DVector::zeros(1)],
        )
        .unwrap();
        let r = m_sharpness(&q, &[0.0], 1, 1.0, 100, 1, &SharpnessOptions::default()).unwrap();
        assert!((r.mean_sharpness - 0.5).abs() < 1e-15);
        assert_eq!(r.flagged_batches, vec![0]);
        assert_eq!(r.label, VALUE_LABEL);
    }

    #[test]
    fn argument_checks() {
        let ds = single(vec![1.0], 1.0);
        let m = LinearMargin::new(ds, MarginLoss::Logistic).unwrap();
        let o = SharpnessOptions::default();
        assert!(m_sharpness(&m, &[0.0], 0, 1.0, 1, 1, &o).is_err());
        assert!(m_sharpness(&m, &[0.0], 1, 0.0, 1, 1, &o).is_err());
        assert!(m_sharpness(&m, &[0.0], 1, 1.0, 1, 2, &o).is_err());
    }
}
