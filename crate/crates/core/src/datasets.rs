//! Synthetic problems and their JSON file format.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, contract};
use crate::io;
use crate::rng::{self, Purpose};
use crate::Result;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub generator: String,
    /// Number of nonzeros of the ground truth, when there is one.
    pub sparsity: Option<usize>,
    #[serde(default)]
    pub rng: String,
}

/// Design matrix (row-major), targets and optional noiseless ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    n: usize,
    d: usize,
    x: Vec<f64>,
    y: Vec<f64>,
    beta_star: Option<Vec<f64>>,
    pub meta: DatasetMeta,
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    meta: DatasetMeta,
    #[serde(rename = "X")]
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    beta_star: Option<Vec<f64>>,
}

/// Left-to-right dot product; the single definition used to produce and to
/// check noiseless targets.
pub fn row_dot(row: &[f64], v: &[f64]) -> f64 {
    row.iter().zip(v).fold(0.0, |acc, (a, b)| acc + a * b)
}

impl Dataset {
    /// Validates shapes and, when a ground truth is given, that `y == X·beta_star`
    /// holds exactly.
    pub fn new(rows: Vec<Vec<f64>>, y: Vec<f64>, beta_star: Option<Vec<f64>>, meta: DatasetMeta) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(contract("dataset needs at least one example"));
        }
        let d = rows[0].len();
        if d == 0 {
            return Err(contract("dataset needs at least one feature"));
        }
        let mut x = Vec::with_capacity(n * d);
        for r in &rows {
            check_len("design-matrix row", d, r.len())?;
            x.extend_from_slice(r);
        }
        Self::from_flat(n, d, x, y, beta_star, meta)
    }

    fn from_flat(
        n: usize,
        d: usize,
        x: Vec<f64>,
        y: Vec<f64>,
        beta_star: Option<Vec<f64>>,
        meta: DatasetMeta,
    ) -> Result<Self> {
        check_len("targets", n, y.len())?;
        let ds = Dataset {
            n,
            d,
            x,
            y,
            beta_star,
            meta,
        };
        if let Some(bs) = &ds.beta_star {
            check_len("beta_star", d, bs.len())?;
            for i in 0..n {
                if row_dot(ds.row(i), bs) != ds.y[i] {
                    return Err(contract(format!("y[{i}] differs from <x_{i}, beta_star>")));
                }
            }
        }
        Ok(ds)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn beta_star(&self) -> Option<&[f64]> {
        self.beta_star.as_deref()
    }

    pub fn x_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.d, &self.x)
    }

    pub fn y_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.y)
    }

    /// max_i ‖x_i‖₂.
    pub fn max_row_norm(&self) -> f64 {
        (0..self.n)
            .map(|i| self.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.n).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = DatasetFile {
            meta: self.meta.clone(),
            x: (0..self.n).map(|i| self.row(i).to_vec()).collect(),
            y: self.y.clone(),
            beta_star: self.beta_star.clone(),
        };
        io::to_json_string(&file)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: DatasetFile = serde_json::from_str(text)?;
        Self::new(f.x, f.y, f.beta_star, f.meta)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn gaussian_rows(rng: &mut rng::StreamRng, n: usize, d: usize) -> Vec<f64> {
    (0..n * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Noiseless sparse regression: Gaussian rows, `k` nonzeros of ±1 on a
/// uniformly chosen support.
pub fn gen_sparse_regression(d: usize, n: usize, k: usize, seed: u64) -> Result<Dataset> {
    if d == 0 || n == 0 {
        return Err(contract("gen_sparse_regression needs d >= 1 and n >= 1"));
    }
    if k == 0 || k > d {
        return Err(contract(format!("sparsity k={k} must lie in [1, d={d}]")));
    }
    let mut rng = rng::stream(seed, Purpose::Data);
    let x = gaussian_rows(&mut rng, n, d);
    let mut beta_star = vec![0.0; d];
    for j in rand::seq::index::sample(&mut rng, d, k) {
        beta_star[j] = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    }
    let y = x.chunks(d).map(|r| row_dot(r, &beta_star)).collect();
    Dataset::from_flat(
        n,
        d,
        x,
        y,
        Some(beta_star),
        DatasetMeta {
            seed,
            generator: "sparse_regression".into(),
            sparsity: Some(k),
            rng: rng::RNG_ID.into(),
        },
    )
}

/// Fresh Gaussian inputs labelled by the ground truth of `data`.
pub fn gen_test_set(data: &Dataset, n_test: usize, seed: u64) -> Result<Dataset> {
    let bs = data
        .beta_star()
        .ok_or_else(|| contract("test set needs a dataset with a ground truth"))?
        .to_vec();
    if n_test == 0 {
        return Err(contract("n_test must be positive"));
    }
    let d = data.d();
    let mut rng = rng::stream(seed, Purpose::TestSet);
    let x = gaussian_rows(&mut rng, n_test, d);
    let y = x.chunks(d).map(|r| row_dot(r, &bs)).collect();
    let mut meta = data.meta.clone();
    meta.generator = format!("{}_test", meta.generator);
    meta.seed = seed;
    Dataset::from_flat(n_test, d, x, y, Some(bs), meta)
}

/// Knots of the 1-D target: three interior kinks on [-1, 1].
const TARGET_KNOTS: [(f64, f64); 5] = [(-1.0, 0.0), (-0.5, 0.6), (0.0, -0.2), (0.5, 0.5), (1.0, 0.1)];

/// The piecewise-linear 1-D target.
pub fn target_1d(x: f64) -> f64 {
    let k = &TARGET_KNOTS;
    if x <= k[0].0 {
        return k[0].1;
    }
    for w in k.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x <= x1 {
            return y0 + (y1 - y0) * (x - x0) / (x1 - x0);
        }
    }
    k[k.len() - 1].1
}

/// Twelve equispaced points on [-1, 1] labelled by [`target_1d`]. The target
/// is fixed; `seed` is recorded only.
pub fn gen_1d_regression(seed: u64) -> Dataset {
    let n = 12;
    let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![-1.0 + 2.0 * i as f64 / (n - 1) as f64]).collect();
    let y = rows.iter().map(|r| target_1d(r[0])).collect();
    Dataset::new(
        rows,
        y,
        None,
        DatasetMeta {
            seed,
            generator: "piecewise_linear_1d".into(),
            sparsity: None,
            rng: rng::RNG_ID.into(),
        },
    )
    .expect("fixed 1-D construction is valid")
}

/// Gaussian inputs with ±1 labels from a random Gaussian direction.
pub fn gen_linear_classification(d: usize, n: usize, seed: u64) -> Result<Dataset> {
    if d == 0 || n == 0 {
        return Err(contract("gen_linear_classification needs d >= 1 and n >= 1"));
    }
    let mut rng = rng::stream(seed, Purpose::Data);
    let x = gaussian_rows(&mut rng, n, d);
    let dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let y = x
        .chunks(d)
        .map(|r| if row_dot(r, &dir) >= 0.0 { 1.0 } else { -1.0 })
        .collect();
    Dataset::from_flat(
        n,
        d,
        x,
        y,
        None,
        DatasetMeta {
            seed,
            generator: "linear_classification".into(),
            sparsity: None,
            rng: rng::RNG_ID.into(),
        },
    )
}

/// Expected per-example loss `(1/4)(⟨β−β*, x⟩)²` over `x ~ N(0, I)`.
pub fn population_test_loss(beta: &[f64], beta_star: &[f64]) -> Result<f64> {
    check_len("beta", beta_star.len(), beta.len())?;
    Ok(0.25 * beta.iter().zip(beta_star).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sparse_regression_shapes() {
        let ds = gen_sparse_regression(30, 20, 3, 4).unwrap();
        assert_eq!((ds.n(), ds.d()), (20, 30));
        let bs = ds.beta_star().unwrap();
        assert_eq!(bs.iter().filter(|v| **v != 0.0).count(), 3);
        assert!(bs.iter().all(|v| *v == 0.0 || v.abs() == 1.0));
    }

    #[test]
    fn scalar_instance_is_consistent() {
        for seed in 0..5 {
            let ds = gen_sparse_regression(1, 1, 1, seed).unwrap();
            assert_eq!(ds.y()[0], ds.row(0)[0] * ds.beta_star().unwrap()[0]);
        }
    }

    #[test]
    fn invalid_sparsity_is_rejected() {
        assert!(matches!(
            gen_sparse_regression(3, 2, 4, 0),
            Err(crate::Error::Contract(_))
        ));
        assert!(gen_sparse_regression(3, 2, 0, 0).is_err());
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = gen_sparse_regression(7, 5, 2, 11).unwrap().to_json().unwrap();
        let b = gen_sparse_regression(7, 5, 2, 11).unwrap().to_json().unwrap();
        let c = gen_sparse_regression(7, 5, 2, 12).unwrap().to_json().unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let ds = gen_sparse_regression(6, 4, 2, 3).unwrap();
        let back = Dataset::from_json(&ds.to_json().unwrap()).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn tampered_targets_are_rejected() {
        let ds = gen_sparse_regression(4, 3, 1, 0).unwrap();
        let mut y = ds.y().to_vec();
        y[1] += 1e-12;
        let rows = (0..3).map(|i| ds.row(i).to_vec()).collect();
        let r = Dataset::new(rows, y, ds.beta_star().map(|b| b.to_vec()), ds.meta.clone());
        assert!(r.is_err());
    }

    #[test]
    fn one_d_dataset() {
        let ds = gen_1d_regression(3);
        assert_eq!(ds.n(), 12);
        assert!((1..12).all(|i| ds.row(i)[0] > ds.row(i - 1)[0]));
        assert_eq!(ds, gen_1d_regression(3));
        assert_eq!(ds.row(0)[0], -1.0);
        assert_eq!(ds.row(11)[0], 1.0);
    }

    #[test]
    fn target_has_three_kinks() {
        let slopes: Vec<f64> = (0..4)
            .map(|s| {
                let a = -1.0 + 0.5 * s as f64 + 0.1;
                (target_1d(a + 0.2) - target_1d(a)) / 0.2
            })
            .collect();
        assert!(slopes.windows(2).all(|w| (w[0] - w[1]).abs() > 0.1));
    }

    #[test]
    fn population_loss_cases() {
        assert_eq!(population_test_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(population_test_loss(&[1.0, 0.0, 0.0], &[0.0; 3]).unwrap(), 0.25);
        assert!(population_test_loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn classification_labels_are_signs() {
        let ds = gen_linear_classification(5, 40, 1).unwrap();
        assert!(ds.y().iter().all(|v| v.abs() == 1.0));
        assert!(ds.y().iter().any(|v| *v > 0.0) && ds.y().iter().any(|v| *v < 0.0));
    }
}
