//! Differentiable test models with per-example loss and gradient.
//!
//! Every model is an [`Objective`]: a flat parameter vector, `n` examples, and
//! per-example losses whose mean is the training loss. Batch quantities are
//! means over index sets computed with the fixed-topology tree reduction, so a
//! gradient never depends on thread count.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datasets::{row_dot, Dataset};
use crate::error::{check_len, contract};
use crate::exec::{tree_reduce_rows, tree_sum};
use crate::rng::{self, Purpose};
use crate::Result;

pub type ParamVector = DVector<f64>;

pub trait Objective: Sync {
    fn dim(&self) -> usize;
    fn num_examples(&self) -> usize;
    fn example_loss(&self, w: &[f64], i: usize) -> f64;
    /// Writes ∇ℓ_i(w) into `out` (length [`Objective::dim`]).
    fn example_grad(&self, w: &[f64], i: usize, out: &mut [f64]);

    fn batch_loss(&self, w: &[f64], idx: &[usize]) -> f64 {
        let mut vals: Vec<f64> = idx.iter().map(|&i| self.example_loss(w, i)).collect();
        tree_sum(&mut vals) / idx.len() as f64
    }

    fn batch_grad(&self, w: &[f64], idx: &[usize]) -> ParamVector {
        mean_grad_at(self, idx, &[w])
    }

    fn loss(&self, w: &[f64]) -> f64 {
        self.batch_loss(w, &all_indices(self.num_examples()))
    }

    fn grad(&self, w: &[f64]) -> ParamVector {
        self.batch_grad(w, &all_indices(self.num_examples()))
    }
}

pub fn all_indices(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Mean of ∇ℓ_{idx[k]} evaluated at `points[k]`, or at `points[0]` for every
/// k when a single point is given.
pub fn mean_grad_at<O: Objective + ?Sized>(obj: &O, idx: &[usize], points: &[&[f64]]) -> ParamVector {
    let p = obj.dim();
    let m = idx.len();
    debug_assert!(m > 0);
    debug_assert!(points.len() == 1 || points.len() == m);
    let mut buf = vec![0.0; m * p];
    for (k, (&i, row)) in idx.iter().zip(buf.chunks_mut(p)).enumerate() {
        let w = if points.len() == 1 { points[0] } else { points[k] };
        obj.example_grad(w, i, row);
    }
    tree_reduce_rows(&mut buf, m, p);
    let inv = m as f64;
    DVector::from_iterator(p, buf[..p].iter().map(|v| v / inv))
}

pub(crate) fn check_indices(idx: &[usize], n: usize) -> Result<()> {
    if idx.is_empty() {
        return Err(contract("index set must be nonempty"));
    }
    if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
        return Err(contract(format!("index {bad} out of range for {n} examples")));
    }
    Ok(())
}

pub(crate) fn check_params<O: Objective + ?Sized>(obj: &O, w: &[f64]) -> Result<()> {
    check_len("parameter vector", obj.dim(), w.len())
}

// ---------------------------------------------------------------------------
// Diagonal linear network

/// Parameters of β = w₊⊙w₊ − w₋⊙w₋ together with the initialization scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagNetParams {
    pub w_plus: DVector<f64>,
    pub w_minus: DVector<f64>,
    pub alpha: DVector<f64>,
}

impl DiagNetParams {
    /// w₊ = w₋ = α.
    pub fn at_init(alpha: DVector<f64>) -> Result<Self> {
        if alpha.iter().any(|a| !(*a > 0.0) || !a.is_finite()) {
            return Err(contract("initialization scale must be strictly positive"));
        }
        Ok(DiagNetParams {
            w_plus: alpha.clone(),
            w_minus: alpha.clone(),
            alpha,
        })
    }

    pub fn uniform(d: usize, alpha: f64) -> Result<Self> {
        Self::at_init(DVector::from_element(d, alpha))
    }

    pub fn dim(&self) -> usize {
        self.alpha.len()
    }

    pub fn beta(&self) -> DVector<f64> {
        self.w_plus.component_mul(&self.w_plus) - self.w_minus.component_mul(&self.w_minus)
    }

    /// `[w₊; w₋]`.
    pub fn to_flat(&self) -> ParamVector {
        let d = self.dim();
        DVector::from_iterator(2 * d, self.w_plus.iter().chain(self.w_minus.iter()).copied())
    }

    pub fn from_flat(flat: &[f64], alpha: DVector<f64>) -> Result<Self> {
        let d = alpha.len();
        check_len("diagonal-net parameters", 2 * d, flat.len())?;
        Ok(DiagNetParams {
            w_plus: DVector::from_column_slice(&flat[..d]),
            w_minus: DVector::from_column_slice(&flat[d..]),
            alpha,
        })
    }

    fn validate(&self) -> Result<()> {
        let d = self.alpha.len();
        check_len("w_plus", d, self.w_plus.len())?;
        check_len("w_minus", d, self.w_minus.len())?;
        if self.alpha.iter().any(|a| !(*a > 0.0)) {
            return Err(contract("initialization scale must be strictly positive"));
        }
        Ok(())
    }
}

/// β from a flat `[w₊; w₋]` vector.
pub fn diag_beta(flat: &[f64]) -> Vec<f64> {
    let d = flat.len() / 2;
    (0..d).map(|j| flat[j] * flat[j] - flat[d + j] * flat[d + j]).collect()
}

/// Squared-loss diagonal linear network, ℓ_i = ¼(⟨β, x_i⟩ − y_i)².
#[derive(Clone, Debug)]
pub struct DiagNet {
    data: Dataset,
}

impl DiagNet {
    pub fn new(data: Dataset) -> Self {
        DiagNet { data }
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn residual(&self, w: &[f64], i: usize) -> f64 {
        let d = self.data.d();
        let x = self.data.row(i);
        let mut s = 0.0;
        for j in 0..d {
            s += (w[j] * w[j] - w[d + j] * w[d + j]) * x[j];
        }
        s - self.data.y()[i]
    }

    /// Residuals of all examples at `w`.
    pub fn residuals(&self, w: &[f64]) -> Vec<f64> {
        (0..self.data.n()).map(|i| self.residual(w, i)).collect()
    }
}

impl Objective for DiagNet {
    fn dim(&self) -> usize {
        2 * self.data.d()
    }

    fn num_examples(&self) -> usize {
        self.data.n()
    }

    fn example_loss(&self, w: &[f64], i: usize) -> f64 {
        let r = self.residual(w, i);
        0.25 * r * r
    }

    fn example_grad(&self, w: &[f64], i: usize, out: &mut [f64]) {
        let d = self.data.d();
        let r = self.residual(w, i);
        let x = self.data.row(i);
        for j in 0..d {
            out[j] = r * x[j] * w[j];
            out[d + j] = -r * x[j] * w[d + j];
        }
    }
}

fn diag_setup(params: &DiagNetParams, data: &Dataset, idx: &[usize]) -> Result<ParamVector> {
    params.validate()?;
    check_len("predictor dimension", data.d(), params.dim())?;
    check_indices(idx, data.n())?;
    Ok(params.to_flat())
}

/// Batch loss `(1/(4|idx|)) Σ (⟨β, x_i⟩ − y_i)²`.
pub fn diag_net_loss(params: &DiagNetParams, data: &Dataset, idx: &[usize]) -> Result<f64> {
    let w = diag_setup(params, data, idx)?;
    Ok(DiagNet::new(data.clone()).batch_loss(w.as_slice(), idx))
}

/// Batch gradient with respect to `[w₊; w₋]`.
pub fn diag_net_grad(params: &DiagNetParams, data: &Dataset, idx: &[usize]) -> Result<ParamVector> {
    let w = diag_setup(params, data, idx)?;
    Ok(DiagNet::new(data.clone()).batch_grad(w.as_slice(), idx))
}

// ---------------------------------------------------------------------------
// One-hidden-layer ReLU network on scalar inputs

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReluNet1D {
    pub u: DVector<f64>,
    pub b: DVector<f64>,
    pub v: DVector<f64>,
    pub c: f64,
}

impl ReluNet1D {
    pub fn width(&self) -> usize {
        self.u.len()
    }

    /// Gaussian input weights, uniform biases in [-1, 1], output weights
    /// scaled by 1/√H, zero output bias.
    pub fn init(width: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, Purpose::Init);
        let u = DVector::from_fn(width, |_, _| rng.sample::<f64, _>(StandardNormal));
        let b = DVector::from_fn(width, |_, _| rng.random_range(-1.0..1.0));
        let scale = 1.0 / (width as f64).sqrt();
        let v = DVector::from_fn(width, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
        ReluNet1D { u, b, v, c: 0.0 }
    }

    pub fn forward(&self, x: f64) -> f64 {
        forward_flat(self.to_flat().as_slice(), self.width(), x)
    }

    /// `[u; b; v; c]`.
    pub fn to_flat(&self) -> ParamVector {
        let h = self.width();
        let mut f = DVector::zeros(3 * h + 1);
        f.rows_mut(0, h).copy_from(&self.u);
        f.rows_mut(h, h).copy_from(&self.b);
        f.rows_mut(2 * h, h).copy_from(&self.v);
        f[3 * h] = self.c;
        f
    }

    pub fn from_flat(width: usize, flat: &[f64]) -> Result<Self> {
        check_len("relu-net parameters", 3 * width + 1, flat.len())?;
        let h = width;
        Ok(ReluNet1D {
            u: DVector::from_column_slice(&flat[..h]),
            b: DVector::from_column_slice(&flat[h..2 * h]),
            v: DVector::from_column_slice(&flat[2 * h..3 * h]),
            c: flat[3 * h],
        })
    }

    /// Σ_j |v_j|·|u_j|.
    pub fn path_norm(&self) -> f64 {
        self.u.iter().zip(self.v.iter()).map(|(u, v)| (u * v).abs()).sum()
    }
}

fn forward_flat(w: &[f64], h: usize, x: f64) -> f64 {
    let mut out = w[3 * h];
    for j in 0..h {
        let pre = w[j] * x + w[h + j];
        if pre > 0.0 {
            out += w[2 * h + j] * pre;
        }
    }
    out
}

/// Squared loss ½(f(x_i) − y_i)² of a [`ReluNet1D`], with relu'(0) = 0.
#[derive(Clone, Debug)]
pub struct ReluRegression {
    data: Dataset,
    width: usize,
}

impl ReluRegression {
    pub fn new(data: Dataset, width: usize) -> Result<Self> {
        if data.d() != 1 {
            return Err(contract("the ReLU model takes scalar inputs"));
        }
        if width == 0 {
            return Err(contract("hidden width must be positive"));
        }
        Ok(ReluRegression { data, width })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn predict(&self, w: &[f64], x: f64) -> f64 {
        forward_flat(w, self.width, x)
    }
}

impl Objective for ReluRegression {
    fn dim(&self) -> usize {
        3 * self.width + 1
    }

    fn num_examples(&self) -> usize {
        self.data.n()
    }

    fn example_loss(&self, w: &[f64], i: usize) -> f64 {
        let r = forward_flat(w, self.width, self.data.row(i)[0]) - self.data.y()[i];
        0.5 * r * r
    }

    fn example_grad(&self, w: &[f64], i: usize, out: &mut [f64]) {
        let h = self.width;
        let x = self.data.row(i)[0];
        let r = forward_flat(w, h, x) - self.data.y()[i];
        for j in 0..h {
            let pre = w[j] * x + w[h + j];
            if pre > 0.0 {
                let rv = r * w[2 * h + j];
                out[j] = rv * x;
                out[h + j] = rv;
                out[2 * h + j] = r * pre;
            } else {
                out[j] = 0.0;
                out[h + j] = 0.0;
                out[2 * h + j] = 0.0;
            }
        }
        out[3 * h] = r;
    }
}

/// Batch gradient of `(1/(2|idx|)) Σ (f(x_i) − y_i)²` in `[u; b; v; c]` order.
pub fn relu_net_grad(params: &ReluNet1D, data: &Dataset, idx: &[usize]) -> Result<ParamVector> {
    let h = params.width();
    check_len("input bias", h, params.b.len())?;
    check_len("output weights", h, params.v.len())?;
    let model = ReluRegression::new(data.clone(), h)?;
    check_indices(idx, data.n())?;
    Ok(model.batch_grad(params.to_flat().as_slice(), idx))
}

// ---------------------------------------------------------------------------
// Linear predictor with a margin loss

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginLoss {
    Logistic,
    Exponential,
}

impl MarginLoss {
    pub fn value(self, m: f64) -> f64 {
        match self {
            MarginLoss::Logistic => {
                if m > 0.0 {
                    (-m).exp().ln_1p()
                } else {
                    -m + m.exp().ln_1p()
                }
            }
            MarginLoss::Exponential => (-m).exp(),
        }
    }

    pub fn derivative(self, m: f64) -> f64 {
        match self {
            MarginLoss::Logistic => {
                if m > 0.0 {
                    let e = (-m).exp();
                    -e / (1.0 + e)
                } else {
                    -1.0 / (1.0 + m.exp())
                }
            }
            MarginLoss::Exponential => -(-m).exp(),
        }
    }
}

/// ℓ_i(w) = loss(y_i⟨w, x_i⟩) with labels in {−1, +1}.
#[derive(Clone, Debug)]
pub struct LinearMargin {
    data: Dataset,
    kind: MarginLoss,
}

impl LinearMargin {
    pub fn new(data: Dataset, kind: MarginLoss) -> Result<Self> {
        if let Some(i) = data.y().iter().position(|&v| v != 1.0 && v != -1.0) {
            return Err(contract(format!("label {} at index {i} is not ±1", data.y()[i])));
        }
        Ok(LinearMargin { data, kind })
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn kind(&self) -> MarginLoss {
        self.kind
    }

    pub fn margin(&self, w: &[f64], i: usize) -> f64 {
        self.data.y()[i] * row_dot(self.data.row(i), w)
    }
}

impl Objective for LinearMargin {
    fn dim(&self) -> usize {
        self.data.d()
    }

    fn num_examples(&self) -> usize {
        self.data.n()
    }

    fn example_loss(&self, w: &[f64], i: usize) -> f64 {
        self.kind.value(self.margin(w, i))
    }

    fn example_grad(&self, w: &[f64], i: usize, out: &mut [f64]) {
        let s = self.kind.derivative(self.margin(w, i)) * self.data.y()[i];
        for (o, x) in out.iter_mut().zip(self.data.row(i)) {
            *o = s * x;
        }
    }
}

/// Mean margin loss of a linear predictor.
pub fn linear_model_margin_loss(w: &[f64], data: &Dataset, kind: MarginLoss) -> Result<f64> {
    let model = LinearMargin::new(data.clone(), kind)?;
    check_params(&model, w)?;
    Ok(model.loss(w))
}

// ---------------------------------------------------------------------------
// Quadratics with known constants

/// ℓ_i(w) = ½(w − w*)ᵀA(w − w*) + ⟨ζ_i, w − w*⟩ with Σ_i ζ_i = 0.
///
/// `A = Q diag(λ) Qᵀ` is built from prescribed eigenvalues, so the smoothness
/// constant max|λ|, the PL constant (smallest nonzero λ) and the gradient
/// variance σ² = mean ‖ζ_i‖² are exact. Negative eigenvalues are allowed; the
/// PL constant and the optimal value are then undefined.
#[derive(Clone, Debug)]
pub struct QuadraticObjective {
    curvature: DMatrix<f64>,
    eigenvalues: Vec<f64>,
    w_star: DVector<f64>,
    shifts: Vec<f64>,
    shift_mean: DVector<f64>,
    n: usize,
    sigma2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticSpec {
    pub dim: usize,
    pub num_examples: usize,
    /// Largest eigenvalue.
    pub smoothness: f64,
    /// Smallest nonzero eigenvalue.
    pub min_eigenvalue: f64,
    /// Number of zero eigenvalues (convex but not strongly convex when > 0).
    #[serde(default)]
    pub zero_eigenvalues: usize,
    /// Target root-mean-square norm of the per-example shifts.
    pub noise: f64,
}

impl QuadraticObjective {
    /// Builds the objective from eigenvalues, an orthonormal basis (columns),
    /// the minimizer and per-example shifts (re-centered to sum to zero).
    pub fn from_parts(
        eigenvalues: Vec<f64>,
        basis: &DMatrix<f64>,
        w_star: DVector<f64>,
        shifts: Vec<DVector<f64>>,
    ) -> Result<Self> {
        let d = eigenvalues.len();
        if d == 0 || shifts.is_empty() {
            return Err(contract("quadratic needs d >= 1 and n >= 1"));
        }
        check_len("basis rows", d, basis.nrows())?;
        check_len("basis columns", d, basis.ncols())?;
        check_len("minimizer", d, w_star.len())?;
        let n = shifts.len();
        let mut mean = DVector::zeros(d);
        for z in &shifts {
            check_len("shift", d, z.len())?;
            mean += z;
        }
        mean /= n as f64;
        let mut flat = Vec::with_capacity(n * d);
        for z in &shifts {
            flat.extend((z - &mean).iter());
        }
        let lam = DMatrix::from_diagonal(&DVector::from_column_slice(&eigenvalues));
        let mut a = basis * lam * basis.transpose();
        a = (&a + a.transpose()) * 0.5;
        let mut sq: Vec<f64> = flat.chunks(d).map(|z| z.iter().map(|v| v * v).sum()).collect();
        let sigma2 = tree_sum(&mut sq) / n as f64;
        let mut rows = flat.clone();
        tree_reduce_rows(&mut rows, n, d);
        let shift_mean = DVector::from_iterator(d, rows[..d].iter().map(|v| v / n as f64));
        Ok(QuadraticObjective {
            curvature: a,
            eigenvalues,
            w_star,
            shifts: flat,
            shift_mean,
            n,
            sigma2,
        })
    }

    /// Random instance: Haar-like orthonormal basis, eigenvalues spread
    /// geometrically between `min_eigenvalue` and `smoothness`, Gaussian
    /// minimizer and shifts.
    pub fn random(spec: &QuadraticSpec, seed: u64) -> Result<Self> {
        let nonzero = spec
            .dim
            .checked_sub(spec.zero_eigenvalues)
            .filter(|k| *k >= 1)
            .ok_or_else(|| contract("need at least one nonzero eigenvalue"))?;
        if !(spec.smoothness >= spec.min_eigenvalue && spec.min_eigenvalue > 0.0) {
            return Err(contract("eigenvalue range must satisfy 0 < min <= smoothness"));
        }
        let mut eig = Vec::with_capacity(spec.dim);
        for k in 0..nonzero {
            let t = if nonzero == 1 {
                0.0
            } else {
                k as f64 / (nonzero - 1) as f64
            };
            eig.push(spec.smoothness * (spec.min_eigenvalue / spec.smoothness).powf(t));
        }
        eig.resize(spec.dim, 0.0);
        Self::with_eigenvalues(&eig, spec.num_examples, spec.noise, seed)
    }

    /// Random basis, minimizer and shifts around prescribed eigenvalues.
    pub fn with_eigenvalues(eigenvalues: &[f64], n: usize, noise: f64, seed: u64) -> Result<Self> {
        let d = eigenvalues.len();
        if d == 0 || n == 0 {
            return Err(contract("quadratic needs d >= 1 and n >= 1"));
        }
        let mut rng = rng::stream(seed, Purpose::Data);
        let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let q = g.qr().q();
        let w_star = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut shifts: Vec<DVector<f64>> = (0..n)
            .map(|_| DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let mean = shifts.iter().fold(DVector::zeros(d), |acc, z| acc + z) / n as f64;
        for z in &mut shifts {
            *z -= &mean;
        }
        let ms: f64 = shifts.iter().map(|z| z.norm_squared()).sum::<f64>() / n as f64;
        let scale = if ms > 0.0 { noise / ms.sqrt() } else { 0.0 };
        for z in &mut shifts {
            *z *= scale;
        }
        Self::from_parts(eigenvalues.to_vec(), &q, w_star, shifts)
    }

    /// A = λI in the given dimension.
    pub fn isotropic(d: usize, n: usize, lambda: f64, noise: f64, seed: u64) -> Result<Self> {
        Self::with_eigenvalues(&vec![lambda; d], n, noise, seed)
    }

    pub fn curvature(&self) -> &DMatrix<f64> {
        &self.curvature
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn w_star(&self) -> &DVector<f64> {
        &self.w_star
    }

    pub fn shift(&self, i: usize) -> &[f64] {
        let d = self.w_star.len();
        &self.shifts[i * d..(i + 1) * d]
    }

    /// max |λ|.
    pub fn smoothness(&self) -> f64 {
        self.eigenvalues.iter().fold(0.0, |m, l| m.max(l.abs()))
    }

    pub fn is_convex(&self) -> bool {
        self.eigenvalues.iter().all(|l| *l >= 0.0)
    }

    pub fn is_strongly_convex(&self) -> bool {
        self.eigenvalues.iter().all(|l| *l > 0.0)
    }

    /// Smallest nonzero eigenvalue; `None` for indefinite curvature.
    pub fn pl_constant(&self) -> Option<f64> {
        if !self.is_convex() {
            return None;
        }
        self.eigenvalues
            .iter()
            .copied()
            .filter(|l| *l > 0.0)
            .fold(None, |m: Option<f64>, l| Some(m.map_or(l, |m| m.min(l))))
    }

    /// Minimum of the training loss (zero when convex).
    pub fn optimal_value(&self) -> Option<f64> {
        self.is_convex().then_some(0.0)
    }

    /// mean_i ‖ζ_i‖², equal to E‖∇ℓ_i(w) − ∇L(w)‖² for every w.
    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    fn displacement(&self, w: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(w) - &self.w_star
    }
}

impl Objective for QuadraticObjective {
    fn dim(&self) -> usize {
        self.w_star.len()
    }

    fn num_examples(&self) -> usize {
        self.n
    }

    fn example_loss(&self, w: &[f64], i: usize) -> f64 {
        let e = self.displacement(w);
        0.5 * e.dot(&(&self.curvature * &e)) + row_dot(self.shift(i), e.as_slice())
    }

    fn example_grad(&self, w: &[f64], i: usize, out: &mut [f64]) {
        let e = self.displacement(w);
        let ae = &self.curvature * &e;
        for ((o, a), z) in out.iter_mut().zip(ae.iter()).zip(self.shift(i)) {
            *o = a + z;
        }
    }

    fn loss(&self, w: &[f64]) -> f64 {
        let e = self.displacement(w);
        0.5 * e.dot(&(&self.curvature * &e)) + self.shift_mean.dot(&e)
    }

    fn grad(&self, w: &[f64]) -> ParamVector {
        &self.curvature * self.displacement(w) + &self.shift_mean
    }
}

// ---------------------------------------------------------------------------
// Empirical constants

/// Central finite-difference Hessian-vector product of the training loss.
pub fn hvp_fd<O: Objective + ?Sized>(obj: &O, w: &[f64], v: &DVector<f64>, eps: f64) -> DVector<f64> {
    let wv = DVector::from_column_slice(w);
    let gp = obj.grad((&wv + v * eps).as_slice());
    let gm = obj.grad((&wv - v * eps).as_slice());
    (gp - gm) / (2.0 * eps)
}

/// Spectrum summary of the training-loss Hessian at a point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvatureRange {
    pub max_abs: f64,
    pub largest: f64,
    pub smallest: f64,
}

/// Power iteration on finite-difference Hessian-vector products. The extreme
/// eigenvalues come from the shifted operators `H + cI` and `cI − H` with
/// `c` the dominant magnitude.
pub fn estimate_curvature_range<O: Objective + ?Sized>(obj: &O, w: &[f64], iters: usize, seed: u64) -> CurvatureRange {
    let p = obj.dim();
    let eps = 1e-5 * (1.0 + w.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    let power = |sign: f64, shift: f64, stream: u64| -> f64 {
        let mut rng = rng::substream(seed, Purpose::Probe, stream);
        let mut v = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        v /= v.norm();
        let mut lambda = 0.0;
        for _ in 0..iters.max(1) {
            let mv = hvp_fd(obj, w, &v, eps) * sign + &v * shift;
            lambda = v.dot(&mv);
            let nrm = mv.norm();
            if nrm == 0.0 {
                break;
            }
            v = mv / nrm;
        }
        lambda
    };
    let max_abs = power(1.0, 0.0, 0).abs();
    CurvatureRange {
        max_abs,
        largest: power(1.0, max_abs, 1) - max_abs,
        smallest: max_abs - power(-1.0, max_abs, 2),
    }
}

/// Largest Hessian eigenvalue magnitude over the given points.
pub fn estimate_smoothness<O: Objective + ?Sized>(obj: &O, points: &[&[f64]], iters: usize, seed: u64) -> f64 {
    points
        .iter()
        .enumerate()
        .map(|(k, w)| estimate_curvature_range(obj, w, iters, seed.wrapping_add(k as u64)).max_abs)
        .fold(0.0, f64::max)
}

/// Monte-Carlo estimate of E_i ‖∇ℓ_i(w) − ∇L(w)‖² over random `w ~ center + N(0, I)`.
pub fn estimate_gradient_variance<O: Objective + ?Sized>(obj: &O, center: &[f64], probes: usize, seed: u64) -> f64 {
    let p = obj.dim();
    let mut rng = rng::stream(seed, Purpose::Probe);
    let mut acc = Vec::with_capacity(probes);
    let mut g_i = vec![0.0; p];
    for _ in 0..probes {
        let w: Vec<f64> = center
            .iter()
            .map(|c| c + rng.sample::<f64, _>(StandardNormal))
            .collect();
        let i = rng.random_range(0..obj.num_examples());
        obj.example_grad(&w, i, &mut g_i);
        let g = obj.grad(&w);
        acc.push(g_i.iter().zip(g.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>());
    }
    tree_sum(&mut acc) / probes.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{gen_sparse_regression, DatasetMeta};

    fn tiny(rows: Vec<Vec<f64>>, y: Vec<f64>) -> Dataset {
        Dataset::new(
            rows,
            y,
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
    fn diag_net_hand_example() {
        let data = tiny(vec![vec![2.0]], vec![2.0]);
        let params = DiagNetParams {
            w_plus: DVector::from_element(1, 1.5),
            w_minus: DVector::from_element(1, 0.5),
            alpha: DVector::from_element(1, 1.0),
        };
        assert_eq!(params.beta()[0], 2.0);
        assert_eq!(diag_net_loss(&params, &data, &[0]).unwrap(), 1.0);
        let g = diag_net_grad(&params, &data, &[0]).unwrap();
        assert_eq!(g.as_slice(), &[6.0, -2.0]);
    }

    #[test]
    fn diag_net_zero_targets_at_init() {
        let mut ds = gen_sparse_regression(5, 3, 2, 1).unwrap();
        let rows = (0..3).map(|i| ds.row(i).to_vec()).collect();
        ds = tiny(rows, vec![0.0; 3]);
        let p = DiagNetParams::uniform(5, 0.3).unwrap();
        assert_eq!(diag_net_loss(&p, &ds, &[0, 1, 2]).unwrap(), 0.0);
        assert!(diag_net_grad(&p, &ds, &[0, 2]).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn diag_net_replicated_batch() {
        let ds = gen_sparse_regression(6, 4, 2, 9).unwrap();
        let p = DiagNetParams::uniform(6, 0.7).unwrap();
        let a = diag_net_loss(&p, &ds, &[0, 1, 3]).unwrap();
        let b = diag_net_loss(&p, &ds, &[0, 1, 3, 0, 1, 3]).unwrap();
        assert!((a - b).abs() <= 1e-15 * a.abs());
    }

    #[test]
    fn diag_net_contract_errors() {
        let ds = gen_sparse_regression(6, 4, 2, 9).unwrap();
        let p = DiagNetParams::uniform(5, 0.7).unwrap();
        assert!(matches!(
            diag_net_loss(&p, &ds, &[0]),
            Err(crate::Error::Dimension { .. })
        ));
        let p = DiagNetParams::uniform(6, 0.7).unwrap();
        assert!(diag_net_loss(&p, &ds, &[]).is_err());
        assert!(diag_net_loss(&p, &ds, &[4]).is_err());
        assert!(DiagNetParams::uniform(3, 0.0).is_err());
    }

    #[test]
    fn relu_single_unit_hand_example() {
        let data = tiny(vec![vec![1.0]], vec![0.0]);
        let net = ReluNet1D {
            u: DVector::from_element(1, 1.0),
            b: DVector::from_element(1, 0.0),
            v: DVector::from_element(1, 1.0),
            c: 0.0,
        };
        let g = relu_net_grad(&net, &data, &[0]).unwrap();
        assert_eq!(g.as_slice(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn relu_zero_output_weights_kill_hidden_grads() {
        let data = crate::datasets::gen_1d_regression(0);
        let mut net = ReluNet1D::init(8, 1);
        net.v.fill(0.0);
        let g = relu_net_grad(&net, &data, &data.all_indices()).unwrap();
        assert!(g.rows(0, 16).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn relu_flat_round_trip() {
        let net = ReluNet1D::init(5, 2);
        assert_eq!(ReluNet1D::from_flat(5, net.to_flat().as_slice()).unwrap(), net);
    }

    #[test]
    fn margin_loss_at_zero() {
        let ds = crate::datasets::gen_linear_classification(3, 10, 0).unwrap();
        let w = [0.0; 3];
        let l = linear_model_margin_loss(&w, &ds, MarginLoss::Logistic).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(linear_model_margin_loss(&w, &ds, MarginLoss::Exponential).unwrap(), 1.0);
    }

    #[test]
    fn margin_loss_rejects_bad_labels() {
        let ds = tiny(vec![vec![1.0]], vec![0.5]);
        assert!(linear_model_margin_loss(&[0.0], &ds, MarginLoss::Logistic).is_err());
    }

    #[test]
    fn logistic_is_stable_for_large_margins() {
        assert_eq!(MarginLoss::Logistic.value(800.0), 0.0);
        assert!((MarginLoss::Logistic.value(-800.0) - 800.0).abs() < 1e-12);
        assert!(MarginLoss::Logistic.derivative(-800.0) == -1.0);
    }

    #[test]
    fn quadratic_constants() {
        let spec = QuadraticSpec {
            dim: 6,
            num_examples: 5,
            smoothness: 4.0,
            min_eigenvalue: 0.5,
            zero_eigenvalues: 2,
            noise: 0.3,
        };
        let q = QuadraticObjective::random(&spec, 3).unwrap();
        assert_eq!(q.smoothness(), 4.0);
        assert_eq!(q.pl_constant(), Some(0.5));
        assert!(q.is_convex() && !q.is_strongly_convex());
        assert!((q.sigma2() - 0.09).abs() < 1e-12);
        let ws = q.w_star().clone();
        assert!(q.loss(ws.as_slice()).abs() < 1e-15);
    }

    #[test]
    fn indefinite_quadratic_has_no_pl_constant() {
        let q = QuadraticObjective::with_eigenvalues(&[1.0, -2.0], 2, 0.0, 0).unwrap();
        assert_eq!(q.smoothness(), 2.0);
        assert_eq!(q.pl_constant(), None);
        assert_eq!(q.optimal_value(), None);
    }
}
