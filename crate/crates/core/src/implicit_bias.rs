//! Hyperbolic-entropy potential, its constrained minimizer, and the
//! effective initialization scale accumulated along SAM trajectories on the
//! diagonal linear network.
//!
//! With the ¼-normalized squared loss and β = w₊² − w₋², the continuous-time
//! 1-SAM and n-SAM flows end at `argmin φ_{α'} s.t. Xβ = y` with
//!
//! * 1-SAM: `α' = α ⊙ exp(−(ρ/n) Σ_i x_i² ∫ r_sam,i r_i dt)`,
//! * n-SAM: `α' = α ⊙ exp(−(ρ/n²) ∫ (Xᵀr_sam) ⊙ (Xᵀr) dt)`,
//!
//! where `r` are residuals at the iterate and `r_sam` at the ascent point(s).
//! The leading-order variants substitute `r_sam ≈ r`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::datasets::{row_dot, Dataset};
use crate::error::{check_len, contract, SolverFailure};
use crate::model_zoo::diag_beta;
use crate::optimizers::{Ascent, StepContext, StepObserver};
use crate::{Error, Result};

/// `asinh` without overflow for large |z| and without cancellation near 0.
pub fn stable_asinh(z: f64) -> f64 {
    let a = z.abs();
    let v = if a > 1e150 {
        a.ln() + std::f64::consts::LN_2
    } else {
        let s = (1.0 + a * a).sqrt();
        (a + a * a / (1.0 + s)).ln_1p()
    };
    v.copysign(z)
}

/// `q(z) = 2 − √(4 + z²) + z·asinh(z/2)`, evaluated as
/// `z·asinh(z/2) − z²/(2 + √(4 + z²))` to keep accuracy near zero.
pub fn hypentropy_q(z: f64) -> f64 {
    let a = z.abs();
    if a > 1e150 {
        // √(4+z²) ≈ |z| and the first term dominates.
        return a * stable_asinh(a / 2.0) - a + 2.0;
    }
    let s = (4.0 + a * a).sqrt();
    a * stable_asinh(a / 2.0) - a * a / (2.0 + s)
}

/// Initialization scale of the potential.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PotentialSpec {
    alpha: DVector<f64>,
}

impl PotentialSpec {
    pub fn new(alpha: DVector<f64>) -> Result<Self> {
        if alpha.is_empty() || alpha.iter().any(|a| !(*a > 0.0) || !a.is_finite()) {
            return Err(contract("potential scale must be a nonempty positive vector"));
        }
        Ok(PotentialSpec { alpha })
    }

    pub fn uniform(d: usize, alpha: f64) -> Result<Self> {
        Self::new(DVector::from_element(d, alpha))
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }
}

/// `φ_α(β) = Σ α_i² q(β_i/α_i²)`.
pub fn potential_phi(spec: &PotentialSpec, beta: &[f64]) -> Result<f64> {
    check_len("beta", spec.alpha.len(), beta.len())?;
    Ok(spec
        .alpha
        .iter()
        .zip(beta)
        .map(|(a, b)| a * a * hypentropy_q(b / (a * a)))
        .sum())
}

/// `∇φ_α(β)_i = asinh(β_i / (2α_i²))`.
pub fn potential_grad(spec: &PotentialSpec, beta: &[f64]) -> Result<DVector<f64>> {
    check_len("beta", spec.alpha.len(), beta.len())?;
    Ok(DVector::from_iterator(
        beta.len(),
        spec.alpha
            .iter()
            .zip(beta)
            .map(|(a, b)| stable_asinh(b / (2.0 * a * a))),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMethod {
    DualNewton,
    /// Gradient descent on the dual, used when Newton stalls.
    FirstOrderDual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PotentialSolution {
    pub beta: DVector<f64>,
    pub nu: DVector<f64>,
    pub iterations: usize,
    pub feasibility_residual: f64,
    pub kkt_residual: f64,
    pub method: SolverMethod,
}

const NEWTON_MAX_ITERS: usize = 200;
const FIRST_ORDER_MAX_ITERS: usize = 200_000;

struct Dual<'a> {
    two_a2: DVector<f64>,
    x: &'a DMatrix<f64>,
    y: &'a DVector<f64>,
}

impl Dual<'_> {
    fn beta(&self, z: &DVector<f64>) -> DVector<f64> {
        self.two_a2.zip_map(z, |c, z| c * z.sinh())
    }

    /// (β(ν), F(ν) = Xβ(ν) − y, Xᵀν).
    fn eval(&self, nu: &DVector<f64>) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let z = self.x.tr_mul(nu);
        let b = self.beta(&z);
        let f = self.x * &b - self.y;
        (b, f, z)
    }

    /// Convex dual objective Σ 2α² cosh(Xᵀν) − yᵀν, whose gradient is F.
    fn objective(&self, nu: &DVector<f64>) -> f64 {
        let z = self.x.tr_mul(nu);
        self.two_a2.zip_map(&z, |c, z| c * z.cosh()).sum() - self.y.dot(nu)
    }
}

/// `argmin φ_α(β) s.t. Xβ = y` through the dual parametrization
/// `β(ν) = 2α² ⊙ sinh(Xᵀν)`, solving `Xβ(ν) = y` by damped Newton from ν = 0.
pub fn solve_min_potential(spec: &PotentialSpec, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<PotentialSolution> {
    let (n, d) = x.shape();
    check_len("feature dimension", spec.alpha.len(), d)?;
    check_len("targets", n, y.len())?;
    if n > d {
        return Err(contract("constraint system has more equations than unknowns"));
    }
    let sv = x.singular_values();
    let (smax, smin) = sv
        .iter()
        .fold((0.0f64, f64::INFINITY), |(a, b), s| (a.max(*s), b.min(*s)));
    if !(smin > 1e-12 * smax) {
        return Err(Error::Solver(Box::new(SolverFailure {
            reason: "design matrix is rank deficient".into(),
            iterations: 0,
            feasibility_residual: f64::NAN,
            last_beta: Vec::new(),
        })));
    }
    let dual = Dual {
        two_a2: spec.alpha.map(|a| 2.0 * a * a),
        x,
        y,
    };
    let target = 1e-11 * (1.0 + y.norm());
    let accept = 1e-10 * (1.0 + y.norm());

    let mut nu = DVector::zeros(n);
    let (mut beta, mut f, mut z) = dual.eval(&nu);
    let mut it = 0;
    while it < NEWTON_MAX_ITERS && f.norm() > target {
        it += 1;
        let weights = dual.two_a2.zip_map(&z, |c, z| c * z.cosh());
        let jac = x * DMatrix::from_diagonal(&weights) * x.transpose();
        let Some(chol) = jac.cholesky() else { break };
        let step = -chol.solve(&f);
        let fnorm = f.norm();
        let mut s = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let trial = &nu + &step * s;
            let (tb, tf, tz) = dual.eval(&trial);
            let tn = tf.norm();
            if tn.is_finite() && tb.iter().all(|v| v.is_finite()) && tn <= (1.0 - 1e-4 * s) * fnorm {
                nu = trial;
                beta = tb;
                f = tf;
                z = tz;
                moved = true;
                break;
            }
            s *= 0.5;
        }
        if !moved {
            break;
        }
    }
    let mut method = SolverMethod::DualNewton;
    if !(f.norm() <= accept) {
        method = SolverMethod::FirstOrderDual;
        let (b, ff, zz, extra) = first_order_dual(&dual, nu.clone(), accept);
        it += extra;
        if ff.norm() < f.norm() || !f.norm().is_finite() {
            beta = b;
            f = ff;
            z = zz;
        }
        if !(f.norm() <= accept) {
            return Err(Error::Solver(Box::new(SolverFailure {
                reason: "residual above tolerance after Newton and first-order fallback".into(),
                iterations: it,
                feasibility_residual: f.norm(),
                last_beta: beta.as_slice().to_vec(),
            })));
        }
        nu = dual_from_z(x, &z);
    }
    let kkt = potential_grad(spec, beta.as_slice())? - x.tr_mul(&nu);
    Ok(PotentialSolution {
        feasibility_residual: f.norm(),
        kkt_residual: kkt.norm(),
        beta,
        nu,
        iterations: it,
        method,
    })
}

fn dual_from_z(x: &DMatrix<f64>, z: &DVector<f64>) -> DVector<f64> {
    // ν with Xᵀν = z in the least-squares sense.
    let xt = x.transpose();
    xt.svd(true, true)
        .solve(z, 1e-14)
        .unwrap_or_else(|_| DVector::zeros(x.nrows()))
}

fn first_order_dual(
    dual: &Dual<'_>,
    mut nu: DVector<f64>,
    tol: f64,
) -> (DVector<f64>, DVector<f64>, DVector<f64>, usize) {
    let (mut b, mut f, mut z) = dual.eval(&nu);
    let mut g = dual.objective(&nu);
    let mut eta = 1.0;
    let mut it = 0;
    while it < FIRST_ORDER_MAX_ITERS && f.norm() > tol {
        it += 1;
        let fn2 = f.norm_squared();
        let mut moved = false;
        for _ in 0..80 {
            let trial = &nu - &f * eta;
            let tg = dual.objective(&trial);
            if tg.is_finite() && tg <= g - 0.5 * eta * fn2 {
                nu = trial;
                g = tg;
                moved = true;
                eta *= 2.0;
                break;
            }
            eta *= 0.5;
        }
        if !moved {
            break;
        }
        (b, f, z) = dual.eval(&nu);
    }
    (b, f, z, it)
}

/// `1 / (4R²·√(B·(B + ‖β*‖)))`.
pub fn rho_safety_bound(max_input_norm: f64, max_predictor_norm: f64, beta_star_norm: f64) -> Result<f64> {
    if !(max_input_norm > 0.0 && max_predictor_norm > 0.0 && beta_star_norm >= 0.0) {
        return Err(contract(
            "safety bound needs R > 0, B > 0 and a nonnegative target norm",
        ));
    }
    let b = max_predictor_norm;
    Ok(1.0 / (4.0 * max_input_norm * max_input_norm * (b * (b + beta_star_norm)).sqrt()))
}

/// `‖a − b‖∞ / ‖a‖∞`.
pub fn linf_rel_err(reference: &[f64], other: &[f64]) -> f64 {
    let num = reference
        .iter()
        .zip(other)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let den = reference.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    num / den
}

pub fn l1_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

// ---------------------------------------------------------------------------
// Effective-α accumulation

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasVariant {
    OneSamExact,
    NSamExact,
    OneSamLeading,
    NSamLeading,
}

impl BiasVariant {
    pub fn label(self) -> &'static str {
        match self {
            BiasVariant::OneSamExact => "one_sam_exact",
            BiasVariant::NSamExact => "n_sam_exact",
            BiasVariant::OneSamLeading => "one_sam_leading",
            BiasVariant::NSamLeading => "n_sam_leading",
        }
    }
}

/// Running exponent `∫ ρ·I(t) dt` of one effective-α variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectiveAlphaAccumulator {
    pub variant: BiasVariant,
    pub alpha: DVector<f64>,
    pub running_integral: DVector<f64>,
    /// Radius of the most recent step.
    pub rho: f64,
    pub steps: u64,
}

impl EffectiveAlphaAccumulator {
    pub fn new(variant: BiasVariant, alpha: DVector<f64>) -> Self {
        let d = alpha.len();
        EffectiveAlphaAccumulator {
            variant,
            alpha,
            running_integral: DVector::zeros(d),
            rho: 0.0,
            steps: 0,
        }
    }

    /// `α ⊙ exp(−running_integral)`.
    pub fn effective_alpha(&self) -> DVector<f64> {
        self.alpha.zip_map(&self.running_integral, |a, e| a * (-e).exp())
    }
}

fn residuals_at(data: &Dataset, w: &[f64]) -> Vec<f64> {
    let beta = diag_beta(w);
    (0..data.n())
        .map(|i| row_dot(data.row(i), &beta) - data.y()[i])
        .collect()
}

fn residual_one(data: &Dataset, w: &[f64], i: usize) -> f64 {
    let d = data.d();
    let x = data.row(i);
    let mut s = 0.0;
    for j in 0..d {
        s += (w[j] * w[j] - w[d + j] * w[d + j]) * x[j];
    }
    s - data.y()[i]
}

/// Xᵀr / n.
fn correlation(data: &Dataset, r: &[f64]) -> Vec<f64> {
    let (n, d) = (data.n(), data.d());
    let mut out = vec![0.0; d];
    for (i, ri) in r.iter().enumerate() {
        for (o, x) in out.iter_mut().zip(data.row(i)) {
            *o += x * ri;
        }
    }
    out.iter_mut().for_each(|v| *v /= n as f64);
    out
}

/// Leading-order integrands at residuals `r`: ((1/n)Σ x_i² r_i², ((1/n)Xᵀr)²).
fn leading_integrands(data: &Dataset, r: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (data.n(), data.d());
    let mut one = vec![0.0; d];
    for (i, ri) in r.iter().enumerate() {
        for (o, x) in one.iter_mut().zip(data.row(i)) {
            *o += x * x * ri * ri;
        }
    }
    one.iter_mut().for_each(|v| *v /= n as f64);
    let nsam = correlation(data, r).into_iter().map(|c| c * c).collect();
    (one, nsam)
}

/// Adds `γ_t·ρ_t·I(w_t)` for one optimizer step. Exact variants require the
/// step's full-batch ascent points of the matching kind; steps without an
/// ascent (plain gradient steps) contribute nothing to them.
pub fn accumulate_effective_alpha(
    acc: &mut EffectiveAlphaAccumulator,
    data: &Dataset,
    ctx: &StepContext<'_>,
) -> Result<()> {
    let (n, d) = (data.n(), data.d());
    check_len("diagonal-net parameters", 2 * d, ctx.w.len())?;
    check_len("accumulator scale", d, acc.alpha.len())?;
    let scale = ctx.gamma * ctx.rho;
    acc.rho = ctx.rho;
    acc.steps += 1;
    let integrand: Vec<f64> = match acc.variant {
        BiasVariant::OneSamLeading => leading_integrands(data, &residuals_at(data, ctx.w)).0,
        BiasVariant::NSamLeading => leading_integrands(data, &residuals_at(data, ctx.w)).1,
        BiasVariant::OneSamExact => match ctx.ascent {
            Ascent::None => return Ok(()),
            Ascent::PerExample(points) if points.len() == n && ctx.batch.len() == n => {
                let r = residuals_at(data, ctx.w);
                let mut out = vec![0.0; d];
                for (i, (p, &bi)) in points.iter().zip(ctx.batch).enumerate() {
                    if bi != i {
                        return Err(contract("per-example ascent points must cover the data in order"));
                    }
                    let prod = residual_one(data, p.as_slice(), i) * r[i];
                    for (o, x) in out.iter_mut().zip(data.row(i)) {
                        *o += x * x * prod;
                    }
                }
                out.iter_mut().for_each(|v| *v /= n as f64);
                out
            }
            _ => return Err(contract("1-SAM accumulator needs full-batch per-example ascent points")),
        },
        BiasVariant::NSamExact => match ctx.ascent {
            Ascent::None => return Ok(()),
            Ascent::Shared(p) if ctx.batch.len() == n => {
                let a = correlation(data, &residuals_at(data, p.as_slice()));
                let b = correlation(data, &residuals_at(data, ctx.w));
                a.iter().zip(&b).map(|(u, v)| u * v).collect()
            }
            _ => return Err(contract("n-SAM accumulator needs a shared full-batch ascent point")),
        },
    };
    for (acc_j, v) in acc.running_integral.iter_mut().zip(&integrand) {
        *acc_j += scale * v;
    }
    Ok(())
}

/// Observer maintaining effective-α accumulators plus the quantities used to
/// compare 1-SAM and n-SAM bias strengths.
pub struct BiasTracker<'a> {
    data: &'a Dataset,
    pub accumulators: Vec<EffectiveAlphaAccumulator>,
    /// ∫ ρ·L dt.
    pub loss_integral: f64,
    /// Largest ‖β(t)‖₂ seen.
    pub max_predictor_norm: f64,
    /// Steps where ‖I_1SAM‖₁ < ‖I_nSAM‖₁ beyond rounding.
    pub cauchy_schwarz_violations: u64,
    one_leading: DVector<f64>,
    n_leading: DVector<f64>,
}

impl<'a> BiasTracker<'a> {
    pub fn new(data: &'a Dataset, alpha: &DVector<f64>, variants: &[BiasVariant]) -> Self {
        let d = data.d();
        BiasTracker {
            data,
            accumulators: variants
                .iter()
                .map(|v| EffectiveAlphaAccumulator::new(*v, alpha.clone()))
                .collect(),
            loss_integral: 0.0,
            max_predictor_norm: 0.0,
            cauchy_schwarz_violations: 0,
            one_leading: DVector::zeros(d),
            n_leading: DVector::zeros(d),
        }
    }

    pub fn accumulator(&self, variant: BiasVariant) -> Option<&EffectiveAlphaAccumulator> {
        self.accumulators.iter().find(|a| a.variant == variant)
    }

    pub fn summary(&self) -> BiasSummary {
        BiasSummary {
            d: self.data.d(),
            n: self.data.n(),
            one_sam_leading: self.one_leading.as_slice().to_vec(),
            n_sam_leading: self.n_leading.as_slice().to_vec(),
            loss_integral: self.loss_integral,
            cauchy_schwarz_violations: self.cauchy_schwarz_violations,
        }
    }
}

impl StepObserver for BiasTracker<'_> {
    fn observe(&mut self, ctx: &StepContext<'_>) -> Result<()> {
        for acc in &mut self.accumulators {
            accumulate_effective_alpha(acc, self.data, ctx)?;
        }
        let r = residuals_at(self.data, ctx.w);
        let (one, nsam) = leading_integrands(self.data, &r);
        let (l1, ln) = (l1_norm(&one), l1_norm(&nsam));
        if l1 < ln * (1.0 - 1e-12) {
            self.cauchy_schwarz_violations += 1;
        }
        let scale = ctx.gamma * ctx.rho;
        for j in 0..one.len() {
            self.one_leading[j] += scale * one[j];
            self.n_leading[j] += scale * nsam[j];
        }
        let loss = r.iter().map(|v| v * v).sum::<f64>() / (4.0 * r.len() as f64);
        self.loss_integral += scale * loss;
        let b = diag_beta(ctx.w);
        self.max_predictor_norm = self.max_predictor_norm.max(b.iter().map(|v| v * v).sum::<f64>().sqrt());
        Ok(())
    }

    fn export(&self) -> Option<(String, Vec<f64>)> {
        self.accumulators
            .first()
            .map(|a| (a.variant.label().to_owned(), a.running_integral.as_slice().to_vec()))
    }
}

/// Leading-order bias quantities of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasSummary {
    pub d: usize,
    pub n: usize,
    pub one_sam_leading: Vec<f64>,
    pub n_sam_leading: Vec<f64>,
    pub loss_integral: f64,
    pub cauchy_schwarz_violations: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasComparison {
    pub delta_one_sam_l1: f64,
    pub delta_n_sam_l1: f64,
    /// `None` when both exponents vanish.
    pub ratio: Option<f64>,
    /// `4d·∫ρL dt` along the 1-SAM run (the 4 undoes the ¼ loss scale).
    pub predicted_one_sam: f64,
    /// `4(d/n)·∫ρL dt` along the n-SAM run.
    pub predicted_n_sam: f64,
    pub cauchy_schwarz_holds: bool,
}

/// Side-by-side leading-order bias strengths of a 1-SAM and an n-SAM run.
pub fn compare_bias_magnitudes(one_sam_run: &BiasSummary, n_sam_run: &BiasSummary) -> Result<BiasComparison> {
    if one_sam_run.d != n_sam_run.d || one_sam_run.n != n_sam_run.n {
        return Err(contract("runs were made on different problem sizes"));
    }
    let a = l1_norm(&one_sam_run.one_sam_leading);
    let b = l1_norm(&n_sam_run.n_sam_leading);
    let (d, n) = (one_sam_run.d as f64, one_sam_run.n as f64);
    Ok(BiasComparison {
        delta_one_sam_l1: a,
        delta_n_sam_l1: b,
        ratio: (b > 0.0).then(|| a / b),
        predicted_one_sam: 4.0 * d * one_sam_run.loss_integral,
        predicted_n_sam: 4.0 * d / n * n_sam_run.loss_integral,
        cauchy_schwarz_holds: one_sam_run.cauchy_schwarz_violations == 0 && n_sam_run.cauchy_schwarz_violations == 0,
    })
}

/// Counts steps at which some coordinate of w₊ or w₋ is not positive.
#[derive(Clone, Debug, Default)]
pub struct SignMonitor {
    pub violating_steps: u64,
    pub first_violation: Option<u64>,
}

impl StepObserver for SignMonitor {
    fn observe(&mut self, ctx: &StepContext<'_>) -> Result<()> {
        if ctx.w.iter().any(|v| !(*v > 0.0)) {
            self.violating_steps += 1;
            self.first_violation.get_or_insert(ctx.t);
        }
        Ok(())
    }
}

/// The bias-verification report of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasVerifyReport {
    pub method: String,
    pub seed: u64,
    pub converged: bool,
    pub final_train_loss: f64,
    pub alpha: Vec<f64>,
    pub alpha_eff_1sam: Vec<f64>,
    pub alpha_eff_nsam: Vec<f64>,
    pub beta_flow: Vec<f64>,
    pub beta_potential: Vec<f64>,
    pub linf_rel_err: f64,
    pub l1_norms: BTreeMap<String, f64>,
}
