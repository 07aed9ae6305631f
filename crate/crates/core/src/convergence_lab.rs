//! Empirical checks of the SAM descent lemmas and convergence rates on
//! quadratics whose constants (β, μ, σ², L*) are known exactly.
//!
//! Throughout, `β` is the smoothness constant and `b` the batch size.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::contract;
use crate::exec::Execution;
use crate::model_zoo::{all_indices, check_params, Objective, QuadraticObjective};
use crate::optimizers::{
    full_batch_nsam_step, run_training, AscentConfig, Method, OptimizerSpec, RunOptions, Sampling, ScheduleRole,
    StepSchedule,
};
use crate::rng::{self, Purpose};
use crate::{Error, Result};

/// Additive slack for deterministic inequalities.
pub const SLACK: f64 = 1e-10;
/// Two-sided 99% normal quantile.
pub const Z99: f64 = 2.5758293035489004;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// α = −β.
    Smooth,
    /// α = 0.
    Convex,
    /// α = μ.
    StronglyConvex,
}

fn regime_coefficient(q: &QuadraticObjective, regime: Regime) -> Result<f64> {
    match regime {
        Regime::Smooth => Ok(-q.smoothness()),
        Regime::Convex if q.is_convex() => Ok(0.0),
        Regime::StronglyConvex if q.is_strongly_convex() => Ok(q.pl_constant().expect("strongly convex")),
        _ => Err(contract(format!(
            "{regime:?} constants are not available for this quadratic"
        ))),
    }
}

fn ascent_point(w: &[f64], g: &DVector<f64>, rho: f64) -> Vec<f64> {
    w.iter().zip(g.iter()).map(|(a, b)| a + rho * b).collect()
}

/// `⟨∇L(w + ρ∇L(w)), ∇L(w)⟩ − (1 + αρ)‖∇L(w)‖²`.
pub fn check_alignment(q: &QuadraticObjective, w: &[f64], rho: f64, regime: Regime) -> Result<f64> {
    check_params(q, w)?;
    let alpha = regime_coefficient(q, regime)?;
    let g = q.grad(w);
    let lhs = q.grad(&ascent_point(w, &g, rho)).dot(&g);
    Ok(lhs - (1.0 + alpha * rho) * g.norm_squared())
}

/// Per-step decrease of full-batch n-SAM:
/// `L(w) − γ(1−ρβ)(1−(γβ/2)(1−ρβ))‖∇L(w)‖² − L(w⁺)`.
pub fn check_descent(q: &QuadraticObjective, w: &[f64], gamma: f64, rho: f64) -> Result<f64> {
    check_params(q, w)?;
    let beta = q.smoothness();
    if !(gamma > 0.0 && gamma <= 1.0 / beta && rho >= 0.0 && rho < 1.0 / beta) {
        return Err(contract("descent check needs 0 < γ ≤ 1/β and 0 ≤ ρ < 1/β"));
    }
    let next = full_batch_nsam_step(q, w, gamma, rho)?;
    let c = 1.0 - rho * beta;
    let rhs = q.loss(w) - gamma * c * (1.0 - 0.5 * gamma * beta * c) * q.grad(w).norm_squared();
    Ok(rhs - q.loss(next.as_slice()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    /// Ascent and descent on the same batch.
    Shared,
    /// Independent ascent batch.
    Fresh,
}

/// Monte-Carlo estimate of an expectation with a 99% normal interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub lower: f64,
    pub upper: f64,
    pub rhs: f64,
    pub draws: usize,
    /// Signed distance of the confidence interval from violating the bound.
    pub margin: f64,
    pub holds: bool,
}

fn estimate(samples: &[f64], rhs: f64, lower_bound: bool) -> McEstimate {
    let k = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / k;
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (k - 1.0).max(1.0);
    let std_err = (var / k).sqrt();
    let (lower, upper) = (mean - Z99 * std_err, mean + Z99 * std_err);
    let margin = if lower_bound { lower - rhs } else { rhs - upper };
    McEstimate {
        mean,
        std_err,
        lower,
        upper,
        rhs,
        draws: samples.len(),
        margin,
        holds: margin >= -SLACK,
    }
}

fn draw_batch(rng: &mut rng::StreamRng, n: usize, b: usize) -> Vec<usize> {
    (0..b).map(|_| rng.random_range(0..n)).collect()
}

/// One stochastic SAM step from `w` with batches drawn with replacement.
fn stochastic_step(
    q: &QuadraticObjective,
    w: &[f64],
    gamma: f64,
    rho: f64,
    b: usize,
    coupling: Coupling,
    rng: &mut rng::StreamRng,
) -> (Vec<f64>, Vec<f64>) {
    let n = q.num_examples();
    let descent_batch = draw_batch(rng, n, b);
    let ascent_batch = match coupling {
        Coupling::Shared => descent_batch.clone(),
        Coupling::Fresh => draw_batch(rng, n, b),
    };
    let g_asc = q.batch_grad(w, &ascent_batch);
    let p = ascent_point(w, &g_asc, rho);
    let g = q.batch_grad(&p, &descent_batch);
    let next = w.iter().zip(g.iter()).map(|(a, b)| a - gamma * b).collect();
    (p, next)
}

/// Expected alignment `E⟨∇L_I(w + ρ∇L_J(w)), ∇L(w)⟩` against
/// `(½ − ρβ)‖∇L‖² − β²ρ²σ²/(2b)` (J = I when shared).
#[allow(clippy::too_many_arguments)]
pub fn check_stochastic_alignment(
    q: &QuadraticObjective,
    w: &[f64],
    rho: f64,
    batch_size: usize,
    draws: usize,
    coupling: Coupling,
    seed: u64,
    exec: Execution,
) -> Result<McEstimate> {
    check_params(q, w)?;
    if batch_size == 0 || draws < 2 {
        return Err(contract("need a positive batch size and at least two draws"));
    }
    let full = q.grad(w);
    let samples = exec.map(draws, |k| {
        let mut rng = rng::substream(seed, Purpose::Probe, k as u64);
        let n = q.num_examples();
        let descent_batch = draw_batch(&mut rng, n, batch_size);
        let ascent_batch = match coupling {
            Coupling::Shared => descent_batch.clone(),
            Coupling::Fresh => draw_batch(&mut rng, n, batch_size),
        };
        let p = ascent_point(w, &q.batch_grad(w, &ascent_batch), rho);
        q.batch_grad(&p, &descent_batch).dot(&full)
    });
    let beta = q.smoothness();
    let b = batch_size as f64;
    let rhs = (0.5 - rho * beta) * full.norm_squared() - beta * beta * rho * rho * q.sigma2() / (2.0 * b);
    Ok(estimate(&samples, rhs, true))
}

/// Expected one-step loss of stochastic SAM against the lemma bound:
/// fresh `L − (γ/4)‖∇L‖² + γβσ²(γ + ρ²β)/b` for γ, ρ ≤ 1/(2β);
/// shared `L − (3γ/8)‖∇L‖² + γβσ²(γ + 2ρ²β)/b` for γ ≤ 1/β, ρ ≤ 1/(4β).
#[allow(clippy::too_many_arguments)]
pub fn check_stochastic_descent(
    q: &QuadraticObjective,
    w: &[f64],
    gamma: f64,
    rho: f64,
    batch_size: usize,
    draws: usize,
    coupling: Coupling,
    seed: u64,
    exec: Execution,
) -> Result<McEstimate> {
    check_params(q, w)?;
    let beta = q.smoothness();
    let ok = match coupling {
        Coupling::Fresh => gamma <= 0.5 / beta && rho <= 0.5 / beta,
        Coupling::Shared => gamma <= 1.0 / beta && rho <= 0.25 / beta,
    };
    if !ok || !(gamma > 0.0) || rho < 0.0 || batch_size == 0 || draws < 2 {
        return Err(contract("step sizes outside the lemma's range"));
    }
    let samples = exec.map(draws, |k| {
        let mut rng = rng::substream(seed, Purpose::Probe, k as u64);
        let (_, next) = stochastic_step(q, w, gamma, rho, batch_size, coupling, &mut rng);
        q.loss(&next)
    });
    let g2 = q.grad(w).norm_squared();
    let noise = gamma * beta * q.sigma2() / batch_size as f64;
    let rhs = match coupling {
        Coupling::Fresh => q.loss(w) - 0.25 * gamma * g2 + noise * (gamma + rho * rho * beta),
        Coupling::Shared => q.loss(w) - 0.375 * gamma * g2 + noise * (gamma + 2.0 * rho * rho * beta),
    };
    Ok(estimate(&samples, rhs, false))
}

// ---------------------------------------------------------------------------
// Lemma suite

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LemmaId {
    Alignment,
    AlignmentFresh,
    AlignmentShared,
    Descent,
    DescentFresh,
    DescentShared,
}

impl LemmaId {
    pub const ALL: [LemmaId; 6] = [
        LemmaId::Alignment,
        LemmaId::AlignmentFresh,
        LemmaId::AlignmentShared,
        LemmaId::Descent,
        LemmaId::DescentFresh,
        LemmaId::DescentShared,
    ];

    pub fn label(self) -> &'static str {
        match self {
            LemmaId::Alignment => "alignment",
            LemmaId::AlignmentFresh => "alignment_fresh_batch",
            LemmaId::AlignmentShared => "alignment_shared_batch",
            LemmaId::Descent => "descent",
            LemmaId::DescentFresh => "descent_fresh_batch",
            LemmaId::DescentShared => "descent_shared_batch",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaSuiteConfig {
    /// Random points per deterministic lemma.
    pub probes: usize,
    /// Random points per stochastic lemma.
    pub stochastic_points: usize,
    /// Batch draws per stochastic point.
    pub draws: usize,
    pub batch_size: usize,
}

impl Default for LemmaSuiteConfig {
    fn default() -> Self {
        LemmaSuiteConfig {
            probes: 1000,
            stochastic_points: 5,
            draws: 1000,
            batch_size: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaCheck {
    pub lemma: LemmaId,
    pub checks: usize,
    /// Smallest margin seen (deterministic: lhs − rhs scaled to the bound's
    /// side; stochastic: confidence-interval margin).
    pub worst_margin: f64,
    pub passed: bool,
}

/// Runs all six lemma checks on one quadratic at random points `w* + N(0, I)`
/// with random admissible step sizes.
pub fn run_lemma_suite(
    q: &QuadraticObjective,
    cfg: &LemmaSuiteConfig,
    seed: u64,
    exec: Execution,
) -> Result<Vec<LemmaCheck>> {
    let beta = q.smoothness();
    let mut rng = rng::stream(seed, Purpose::Probe);
    let point = |rng: &mut rng::StreamRng| -> Vec<f64> {
        q.w_star()
            .iter()
            .map(|c| c + rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    let mut regimes = vec![Regime::Smooth];
    if q.is_convex() {
        regimes.push(Regime::Convex);
    }
    if q.is_strongly_convex() {
        regimes.push(Regime::StronglyConvex);
    }
    let mut out = Vec::new();

    let mut worst = f64::INFINITY;
    let mut count = 0;
    for _ in 0..cfg.probes {
        let w = point(&mut rng);
        let rho = rng.random_range(0.0..1.0) / beta;
        for r in &regimes {
            worst = worst.min(check_alignment(q, &w, rho, *r)?);
            count += 1;
        }
    }
    out.push(LemmaCheck {
        lemma: LemmaId::Alignment,
        checks: count,
        worst_margin: worst,
        passed: worst >= -SLACK,
    });

    let mut worst = f64::INFINITY;
    for _ in 0..cfg.probes {
        let w = point(&mut rng);
        let gamma = (1.0 - rng.random_range(0.0..1.0)) / beta;
        let rho = rng.random_range(0.0..1.0) / beta;
        worst = worst.min(check_descent(q, &w, gamma, rho)?);
    }
    out.push(LemmaCheck {
        lemma: LemmaId::Descent,
        checks: cfg.probes,
        worst_margin: worst,
        passed: worst >= -SLACK,
    });

    for lemma in [
        LemmaId::AlignmentFresh,
        LemmaId::AlignmentShared,
        LemmaId::DescentFresh,
        LemmaId::DescentShared,
    ] {
        let mut worst = f64::INFINITY;
        let mut passed = true;
        for k in 0..cfg.stochastic_points {
            let w = point(&mut rng);
            let sub = rng.random::<u64>() >> 16;
            let (gmax, rmax, coupling) = match lemma {
                LemmaId::AlignmentFresh | LemmaId::DescentFresh => (0.5 / beta, 0.5 / beta, Coupling::Fresh),
                _ => (1.0 / beta, 0.25 / beta, Coupling::Shared),
            };
            let gamma = gmax * (1.0 - rng.random_range(0.0..1.0));
            let rho = rmax * rng.random_range(0.0..1.0);
            let est = match lemma {
                LemmaId::AlignmentFresh | LemmaId::AlignmentShared => {
                    check_stochastic_alignment(q, &w, rho, cfg.batch_size, cfg.draws, coupling, sub ^ k as u64, exec)?
                }
                _ => check_stochastic_descent(q, &w, gamma, rho, cfg.batch_size, cfg.draws, coupling, sub, exec)?,
            };
            worst = worst.min(est.margin);
            passed &= est.holds;
        }
        out.push(LemmaCheck {
            lemma,
            checks: cfg.stochastic_points,
            worst_margin: worst,
            passed,
        });
    }
    out.sort_by_key(|c| LemmaId::ALL.iter().position(|l| *l == c.lemma));
    Ok(out)
}

/// A constructed instance on which a deterministic inequality is an equality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TightnessProbe {
    pub lemma: LemmaId,
    pub regime: Option<Regime>,
    pub margin: f64,
    pub grad_norm_sq: f64,
    /// `|margin| / ‖∇L‖²`.
    pub relative_margin: f64,
}

/// Equality cases: isotropic curvature for the strongly convex regime and the
/// descent inequality (ρ = 0, curvature β), a vanishing eigen-direction for
/// the convex regime, and curvature −β for the smooth regime.
pub fn tightness_probes(d: usize, seed: u64) -> Result<Vec<TightnessProbe>> {
    let mk = |lemma, regime, margin: f64, g2: f64| TightnessProbe {
        lemma,
        regime,
        margin,
        grad_norm_sq: g2,
        relative_margin: margin.abs() / g2,
    };
    let along = |q: &QuadraticObjective, dir: usize| -> Vec<f64> {
        // w* plus a multiple of the eigenvector belonging to eigenvalue `dir`.
        let a = q.curvature();
        let lam = q.eigenvalues()[dir];
        let (vals, vecs) = {
            let e = a.clone().symmetric_eigen();
            (e.eigenvalues, e.eigenvectors)
        };
        let k = (0..vals.len())
            .min_by(|i, j| (vals[*i] - lam).abs().total_cmp(&(vals[*j] - lam).abs()))
            .unwrap();
        (q.w_star() + vecs.column(k) * 1.0).as_slice().to_vec()
    };
    let mut out = Vec::new();
    let rho = 0.5;

    let iso = QuadraticObjective::isotropic(d, 1, 1.0, 0.0, seed)?;
    let w: Vec<f64> = iso.w_star().iter().map(|v| v + 1.0).collect();
    let g2 = iso.grad(&w).norm_squared();
    out.push(mk(
        LemmaId::Alignment,
        Some(Regime::StronglyConvex),
        check_alignment(&iso, &w, rho, Regime::StronglyConvex)?,
        g2,
    ));
    out.push(mk(LemmaId::Descent, None, check_descent(&iso, &w, 0.7, 0.0)?, g2));

    let mut eig = vec![1.0; d];
    eig[d - 1] = 1e-8;
    let flat = QuadraticObjective::with_eigenvalues(&eig, 1, 0.0, seed)?;
    let w = along(&flat, d - 1);
    out.push(mk(
        LemmaId::Alignment,
        Some(Regime::Convex),
        check_alignment(&flat, &w, rho, Regime::Convex)?,
        flat.grad(&w).norm_squared(),
    ));

    let mut eig = vec![0.5; d];
    eig[0] = -1.0;
    let saddle = QuadraticObjective::with_eigenvalues(&eig, 1, 0.0, seed)?;
    let w = along(&saddle, 0);
    out.push(mk(
        LemmaId::Alignment,
        Some(Regime::Smooth),
        check_alignment(&saddle, &w, rho, Regime::Smooth)?,
        saddle.grad(&w).norm_squared(),
    ));
    Ok(out)
}

// ---------------------------------------------------------------------------
// Rate checks

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TheoremId {
    /// m-SAM, fixed horizon: (1/T)E Σ‖∇L(w_t)‖² ≤ 4β(L₀−L*)/√T + 8σ²/(b√T).
    StochasticNonconvex,
    /// m-SAM, decreasing steps: E L(w_T) − L* ≤ 3β²(L₀−L*)/(μ²T²) + 22βσ²/(μ²bT).
    StochasticPl,
    DetNonconvex,
    DetPl,
    DetConvex,
    DetStronglyConvex,
}

impl TheoremId {
    pub const ALL: [TheoremId; 6] = [
        TheoremId::StochasticNonconvex,
        TheoremId::StochasticPl,
        TheoremId::DetNonconvex,
        TheoremId::DetPl,
        TheoremId::DetConvex,
        TheoremId::DetStronglyConvex,
    ];

    pub fn label(self) -> &'static str {
        match self {
            TheoremId::StochasticNonconvex => "stochastic_nonconvex",
            TheoremId::StochasticPl => "stochastic_pl",
            TheoremId::DetNonconvex => "det_nonconvex",
            TheoremId::DetPl => "det_pl",
            TheoremId::DetConvex => "det_convex",
            TheoremId::DetStronglyConvex => "det_strongly_convex",
        }
    }

    pub fn is_stochastic(self) -> bool {
        matches!(self, TheoremId::StochasticNonconvex | TheoremId::StochasticPl)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateCheckResult {
    pub theorem_id: TheoremId,
    /// Per-step left-hand quantity (seed mean for stochastic ids).
    pub lhs_trace: Vec<f64>,
    /// Bound: one entry for horizon bounds, one per step for envelopes.
    pub rhs_bound: Vec<f64>,
    pub satisfied: bool,
    /// Smallest `rhs − lhs` over the checked steps (stochastic ids use the
    /// upper end of the 99% interval for lhs).
    pub margin: f64,
    pub note: String,
}

/// Deterministic step sizes as fractions of 1/β.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateParams {
    pub horizon: u64,
    pub batch_size: usize,
    pub seeds: u64,
    pub gamma_frac: f64,
    pub rho_frac: f64,
}

impl RateParams {
    pub fn new(horizon: u64, batch_size: usize, seeds: u64) -> Self {
        RateParams {
            horizon,
            batch_size,
            seeds,
            gamma_frac: 0.4,
            rho_frac: 0.4,
        }
    }
}

/// Runs the algorithm a rate statement covers from `w₀ = 0` and compares the
/// outcome with the bound computed from the exact constants of `q`.
pub fn verify_rate(
    theorem: TheoremId,
    q: &QuadraticObjective,
    params: &RateParams,
    exec: Execution,
) -> Result<RateCheckResult> {
    let l_star = q
        .optimal_value()
        .ok_or_else(|| contract("rate checks need a convex quadratic"))?;
    let t_max = params.horizon;
    if t_max == 0 {
        return Err(contract("horizon must be positive"));
    }
    let w0 = vec![0.0; q.dim()];
    let l0 = q.loss(&w0) - l_star;
    let beta = q.smoothness();
    let tf = t_max as f64;
    let b = params.batch_size as f64;
    let failed = |trace: Vec<f64>, note: String| RateCheckResult {
        theorem_id: theorem,
        lhs_trace: trace,
        rhs_bound: Vec::new(),
        satisfied: false,
        margin: f64::NEG_INFINITY,
        note,
    };

    if theorem.is_stochastic() {
        if params.seeds < 2 {
            return Err(contract("stochastic rate checks need at least two seeds"));
        }
        let (gamma, rho) = match theorem {
            TheoremId::StochasticNonconvex => (
                StepSchedule::NonconvexRate {
                    horizon: t_max,
                    smoothness: beta,
                    role: ScheduleRole::Outer,
                },
                StepSchedule::NonconvexRate {
                    horizon: t_max,
                    smoothness: beta,
                    role: ScheduleRole::Inner,
                },
            ),
            _ => {
                let mu = q.pl_constant().ok_or_else(|| contract("PL constant unavailable"))?;
                let outer = StepSchedule::PlRate {
                    pl_constant: mu,
                    smoothness: beta,
                };
                (
                    outer.clone(),
                    StepSchedule::ProportionalSqrt {
                        outer: Box::new(outer),
                        smoothness: beta,
                    },
                )
            }
        };
        let spec = OptimizerSpec {
            method: Method::MSam,
            gamma,
            ascent: AscentConfig {
                rho,
                normalize: false,
                steps: 1,
                step_fraction: 0.1,
            },
            batch_size: params.batch_size,
            sampling: Sampling::WithReplacement,
        };
        let runs = exec.map(params.seeds as usize, |s| {
            let mut opts = RunOptions::new(s as u64);
            opts.snapshot_stride = t_max.max(1);
            run_training(q, &spec, &w0, t_max, &opts, &mut [])
        });
        let mut per_seed = Vec::new();
        for r in runs {
            match r {
                Ok(tr) => per_seed.push(tr.records),
                Err(Error::Divergence(rep)) => return Ok(failed(Vec::new(), rep.to_string())),
                Err(e) => return Err(e),
            }
        }
        let k = per_seed.len() as f64;
        let mean_over = |f: &dyn Fn(&crate::optimizers::StepRecord) -> f64| -> Vec<f64> {
            (0..=t_max as usize)
                .map(|t| per_seed.iter().map(|rs| f(&rs[t])).sum::<f64>() / k)
                .collect()
        };
        let (trace, per_run, rhs) = match theorem {
            TheoremId::StochasticNonconvex => {
                let trace = mean_over(&|r| r.grad_norm * r.grad_norm);
                let per_run: Vec<f64> = per_seed
                    .iter()
                    .map(|rs| {
                        rs[..t_max as usize]
                            .iter()
                            .map(|r| r.grad_norm * r.grad_norm)
                            .sum::<f64>()
                            / tf
                    })
                    .collect();
                let rhs = 4.0 * beta / tf.sqrt() * l0 + 8.0 * q.sigma2() / (b * tf.sqrt());
                (trace, per_run, rhs)
            }
            _ => {
                let mu = q.pl_constant().expect("checked above");
                let trace = mean_over(&|r| r.loss - l_star);
                let per_run: Vec<f64> = per_seed.iter().map(|rs| rs[t_max as usize].loss - l_star).collect();
                let rhs = 3.0 * beta * beta * l0 / (mu * mu * tf * tf) + 22.0 * beta * q.sigma2() / (mu * mu * b * tf);
                (trace, per_run, rhs)
            }
        };
        let est = estimate(&per_run, rhs, false);
        return Ok(RateCheckResult {
            theorem_id: theorem,
            lhs_trace: trace,
            rhs_bound: vec![rhs],
            satisfied: est.holds,
            margin: est.margin,
            note: format!(
                "mean {:e} ± {:e} over {} seeds",
                est.mean,
                Z99 * est.std_err,
                per_run.len()
            ),
        });
    }

    let gamma = params.gamma_frac / beta;
    let rho = params.rho_frac / beta;
    if !(params.gamma_frac > 0.0 && params.gamma_frac < 1.0 && params.rho_frac >= 0.0 && params.rho_frac < 1.0) {
        return Err(contract("deterministic rates need γ, ρ below 1/β"));
    }
    let mut iterates = vec![w0.clone()];
    let mut w = w0.clone();
    for t in 0..t_max {
        let next = full_batch_nsam_step(q, &w, gamma, rho)?;
        if next.iter().any(|v| !v.is_finite()) {
            return Ok(failed(Vec::new(), format!("non-finite iterate at step {}", t + 1)));
        }
        w = next.as_slice().to_vec();
        iterates.push(w.clone());
    }
    let c = 1.0 - rho * beta;
    let per_step = gamma * c * (1.0 - 0.5 * gamma * beta * c);
    let dist0 = q.w_star().iter().map(|v| v * v).sum::<f64>();
    let losses: Vec<f64> = iterates.iter().map(|w| q.loss(w) - l_star).collect();
    let (trace, rhs): (Vec<f64>, Vec<f64>) = match theorem {
        TheoremId::DetNonconvex => {
            let trace: Vec<f64> = iterates[..t_max as usize]
                .iter()
                .map(|w| q.grad(w).norm_squared())
                .collect();
            let rhs = (losses[0] - losses[t_max as usize]) / (tf * per_step);
            let avg = trace.iter().sum::<f64>() / tf;
            let margin = rhs - avg;
            return Ok(RateCheckResult {
                theorem_id: theorem,
                lhs_trace: trace,
                rhs_bound: vec![rhs],
                satisfied: margin >= -SLACK,
                margin,
                note: format!("average squared gradient norm {avg:e}"),
            });
        }
        TheoremId::DetPl => {
            let mu = q.pl_constant().ok_or_else(|| contract("PL constant unavailable"))?;
            let factor = 1.0 - 2.0 * mu * per_step;
            let rhs = (0..=t_max).map(|t| factor.powf(t as f64) * l0).collect();
            (losses, rhs)
        }
        TheoremId::DetConvex => {
            let k = gamma * beta * (1.0 + rho * beta);
            if !(k < 2.0) {
                return Err(contract("averaged-iterate bound needs γβ(1+ρβ) < 2"));
            }
            let coef = (2.0 * rho * beta + 1.0) / (gamma * (2.0 - k)) * dist0;
            let mut sum = DVector::zeros(q.dim());
            let mut trace = Vec::with_capacity(t_max as usize);
            let mut rhs = Vec::with_capacity(t_max as usize);
            for (t, w) in iterates[..t_max as usize].iter().enumerate() {
                sum += DVector::from_column_slice(w);
                let avg = &sum / (t + 1) as f64;
                trace.push(q.loss(avg.as_slice()) - l_star);
                rhs.push(coef / (t + 1) as f64);
            }
            (trace, rhs)
        }
        TheoremId::DetStronglyConvex => {
            if !q.is_strongly_convex() {
                return Err(contract("strongly convex rate needs positive curvature"));
            }
            let mu = q.pl_constant().expect("strongly convex");
            let k = gamma * beta * (1.0 + rho * beta);
            let factor = 1.0 - gamma * mu * (2.0 - k);
            let trace = iterates
                .iter()
                .map(|w| w.iter().zip(q.w_star().iter()).map(|(a, b)| (a - b) * (a - b)).sum())
                .collect();
            let rhs = (0..=t_max)
                .map(|t| factor.powf(t as f64) * (2.0 * rho + 1.0) * dist0)
                .collect();
            (trace, rhs)
        }
        _ => unreachable!("stochastic ids handled above"),
    };
    let scale = trace.first().copied().unwrap_or(0.0).abs().max(rhs[0].abs());
    let margin = trace.iter().zip(&rhs).map(|(l, r)| r - l).fold(f64::INFINITY, f64::min);
    Ok(RateCheckResult {
        theorem_id: theorem,
        satisfied: margin >= -SLACK * scale.max(1.0),
        lhs_trace: trace,
        rhs_bound: rhs,
        margin,
        note: format!("checked at every step up to {t_max}"),
    })
}

/// Sanity helper: all indices of `q`, for callers building full batches.
pub fn full_batch(q: &QuadraticObjective) -> Vec<usize> {
    all_indices(q.num_examples())
}
