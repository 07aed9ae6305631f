//! Training algorithms: SGD, shared-batch m-SAM, fresh-batch n-SAM, the
//! full-batch 1-SAM and n-SAM updates, schedules, and method switching.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{contract, DivergenceReport};
use crate::io;
use crate::model_zoo::{all_indices, check_indices, check_params, mean_grad_at, Objective, ParamVector};
use crate::rng::{self, Purpose, StreamRng};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleRole {
    /// Descent step size.
    Outer,
    /// Ascent radius.
    Inner,
}

/// Step-size or radius schedule indexed by the step counter of its phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSchedule {
    Constant {
        value: f64,
    },
    /// `initial · factor^(number of decay points ≤ t)`.
    Piecewise {
        initial: f64,
        decay_points: Vec<u64>,
        factor: f64,
    },
    /// Fixed-horizon stochastic nonconvex rate: outer 1/(√T·β), inner 1/(T^¼·β).
    NonconvexRate {
        horizon: u64,
        smoothness: f64,
        role: ScheduleRole,
    },
    /// min{(8t+4)/(3μ(t+1)²), 1/(2β)}.
    PlRate {
        pl_constant: f64,
        smoothness: f64,
    },
    /// √(outer(t)/β).
    ProportionalSqrt {
        outer: Box<StepSchedule>,
        smoothness: f64,
    },
}

impl StepSchedule {
    pub fn constant(value: f64) -> Self {
        StepSchedule::Constant { value }
    }

    pub fn value(&self, t: u64) -> f64 {
        match self {
            StepSchedule::Constant { value } => *value,
            StepSchedule::Piecewise {
                initial,
                decay_points,
                factor,
            } => {
                let k = decay_points.iter().filter(|p| **p <= t).count();
                initial * factor.powi(k as i32)
            }
            StepSchedule::NonconvexRate {
                horizon,
                smoothness,
                role,
            } => {
                let h = *horizon as f64;
                match role {
                    ScheduleRole::Outer => 1.0 / (h.sqrt() * smoothness),
                    ScheduleRole::Inner => 1.0 / (h.powf(0.25) * smoothness),
                }
            }
            StepSchedule::PlRate {
                pl_constant,
                smoothness,
            } => {
                let tf = t as f64;
                let decay = (8.0 * tf + 4.0) / (3.0 * pl_constant * (tf + 1.0) * (tf + 1.0));
                decay.min(1.0 / (2.0 * smoothness))
            }
            StepSchedule::ProportionalSqrt { outer, smoothness } => (outer.value(t) / smoothness).sqrt(),
        }
    }

    fn validate(&self, what: &str) -> Result<()> {
        let ok = match self {
            StepSchedule::Constant { value } => value.is_finite() && *value >= 0.0,
            StepSchedule::Piecewise { initial, factor, .. } => {
                initial.is_finite() && *initial >= 0.0 && factor.is_finite() && *factor >= 0.0
            }
            StepSchedule::NonconvexRate {
                horizon, smoothness, ..
            } => *horizon > 0 && *smoothness > 0.0,
            StepSchedule::PlRate {
                pl_constant,
                smoothness,
            } => *pl_constant > 0.0 && *smoothness > 0.0,
            StepSchedule::ProportionalSqrt { outer, smoothness } => {
                outer.validate(what)?;
                *smoothness > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(contract(format!("invalid {what} schedule: {self:?}")))
        }
    }
}

/// How the ascent point is found.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AscentConfig {
    pub rho: StepSchedule,
    /// Divide the ascent step by the batch-gradient norm (single-step only;
    /// multi-step ascent always uses normalized updates).
    #[serde(default)]
    pub normalize: bool,
    #[serde(default = "one")]
    pub steps: usize,
    #[serde(default = "default_fraction")]
    pub step_fraction: f64,
}

fn one() -> usize {
    1
}

fn default_fraction() -> f64 {
    0.1
}

impl AscentConfig {
    pub fn plain(rho: f64) -> Self {
        AscentConfig {
            rho: StepSchedule::constant(rho),
            normalize: false,
            steps: 1,
            step_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Method {
    Sgd,
    /// Ascent and descent on the same mini-batch.
    MSam,
    /// Ascent on an independent batch; `None` means the full dataset.
    NSamFresh {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        ascent_batch_size: Option<usize>,
    },
    /// Per-example ascent points, full-batch descent.
    OneSamFull,
    /// One shared ascent point from the full gradient.
    NSamFull,
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::Sgd => "sgd",
            Method::MSam => "m_sam",
            Method::NSamFresh { .. } => "n_sam_fresh",
            Method::OneSamFull => "one_sam_full",
            Method::NSamFull => "n_sam_full",
        }
    }

    fn is_full_batch(&self) -> bool {
        matches!(self, Method::OneSamFull | Method::NSamFull)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Reshuffle once per pass over the data.
    #[default]
    Epoch,
    /// Independent uniform indices.
    WithReplacement,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSpec {
    pub method: Method,
    pub gamma: StepSchedule,
    pub ascent: AscentConfig,
    /// Ignored by the full-batch methods; a value ≥ n means full batch in
    /// natural index order.
    #[serde(default = "usize_max", skip_serializing_if = "is_full_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub sampling: Sampling,
}

fn usize_max() -> usize {
    usize::MAX
}

fn is_full_batch_size(b: &usize) -> bool {
    *b == usize::MAX
}

impl OptimizerSpec {
    /// Full-batch gradient descent.
    pub fn gd(gamma: f64) -> Self {
        OptimizerSpec {
            method: Method::Sgd,
            gamma: StepSchedule::constant(gamma),
            ascent: AscentConfig::plain(0.0),
            batch_size: usize::MAX,
            sampling: Sampling::Epoch,
        }
    }

    pub fn one_sam_full(gamma: f64, rho: f64) -> Self {
        OptimizerSpec {
            method: Method::OneSamFull,
            ascent: AscentConfig::plain(rho),
            ..Self::gd(gamma)
        }
    }

    pub fn n_sam_full(gamma: f64, rho: f64) -> Self {
        OptimizerSpec {
            method: Method::NSamFull,
            ascent: AscentConfig::plain(rho),
            ..Self::gd(gamma)
        }
    }

    pub fn sgd(gamma: f64, batch_size: usize) -> Self {
        OptimizerSpec {
            batch_size,
            ..Self::gd(gamma)
        }
    }

    pub fn m_sam(gamma: f64, rho: f64, batch_size: usize) -> Self {
        OptimizerSpec {
            method: Method::MSam,
            ascent: AscentConfig::plain(rho),
            batch_size,
            ..Self::gd(gamma)
        }
    }

    pub fn n_sam_fresh(gamma: f64, rho: f64, batch_size: usize, ascent_batch_size: Option<usize>) -> Self {
        OptimizerSpec {
            method: Method::NSamFresh { ascent_batch_size },
            ascent: AscentConfig::plain(rho),
            batch_size,
            ..Self::gd(gamma)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.gamma.validate("step-size")?;
        self.ascent.rho.validate("ascent-radius")?;
        if self.batch_size == 0 {
            return Err(contract("batch size must be positive"));
        }
        if self.ascent.steps == 0 {
            return Err(contract("ascent needs at least one step"));
        }
        if !(self.ascent.step_fraction > 0.0) {
            return Err(contract("ascent step fraction must be positive"));
        }
        if let Method::NSamFresh {
            ascent_batch_size: Some(0),
        } = self.method
        {
            return Err(contract("ascent batch size must be positive"));
        }
        Ok(())
    }
}

/// Two optimizers run back to back; the second starts its schedules at t = 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwitchPlan {
    pub first: OptimizerSpec,
    pub second: OptimizerSpec,
    pub switch_step: u64,
}

// ---------------------------------------------------------------------------
// Single steps

/// Where the descent gradient of a step was evaluated.
#[derive(Clone, Debug, PartialEq)]
pub enum Ascent {
    /// At the current iterate.
    None,
    /// At one point shared by the whole batch.
    Shared(ParamVector),
    /// One point per batch entry, in batch order.
    PerExample(Vec<ParamVector>),
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub next: ParamVector,
    pub ascent: Ascent,
    /// The normalized ascent was skipped because the batch gradient vanished.
    pub ascent_skipped: bool,
}

fn descend(w: &[f64], g: &ParamVector, gamma: f64) -> ParamVector {
    DVector::from_iterator(w.len(), w.iter().zip(g.iter()).map(|(a, b)| a - gamma * b))
}

fn offset(w: &[f64], g: &ParamVector, scale: f64) -> ParamVector {
    DVector::from_iterator(w.len(), w.iter().zip(g.iter()).map(|(a, b)| a + scale * b))
}

/// Result of maximizing a batch loss over the ball ‖δ‖ ≤ ρ.
#[derive(Clone, Debug)]
pub struct AscentSearch {
    pub last: ParamVector,
    pub best: ParamVector,
    pub best_gain: f64,
    /// The gradient at δ = 0 vanished.
    pub zero_gradient: bool,
}

/// Projected normalized gradient ascent on `batch_loss(w + δ)`.
///
/// The first step goes to the sphere along the normalized gradient, which is
/// the single-step SAM point; each later step has length `fraction·ρ` and is
/// projected back onto the ball. When `restart` is given and the gradient at
/// δ = 0 vanishes, the search starts from a random point on the sphere
/// instead. `best` is the best point seen, with δ = 0 (gain 0) as baseline.
pub fn projected_ascent<O: Objective + ?Sized>(
    obj: &O,
    w: &[f64],
    batch: &[usize],
    rho: f64,
    steps: usize,
    fraction: f64,
    restart: Option<&mut StreamRng>,
) -> AscentSearch {
    let p = w.len();
    let base = obj.batch_loss(w, batch);
    let wv = DVector::from_column_slice(w);
    let g0 = obj.batch_grad(w, batch);
    let n0 = g0.norm();
    let mut out = AscentSearch {
        last: wv.clone(),
        best: wv.clone(),
        best_gain: 0.0,
        zero_gradient: n0 == 0.0,
    };
    if rho == 0.0 || steps == 0 {
        return out;
    }
    let mut delta = if n0 > 0.0 {
        &g0 * (rho / n0)
    } else if let Some(rng) = restart {
        let mut u = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let nu = u.norm();
        u *= rho / nu;
        u
    } else {
        return out;
    };
    let consider = |delta: &ParamVector, out: &mut AscentSearch| {
        let point = &wv + delta;
        let gain = obj.batch_loss(point.as_slice(), batch) - base;
        if gain > out.best_gain {
            out.best_gain = gain;
            out.best = point.clone();
        }
        out.last = point;
    };
    consider(&delta, &mut out);
    for _ in 1..steps {
        let g = obj.batch_grad(out.last.as_slice(), batch);
        let ng = g.norm();
        if ng == 0.0 || !ng.is_finite() {
            break;
        }
        delta += g * (fraction * rho / ng);
        let nd = delta.norm();
        if nd > rho {
            delta *= rho / nd;
        }
        consider(&delta, &mut out);
    }
    out
}

fn check_step<O: Objective + ?Sized>(obj: &O, w: &[f64], batch: &[usize]) -> Result<()> {
    check_params(obj, w)?;
    check_indices(batch, obj.num_examples())
}

/// `w − γ·∇L_batch(w)`.
pub fn sgd_step<O: Objective + ?Sized>(obj: &O, w: &[f64], batch: &[usize], gamma: f64) -> Result<ParamVector> {
    check_step(obj, w, batch)?;
    Ok(descend(w, &obj.batch_grad(w, batch), gamma))
}

pub(crate) fn msam_outcome<O: Objective + ?Sized>(
    obj: &O,
    w: &[f64],
    batch: &[usize],
    gamma: f64,
    rho: f64,
    ascent: &AscentConfig,
) -> StepOutcome {
    let (point, skipped) = if ascent.steps <= 1 {
        let g = obj.batch_grad(w, batch);
        if ascent.normalize {
            let n = g.norm();
            if n == 0.0 {
                (None, true)
            } else {
                (Some(offset(w, &g, rho / n)), false)
            }
        } else {
            (Some(offset(w, &g, rho)), false)
        }
    } else {
        let s = projected_ascent(obj, w, batch, rho, ascent.steps, ascent.step_fraction, None);
        if s.zero_gradient {
            (None, true)
        } else {
            (Some(s.last), false)
        }
    };
    match point {
        Some(p) => StepOutcome {
            next: descend(w, &obj.batch_grad(p.as_slice(), batch), gamma),
            ascent: Ascent::Shared(p),
            ascent_skipped: false,
        },
        None => StepOutcome {
            next: descend(w, &obj.batch_grad(w, batch), gamma),
            ascent: Ascent::None,
            ascent_skipped: skipped,
        },
    }
}

/// SAM step with ascent and descent on the same batch. With `steps > 1` the
/// ascent point comes from [`projected_ascent`] (final iterate).
#[allow(clippy::too_many_arguments)]
pub fn msam_step_shared_batch<O: Objective + ?Sized>(
    obj: &O,
    w: &[f64],
    batch: &[usize],
    gamma: f64,
    rho: f64,
    normalize: bool,
    steps: usize,
    step_fraction: f64,
) -> Result<ParamVector> {
    check_step(obj, w, batch)?;
    if !(rho >= 0.0) || steps == 0 {
        return Err(contract("need rho >= 0 and at least one ascent step"));
    }
    let cfg = AscentConfig {
        rho: StepSchedule::constant(rho),
        normalize,
        steps,
        step_fraction,
    };
    Ok(msam_outcome(obj, w, batch, gamma, rho, &cfg).next)
}

pub(crate) fn nsam_fresh_outcome<O: Objective + ?Sized>(
    obj: &O,
    w: &[f64],
    descent_batch: &[usize],
    ascent_batch: &[usize],
    gamma: f64,
    rho: f64,
) -> StepOutcome {
    let p = offset(w, &obj.batch_grad(w, ascent_batch), rho);
    StepOutcome {
        next: descend(w, &obj.batch_grad(p.as_slice(), descent_batch), gamma),
        ascent: Ascent::Shared(p),
        ascent_skipped: false,
    }
}

/// `w − γ·∇L_I(w + ρ∇L_J(w))`.
pub fn nsam_step_fresh_batch<O: Objective + ?Sized>(
    obj: &O,
    w: &[f64],
    descent_batch: &[usize],
    ascent_batch: &[usize],
    gamma: f64,
    rho: f64,
) -> Result<ParamVector> {
    check_step(obj, w, descent_batch)?;
    check_indices(ascent_batch, obj.num_examples())?;
    Ok(nsam_fresh_outcome(obj, w, descent_batch, ascent_batch, gamma, rho).next)
}

pub(crate) fn one_sam_outcome<O: Objective + ?Sized>(obj: &O, w: &[f64], gamma: f64, rho: f64) -> StepOutcome {
    let n = obj.num_examples();
    let mut g = vec![0.0; w.len()];
    let points: Vec<ParamVector> = (0..n)
        .map(|i| {
            obj.example_grad(w, i, &mut g);
            DVector::from_iterator(w.len(), w.iter().zip(&g).map(|(a, b)| a + rho * b))
        })
        .collect();
    let refs: Vec<&[f64]> = points.iter().map(|p| p.as_slice()).collect();
    let descent = mean_grad_at(obj, &all_indices(n), &refs);
    StepOutcome {
        next: descend(w, &descent, gamma),
        ascent: Ascent::PerExample(points),
        ascent_skipped: false,
    }
}

/// `w − (γ/n)·Σ_i ∇ℓ_i(w + ρ∇ℓ_i(w))`.
pub fn full_batch_1sam_step<O: Objective + ?Sized>(obj: &O, w: &[f64], gamma: f64, rho: f64) -> Result<ParamVector> {
    check_params(obj, w)?;
    Ok(one_sam_outcome(obj, w, gamma, rho).next)
}

/// `w − γ·∇L(w + ρ∇L(w))`.
pub fn full_batch_nsam_step<O: Objective + ?Sized>(obj: &O, w: &[f64], gamma: f64, rho: f64) -> Result<ParamVector> {
    check_params(obj, w)?;
    let all = all_indices(obj.num_examples());
    Ok(nsam_fresh_outcome(obj, w, &all, &all, gamma, rho).next)
}

// ---------------------------------------------------------------------------
// Training runs

/// What an observer sees once per step, before the update is applied.
pub struct StepContext<'a> {
    pub t: u64,
    pub w: &'a [f64],
    pub gamma: f64,
    pub rho: f64,
    pub method: &'a Method,
    pub batch: &'a [usize],
    pub ascent: &'a Ascent,
}

pub trait StepObserver {
    fn observe(&mut self, ctx: &StepContext<'_>) -> Result<()>;

    /// Named running quantity to store in the trajectory at the end of a run.
    fn export(&self) -> Option<(String, Vec<f64>)> {
        None
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub seed: u64,
    #[serde(default = "default_snapshot_stride")]
    pub snapshot_stride: u64,
    #[serde(default = "default_log_stride")]
    pub log_stride: u64,
    /// Stop once the logged training loss falls below this value.
    #[serde(default)]
    pub stop_loss: Option<f64>,
}

fn default_snapshot_stride() -> u64 {
    100
}

fn default_log_stride() -> u64 {
    1
}

impl RunOptions {
    pub fn new(seed: u64) -> Self {
        RunOptions {
            seed,
            snapshot_stride: 100,
            log_stride: 1,
            stop_loss: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub gamma: f64,
    pub rho: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub t: u64,
    pub params: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseInfo {
    pub method: Method,
    pub sampling: Sampling,
    pub start: u64,
    pub steps: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    StepBudget,
    LossThreshold,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub phases: Vec<PhaseInfo>,
    pub records: Vec<StepRecord>,
    pub snapshots: Vec<Snapshot>,
    pub integrals: BTreeMap<String, Vec<f64>>,
    pub final_params: Vec<f64>,
    pub steps_run: u64,
    pub stop_reason: StopReason,
    pub ascent_skips: u64,
}

impl Trajectory {
    pub fn final_loss(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.loss)
    }

    /// One JSON object per logged step.
    pub fn log_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&io::to_json_line(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn write_log(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, self.log_jsonl()?.as_bytes())
    }

    pub fn write_snapshots(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, io::to_json_string(&self.snapshots)?.as_bytes())
    }
}

struct BatchSampler {
    n: usize,
    rng: StreamRng,
    perm: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        BatchSampler {
            n,
            rng: rng::stream(seed, Purpose::BatchOrder),
            perm: (0..n).collect(),
            pos: n,
        }
    }

    fn next(&mut self, size: usize, mode: Sampling) -> Vec<usize> {
        match mode {
            Sampling::WithReplacement => (0..size).map(|_| self.rng.random_range(0..self.n)).collect(),
            Sampling::Epoch => {
                if self.pos >= self.n {
                    self.perm.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                let end = (self.pos + size).min(self.n);
                let b = self.perm[self.pos..end].to_vec();
                self.pos = end;
                b
            }
        }
    }
}

fn all_finite(v: &ParamVector) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Runs `spec` for `total_steps` steps from `init`.
pub fn run_training<O: Objective + ?Sized>(
    obj: &O,
    spec: &OptimizerSpec,
    init: &[f64],
    total_steps: u64,
    opts: &RunOptions,
    observers: &mut [&mut dyn StepObserver],
) -> Result<Trajectory> {
    run_phases(obj, &[(spec, total_steps)], init, opts, observers)
}

/// Runs `plan.first` until `switch_step`, then `plan.second` up to `total_steps`.
pub fn run_switch_plan<O: Objective + ?Sized>(
    obj: &O,
    plan: &SwitchPlan,
    init: &[f64],
    total_steps: u64,
    opts: &RunOptions,
    observers: &mut [&mut dyn StepObserver],
) -> Result<Trajectory> {
    if plan.switch_step > total_steps {
        return Err(contract(format!(
            "switch step {} exceeds total steps {total_steps}",
            plan.switch_step
        )));
    }
    run_phases(
        obj,
        &[
            (&plan.first, plan.switch_step),
            (&plan.second, total_steps - plan.switch_step),
        ],
        init,
        opts,
        observers,
    )
}

fn run_phases<O: Objective + ?Sized>(
    obj: &O,
    phases: &[(&OptimizerSpec, u64)],
    init: &[f64],
    opts: &RunOptions,
    observers: &mut [&mut dyn StepObserver],
) -> Result<Trajectory> {
    check_params(obj, init)?;
    for (spec, _) in phases {
        spec.validate()?;
    }
    if opts.log_stride == 0 || opts.snapshot_stride == 0 {
        return Err(contract("log and snapshot strides must be positive"));
    }
    let n = obj.num_examples();
    let all = all_indices(n);
    let mut sampler = BatchSampler::new(n, opts.seed);
    let mut ascent_rng = rng::stream(opts.seed, Purpose::AscentBatch);
    let mut w = DVector::from_column_slice(init);
    let mut t = 0u64;
    let mut traj = Trajectory {
        phases: Vec::new(),
        records: Vec::new(),
        snapshots: Vec::new(),
        integrals: BTreeMap::new(),
        final_params: Vec::new(),
        steps_run: 0,
        stop_reason: StopReason::StepBudget,
        ascent_skips: 0,
    };

    let record = |w: &ParamVector, t: u64, gamma: f64, rho: f64, traj: &mut Trajectory| -> Result<f64> {
        let loss = obj.loss(w.as_slice());
        let grad_norm = obj.grad(w.as_slice()).norm();
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::Divergence(Box::new(DivergenceReport {
                step: t,
                reason: "non-finite loss".into(),
                last_finite_step: traj.snapshots.last().map_or(0, |s| s.t),
                last_finite_params: traj.snapshots.last().map_or_else(Vec::new, |s| s.params.clone()),
            })));
        }
        traj.records.push(StepRecord {
            t,
            loss,
            grad_norm,
            gamma,
            rho,
        });
        Ok(loss)
    };

    let (first, _) = phases[0];
    traj.snapshots.push(Snapshot {
        t: 0,
        params: w.as_slice().to_vec(),
    });
    let loss0 = record(&w, 0, first.gamma.value(0), first.ascent.rho.value(0), &mut traj)?;
    let mut stopped = opts.stop_loss.is_some_and(|s| loss0 < s);

    let mut last_sched = (first.gamma.value(0), first.ascent.rho.value(0));
    for (spec, steps) in phases {
        if stopped {
            break;
        }
        let start = t;
        let full = spec.method.is_full_batch() || spec.batch_size >= n;
        let mut local = 0u64;
        while local < *steps {
            let gamma = spec.gamma.value(local);
            let rho = spec.ascent.rho.value(local);
            let batch = if full {
                all.clone()
            } else {
                sampler.next(spec.batch_size, spec.sampling)
            };
            let ws = w.as_slice();
            let outcome = match &spec.method {
                Method::Sgd => StepOutcome {
                    next: descend(ws, &obj.batch_grad(ws, &batch), gamma),
                    ascent: Ascent::None,
                    ascent_skipped: false,
                },
                Method::MSam => msam_outcome(obj, ws, &batch, gamma, rho, &spec.ascent),
                Method::NSamFresh { ascent_batch_size } => {
                    let j = match ascent_batch_size {
                        Some(m) if *m < n => (0..*m).map(|_| ascent_rng.random_range(0..n)).collect(),
                        _ => all.clone(),
                    };
                    nsam_fresh_outcome(obj, ws, &batch, &j, gamma, rho)
                }
                Method::OneSamFull => one_sam_outcome(obj, ws, gamma, rho),
                Method::NSamFull => nsam_fresh_outcome(obj, ws, &all, &all, gamma, rho),
            };
            if outcome.ascent_skipped {
                traj.ascent_skips += 1;
            }
            let ctx = StepContext {
                t,
                w: ws,
                gamma,
                rho,
                method: &spec.method,
                batch: &batch,
                ascent: &outcome.ascent,
            };
            for o in observers.iter_mut() {
                o.observe(&ctx)?;
            }
            if !all_finite(&outcome.next) {
                return Err(Error::Divergence(Box::new(DivergenceReport {
                    step: t + 1,
                    reason: "non-finite parameters".into(),
                    last_finite_step: t,
                    last_finite_params: w.as_slice().to_vec(),
                })));
            }
            w = outcome.next;
            t += 1;
            local += 1;
            last_sched = (spec.gamma.value(local), spec.ascent.rho.value(local));
            if t % opts.snapshot_stride == 0 {
                traj.snapshots.push(Snapshot {
                    t,
                    params: w.as_slice().to_vec(),
                });
            }
            if t % opts.log_stride == 0 {
                let loss = record(&w, t, last_sched.0, last_sched.1, &mut traj)?;
                if opts.stop_loss.is_some_and(|s| loss < s) {
                    stopped = true;
                    break;
                }
            }
        }
        traj.phases.push(PhaseInfo {
            method: spec.method.clone(),
            sampling: spec.sampling,
            start,
            steps: local,
        });
    }
    if traj.records.last().map(|r| r.t) != Some(t) {
        record(&w, t, last_sched.0, last_sched.1, &mut traj)?;
    }
    if traj.snapshots.last().map(|s| s.t) != Some(t) {
        traj.snapshots.push(Snapshot {
            t,
            params: w.as_slice().to_vec(),
        });
    }
    for o in observers.iter() {
        if let Some((k, v)) = o.export() {
            traj.integrals.insert(k, v);
        }
    }
    traj.final_params = w.as_slice().to_vec();
    traj.steps_run = t;
    if stopped {
        traj.stop_reason = StopReason::LossThreshold;
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_zoo::QuadraticObjective;

    /// L = ½w² in one dimension with a single example.
    fn half_square() -> QuadraticObjective {
        QuadraticObjective::from_parts(
            vec![1.0],
            &nalgebra::DMatrix::identity(1, 1),
            DVector::zeros(1),
            vec![DVector::zeros(1)],
        )
        .unwrap()
    }

    #[test]
    fn sgd_on_half_square() {
        let q = half_square();
        assert_eq!(sgd_step(&q, &[1.0], &[0], 0.1).unwrap()[0], 0.9);
        assert_eq!(sgd_step(&q, &[0.0], &[0], 0.1).unwrap()[0], 0.0);
        assert!(sgd_step(&q, &[1.0], &[], 0.1).is_err());
    }

    #[test]
    fn msam_on_half_square() {
        let q = half_square();
        let plain = msam_step_shared_batch(&q, &[1.0], &[0], 0.1, 0.1, false, 1, 0.1).unwrap()[0];
        let normed = msam_step_shared_batch(&q, &[1.0], &[0], 0.1, 0.1, true, 1, 0.1).unwrap()[0];
        assert!((plain - 0.89).abs() < 1e-15);
        assert!((normed - 0.89).abs() < 1e-15);
    }

    #[test]
    fn normalized_ascent_skips_at_zero_gradient() {
        let q = half_square();
        let o = msam_outcome(
            &q,
            &[0.0],
            &[0],
            0.1,
            0.1,
            &AscentConfig {
                normalize: true,
                ..AscentConfig::plain(0.1)
            },
        );
        assert!(o.ascent_skipped);
        assert_eq!(o.next[0], 0.0);
    }

    #[test]
    fn full_batch_nsam_is_geometric_on_half_square() {
        let q = half_square();
        let mut w = 1.0;
        for _ in 0..5 {
            let next = full_batch_nsam_step(&q, &[w], 0.2, 0.3).unwrap()[0];
            assert!((next - (1.0 - 0.2 * 1.3) * w).abs() < 1e-15);
            w = next;
        }
    }

    #[test]
    fn schedules() {
        let s = StepSchedule::NonconvexRate {
            horizon: 10_000,
            smoothness: 2.0,
            role: ScheduleRole::Outer,
        };
        assert_eq!(s.value(17), 1.0 / (100.0 * 2.0));
        let s = StepSchedule::NonconvexRate {
            horizon: 10_000,
            smoothness: 2.0,
            role: ScheduleRole::Inner,
        };
        assert!((s.value(0) - 0.05).abs() < 1e-15);
        let pl = StepSchedule::PlRate {
            pl_constant: 0.5,
            smoothness: 4.0,
        };
        assert_eq!(pl.value(0), 0.125);
        let t = 100.0;
        assert_eq!(pl.value(100), (8.0 * t + 4.0) / (1.5 * 101.0 * 101.0));
        let inner = StepSchedule::ProportionalSqrt {
            outer: Box::new(pl.clone()),
            smoothness: 4.0,
        };
        assert_eq!(inner.value(100), (pl.value(100) / 4.0).sqrt());
        let pw = StepSchedule::Piecewise {
            initial: 1.0,
            decay_points: vec![10, 20],
            factor: 0.5,
        };
        assert_eq!((pw.value(9), pw.value(10), pw.value(25)), (1.0, 0.5, 0.25));
    }

    #[test]
    fn schedule_serde_round_trip() {
        let s = StepSchedule::ProportionalSqrt {
            outer: Box::new(StepSchedule::PlRate {
                pl_constant: 0.1,
                smoothness: 1.0,
            }),
            smoothness: 1.0,
        };
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<StepSchedule>(&text).unwrap(), s);
    }

    #[test]
    fn zero_steps_gives_initial_snapshot_only() {
        let q = half_square();
        let tr = run_training(&q, &OptimizerSpec::gd(0.1), &[1.0], 0, &RunOptions::new(0), &mut []).unwrap();
        assert_eq!(tr.snapshots.len(), 1);
        assert_eq!(tr.records.len(), 1);
        assert_eq!(tr.final_params, vec![1.0]);
    }

    #[test]
    fn divergence_is_reported() {
        let q = half_square();
        let err = run_training(&q, &OptimizerSpec::gd(3.0), &[1.0], 2000, &RunOptions::new(0), &mut []).unwrap_err();
        match err {
            Error::Divergence(r) => {
                assert!(r.last_finite_params.iter().all(|v| v.is_finite()));
                assert!(r.step > 0);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn epoch_sampler_covers_each_index_once_per_epoch() {
        let mut s = BatchSampler::new(7, 3);
        let mut seen: Vec<usize> = (0..7).flat_map(|_| s.next(1, Sampling::Epoch)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..7).collect::<Vec<_>>());
    }
}
