//! One runner per subcommand. Runners return structured results so tests can
//! check them without parsing CSV, and write their files through [`OutputDir`].

pub mod bias;
pub mod convergence;
pub mod potential;
pub mod relu;
pub mod sharpness_grid;
pub mod switching;
pub mod training;

use samlab_core::datasets::{gen_sparse_regression, population_test_loss, Dataset};
use samlab_core::exec::Execution;
use samlab_core::implicit_bias::l1_norm;
use samlab_core::model_zoo::{diag_beta, DiagNet, DiagNetParams};
use samlab_core::optimizers::{run_training, OptimizerSpec, RunOptions, StepObserver, StopReason, Trajectory};
use samlab_core::Error;
use serde::{Deserialize, Serialize};

use crate::config::{DatasetSpec, Experiment, RunConfig};
use crate::output::OutputDir;

/// Result of one subcommand.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Outcome {
    /// Runs that diverged or did not converge.
    pub soft_failures: Vec<String>,
    /// Failed checks.
    pub hard_failures: Vec<String>,
    /// Lines for the terminal.
    pub report: Vec<String>,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if !self.hard_failures.is_empty() {
            1
        } else if !self.soft_failures.is_empty() {
            2
        } else {
            0
        }
    }
}

pub struct Ctx<'a> {
    pub cfg: &'a RunConfig,
    pub out: &'a mut OutputDir,
    pub exec: Execution,
}

pub fn run(experiment: Experiment, ctx: &mut Ctx<'_>) -> anyhow::Result<Outcome> {
    if let Some(e) = ctx.cfg.experiment {
        anyhow::ensure!(
            e == experiment,
            "config is for `{}` but `{}` was requested",
            e.name(),
            experiment.name()
        );
    }
    match experiment {
        Experiment::Train => training::cmd_train(ctx),
        Experiment::CompareRhoGrid => training::cmd_compare_rho_grid(ctx),
        Experiment::BiasVerify => bias::cmd_bias_verify(ctx),
        Experiment::Switch => switching::cmd_switch(ctx),
        Experiment::Interpolate => switching::cmd_interpolate(ctx),
        Experiment::SharpnessGrid => sharpness_grid::cmd_sharpness_grid(ctx),
        Experiment::ConvergenceCheck => convergence::cmd_convergence_check(ctx),
        Experiment::ReluDemo => relu::cmd_relu_demo(ctx),
        Experiment::PotentialPlot => potential::cmd_potential_plot(ctx),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Converged,
    NotConverged,
    Diverged,
}

impl RunStatus {
    pub fn label(self) -> &'static str {
        match self {
            RunStatus::Converged => "converged",
            RunStatus::NotConverged => "not_converged",
            RunStatus::Diverged => "diverged",
        }
    }
}

pub fn sparse_dataset(spec: &DatasetSpec, seed: u64) -> anyhow::Result<Dataset> {
    Ok(gen_sparse_regression(spec.d, spec.n, spec.k, seed)?)
}

/// Population test loss of flat diagonal-network parameters.
pub fn diag_test_loss(w: &[f64], data: &Dataset) -> f64 {
    let star = data.beta_star().expect("sparse regression has a ground truth");
    population_test_loss(&diag_beta(w), star).expect("dimensions match")
}

/// Endpoint summary of one diagonal-network run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagRun {
    pub status: RunStatus,
    pub steps: u64,
    pub train_loss: f64,
    pub test_loss: f64,
    pub l1_norm: f64,
    pub final_params: Vec<f64>,
}

impl DiagRun {
    pub fn from_trajectory(traj: &Trajectory, data: &Dataset, converged_loss: f64) -> Self {
        let train_loss = traj.final_loss();
        DiagRun {
            status: if train_loss < converged_loss {
                RunStatus::Converged
            } else {
                RunStatus::NotConverged
            },
            steps: traj.steps_run,
            train_loss,
            test_loss: diag_test_loss(&traj.final_params, data),
            l1_norm: l1_norm(&diag_beta(&traj.final_params)),
            final_params: traj.final_params.clone(),
        }
    }

    pub fn diverged(steps: u64) -> Self {
        DiagRun {
            status: RunStatus::Diverged,
            steps,
            train_loss: f64::NAN,
            test_loss: f64::NAN,
            l1_norm: f64::NAN,
            final_params: Vec::new(),
        }
    }
}

/// Trains a diagonal network from `w₊ = w₋ = α`, stopping once the loss
/// drops below `stop_loss`. Divergence becomes a [`RunStatus::Diverged`] run.
#[allow(clippy::too_many_arguments)]
pub fn train_diag(
    data: &Dataset,
    alpha: f64,
    spec: &OptimizerSpec,
    max_steps: u64,
    stop_loss: Option<f64>,
    converged_loss: f64,
    seed: u64,
    log_stride: u64,
    observers: &mut [&mut dyn StepObserver],
) -> anyhow::Result<(DiagRun, Option<Trajectory>)> {
    let obj = DiagNet::new(data.clone());
    let init = DiagNetParams::uniform(data.d(), alpha)?.to_flat();
    let mut opts = RunOptions::new(seed);
    opts.log_stride = log_stride.max(1);
    opts.snapshot_stride = max_steps.max(1);
    opts.stop_loss = stop_loss;
    match run_training(&obj, spec, init.as_slice(), max_steps, &opts, observers) {
        Ok(traj) => Ok((DiagRun::from_trajectory(&traj, data, converged_loss), Some(traj))),
        Err(Error::Divergence(rep)) => Ok((DiagRun::diverged(rep.step), None)),
        Err(e) => Err(e.into()),
    }
}

pub fn stop_label(reason: StopReason) -> &'static str {
    match reason {
        StopReason::StepBudget => "step_budget",
        StopReason::LossThreshold => "loss_threshold",
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let k = values.len();
    if k % 2 == 1 {
        values[k / 2]
    } else {
        0.5 * (values[k / 2 - 1] + values[k / 2])
    }
}
