use samlab_core::datasets::gen_1d_regression;
use samlab_core::model_zoo::{ReluNet1D, ReluRegression};
use samlab_core::optimizers::{run_training, AscentConfig, OptimizerSpec, RunOptions};
use samlab_core::Error;
use serde::{Deserialize, Serialize};

use super::{Ctx, Outcome, RunStatus};
use crate::config::ReluSection;
use crate::output::Table;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReluMethod {
    Erm,
    Sam,
}

impl ReluMethod {
    pub fn label(self) -> &'static str {
        match self {
            ReluMethod::Erm => "erm",
            ReluMethod::Sam => "sam",
        }
    }
}

/// Full-batch GD, or full-batch SAM with a normalized shared ascent step.
pub fn relu_spec(sec: &ReluSection, method: ReluMethod) -> OptimizerSpec {
    match method {
        ReluMethod::Erm => OptimizerSpec::gd(sec.gamma),
        ReluMethod::Sam => OptimizerSpec {
            ascent: AscentConfig {
                normalize: true,
                ..AscentConfig::plain(sec.rho)
            },
            ..OptimizerSpec::n_sam_full(sec.gamma, sec.rho)
        },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReluRun {
    pub seed: u64,
    pub method: ReluMethod,
    pub status: RunStatus,
    pub steps: u64,
    pub train_mse: f64,
    pub path_norm: f64,
    pub params: Vec<f64>,
}

pub fn relu_run(sec: &ReluSection, method: ReluMethod, seed: u64, log_stride: u64) -> anyhow::Result<ReluRun> {
    let data = gen_1d_regression(seed);
    let obj = ReluRegression::new(data, sec.width)?;
    let init = ReluNet1D::init(sec.width, seed).to_flat();
    let mut opts = RunOptions::new(seed);
    opts.log_stride = log_stride.max(1);
    opts.snapshot_stride = sec.max_steps.max(1);
    // The loss is ½·MSE; stop an order of magnitude below the target.
    opts.stop_loss = Some(0.05 * sec.target_mse);
    match run_training(
        &obj,
        &relu_spec(sec, method),
        init.as_slice(),
        sec.max_steps,
        &opts,
        &mut [],
    ) {
        Ok(traj) => {
            let mse = 2.0 * traj.final_loss();
            Ok(ReluRun {
                seed,
                method,
                status: if mse < sec.target_mse {
                    RunStatus::Converged
                } else {
                    RunStatus::NotConverged
                },
                steps: traj.steps_run,
                train_mse: mse,
                path_norm: ReluNet1D::from_flat(sec.width, &traj.final_params)?.path_norm(),
                params: traj.final_params,
            })
        }
        Err(Error::Divergence(rep)) => Ok(ReluRun {
            seed,
            method,
            status: RunStatus::Diverged,
            steps: rep.step,
            train_mse: f64::NAN,
            path_norm: f64::NAN,
            params: Vec::new(),
        }),
        Err(e) => Err(e.into()),
    }
}

pub fn cmd_relu_demo(ctx: &mut Ctx<'_>) -> anyhow::Result<Outcome> {
    let cfg = ctx.cfg;
    let sec = &cfg.relu_demo;
    anyhow::ensure!(sec.grid_points >= 2, "need at least two grid points");
    let jobs: Vec<(u64, ReluMethod)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| [(s, ReluMethod::Erm), (s, ReluMethod::Sam)])
        .collect();
    let runs = ctx
        .exec
        .try_map(jobs.len(), |k| relu_run(sec, jobs[k].1, jobs[k].0, cfg.log_stride))?;
    let mut outcome = Outcome::default();
    let mut summary = Table::new(&["seed", "method", "status", "steps", "train_mse", "path_norm"]);
    for r in &runs {
        summary.push(vec![
            r.seed.into(),
            r.method.label().into(),
            r.status.label().into(),
            r.steps.into(),
            r.train_mse.into(),
            r.path_norm.into(),
        ]);
        if r.status != RunStatus::Converged {
            outcome
                .soft_failures
                .push(format!("seed {} {}: {}", r.seed, r.method.label(), r.status.label()));
        }
        if r.status == RunStatus::Diverged {
            continue;
        }
        let net = ReluNet1D::from_flat(sec.width, &r.params)?;
        let mut fit = Table::new(&["x", "f"]);
        for k in 0..sec.grid_points {
            let x = -1.25 + 2.5 * k as f64 / (sec.grid_points - 1) as f64;
            fit.push(vec![x.into(), net.forward(x).into()]);
        }
        ctx.out.csv(
            &format!("relu_demo/seed-{}/{}_fit.csv", r.seed, r.method.label()),
            &fit,
            &[r.seed],
        )?;
        outcome.report.push(format!(
            "seed {} {:>3}: mse {:.3e} after {} steps, path norm {:.4}",
            r.seed,
            r.method.label(),
            r.train_mse,
            r.steps,
            r.path_norm
        ));
    }
    let data = gen_1d_regression(0);
    let mut points = Table::new(&["x", "y"]);
    for i in 0..data.n() {
        points.push(vec![data.row(i)[0].into(), data.y()[i].into()]);
    }
    ctx.out.csv("relu_demo/data.csv", &points, &cfg.seeds)?;
    ctx.out.csv("relu_demo/summary.csv", &summary, &cfg.seeds)?;
    Ok(outcome)
}
