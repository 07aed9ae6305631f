use std::collections::BTreeMap;

use samlab_core::exec::Execution;
use samlab_core::model_zoo::{DiagNet, DiagNetParams};
use samlab_core::optimizers::{run_training, OptimizerSpec, RunOptions};
use samlab_core::Error;
use serde::{Deserialize, Serialize};

use super::{median, sparse_dataset, stop_label, train_diag, Ctx, DiagRun, Outcome, RunStatus};
use crate::config::{GridMethod, GridMode, RhoGridSection, RunConfig};
use crate::output::{Cell, Table};

pub fn cmd_train(ctx: &mut Ctx<'_>) -> anyhow::Result<Outcome> {
    let cfg = ctx.cfg;
    let sec = &cfg.train;
    sec.optimizer.validate()?;
    let runs = ctx.exec.try_map(cfg.seeds.len(), |k| -> anyhow::Result<_> {
        let seed = cfg.seeds[k];
        let data = sparse_dataset(&cfg.dataset, seed)?;
        let obj = DiagNet::new(data.clone());
        let init = DiagNetParams::uniform(data.d(), sec.alpha)?.to_flat();
        let mut opts = RunOptions::new(seed);
        opts.log_stride = cfg.log_stride.max(1);
        opts.snapshot_stride = sec.snapshot_stride.max(1);
        opts.stop_loss = sec.stop_loss;
        let (run, traj) = match run_training(&obj, &sec.optimizer, init.as_slice(), sec.max_steps, &opts, &mut []) {
            Ok(t) => (
                DiagRun::from_trajectory(&t, &data, sec.stop_loss.unwrap_or(f64::INFINITY)),
                Some(t),
            ),
            Err(Error::Divergence(rep)) => (DiagRun::diverged(rep.step), None),
            Err(e) => return Err(e.into()),
        };
        Ok((seed, run, traj))
    })?;

    let mut outcome = Outcome::default();
    let mut table = Table::new(&[
        "seed",
        "method",
        "status",
        "steps",
        "stop_reason",
        "train_loss",
        "test_loss",
        "l1_norm",
    ]);
    for (seed, run, traj) in runs {
        let stop = traj.as_ref().map_or("diverged", |t| stop_label(t.stop_reason));
        if let Some(traj) = &traj {
            ctx.out
                .text(&format!("train/seed-{seed}/log.jsonl"), &traj.log_jsonl()?)?;
            ctx.out
                .json(&format!("train/seed-{seed}/snapshots.json"), &traj.snapshots)?;
        }
        match run.status {
            RunStatus::Diverged => outcome
                .soft_failures
                .push(format!("seed {seed}: diverged at step {}", run.steps)),
            RunStatus::NotConverged if sec.stop_loss.is_some() => outcome
                .soft_failures
                .push(format!("seed {seed}: not converged after {} steps", run.steps)),
            _ => {}
        }
        table.push(vec![
            seed.into(),
            sec.optimizer.method.label().into(),
            run.status.label().into(),
            run.steps.into(),
            stop.into(),
            run.train_loss.into(),
            run.test_loss.into(),
            run.l1_norm.into(),
        ]);
        outcome.report.push(format!(
            "seed {seed}: {} after {} steps, train {:.3e}, test {:.3e}",
            run.status.label(),
            run.steps,
            run.train_loss,
            run.test_loss
        ));
    }
    ctx.out.csv("train/summary.csv", &table, &cfg.seeds)?;
    Ok(outcome)
}

/// Optimizer for one grid cell.
pub fn grid_spec(sec: &RhoGridSection, method: GridMethod, rho: f64) -> OptimizerSpec {
    match (sec.mode, method) {
        (GridMode::FullBatch, GridMethod::Gd) => OptimizerSpec::gd(sec.gamma),
        (GridMode::FullBatch, GridMethod::NSam) => OptimizerSpec::n_sam_full(sec.gamma, rho),
        (GridMode::FullBatch, GridMethod::OneSam) => OptimizerSpec::one_sam_full(sec.gamma, rho),
        (GridMode::Stochastic, GridMethod::Gd) => OptimizerSpec::sgd(sec.gamma, sec.batch_size),
        (GridMode::Stochastic, GridMethod::NSam) => OptimizerSpec::n_sam_fresh(sec.gamma, rho, sec.batch_size, None),
        (GridMode::Stochastic, GridMethod::OneSam) => OptimizerSpec::m_sam(sec.gamma, rho, 1),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub method: GridMethod,
    pub rho: f64,
    pub seed: u64,
    pub run: DiagRun,
}

/// Runs every (seed, method, ρ) cell. GD does not depend on ρ, so it runs
/// once per seed and is reported at every grid value.
pub fn grid_runs(cfg: &RunConfig, exec: Execution) -> anyhow::Result<Vec<GridRow>> {
    let sec = &cfg.compare_rho_grid;
    let mut jobs: Vec<(u64, GridMethod, Option<f64>)> = Vec::new();
    for &seed in &cfg.seeds {
        for &m in &sec.methods {
            if m == GridMethod::Gd {
                jobs.push((seed, m, None));
            } else {
                jobs.extend(sec.rho_grid.iter().map(|&r| (seed, m, Some(r))));
            }
        }
    }
    let results = exec.try_map(jobs.len(), |k| -> anyhow::Result<DiagRun> {
        let (seed, method, rho) = jobs[k];
        let data = sparse_dataset(&cfg.dataset, seed)?;
        let spec = grid_spec(sec, method, rho.unwrap_or(0.0));
        let (run, _) = train_diag(
            &data,
            sec.alpha,
            &spec,
            sec.max_steps,
            Some(sec.stop_loss),
            sec.converged_loss,
            seed,
            cfg.log_stride,
            &mut [],
        )?;
        Ok(run)
    })?;
    let mut rows = Vec::new();
    for ((seed, method, rho), run) in jobs.into_iter().zip(results) {
        match rho {
            Some(rho) => rows.push(GridRow { method, rho, seed, run }),
            None => rows.extend(sec.rho_grid.iter().map(|&rho| GridRow {
                method,
                rho,
                seed,
                run: run.clone(),
            })),
        }
    }
    rows.sort_by(|a, b| {
        (a.seed, a.method)
            .cmp(&(b.seed, b.method))
            .then(a.rho.total_cmp(&b.rho))
    });
    Ok(rows)
}

/// Per method: the ρ with the smallest median test loss among grid values at
/// which every seed converged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodBest {
    pub method: GridMethod,
    pub best_rho: Option<f64>,
    pub median_test_loss: f64,
    pub median_train_loss: f64,
    pub median_l1_norm: f64,
}

pub fn best_per_method(rows: &[GridRow]) -> Vec<MethodBest> {
    let mut cells: BTreeMap<GridMethod, BTreeMap<u64, Vec<&GridRow>>> = BTreeMap::new();
    for r in rows {
        cells
            .entry(r.method)
            .or_default()
            .entry(r.rho.to_bits())
            .or_default()
            .push(r);
    }
    cells
        .into_iter()
        .map(|(method, by_rho)| {
            let mut best: Option<MethodBest> = None;
            for (bits, runs) in by_rho {
                if runs.iter().any(|r| r.run.status != RunStatus::Converged) {
                    continue;
                }
                let med = |f: &dyn Fn(&DiagRun) -> f64| median(&mut runs.iter().map(|r| f(&r.run)).collect::<Vec<_>>());
                let cand = MethodBest {
                    method,
                    best_rho: Some(f64::from_bits(bits)),
                    median_test_loss: med(&|r| r.test_loss),
                    median_train_loss: med(&|r| r.train_loss),
                    median_l1_norm: med(&|r| r.l1_norm),
                };
                if best
                    .as_ref()
                    .map_or(true, |b| cand.median_test_loss < b.median_test_loss)
                {
                    best = Some(cand);
                }
            }
            best.unwrap_or(MethodBest {
                method,
                best_rho: None,
                median_test_loss: f64::NAN,
                median_train_loss: f64::NAN,
                median_l1_norm: f64::NAN,
            })
        })
        .collect()
}

pub fn cmd_compare_rho_grid(ctx: &mut Ctx<'_>) -> anyhow::Result<Outcome> {
    let cfg = ctx.cfg;
    let rows = grid_runs(cfg, ctx.exec)?;
    let mut outcome = Outcome::default();
    let mut table = Table::new(&[
        "method",
        "rho",
        "seed",
        "status",
        "steps",
        "train_loss",
        "test_loss",
        "l1_norm",
    ]);
    for r in &rows {
        if r.run.status == RunStatus::Diverged {
            outcome
                .soft_failures
                .push(format!("{} rho={} seed {}: diverged", r.method.label(), r.rho, r.seed));
        }
        table.push(vec![
            r.method.label().into(),
            r.rho.into(),
            r.seed.into(),
            r.run.status.label().into(),
            r.run.steps.into(),
            r.run.train_loss.into(),
            r.run.test_loss.into(),
            r.run.l1_norm.into(),
        ]);
    }
    ctx.out.csv("compare_rho_grid/grid.csv", &table, &cfg.seeds)?;

    let best = best_per_method(&rows);
    let mut summary = Table::new(&[
        "method",
        "best_rho",
        "median_test_loss",
        "median_train_loss",
        "median_l1_norm",
    ]);
    for b in &best {
        summary.push(vec![
            b.method.label().into(),
            b.best_rho.map_or(Cell::Text("none".into()), Cell::Float),
            b.median_test_loss.into(),
            b.median_train_loss.into(),
            b.median_l1_norm.into(),
        ]);
        outcome.report.push(match b.best_rho {
            Some(rho) => format!(
                "{:>7}: best rho {rho}, median test loss {:.4e}",
                b.method.label(),
                b.median_test_loss
            ),
            None => format!("{:>7}: no grid value where all seeds converged", b.method.label()),
        });
    }
    ctx.out.csv("compare_rho_grid/summary.csv", &summary, &cfg.seeds)?;
    Ok(outcome)
}
