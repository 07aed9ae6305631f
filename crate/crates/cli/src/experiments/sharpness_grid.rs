use samlab_core::datasets::{gen_linear_classification, Dataset};
use samlab_core::model_zoo::{DiagNet, DiagNetParams, LinearMargin, MarginLoss};
use samlab_core::optimizers::{run_training, OptimizerSpec, RunOptions};
use samlab_core::sharpness::{ascent_suboptimality, linear_1_sharpness_closed_form, m_sharpness, SharpnessOptions};
use samlab_core::{Objective, ParamVector};

use super::{sparse_dataset, Ctx, Outcome};
use crate::config::{SharpnessGridSection, SharpnessModel};
use crate::output::{Cell, Table};

fn trained<O: Objective>(obj: &O, init: &[f64], sec: &SharpnessGridSection, seed: u64) -> anyhow::Result<Vec<f64>> {
    let mut opts = RunOptions::new(seed);
    opts.log_stride = sec.train_steps.max(1);
    opts.snapshot_stride = sec.train_steps.max(1);
    let traj = run_training(
        obj,
        &OptimizerSpec::gd(sec.train_gamma),
        init,
        sec.train_steps,
        &opts,
        &mut [],
    )?;
    Ok(traj.final_params)
}

struct Grid {
    values: Table,
    reports: Vec<samlab_core::sharpness::SharpnessReport>,
}

fn measure<O: Objective>(
    obj: &O,
    w: &[f64],
    sec: &SharpnessGridSection,
    seed: u64,
    closed_form: Option<&dyn Fn(f64) -> anyhow::Result<f64>>,
    exec: samlab_core::exec::Execution,
) -> anyhow::Result<Grid> {
    let n = obj.num_examples();
    let mut header: Vec<String> = vec!["rho".into()];
    header.extend(sec.m_values.iter().map(|m| format!("m_{m}")));
    if closed_form.is_some() {
        header.push("closed_form_m_1".into());
    }
    if sec.suboptimality {
        header.extend(sec.m_values.iter().map(|m| format!("suboptimality_m_{m}")));
    }
    let mut values = Table {
        header,
        rows: Vec::new(),
    };
    let opts = SharpnessOptions {
        restart_seed: seed,
        execution: exec,
        ..Default::default()
    };
    let mut reports = Vec::new();
    for &rho in &sec.rho_grid {
        let mut row: Vec<Cell> = vec![rho.into()];
        for &m in &sec.m_values {
            let rep = m_sharpness(obj, w, m.min(n), rho, sec.ascent_iters, n, &opts)?;
            row.push(rep.mean_sharpness.into());
            reports.push(rep);
        }
        if let Some(f) = closed_form {
            row.push(f(rho)?.into());
        }
        if sec.suboptimality {
            for &m in &sec.m_values {
                row.push(match ascent_suboptimality(obj, w, m.min(n), rho, n, &opts)? {
                    Some(v) => v.into(),
                    None => "none".into(),
                });
            }
        }
        values.rows.push(row);
    }
    Ok(Grid { values, reports })
}

pub fn cmd_sharpness_grid(ctx: &mut Ctx<'_>) -> anyhow::Result<Outcome> {
    let cfg = ctx.cfg;
    let sec = &cfg.sharpness_grid;
    anyhow::ensure!(
        !sec.m_values.is_empty() && !sec.rho_grid.is_empty(),
        "empty sharpness grid"
    );
    let mut outcome = Outcome::default();
    for &seed in &cfg.seeds {
        let grid = match sec.model {
            SharpnessModel::LinearLogistic => {
                let data: Dataset = gen_linear_classification(sec.d, sec.n, seed)?;
                let obj = LinearMargin::new(data.clone(), MarginLoss::Logistic)?;
                let w = trained(&obj, &vec![0.0; sec.d], sec, seed)?;
                let cf = |rho: f64| -> anyhow::Result<f64> {
                    Ok(linear_1_sharpness_closed_form(&w, &data, rho, MarginLoss::Logistic)?)
                };
                measure(&obj, &w, sec, seed, Some(&cf), ctx.exec)?
            }
            SharpnessModel::DiagNet => {
                let data = sparse_dataset(&cfg.dataset, seed)?;
                let obj = DiagNet::new(data.clone());
                let init: ParamVector = DiagNetParams::uniform(data.d(), sec.alpha)?.to_flat();
                let w = trained(&obj, init.as_slice(), sec, seed)?;
                measure(&obj, &w, sec, seed, None, ctx.exec)?
            }
        };
        ctx.out
            .csv(&format!("sharpness_grid/seed-{seed}.csv"), &grid.values, &[seed])?;
        ctx.out
            .json(&format!("sharpness_grid/seed-{seed}.json"), &grid.reports)?;
        let flagged: usize = grid.reports.iter().map(|r| r.flagged_batches.len()).sum();
        outcome.report.push(format!(
            "seed {seed}: {} grid cells, {flagged} batches restarted from a random direction",
            grid.reports.len()
        ));
    }
    Ok(outcome)
}
