use anyhow::Context as _;
use samlab_core::datasets::Dataset;
use samlab_core::model_zoo::{DiagNet, DiagNetParams};
use samlab_core::optimizers::{run_switch_plan, RunOptions, SwitchPlan};
use samlab_core::{Error, Objective};
use serde::{Deserialize, Serialize};

use super::{diag_test_loss, sparse_dataset, Ctx, Outcome, RunStatus};
use crate::config::{RunConfig, SwitchLeg};
use crate::output::Table;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpRow {
    pub t: f64,
    pub train_loss: f64,
    pub test_loss: f64,
}

/// Losses at `(1−t)·w_a + t·w_b` on a uniform grid over [−0.5, 1.5]
/// (`extended`) or [0, 1]. The grid contains t = 0 and t = 1 whenever the
/// spacing divides the range.
pub fn interpolate_diag(
    data: &Dataset,
    w_a: &[f64],
    w_b: &[f64],
    num_points: usize,
    extended: bool,
) -> anyhow::Result<Vec<InterpRow>> {
    anyhow::ensure!(w_a.len() == w_b.len(), "endpoints differ in dimension");
    anyhow::ensure!(w_a.len() == 2 * data.d(), "endpoints do not match the dataset");
    anyhow::ensure!(num_points >= 3, "need at least three interpolation points");
    let obj = DiagNet::new(data.clone());
    let (lo, hi) = if extended { (-0.5, 1.5) } else { (0.0, 1.0) };
    Ok((0..num_points)
        .map(|k| {
            let t = lo + (hi - lo) * k as f64 / (num_points - 1) as f64;
            let w: Vec<f64> = w_a.iter().zip(w_b).map(|(a, b)| (1.0 - t) * a + t * b).collect();
            InterpRow {
                t,
                train_loss: obj.loss(&w),
                test_loss: diag_test_loss(&w, data),
            }
        })
        .collect())
}

/// Interior points (0 < t < 1) stay below the larger endpoint loss.
pub fn interior_below_endpoints(rows: &[InterpRow], rel_slack: f64) -> bool {
    let at = |t: f64| rows.iter().find(|r| r.t == t).map(|r| r.train_loss);
    let (Some(a), Some(b)) = (at(0.0), at(1.0)) else {
        return false;
    };
    let cap = a.max(b) * (1.0 + rel_slack);
    rows.iter()
        .filter(|r| r.t > 0.0 && r.t < 1.0)
        .all(|r| r.train_loss <= cap)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub t: u64,
    pub phase: usize,
    pub train_loss: f64,
    pub test_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LegResult {
    pub status: RunStatus,
    pub switch_params: Vec<f64>,
    pub final_params: Vec<f64>,
    pub train_at_switch: f64,
    pub test_at_switch: f64,
    pub train_final: f64,
    pub test_final: f64,
    pub curve: Vec<CurvePoint>,
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Runs both phases of `leg` from `w₊ = w₋ = α`, keeping a snapshot at the
/// switch step.
pub fn run_leg(data: &Dataset, alpha: f64, leg: &SwitchLeg, seed: u64, log_stride: u64) -> anyhow::Result<LegResult> {
    let obj = DiagNet::new(data.clone());
    let init = DiagNetParams::uniform(data.d(), alpha)?.to_flat();
    let plan = SwitchPlan {
        first: leg.first.clone(),
        second: leg.second.clone(),
        switch_step: leg.first_steps,
    };
    let mut opts = RunOptions::new(seed);
    opts.log_stride = log_stride.max(1);
    opts.snapshot_stride = if leg.first_steps > 0 {
        gcd(opts.log_stride, leg.first_steps)
    } else {
        opts.log_stride
    };
    let total = leg.first_steps + leg.second_steps;
    let traj = match run_switch_plan(&obj, &plan, init.as_slice(), total, &opts, &mut []) {
        Ok(t) => t,
        Err(Error::Divergence(_)) => {
            return Ok(LegResult {
                status: RunStatus::Diverged,
                switch_params: Vec::new(),
                final_params: Vec::new(),
                train_at_switch: f64::NAN,
                test_at_switch: f64::NAN,
                train_final: f64::NAN,
                test_final: f64::NAN,
                curve: Vec::new(),
            })
        }
        Err(e) => return Err(e.into()),
    };
    let curve: Vec<CurvePoint> = traj
        .snapshots
        .iter()
        .map(|s| CurvePoint {
            t: s.t,
            phase: usize::from(s.t > leg.first_steps),
            train_loss: obj.loss(&s.params),
            test_loss: diag_test_loss(&s.params, data),
        })
        .collect();
    let switch = traj
        .snapshots
        .iter()
        .find(|s| s.t == leg.first_steps)
        .context("no snapshot at the switch step")?;
    Ok(LegResult {
        status: RunStatus::Converged,
        switch_params: switch.params.clone(),
        final_params: traj.final_params.clone(),
        train_at_switch: obj.loss(&switch.params),
        test_at_switch: diag_test_loss(&switch.params, data),
        train_final: obj.loss(&traj.final_params),
        test_final: diag_test_loss(&traj.final_params, data),
        curve,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwitchSeedResult {
    pub seed: u64,
    pub forward: LegResult,
    pub reverse: Option<LegResult>,
    /// Between the forward switch point and the forward endpoint.
    pub interpolation: Vec<InterpRow>,
}

impl SwitchSeedResult {
    pub fn forward_improves(&self) -> bool {
        self.forward.test_final < self.forward.test_at_switch
    }

    /// `test_final / test_at_switch` of the reverse leg.
    pub fn reverse_ratio(&self) -> Option<f64> {
        self.reverse.as_ref().map(|r| r.test_final / r.test_at_switch)
    }
}

pub fn switch_results(cfg: &RunConfig, exec: samlab_core::exec::Execution) -> anyhow::Result<Vec<SwitchSeedResult>> {
    let sec = &cfg.switch;
    let legs: Vec<(usize, bool)> = (0..cfg.seeds.len())
        .flat_map(|k| [(k, false), (k, true)])
        .filter(|(_, rev)| !rev || sec.reverse.is_some())
        .collect();
    let mut runs = exec
        .try_map(legs.len(), |j| -> anyhow::Result<LegResult> {
            let (k, rev) = legs[j];
            let data = sparse_dataset(&cfg.dataset, cfg.seeds[k])?;
            let leg = if rev {
                sec.reverse.as_ref().expect("filtered")
            } else {
                &sec.forward
            };
            run_leg(&data, sec.alpha, leg, cfg.seeds[k], cfg.log_stride)
        })?
        .into_iter();
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        let forward = runs.next().expect("one forward leg per seed");
        let reverse = sec
            .reverse
            .as_ref()
            .map(|_| runs.next().expect("one reverse leg per seed"));
        let data = sparse_dataset(&cfg.dataset, seed)?;
        let interpolation = if forward.status == RunStatus::Diverged {
            Vec::new()
        } else {
            interpolate_diag(
                &data,
                &forward.switch_params,
                &forward.final_params,
                sec.interpolation_points,
                sec.extended_range,
            )?
        };
        out.push(SwitchSeedResult {
            seed,
            forward,
            reverse,
            interpolation,
        });
    }
    Ok(out)
}

fn interp_table(rows: &[InterpRow]) -> Table {
    let mut t = Table::new(&["t", "train_loss", "test_loss"]);
    for r in rows {
        t.push(vec![r.t.into(), r.train_loss.into(), r.test_loss.into()]);
    }
    t
}

pub fn cmd_switch(ctx: &mut Ctx<'_>) -> anyhow::Result<Outcome> {
    let cfg = ctx.cfg;
    let results = switch_results(cfg, ctx.exec)?;
    let mut outcome = Outcome::default();
    let mut summary = Table::new(&[
        "seed",
        "leg",
        "status",
        "train_at_switch",
        "test_at_switch",
        "train_final",
        "test_final",
        "test_ratio",
        "interpolation_below_endpoints",
    ]);
    for r in &results {
        let legs = [("forward", Some(&r.forward)), ("reverse", r.reverse.as_ref())];
        for (name, leg) in legs {
            let Some(leg) = leg else { continue };
            if leg.status == RunStatus::Diverged {
                outcome
                    .soft_failures
                    .push(format!("seed {} {name} leg diverged", r.seed));
            }
            let mut curve = Table::new(&["t", "phase", "train_loss", "test_loss"]);
            for p in &leg.curve {
                curve.push(vec![
                    p.t.into(),
                    p.phase.into(),
                    p.train_loss.into(),
                    p.test_loss.into(),
                ]);
            }
            ctx.out
                .csv(&format!("switch/seed-{}/{name}_curve.csv", r.seed), &curve, &[r.seed])?;
            summary.push(vec![
                r.seed.into(),
                name.into(),
                leg.status.label().into(),
                leg.train_at_switch.into(),
                leg.test_at_switch.into(),
                leg.train_final.into(),
                leg.test_final.into(),
                (leg.test_final / leg.test_at_switch).into(),
                if name == "forward" {
                    interior_below_endpoints(&r.interpolation, 1e-6).into()
                } else {
                    "".into()
                },
            ]);
        }
        ctx.out.csv(
            &format!("switch/seed-{}/interpolation.csv", r.seed),
            &interp_table(&r.interpolation),
            &[r.seed],
        )?;
        outcome.report.push(format!(
            "seed {}: forward test {:.4e} -> {:.4e}{}",
            r.seed,
            r.forward.test_at_switch,
            r.forward.test_final,
            r.reverse_ratio()
                .map_or(String::new(), |q| format!(", reverse ratio {q:.4}"))
        ));
    }
    ctx.out.csv("switch/summary.csv", &summary, &cfg.seeds)?;
    Ok(outcome)
}

fn read_params(path: &std::path::Path) -> anyhow::Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("{} is not a JSON array of numbers", path.display()))
}

pub fn cmd_interpolate(ctx: &mut Ctx<'_>) -> anyhow::Result<Outcome> {
    let cfg = ctx.cfg;
    let sec = &cfg.interpolate;
    let w_a = read_params(&sec.endpoint_a)?;
    let w_b = read_params(&sec.endpoint_b)?;
    let mut outcome = Outcome::default();
    for &seed in &cfg.seeds {
        let data = sparse_dataset(&cfg.dataset, seed)?;
        let rows = interpolate_diag(&data, &w_a, &w_b, sec.num_points, sec.extended_range)?;
        ctx.out
            .csv(&format!("interpolate/seed-{seed}.csv"), &interp_table(&rows), &[seed])?;
        outcome.report.push(format!(
            "seed {seed}: interior below endpoints: {}",
            interior_below_endpoints(&rows, 1e-6)
        ));
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DatasetSpec;

    #[test]
    fn endpoints_and_constant_segments() {
        let data = sparse_dataset(&DatasetSpec { d: 6, n: 4, k: 2 }, 0).unwrap();
        let a: Vec<f64> = (0..12).map(|j| 0.1 + 0.01 * j as f64).collect();
        let b: Vec<f64> = (0..12).map(|j| 0.3 - 0.02 * j as f64).collect();
        let obj = DiagNet::new(data.clone());
        let rows = interpolate_diag(&data, &a, &b, 41, true).unwrap();
        let at = |t: f64| rows.iter().find(|r| r.t == t).unwrap().train_loss;
        assert_eq!(at(0.0), obj.loss(&a));
        assert_eq!(at(1.0), obj.loss(&b));
        let flat = interpolate_diag(&data, &a, &a, 5, false).unwrap();
        assert!(flat.iter().all(|r| r.train_loss == flat[0].train_loss));
    }
}
