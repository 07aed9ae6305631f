use samlab_core::convergence_lab::{
    run_lemma_suite, tightness_probes, verify_rate, LemmaCheck, LemmaId, LemmaSuiteConfig, RateCheckResult, RateParams,
    TheoremId, TightnessProbe,
};
use samlab_core::exec::Execution;
use samlab_core::model_zoo::{QuadraticObjective, QuadraticSpec};
use serde::{Deserialize, Serialize};

use super::{Ctx, Outcome};
use crate::config::ConvergenceSection;
use crate::output::Table;

/// Relative margin allowed for the equality instances.
pub const TIGHTNESS_TOL: f64 = 1e-6;

/// Strongly convex instance `k` of a seed; condition numbers vary with `k`.
pub fn rate_instance(sec: &ConvergenceSection, seed: u64, k: usize) -> anyhow::Result<QuadraticObjective> {
    let spread = 1.0 + k as f64 / sec.instances.max(1) as f64;
    Ok(QuadraticObjective::random(
        &QuadraticSpec {
            dim: sec.dim,
            num_examples: sec.num_examples,
            smoothness: sec.smoothness,
            min_eigenvalue: sec.min_eigenvalue * spread,
            zero_eigenvalues: 0,
            noise: sec.noise,
        },
        seed.wrapping_mul(1000).wrapping_add(k as u64),
    )?)
}

/// Lemma instances alternate between strongly convex and merely convex
/// (one zero eigenvalue).
pub fn lemma_instance(sec: &ConvergenceSection, seed: u64, k: usize) -> anyhow::Result<QuadraticObjective> {
    Ok(QuadraticObjective::random(
        &QuadraticSpec {
            dim: sec.dim,
            num_examples: sec.num_examples,
            smoothness: sec.smoothness,
            min_eigenvalue: sec.min_eigenvalue,
            zero_eigenvalues: k % 2,
            noise: sec.noise,
        },
        seed.wrapping_mul(1000).wrapping_add(500 + k as u64),
    )?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub seed: u64,
    pub lemmas: Vec<(usize, Vec<LemmaCheck>)>,
    pub tightness: Vec<TightnessProbe>,
    pub rates: Vec<(usize, RateCheckResult)>,
}

impl ConvergenceReport {
    pub fn lemma_passed(&self, id: LemmaId) -> bool {
        self.lemmas
            .iter()
            .all(|(_, checks)| checks.iter().filter(|c| c.lemma == id).all(|c| c.passed))
    }

    pub fn tight_passed(&self) -> bool {
        !self.tightness.is_empty()
            && self
                .tightness
                .iter()
                .all(|p| p.relative_margin <= TIGHTNESS_TOL && p.margin >= -samlab_core::convergence_lab::SLACK)
    }

    pub fn rate_passed(&self, id: TheoremId) -> bool {
        let mut any = false;
        for (_, r) in self.rates.iter().filter(|(_, r)| r.theorem_id == id) {
            any = true;
            if !r.satisfied {
                return false;
            }
        }
        any
    }
}

pub fn convergence_report(sec: &ConvergenceSection, seed: u64, exec: Execution) -> anyhow::Result<ConvergenceReport> {
    let suite = LemmaSuiteConfig {
        probes: sec.probes,
        stochastic_points: sec.stochastic_points,
        draws: sec.draws,
        batch_size: sec.lemma_batch_size,
    };
    let lemmas = exec.try_map(sec.instances, |k| -> anyhow::Result<(usize, Vec<LemmaCheck>)> {
        let q = lemma_instance(sec, seed, k)?;
        // Draws inside one instance stay sequential; instances run in parallel.
        Ok((
            k,
            run_lemma_suite(&q, &suite, seed ^ (k as u64) << 20, Execution::Sequential)?,
        ))
    })?;
    let params = RateParams::new(sec.horizon, sec.batch_size, sec.rate_seeds);
    let jobs: Vec<(usize, TheoremId)> = (0..sec.instances)
        .flat_map(|k| TheoremId::ALL.into_iter().map(move |id| (k, id)))
        .collect();
    let rates = exec.try_map(jobs.len(), |j| -> anyhow::Result<(usize, RateCheckResult)> {
        let (k, id) = jobs[j];
        let q = rate_instance(sec, seed, k)?;
        Ok((k, verify_rate(id, &q, &params, Execution::Sequential)?))
    })?;
    Ok(ConvergenceReport {
        seed,
        lemmas,
        tightness: tightness_probes(sec.dim.max(2), seed)?,
        rates,
    })
}

pub fn cmd_convergence_check(ctx: &mut Ctx<'_>) -> anyhow::Result<Outcome> {
    let cfg = ctx.cfg;
    let sec = &cfg.convergence_check;
    let mut outcome = Outcome::default();
    for &seed in &cfg.seeds {
        let rep = convergence_report(sec, seed, ctx.exec)?;
        let mut rates = Table::new(&[
            "instance",
            "theorem_id",
            "satisfied",
            "margin",
            "rhs_final",
            "lhs_final",
        ]);
        for (k, r) in &rep.rates {
            rates.push(vec![
                (*k).into(),
                r.theorem_id.label().into(),
                r.satisfied.into(),
                r.margin.into(),
                r.rhs_bound.last().copied().unwrap_or(f64::NAN).into(),
                r.lhs_trace.last().copied().unwrap_or(f64::NAN).into(),
            ]);
        }
        ctx.out
            .csv(&format!("convergence_check/seed-{seed}/rates.csv"), &rates, &[seed])?;
        let mut lemmas = Table::new(&["instance", "lemma", "checks", "worst_margin", "passed"]);
        for (k, checks) in &rep.lemmas {
            for c in checks {
                lemmas.push(vec![
                    (*k).into(),
                    c.lemma.label().into(),
                    c.checks.into(),
                    c.worst_margin.into(),
                    c.passed.into(),
                ]);
            }
        }
        ctx.out
            .csv(&format!("convergence_check/seed-{seed}/lemmas.csv"), &lemmas, &[seed])?;
        let mut tight = Table::new(&["lemma", "regime", "margin", "grad_norm_sq", "relative_margin"]);
        for p in &rep.tightness {
            tight.push(vec![
                p.lemma.label().into(),
                p.regime.map_or("".into(), |r| format!("{r:?}").to_lowercase().into()),
                p.margin.into(),
                p.grad_norm_sq.into(),
                p.relative_margin.into(),
            ]);
        }
        ctx.out
            .csv(&format!("convergence_check/seed-{seed}/tightness.csv"), &tight, &[seed])?;
        // Traces are large; keep them in JSON only.
        ctx.out
            .json(&format!("convergence_check/seed-{seed}/report.json"), &rep)?;

        outcome.report.push(format!("seed {seed}"));
        for id in TheoremId::ALL {
            let ok = rep.rate_passed(id);
            outcome
                .report
                .push(format!("  {:<22} {}", id.label(), if ok { "pass" } else { "FAIL" }));
            if !ok {
                outcome
                    .hard_failures
                    .push(format!("seed {seed}: {} failed", id.label()));
            }
        }
        for id in LemmaId::ALL {
            let ok = rep.lemma_passed(id);
            outcome
                .report
                .push(format!("  {:<22} {}", id.label(), if ok { "pass" } else { "FAIL" }));
            if !ok {
                outcome
                    .hard_failures
                    .push(format!("seed {seed}: lemma {} failed", id.label()));
            }
        }
        let ok = rep.tight_passed();
        outcome
            .report
            .push(format!("  {:<22} {}", "tightness", if ok { "pass" } else { "FAIL" }));
        if !ok {
            outcome
                .hard_failures
                .push(format!("seed {seed}: equality instances not tight"));
        }
    }
    Ok(outcome)
}
