use samlab_core::implicit_bias::{potential_phi, PotentialSpec};

use super::{Ctx, Outcome};
use crate::output::Table;

#[derive(Clone, Debug, PartialEq)]
pub struct PotentialRow {
    pub alpha: f64,
    pub b1: f64,
    pub b2: f64,
    pub phi: f64,
    /// φ_α(β) / φ_α(e₁).
    pub phi_normalized: f64,
    pub l1: f64,
    pub l2_sq: f64,
}

pub fn potential_grid(alpha_scales: &[f64], extent: f64, points: usize) -> anyhow::Result<Vec<PotentialRow>> {
    anyhow::ensure!(points >= 2 && extent > 0.0, "need a nondegenerate grid");
    let coord = |k: usize| -extent + 2.0 * extent * k as f64 / (points - 1) as f64;
    let mut rows = Vec::with_capacity(alpha_scales.len() * points * points);
    for &alpha in alpha_scales {
        let spec = PotentialSpec::uniform(2, alpha)?;
        let unit = potential_phi(&spec, &[1.0, 0.0])?;
        for i in 0..points {
            for j in 0..points {
                let (b1, b2) = (coord(i), coord(j));
                let phi = potential_phi(&spec, &[b1, b2])?;
                rows.push(PotentialRow {
                    alpha,
                    b1,
                    b2,
                    phi,
                    phi_normalized: phi / unit,
                    l1: b1.abs() + b2.abs(),
                    l2_sq: b1 * b1 + b2 * b2,
                });
            }
        }
    }
    Ok(rows)
}

pub fn cmd_potential_plot(ctx: &mut Ctx<'_>) -> anyhow::Result<Outcome> {
    let sec = &ctx.cfg.potential_plot;
    let rows = potential_grid(&sec.alpha_scales, sec.extent, sec.grid_points)?;
    let mut t = Table::new(&["alpha", "beta_1", "beta_2", "phi", "phi_normalized", "l1", "l2_sq"]);
    for r in &rows {
        t.push(vec![
            r.alpha.into(),
            r.b1.into(),
            r.b2.into(),
            r.phi.into(),
            r.phi_normalized.into(),
            r.l1.into(),
            r.l2_sq.into(),
        ]);
    }
    ctx.out.csv("potential_plot/potential.csv", &t, &ctx.cfg.seeds)?;
    Ok(Outcome {
        report: vec![format!(
            "{} grid points over {} scales",
            rows.len(),
            sec.alpha_scales.len()
        )],
        ..Outcome::default()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn large_scale_matches_quadratic() {
        let extent = 1.0;
        let alpha = 100.0 * extent;
        for r in potential_grid(&[alpha], extent, 11).unwrap() {
            if r.l2_sq > 0.0 {
                let ratio = r.phi / (r.l2_sq / (4.0 * alpha * alpha));
                assert!((ratio - 1.0).abs() < 0.01, "{ratio}");
            }
        }
    }

    #[test]
    fn symmetric_under_negation_and_swap() {
        let rows = potential_grid(&[0.3], 2.0, 9).unwrap();
        let find = |b1: f64, b2: f64| rows.iter().find(|r| r.b1 == b1 && r.b2 == b2).unwrap().phi;
        for r in &rows {
            assert_eq!(r.phi, find(-r.b1, -r.b2));
            assert_eq!(r.phi, find(r.b2, r.b1));
        }
    }
}
