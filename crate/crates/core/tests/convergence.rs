use samlab_core::convergence_lab::{
    run_lemma_suite, tightness_probes, verify_rate, LemmaSuiteConfig, RateParams, TheoremId,
};
use samlab_core::exec::Execution;
use samlab_core::model_zoo::{estimate_gradient_variance, estimate_smoothness, QuadraticObjective, QuadraticSpec};

fn instance(seed: u64, zero_eigenvalues: usize) -> QuadraticObjective {
    QuadraticObjective::random(
        &QuadraticSpec {
            dim: 8,
            num_examples: 16,
            smoothness: 2.0,
            min_eigenvalue: 0.1,
            zero_eigenvalues,
            noise: 1.0,
        },
        seed,
    )
    .unwrap()
}

#[test]
fn lemmas_hold_on_random_quadratics() {
    let cfg = LemmaSuiteConfig {
        probes: 300,
        stochastic_points: 3,
        draws: 2000,
        batch_size: 2,
    };
    for seed in 0..4 {
        let q = instance(seed, (seed % 2) as usize);
        for check in run_lemma_suite(&q, &cfg, 100 + seed, Execution::default()).unwrap() {
            assert!(check.passed, "seed {seed}: {check:?}");
        }
    }
}

#[test]
fn deterministic_bounds_are_attained() {
    for probe in tightness_probes(6, 3).unwrap() {
        assert!(probe.relative_margin <= 1e-6, "{probe:?}");
        assert!(probe.margin >= -1e-10, "{probe:?}");
    }
}

#[test]
fn deterministic_rates_hold() {
    let q = instance(7, 0);
    let p = RateParams::new(2000, 1, 1);
    for id in [
        TheoremId::DetNonconvex,
        TheoremId::DetPl,
        TheoremId::DetConvex,
        TheoremId::DetStronglyConvex,
    ] {
        let r = verify_rate(id, &q, &p, Execution::default()).unwrap();
        assert!(r.satisfied, "{}: margin {:e}", id.label(), r.margin);
    }
    let flat = instance(8, 2);
    for id in [TheoremId::DetNonconvex, TheoremId::DetConvex] {
        let r = verify_rate(id, &flat, &p, Execution::default()).unwrap();
        assert!(r.satisfied, "{}: margin {:e}", id.label(), r.margin);
    }
}

#[test]
fn stochastic_rates_hold() {
    let q = instance(9, 0);
    let p = RateParams::new(2000, 2, 40);
    for id in [TheoremId::StochasticNonconvex, TheoremId::StochasticPl] {
        let r = verify_rate(id, &q, &p, Execution::default()).unwrap();
        assert!(r.satisfied, "{}: {:?} margin {:e}", id.label(), r.note, r.margin);
    }
}

#[test]
fn estimated_constants_match_construction() {
    let q = instance(10, 1);
    let w = q.w_star().as_slice().to_vec();
    let beta = estimate_smoothness(&q, &[&w], 200, 1);
    assert!(
        (beta - q.smoothness()).abs() <= 0.05 * q.smoothness(),
        "{beta} vs {}",
        q.smoothness()
    );
    let sigma2 = estimate_gradient_variance(&q, &w, 20_000, 2);
    assert!(
        (sigma2 - q.sigma2()).abs() <= 0.05 * q.sigma2(),
        "{sigma2} vs {}",
        q.sigma2()
    );
}
