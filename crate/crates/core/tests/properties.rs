use nalgebra::DVector;
use proptest::prelude::*;
use samlab_core::datasets::{gen_linear_classification, gen_sparse_regression, Dataset};
use samlab_core::exec::Execution;
use samlab_core::implicit_bias::{hypentropy_q, potential_phi, PotentialSpec};
use samlab_core::model_zoo::{DiagNet, DiagNetParams, LinearMargin, MarginLoss, QuadraticObjective};
use samlab_core::optimizers::{run_training, OptimizerSpec, RunOptions, Trajectory};
use samlab_core::sharpness::{linear_1_sharpness_closed_form, m_sharpness, SharpnessOptions};
use samlab_core::Objective;

fn permuted(data: &Dataset, perm: &[usize]) -> Dataset {
    let rows = perm.iter().map(|&i| data.row(i).to_vec()).collect();
    let y = perm.iter().map(|&i| data.y()[i]).collect();
    Dataset::new(rows, y, data.beta_star().map(|b| b.to_vec()), data.meta.clone()).unwrap()
}

fn same_bits(a: &Trajectory, b: &Trajectory) -> bool {
    let bits = |t: &Trajectory| -> Vec<u64> {
        t.final_params
            .iter()
            .chain(t.records.iter().map(|r| &r.loss))
            .chain(t.records.iter().map(|r| &r.grad_norm))
            .map(|v| v.to_bits())
            .collect()
    };
    bits(a) == bits(b)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn loss_and_gradient_are_permutation_equivariant(seed in 0u64..1000, shift in 1usize..7) {
        let data = gen_sparse_regression(6, 7, 2, seed).unwrap();
        let perm: Vec<usize> = (0..7).map(|i| (i + shift) % 7).collect();
        let a = DiagNet::new(data.clone());
        let b = DiagNet::new(permuted(&data, &perm));
        let w: Vec<f64> = (0..12).map(|j| 0.1 + 0.05 * ((j as u64 * 7 + seed) % 11) as f64).collect();
        prop_assert!((a.loss(&w) - b.loss(&w)).abs() <= 1e-12 * (1.0 + a.loss(&w)));
        let (ga, gb) = (a.grad(&w), b.grad(&w));
        prop_assert!((ga - gb).amax() <= 1e-12);
    }

    #[test]
    fn potential_is_convex(
        a in proptest::collection::vec(-50.0f64..50.0, 4),
        b in proptest::collection::vec(-50.0f64..50.0, 4),
        alpha in 0.01f64..2.0,
        t in 0.0f64..1.0,
    ) {
        let spec = PotentialSpec::uniform(4, alpha).unwrap();
        let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| t * x + (1.0 - t) * y).collect();
        let lhs = potential_phi(&spec, &mid).unwrap();
        let rhs = t * potential_phi(&spec, &a).unwrap() + (1.0 - t) * potential_phi(&spec, &b).unwrap();
        prop_assert!(lhs <= rhs + 1e-9 * (1.0 + rhs.abs()));
    }

    #[test]
    fn hypentropy_is_even_and_nonnegative(z in -1e6f64..1e6) {
        prop_assert_eq!(hypentropy_q(z).to_bits(), hypentropy_q(-z).to_bits());
        prop_assert!(hypentropy_q(z) >= 0.0);
    }

    #[test]
    fn closed_form_sharpness_grows_with_radius(seed in 0u64..500, r1 in 0.0f64..2.0, extra in 0.0f64..2.0) {
        let data = gen_linear_classification(5, 12, seed).unwrap();
        let w = [0.3, -0.2, 0.5, 0.0, 1.0];
        for kind in [MarginLoss::Logistic, MarginLoss::Exponential] {
            let small = linear_1_sharpness_closed_form(&w, &data, r1, kind).unwrap();
            let large = linear_1_sharpness_closed_form(&w, &data, r1 + extra, kind).unwrap();
            prop_assert!(large >= small);
        }
    }

    #[test]
    fn more_ascent_iterations_never_lower_the_estimate(seed in 0u64..500, iters in 1usize..8, m in 1usize..5) {
        let obj = LinearMargin::new(gen_linear_classification(4, 12, seed).unwrap(), MarginLoss::Logistic).unwrap();
        let w = [0.4, -0.1, 0.2, 0.7];
        let opts = SharpnessOptions { execution: Execution::Sequential, ..Default::default() };
        let few = m_sharpness(&obj, &w, m, 0.3, iters, 12, &opts).unwrap();
        let more = m_sharpness(&obj, &w, m, 0.3, iters + 3, 12, &opts).unwrap();
        for (a, b) in few.per_batch_values.iter().zip(&more.per_batch_values) {
            prop_assert!(b >= a);
        }
    }

    #[test]
    fn zero_radius_sam_reproduces_sgd_bitwise(seed in 0u64..1000, b in 1usize..6, gamma in 0.01f64..0.2) {
        let data = gen_sparse_regression(8, 6, 2, seed).unwrap();
        let obj = DiagNet::new(data);
        let init = DiagNetParams::uniform(8, 0.3).unwrap().to_flat();
        let opts = RunOptions::new(seed);
        let base = run_training(&obj, &OptimizerSpec::sgd(gamma, b), init.as_slice(), 40, &opts, &mut []).unwrap();
        for spec in [OptimizerSpec::m_sam(gamma, 0.0, b), OptimizerSpec::n_sam_fresh(gamma, 0.0, b, Some(2))] {
            let run = run_training(&obj, &spec, init.as_slice(), 40, &opts, &mut []).unwrap();
            prop_assert!(same_bits(&base, &run), "{}", spec.method.label());
        }
        let gd = run_training(&obj, &OptimizerSpec::gd(gamma), init.as_slice(), 40, &opts, &mut []).unwrap();
        for spec in [OptimizerSpec::one_sam_full(gamma, 0.0), OptimizerSpec::n_sam_full(gamma, 0.0)] {
            let run = run_training(&obj, &spec, init.as_slice(), 40, &opts, &mut []).unwrap();
            prop_assert!(same_bits(&gd, &run), "{}", spec.method.label());
        }
    }

    #[test]
    fn runs_are_deterministic(seed in 0u64..1000) {
        let q = QuadraticObjective::with_eigenvalues(&[2.0, 1.0, 0.5, 0.1], 8, 0.5, seed).unwrap();
        let spec = OptimizerSpec::m_sam(0.1, 0.05, 3);
        let opts = RunOptions::new(seed);
        let a = run_training(&q, &spec, &[1.0; 4], 60, &opts, &mut []).unwrap();
        let b = run_training(&q, &spec, &[1.0; 4], 60, &opts, &mut []).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn sharpness_is_identical_across_execution_modes() {
    let obj = LinearMargin::new(gen_linear_classification(6, 64, 9).unwrap(), MarginLoss::Exponential).unwrap();
    let w = [0.1, 0.2, -0.3, 0.4, 0.0, 0.5];
    let run = |execution| {
        let opts = SharpnessOptions {
            execution,
            shuffle_seed: Some(3),
            ..Default::default()
        };
        m_sharpness(&obj, &w, 4, 0.2, 10, 64, &opts).unwrap()
    };
    assert_eq!(run(Execution::Sequential), run(Execution::Parallel));
}

#[test]
fn effective_scale_is_positive_vector() {
    // Guard for the potential spec: zero or negative scales are rejected.
    assert!(PotentialSpec::new(DVector::from_vec(vec![0.1, 0.0])).is_err());
    assert!(PotentialSpec::new(DVector::from_vec(vec![0.1, -1.0])).is_err());
}
