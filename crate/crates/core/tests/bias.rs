use nalgebra::DVector;
use samlab_core::datasets::{gen_sparse_regression, Dataset, DatasetMeta};
use samlab_core::implicit_bias::{linf_rel_err, solve_min_potential, BiasTracker, BiasVariant, PotentialSpec};
use samlab_core::model_zoo::{diag_beta, DiagNet, DiagNetParams};
use samlab_core::optimizers::{run_training, OptimizerSpec, RunOptions};

fn single_example() -> Dataset {
    Dataset::new(
        vec![vec![2.0]],
        vec![1.0],
        None,
        DatasetMeta {
            seed: 0,
            generator: "hand".into(),
            sparsity: None,
            rng: String::new(),
        },
    )
    .unwrap()
}

#[test]
fn one_step_exponent_by_hand() {
    let data = single_example();
    let obj = DiagNet::new(data.clone());
    let init = [1.0, 0.5];
    let alpha = DVector::from_element(1, 0.1);
    for (spec, variant) in [
        (OptimizerSpec::one_sam_full(0.05, 0.1), BiasVariant::OneSamExact),
        (OptimizerSpec::n_sam_full(0.05, 0.1), BiasVariant::NSamExact),
    ] {
        let mut tracker = BiasTracker::new(&data, &alpha, &[variant]);
        run_training(&obj, &spec, &init, 1, &RunOptions::new(0), &mut [&mut tracker]).unwrap();
        // r = 2(1 − 0.25) − 1 = 0.5; the ascent point (1.1, 0.45) gives r' = 1.015.
        // With one example both variants reduce to γρ·x²·r'·r.
        let expected = 0.05 * 0.1 * 4.0 * 1.015 * 0.5;
        let got = tracker.accumulator(variant).unwrap().running_integral[0];
        assert!((got - expected).abs() <= 1e-15, "{variant:?}: {got} vs {expected}");
    }
}

#[test]
fn small_step_gradient_descent_reaches_the_potential_minimizer() {
    let data = gen_sparse_regression(12, 6, 2, 4).unwrap();
    let obj = DiagNet::new(data.clone());
    let alpha = 0.1;
    let init = DiagNetParams::uniform(12, alpha).unwrap().to_flat();
    let mut opts = RunOptions::new(0);
    opts.stop_loss = Some(1e-14);
    opts.log_stride = 100;
    let run = run_training(&obj, &OptimizerSpec::gd(0.02), init.as_slice(), 400_000, &opts, &mut []).unwrap();
    assert!(run.final_loss() < 1e-12, "loss {}", run.final_loss());
    let beta = diag_beta(&run.final_params);
    let spec = PotentialSpec::uniform(12, alpha).unwrap();
    let sol = solve_min_potential(&spec, &data.x_matrix(), &data.y_vector()).unwrap();
    let err = linf_rel_err(sol.beta.as_slice(), &beta);
    eprintln!("relative error {err:e}");
    assert!(err < 1e-2, "relative error {err:e}");
}
