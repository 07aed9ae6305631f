use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use samlab_core::convergence_lab::{check_stochastic_alignment, Coupling};
use samlab_core::datasets::{gen_linear_classification, gen_sparse_regression};
use samlab_core::exec::Execution;
use samlab_core::model_zoo::{DiagNet, DiagNetParams, LinearMargin, MarginLoss, QuadraticObjective};
use samlab_core::optimizers::{run_training, OptimizerSpec, RunOptions};
use samlab_core::sharpness::{m_sharpness, SharpnessOptions};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn sharpness(c: &mut Criterion) {
    let obj = LinearMargin::new(gen_linear_classification(50, 2048, 1).unwrap(), MarginLoss::Logistic).unwrap();
    let w = vec![0.05; 50];
    let mut group = c.benchmark_group("m_sharpness");
    for (name, execution) in MODES {
        let opts = SharpnessOptions {
            execution,
            ..Default::default()
        };
        group.bench_function(BenchmarkId::new(name, "m=4"), |b| {
            b.iter(|| m_sharpness(&obj, &w, 4, 0.1, 20, 2048, &opts).unwrap())
        });
    }
    group.finish();
}

fn seed_grid(c: &mut Criterion) {
    let obj = DiagNet::new(gen_sparse_regression(30, 20, 3, 2).unwrap());
    let init = DiagNetParams::uniform(30, 0.1).unwrap().to_flat();
    let spec = OptimizerSpec::m_sam(0.05, 0.05, 1);
    let mut group = c.benchmark_group("seed_grid");
    group.sample_size(10);
    for (name, execution) in MODES {
        group.bench_function(name, |b| {
            b.iter(|| {
                execution.map(16, |s| {
                    let mut opts = RunOptions::new(s as u64);
                    opts.log_stride = 100;
                    run_training(&obj, &spec, init.as_slice(), 2000, &opts, &mut [])
                        .unwrap()
                        .final_loss()
                })
            })
        });
    }
    group.finish();
}

fn monte_carlo(c: &mut Criterion) {
    let q = QuadraticObjective::with_eigenvalues(&(1..=40).map(|k| k as f64 / 40.0).collect::<Vec<_>>(), 64, 1.0, 3)
        .unwrap();
    let w = vec![0.5; 40];
    let mut group = c.benchmark_group("alignment_draws");
    for (name, execution) in MODES {
        group.bench_function(name, |b| {
            b.iter(|| check_stochastic_alignment(&q, &w, 0.2, 4, 20_000, Coupling::Fresh, 0, execution).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, sharpness, seed_grid, monte_carlo);
criterion_main!(benches);
