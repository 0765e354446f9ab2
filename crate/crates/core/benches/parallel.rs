use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use squash_core::evolve_stoch::{ensemble, EnsembleOptions, StochOptions};
use squash_core::hilbert::DensityMatrix;
use squash_core::validation::random_stable_params;
use squash_core::{analytic, Exec, ModelParams};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn trajectories(c: &mut Criterion) {
    let p = ModelParams::squashing_reference();
    let rho0 = DensityMatrix::thermal(20, p.nbar).unwrap();
    let mut group = c.benchmark_group("ensemble_16x200_steps");
    group.sample_size(10);
    for exec in [Exec::Sequential, Exec::Parallel] {
        let opts = EnsembleOptions {
            n_traj: 16,
            base_seed: 1,
            stoch: StochOptions::new(20.0, 0.1, 4),
            max_dim: 80,
            exec,
        };
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &opts, |b, o| {
            b.iter(|| ensemble(&p, &rho0, o).unwrap())
        });
    }
    group.finish();
}

fn bound_sweep(c: &mut Criterion) {
    let mut group = c.benchmark_group("n_eff_sweep_20000");
    for exec in [Exec::Sequential, Exec::Parallel] {
        group.bench_function(format!("{exec:?}"), |b| {
            b.iter(|| {
                exec.map_range(20_000, |i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
                    analytic::n_eff(&random_stable_params(&mut rng)).unwrap()
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, trajectories, bound_sweep);
criterion_main!(benches);
