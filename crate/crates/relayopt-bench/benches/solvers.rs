//! End-to-end solver benchmarks: rate math, one penalized subproblem,
//! full SCA runs and the exact assignment oracle.

use std::time::Duration;

use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::Array3;

use relayopt::fbl::{self, LinkBudget};
use relayopt::oracle;
use relayopt::sca::{self, ScaConfig};
use relayopt::subproblem;
use relayopt_bench::bench_instance;

fn rate_math(c: &mut Criterion) {
    let lb = LinkBudget::new(50.0, 0.5e-3, 360e3, 1e-5).unwrap();
    c.bench_function("q_inv_1e-5", |b| {
        b.iter(|| fbl::q_inv(std::hint::black_box(1e-5)).unwrap())
    });
    c.bench_function("invert_power_round_trip", |b| {
        b.iter(|| {
            let p = fbl::invert_power(&lb, std::hint::black_box(1000.0)).unwrap();
            fbl::rate_approx(&lb, p)
        })
    });
}

fn subproblem_solve(c: &mut Criterion) {
    let inst = bench_instance(7, 4, 4, 10);
    let uniform = Array3::from_elem(
        (inst.num_robots, inst.num_modes(), inst.num_rbs),
        1.0 / (inst.num_rbs as f64 * inst.num_modes() as f64),
    );
    c.bench_function("subproblem_qp_k4_n4_m10", |b| {
        b.iter(|| {
            let sp = subproblem::build_qp_subproblem(&inst, &uniform, 1e-3).unwrap();
            subproblem::solve_subproblem(&sp, 1e-7).unwrap()
        })
    });
}

fn sca_runs(c: &mut Criterion) {
    let mut group = c.benchmark_group("sca");
    group.sample_size(10).measurement_time(Duration::from_secs(12));
    let tiny = bench_instance(3, 2, 1, 3);
    group.bench_function("qp_k2_n1_m3", |b| {
        b.iter(|| sca::solve_qp(&tiny, &ScaConfig::default()).unwrap())
    });
    let desk = bench_instance(7, 4, 4, 10);
    group.bench_function("qp_k4_n4_m10", |b| {
        b.iter(|| sca::solve_qp(&desk, &ScaConfig::default()).unwrap())
    });
    group.finish();
}

fn oracle_solves(c: &mut Criterion) {
    let inst = bench_instance(19, 8, 4, 10);
    c.bench_function("assignment_oracle_k8_n4_m10", |b| {
        b.iter(|| oracle::assignment_exact(&inst).unwrap())
    });
}

criterion_group!(benches, rate_math, subproblem_solve, sca_runs, oracle_solves);
criterion_main!(benches);
