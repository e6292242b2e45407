//! Shared fixtures for the solver benchmarks.

use relayopt::model::ProblemInstance;
use relayopt::scenario::{generate_scenario, FactoryLayout, SystemParams};

/// Deterministic instance at the given dimensions with reference defaults.
pub fn bench_instance(seed: u64, robots: usize, relays: usize, rbs: usize) -> ProblemInstance {
    let layout = FactoryLayout {
        radius_m: 300.0,
        num_robots: robots,
        num_relays: relays,
        num_rbs: rbs,
        distance_factor: 0.5,
        seed,
    };
    let scenario = generate_scenario(&layout, &SystemParams::default()).unwrap();
    ProblemInstance::from_scenario(&scenario, 1000.0, 1e-5, 0.5e-3, 0.5e-3).unwrap()
}
