//! Optimization problem data model and solution checking.
//!
//! A [`ProblemInstance`] is an immutable bundle of dimensions, payloads,
//! reliability target, phase durations and normalized gains. Solutions are
//! [`AssignmentSolution`]s over the relaxed indicators `φ ∈ [0,1]` and the
//! products `p̃ = φ·p`; binary solutions are the special case the rounding
//! step produces. [`check_feasibility`] re-evaluates every constraint of
//! the perspective-form problem, including the big-M reliability pair, and
//! reports signed slacks.
//!
//! Error probabilities are fixed before any optimization: `ε_max/2` per
//! relay hop and `ε_max` for direct transmission. The split is a parameter
//! of the whole pipeline, not a decision variable.

use std::io::Write;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fbl::{self, FblError, LinkBudget};
use crate::scenario::Scenario;

/// Default absolute feasibility tolerance on bits and probability slacks.
pub const DEFAULT_FEASIBILITY_TOL: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid instance: {0}")]
    InvalidInstance(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("indicator ({robot},{mode},{rb}) = {value} is not within {tol} of 0 or 1")]
    NonBinary {
        robot: usize,
        mode: usize,
        rb: usize,
        value: f64,
        tol: f64,
    },
    #[error("rounded assignment violates the exclusivity constraints: {0}")]
    CorruptAssignment(String),
    #[error("mode ({robot},{mode},{rb}) cannot carry the payload: {source}")]
    UnusableMode {
        robot: usize,
        mode: usize,
        rb: usize,
        source: FblError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Fixed decoding error probabilities: `ε_max/2` on each relay hop so the
/// two-hop sum meets `ε_max` exactly, and the full `ε_max` for direct
/// transmission.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorSplits {
    /// Per-hop decoding error probability on relayed links.
    pub relay_hop: f64,
    /// Decoding error probability on direct links.
    pub direct: f64,
}

/// Returns the fixed error splits for an instance.
pub fn fix_error_splits(inst: &ProblemInstance) -> ErrorSplits {
    ErrorSplits {
        relay_hop: inst.eps_max / 2.0,
        direct: inst.eps_max,
    }
}

/// Immutable problem data: dimensions, per-robot payloads, reliability
/// budget, phase durations, RB bandwidth and the channel gains.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemInstance {
    pub num_robots: usize,
    pub num_rbs: usize,
    pub num_relays: usize,
    /// Target payload B_k in bits, one entry per robot.
    pub payload_bits: Vec<f64>,
    /// Overall packet error probability budget per robot.
    pub eps_max: f64,
    /// Duration of phase I (robot transmits), seconds.
    pub tau1_s: f64,
    /// Duration of phase II (relay forwards), seconds.
    pub tau2_s: f64,
    /// Bandwidth of one RB, Hz.
    pub bandwidth_hz: f64,
    /// K×M robot→controller gains, 1/W.
    pub gains_direct: Array2<f64>,
    /// K×N×M robot→relay gains, 1/W.
    pub gains_hop1: Array3<f64>,
    /// N×M relay→controller gains, 1/W.
    pub gains_hop2: Array2<f64>,
}

impl ProblemInstance {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        payload_bits: Vec<f64>,
        eps_max: f64,
        tau1_s: f64,
        tau2_s: f64,
        bandwidth_hz: f64,
        gains_direct: Array2<f64>,
        gains_hop1: Array3<f64>,
        gains_hop2: Array2<f64>,
    ) -> Result<Self, ModelError> {
        let (k_count, m_count) = gains_direct.dim();
        let (k1, n_count, m1) = gains_hop1.dim();
        let (n2, m2) = gains_hop2.dim();
        if k1 != k_count || m1 != m_count || n2 != n_count || m2 != m_count {
            return Err(ModelError::DimensionMismatch(format!(
                "gain tensors disagree: direct {k_count}x{m_count}, hop1 {k1}x{n_count}x{m1}, hop2 {n2}x{m2}"
            )));
        }
        if payload_bits.len() != k_count {
            return Err(ModelError::DimensionMismatch(format!(
                "{} payloads for {k_count} robots",
                payload_bits.len()
            )));
        }
        let inst = ProblemInstance {
            num_robots: k_count,
            num_rbs: m_count,
            num_relays: n_count,
            payload_bits,
            eps_max,
            tau1_s,
            tau2_s,
            bandwidth_hz,
            gains_direct,
            gains_hop1,
            gains_hop2,
        };
        inst.validate()?;
        Ok(inst)
    }

    /// Builds an instance from a generated scenario with a uniform payload.
    pub fn from_scenario(
        scenario: &Scenario,
        payload_bits: f64,
        eps_max: f64,
        tau1_s: f64,
        tau2_s: f64,
    ) -> Result<Self, ModelError> {
        ProblemInstance::new(
            vec![payload_bits; scenario.layout.num_robots],
            eps_max,
            tau1_s,
            tau2_s,
            scenario.system.bandwidth_hz,
            scenario.gains_direct.clone(),
            scenario.gains_hop1.clone(),
            scenario.gains_hop2.clone(),
        )
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.num_robots == 0 {
            return Err(ModelError::InvalidInstance("no robots".into()));
        }
        if self.num_rbs < self.num_robots {
            return Err(ModelError::InvalidInstance(format!(
                "num_rbs = {} < num_robots = {}",
                self.num_rbs, self.num_robots
            )));
        }
        if !(self.eps_max > 0.0 && self.eps_max < 1.0) {
            return Err(ModelError::InvalidInstance(format!(
                "eps_max = {} outside (0,1)",
                self.eps_max
            )));
        }
        if !(self.tau1_s > 0.0 && self.tau2_s > 0.0 && self.bandwidth_hz > 0.0) {
            return Err(ModelError::InvalidInstance(
                "durations and bandwidth must be positive".into(),
            ));
        }
        if self.tau1_s * self.bandwidth_hz < 1.0 || self.tau2_s * self.bandwidth_hz < 1.0 {
            return Err(ModelError::InvalidInstance(
                "phase blocklength is below one symbol".into(),
            ));
        }
        if self.payload_bits.iter().any(|&b| !(b > 0.0) || !b.is_finite()) {
            return Err(ModelError::InvalidInstance(
                "payloads must be positive and finite".into(),
            ));
        }
        let gains_ok = self.gains_direct.iter().all(|&g| g > 0.0 && g.is_finite())
            && self.gains_hop1.iter().all(|&g| g > 0.0 && g.is_finite())
            && self.gains_hop2.iter().all(|&g| g > 0.0 && g.is_finite());
        if !gains_ok {
            return Err(ModelError::InvalidInstance(
                "gains must be strictly positive and finite".into(),
            ));
        }
        Ok(())
    }

    /// Total latency budget `τ1 + τ2` in seconds.
    pub fn latency_budget_s(&self) -> f64 {
        self.tau1_s + self.tau2_s
    }

    /// Number of modes per (robot, RB): direct plus one per relay.
    pub fn num_modes(&self) -> usize {
        self.num_relays + 1
    }

    /// Link budget of the direct robot→controller link on RB `m`.
    pub fn direct_budget(&self, k: usize, m: usize) -> LinkBudget {
        LinkBudget::new(
            self.gains_direct[[k, m]],
            self.tau1_s,
            self.bandwidth_hz,
            fix_error_splits(self).direct,
        )
        .expect("instance validated")
    }

    /// Link budget of the robot→relay hop, relay index `n` in `0..N`.
    pub fn hop1_budget(&self, k: usize, n: usize, m: usize) -> LinkBudget {
        LinkBudget::new(
            self.gains_hop1[[k, n, m]],
            self.tau1_s,
            self.bandwidth_hz,
            fix_error_splits(self).relay_hop,
        )
        .expect("instance validated")
    }

    /// Link budget of the relay→controller hop, relay index `n` in `0..N`.
    pub fn hop2_budget(&self, n: usize, m: usize) -> LinkBudget {
        LinkBudget::new(
            self.gains_hop2[[n, m]],
            self.tau2_s,
            self.bandwidth_hz,
            fix_error_splits(self).relay_hop,
        )
        .expect("instance validated")
    }
}

/// One candidate solution: indicators, `p̃` powers and the error splits in
/// force. Mode index 0 is direct transmission; mode `n ≥ 1` is relay `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentSolution {
    /// K×(N+1)×M indicators in [0,1].
    pub phi: Array3<f64>,
    /// K×N×M robot→relay powers p̃_{k,n}^m, watts.
    pub p_hop1: Array3<f64>,
    /// K×N×M relay→controller powers p̃_{n,D}^{m,k}, watts.
    pub p_hop2: Array3<f64>,
    /// K×M direct powers p̃_{k,D}^m, watts.
    pub p_direct: Array2<f64>,
    /// Per-hop decoding error probability on relayed links.
    pub eps_relay_hop: f64,
    /// Decoding error probability on direct links.
    pub eps_direct: f64,
}

impl AssignmentSolution {
    /// All-zero solution shell for an instance.
    pub fn zeros(inst: &ProblemInstance) -> Self {
        let splits = fix_error_splits(inst);
        AssignmentSolution {
            phi: Array3::zeros((inst.num_robots, inst.num_modes(), inst.num_rbs)),
            p_hop1: Array3::zeros((inst.num_robots, inst.num_relays, inst.num_rbs)),
            p_hop2: Array3::zeros((inst.num_robots, inst.num_relays, inst.num_rbs)),
            p_direct: Array2::zeros((inst.num_robots, inst.num_rbs)),
            eps_relay_hop: splits.relay_hop,
            eps_direct: splits.direct,
        }
    }

    /// Largest distance of any indicator from the nearest binary value.
    pub fn binary_residual(&self) -> f64 {
        self.phi
            .iter()
            .map(|&v| v.min(1.0 - v).abs())
            .fold(0.0, f64::max)
    }

    /// For a binary solution: the `(rb, mode)` each robot uses.
    pub fn modes(&self) -> Vec<Option<(usize, usize)>> {
        let (k_count, modes, m_count) = self.phi.dim();
        (0..k_count)
            .map(|k| {
                for n in 0..modes {
                    for m in 0..m_count {
                        if self.phi[[k, n, m]] > 0.5 {
                            return Some((m, n));
                        }
                    }
                }
                None
            })
            .collect()
    }

    /// Smallest receive SNR over active links, the quantity the V≈1
    /// approximation needs to be moderate-or-large.
    pub fn min_active_snr(&self, inst: &ProblemInstance) -> Option<f64> {
        let mut min_snr = f64::INFINITY;
        let mut any = false;
        for (k, mode) in self.modes().iter().enumerate() {
            if let Some((m, n)) = *mode {
                if n == 0 {
                    min_snr = min_snr.min(inst.gains_direct[[k, m]] * self.p_direct[[k, m]]);
                } else {
                    min_snr = min_snr
                        .min(inst.gains_hop1[[k, n - 1, m]] * self.p_hop1[[k, n - 1, m]])
                        .min(inst.gains_hop2[[n - 1, m]] * self.p_hop2[[k, n - 1, m]]);
                }
                any = true;
            }
        }
        any.then_some(min_snr)
    }
}

/// Exact total transmit power `Σ(p̃_{k,n}^m + p̃_{n,D}^{m,k}) + Σ p̃_{k,D}^m`.
pub fn total_power(sol: &AssignmentSolution) -> f64 {
    sol.p_hop1.sum() + sol.p_hop2.sum() + sol.p_direct.sum()
}

/// Signed slacks for every constraint family; nonnegative means satisfied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    /// Per-robot throughput slack in bits (delivered − B_k).
    pub throughput_slack_bits: Vec<f64>,
    /// Per-robot relay-link slack in bits (hop-1 capacity − φ-weighted B_k).
    pub relay_link_slack_bits: Vec<f64>,
    /// Per-RB exclusivity slack (1 − Σ_k Σ_n φ).
    pub rb_slack: Vec<f64>,
    /// Per-robot assignment residual (Σ φ − 1, an equality).
    pub robot_assignment_residual: Vec<f64>,
    /// Worst slack of the big-M relay reliability constraints.
    pub reliability_slack_relay: f64,
    /// Worst slack of the big-M direct reliability constraints.
    pub reliability_slack_direct: f64,
    /// Largest excursion of any indicator outside [0,1].
    pub box_violation: f64,
    /// Largest negative power, as a magnitude.
    pub power_violation: f64,
    pub feasible: bool,
    pub worst_violation: f64,
    pub tolerance: f64,
}

/// Evaluates every constraint of the perspective-form problem plus the
/// big-M reliability pair and reports signed slacks.
///
/// Per-link delivered payload is `max(0, R̃)`: a link whose backoff exceeds
/// its log term carries nothing rather than negative bits.
pub fn check_feasibility(
    inst: &ProblemInstance,
    sol: &AssignmentSolution,
    tol: f64,
) -> Result<FeasibilityReport, ModelError> {
    let (k_count, modes, m_count) = sol.phi.dim();
    if k_count != inst.num_robots || modes != inst.num_modes() || m_count != inst.num_rbs {
        return Err(ModelError::DimensionMismatch(format!(
            "phi is {k_count}x{modes}x{m_count}, instance wants {}x{}x{}",
            inst.num_robots,
            inst.num_modes(),
            inst.num_rbs
        )));
    }
    if sol.p_hop1.dim() != (k_count, inst.num_relays, m_count)
        || sol.p_hop2.dim() != (k_count, inst.num_relays, m_count)
        || sol.p_direct.dim() != (k_count, m_count)
    {
        return Err(ModelError::DimensionMismatch(
            "power tensors disagree with instance dimensions".into(),
        ));
    }

    let mut throughput = Vec::with_capacity(k_count);
    let mut relay_link = Vec::with_capacity(k_count);
    for k in 0..k_count {
        let mut delivered = 0.0;
        let mut hop1_capacity = 0.0;
        let mut relay_mass = 0.0;
        for m in 0..m_count {
            let lb = inst.direct_budget(k, m);
            delivered += fbl::perspective_rate(sol.phi[[k, 0, m]], sol.p_direct[[k, m]], &lb)
                .max(0.0);
            for n in 0..inst.num_relays {
                let phi = sol.phi[[k, n + 1, m]];
                delivered += fbl::perspective_rate(
                    phi,
                    sol.p_hop2[[k, n, m]],
                    &inst.hop2_budget(n, m),
                )
                .max(0.0);
                hop1_capacity += fbl::perspective_rate(
                    phi,
                    sol.p_hop1[[k, n, m]],
                    &inst.hop1_budget(k, n, m),
                )
                .max(0.0);
                relay_mass += phi;
            }
        }
        throughput.push(delivered - inst.payload_bits[k]);
        relay_link.push(hop1_capacity - inst.payload_bits[k] * relay_mass);
    }

    let rb_slack: Vec<f64> = (0..m_count)
        .map(|m| {
            let used: f64 = (0..k_count)
                .map(|k| (0..modes).map(|n| sol.phi[[k, n, m]]).sum::<f64>())
                .sum();
            1.0 - used
        })
        .collect();

    let robot_residual: Vec<f64> = (0..k_count)
        .map(|k| {
            let mass: f64 = (0..modes)
                .map(|n| (0..m_count).map(|m| sol.phi[[k, n, m]]).sum::<f64>())
                .sum();
            mass - 1.0
        })
        .collect();

    // Big-M reliability: ε1 + ε2 ≤ ε_max + 1 − φ per relay mode and
    // ε_direct ≤ ε_max + 1 − φ per direct mode; vacuous at φ = 0.
    let mut rel_relay: f64 = f64::INFINITY;
    let mut rel_direct: f64 = f64::INFINITY;
    for k in 0..k_count {
        for m in 0..m_count {
            rel_direct = rel_direct
                .min(inst.eps_max + 1.0 - sol.phi[[k, 0, m]] - sol.eps_direct);
            for n in 1..modes {
                rel_relay = rel_relay
                    .min(inst.eps_max + 1.0 - sol.phi[[k, n, m]] - 2.0 * sol.eps_relay_hop);
            }
        }
    }
    if !rel_relay.is_finite() {
        rel_relay = 0.0;
    }
    if !rel_direct.is_finite() {
        rel_direct = 0.0;
    }

    let box_violation = sol
        .phi
        .iter()
        .map(|&v| (-v).max(v - 1.0).max(0.0))
        .fold(0.0, f64::max);
    let power_violation = sol
        .p_hop1
        .iter()
        .chain(sol.p_hop2.iter())
        .chain(sol.p_direct.iter())
        .map(|&p| (-p).max(0.0))
        .fold(0.0, f64::max);

    let mut worst: f64 = 0.0;
    for slack in throughput.iter().chain(relay_link.iter()).chain(rb_slack.iter()) {
        worst = worst.max(-slack);
    }
    for residual in &robot_residual {
        worst = worst.max(residual.abs());
    }
    worst = worst
        .max(-rel_relay)
        .max(-rel_direct)
        .max(box_violation)
        .max(power_violation);

    Ok(FeasibilityReport {
        throughput_slack_bits: throughput,
        relay_link_slack_bits: relay_link,
        rb_slack,
        robot_assignment_residual: robot_residual,
        reliability_slack_relay: rel_relay,
        reliability_slack_direct: rel_direct,
        box_violation,
        power_violation,
        feasible: worst <= tol,
        worst_violation: worst,
        tolerance: tol,
    })
}

/// Snaps a near-binary relaxed solution to `{0,1}` and recomputes minimal
/// powers for the selected links by closed-form inversion, so throughput
/// holds with equality on every active link.
pub fn round_to_binary(
    inst: &ProblemInstance,
    sol: &AssignmentSolution,
    tol: f64,
) -> Result<AssignmentSolution, ModelError> {
    let (k_count, modes, m_count) = sol.phi.dim();
    if k_count != inst.num_robots || modes != inst.num_modes() || m_count != inst.num_rbs {
        return Err(ModelError::DimensionMismatch(
            "phi dimensions disagree with instance".into(),
        ));
    }

    let mut rounded = AssignmentSolution::zeros(inst);
    for k in 0..k_count {
        for n in 0..modes {
            for m in 0..m_count {
                let v = sol.phi[[k, n, m]];
                rounded.phi[[k, n, m]] = if v.abs() <= tol {
                    0.0
                } else if (v - 1.0).abs() <= tol {
                    1.0
                } else {
                    return Err(ModelError::NonBinary {
                        robot: k,
                        mode: n,
                        rb: m,
                        value: v,
                        tol,
                    });
                };
            }
        }
    }

    for k in 0..k_count {
        let mass: f64 = rounded.phi.index_axis(ndarray::Axis(0), k).sum();
        if (mass - 1.0).abs() > 0.5 {
            return Err(ModelError::CorruptAssignment(format!(
                "robot {k} selects {mass} modes after rounding"
            )));
        }
    }
    for m in 0..m_count {
        let used: f64 = (0..k_count)
            .map(|k| (0..modes).map(|n| rounded.phi[[k, n, m]]).sum::<f64>())
            .sum();
        if used > 1.5 {
            return Err(ModelError::CorruptAssignment(format!(
                "RB {m} carries {used} transmissions after rounding"
            )));
        }
    }

    for k in 0..k_count {
        for n in 0..modes {
            for m in 0..m_count {
                if rounded.phi[[k, n, m]] != 1.0 {
                    continue;
                }
                let bits = inst.payload_bits[k];
                if n == 0 {
                    rounded.p_direct[[k, m]] = fbl::invert_power(&inst.direct_budget(k, m), bits)
                        .map_err(|source| ModelError::UnusableMode {
                            robot: k,
                            mode: n,
                            rb: m,
                            source,
                        })?;
                } else {
                    rounded.p_hop1[[k, n - 1, m]] =
                        fbl::invert_power(&inst.hop1_budget(k, n - 1, m), bits).map_err(
                            |source| ModelError::UnusableMode {
                                robot: k,
                                mode: n,
                                rb: m,
                                source,
                            },
                        )?;
                    rounded.p_hop2[[k, n - 1, m]] =
                        fbl::invert_power(&inst.hop2_budget(n - 1, m), bits).map_err(
                            |source| ModelError::UnusableMode {
                                robot: k,
                                mode: n,
                                rb: m,
                                source,
                            },
                        )?;
                }
            }
        }
    }
    Ok(rounded)
}

/// Writes a solution as a commented structured-text dump: mode per robot,
/// powers, total power and the feasibility report.
pub fn write_solution(
    sol: &AssignmentSolution,
    report: &FeasibilityReport,
    min_active_snr: Option<f64>,
    out: &mut dyn Write,
) -> Result<(), ModelError> {
    writeln!(out, "# relayopt solution file")?;
    writeln!(out, "# powers: watts; rates: bits; mode 0 = direct, n = relay n")?;
    writeln!(out, "# body: one JSON document; '#' lines are ignored")?;
    #[derive(Serialize)]
    struct Dump<'a> {
        total_power_w: f64,
        modes: Vec<Option<(usize, usize)>>,
        min_active_snr: Option<f64>,
        solution: &'a AssignmentSolution,
        feasibility: &'a FeasibilityReport,
    }
    let dump = Dump {
        total_power_w: total_power(sol),
        modes: sol.modes(),
        min_active_snr,
        solution: sol,
        feasibility: report,
    };
    let body = serde_json::to_string_pretty(&dump)
        .map_err(|e| ModelError::InvalidInstance(e.to_string()))?;
    out.write_all(body.as_bytes())?;
    out.write_all(b"\n")?;
    Ok(())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::scenario::{generate_scenario, FactoryLayout, SystemParams};

    pub(crate) fn test_instance(seed: u64, k: usize, n: usize, m: usize) -> ProblemInstance {
        let layout = FactoryLayout {
            radius_m: 300.0,
            num_robots: k,
            num_relays: n,
            num_rbs: m,
            distance_factor: 0.5,
            seed,
        };
        let s = generate_scenario(&layout, &SystemParams::default()).unwrap();
        ProblemInstance::from_scenario(&s, 1000.0, 1e-5, 0.5e-3, 0.5e-3).unwrap()
    }

    /// All robots direct on distinct RBs, powers from closed-form inversion.
    pub(crate) fn all_direct_solution(inst: &ProblemInstance) -> AssignmentSolution {
        let mut sol = AssignmentSolution::zeros(inst);
        for k in 0..inst.num_robots {
            sol.phi[[k, 0, k]] = 1.0;
            sol.p_direct[[k, k]] =
                fbl::invert_power(&inst.direct_budget(k, k), inst.payload_bits[k]).unwrap();
        }
        sol
    }

    #[test]
    fn error_splits_follow_fixed_policy() {
        let inst = test_instance(1, 2, 1, 3);
        let splits = fix_error_splits(&inst);
        assert_eq!(splits.relay_hop, 5e-6);
        assert_eq!(splits.direct, 1e-5);
        // Two-hop sum meets the budget exactly.
        assert_eq!(splits.relay_hop * 2.0, inst.eps_max);
    }

    #[test]
    fn instance_validation() {
        let inst = test_instance(1, 2, 1, 3);
        assert!(ProblemInstance::new(
            vec![1000.0],
            1e-5,
            0.5e-3,
            0.5e-3,
            360e3,
            inst.gains_direct.clone(),
            inst.gains_hop1.clone(),
            inst.gains_hop2.clone(),
        )
        .is_err()); // one payload for two robots
        let mut bad = inst.clone();
        bad.eps_max = 0.0;
        assert!(bad.validate().is_err());
        assert!((inst.latency_budget_s() - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn all_direct_solution_is_feasible_with_zero_slack() {
        let inst = test_instance(3, 3, 2, 4);
        let sol = all_direct_solution(&inst);
        let report = check_feasibility(&inst, &sol, DEFAULT_FEASIBILITY_TOL).unwrap();
        assert!(report.feasible, "worst violation {}", report.worst_violation);
        for slack in &report.throughput_slack_bits {
            assert!(slack.abs() <= 1e-9, "throughput slack {slack}");
        }
        // Relay-link rows are vacuous (no relay mass).
        for slack in &report.relay_link_slack_bits {
            assert!(slack.abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_powers_violate_throughput_by_payload() {
        let inst = test_instance(5, 2, 1, 3);
        let mut sol = AssignmentSolution::zeros(&inst);
        sol.phi[[0, 0, 0]] = 1.0;
        sol.phi[[1, 1, 1]] = 1.0;
        let report = check_feasibility(&inst, &sol, DEFAULT_FEASIBILITY_TOL).unwrap();
        assert!(!report.feasible);
        for (k, slack) in report.throughput_slack_bits.iter().enumerate() {
            assert!(
                (slack + inst.payload_bits[k]).abs() < 1e-12,
                "violation should equal the payload, got {slack}"
            );
        }
    }

    #[test]
    fn doubly_used_rb_is_flagged() {
        let inst = test_instance(7, 2, 0, 2);
        let mut sol = all_direct_solution(&inst);
        // Move robot 1 onto robot 0's RB.
        sol.phi[[1, 0, 1]] = 0.0;
        sol.phi[[1, 0, 0]] = 1.0;
        sol.p_direct[[1, 0]] = sol.p_direct[[1, 1]];
        let report = check_feasibility(&inst, &sol, DEFAULT_FEASIBILITY_TOL).unwrap();
        assert!(!report.feasible);
        assert!(report.rb_slack[0] < -0.5);
    }

    #[test]
    fn total_power_matches_naive_loop() {
        let inst = test_instance(11, 3, 2, 4);
        let mut sol = AssignmentSolution::zeros(&inst);
        assert_eq!(total_power(&sol), 0.0);
        sol.p_direct[[0, 1]] = 0.2;
        assert!((total_power(&sol) - 0.2).abs() < 1e-15);
        let mut rng_state = 88172645463325252u64;
        let mut next = || {
            rng_state ^= rng_state << 13;
            rng_state ^= rng_state >> 7;
            rng_state ^= rng_state << 17;
            (rng_state >> 11) as f64 / (1u64 << 53) as f64
        };
        for v in sol.p_hop1.iter_mut() {
            *v = next();
        }
        for v in sol.p_hop2.iter_mut() {
            *v = next();
        }
        for v in sol.p_direct.iter_mut() {
            *v = next();
        }
        let mut naive = 0.0;
        for k in 0..inst.num_robots {
            for m in 0..inst.num_rbs {
                naive += sol.p_direct[[k, m]];
                for n in 0..inst.num_relays {
                    naive += sol.p_hop1[[k, n, m]] + sol.p_hop2[[k, n, m]];
                }
            }
        }
        assert!((total_power(&sol) - naive).abs() < 1e-12 * naive);
    }

    #[test]
    fn rounding_snaps_and_reinverts() {
        let inst = test_instance(13, 2, 1, 3);
        let mut sol = all_direct_solution(&inst);
        sol.phi[[0, 0, 0]] = 0.9999;
        sol.phi[[1, 0, 1]] = 1.0001;
        sol.phi[[0, 1, 2]] = 0.0003;
        // Powers deliberately wrong; rounding must recompute them.
        sol.p_direct[[0, 0]] = 99.0;
        let rounded = round_to_binary(&inst, &sol, 1e-3).unwrap();
        assert_eq!(rounded.phi[[0, 0, 0]], 1.0);
        assert_eq!(rounded.phi[[0, 1, 2]], 0.0);
        let expected =
            fbl::invert_power(&inst.direct_budget(0, 0), inst.payload_bits[0]).unwrap();
        assert!((rounded.p_direct[[0, 0]] - expected).abs() < 1e-12 * expected);
        let report = check_feasibility(&inst, &rounded, DEFAULT_FEASIBILITY_TOL).unwrap();
        assert!(report.feasible);
    }

    #[test]
    fn rounding_rejects_non_binary() {
        let inst = test_instance(13, 2, 1, 3);
        let mut sol = all_direct_solution(&inst);
        sol.phi[[0, 0, 0]] = 0.4;
        match round_to_binary(&inst, &sol, 1e-3) {
            Err(ModelError::NonBinary { value, .. }) => assert_eq!(value, 0.4),
            other => panic!("expected NonBinary, got {other:?}"),
        }
    }

    /// Objective consistency: a binary solution's p̃ total equals the
    /// φ-weighted total of the unslacked powers on active links.
    #[test]
    fn binary_objective_equals_unslacked_objective() {
        let inst = test_instance(17, 3, 2, 4);
        let sol = all_direct_solution(&inst);
        let p3_objective = total_power(&sol);
        let mut p2_objective = 0.0;
        for k in 0..inst.num_robots {
            for m in 0..inst.num_rbs {
                // p = p̃/φ on active links, and φ weights the sum.
                if sol.phi[[k, 0, m]] == 1.0 {
                    p2_objective += sol.phi[[k, 0, m]] * (sol.p_direct[[k, m]] / 1.0);
                }
            }
        }
        assert!((p3_objective - p2_objective).abs() < 1e-15);
    }

    /// With φ = 0 the big-M relay constraint holds for any hop-error pair
    /// summing to at most 1, since the bound relaxes to ε_max + 1.
    #[test]
    fn big_m_is_vacuous_at_zero_indicator() {
        for eps_max in [1e-9, 1e-5, 1e-3] {
            for eps_hop in [1e-9, 0.1, 0.5] {
                let phi = 0.0;
                let lhs = 2.0 * eps_hop;
                let bound = eps_max + 1.0 - phi;
                assert!(lhs <= bound, "eps_max={eps_max} eps_hop={eps_hop}");
            }
        }
        // And an active relay mode is limited to the true budget.
        let inst = test_instance(19, 2, 1, 3);
        let sol = all_direct_solution(&inst);
        let report = check_feasibility(&inst, &sol, DEFAULT_FEASIBILITY_TOL).unwrap();
        assert!(report.reliability_slack_relay >= 0.0);
        assert!(report.reliability_slack_direct >= 0.0);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let inst = test_instance(23, 2, 1, 3);
        let other = test_instance(23, 3, 1, 4);
        let sol = AssignmentSolution::zeros(&other);
        assert!(matches!(
            check_feasibility(&inst, &sol, 1e-7),
            Err(ModelError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn solution_dump_is_parseable_text() {
        let inst = test_instance(29, 2, 1, 3);
        let sol = all_direct_solution(&inst);
        let report = check_feasibility(&inst, &sol, DEFAULT_FEASIBILITY_TOL).unwrap();
        let mut buf = Vec::new();
        write_solution(&sol, &report, sol.min_active_snr(&inst), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# relayopt solution file"));
        let body: String = text
            .lines()
            .filter(|l| !l.trim_start().starts_with('#'))
            .collect::<Vec<_>>()
            .join("\n");
        let value: serde_json::Value = serde_json::from_str(&body).unwrap();
        assert!(value["total_power_w"].as_f64().unwrap() > 0.0);
        assert_eq!(value["modes"][0][1], 0); // direct mode
    }

    #[test]
    fn min_active_snr_reports_weakest_link() {
        let inst = test_instance(31, 2, 1, 3);
        let sol = all_direct_solution(&inst);
        let snr = sol.min_active_snr(&inst).unwrap();
        let by_hand = (0..inst.num_robots)
            .map(|k| inst.gains_direct[[k, k]] * sol.p_direct[[k, k]])
            .fold(f64::INFINITY, f64::min);
        assert!((snr - by_hand).abs() < 1e-12 * by_hand);
    }
}
