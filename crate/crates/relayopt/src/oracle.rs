//! Exact reference solvers for the fixed-error-split problem.
//!
//! With the error splits fixed and throughput tight at the optimum, each
//! (robot, RB, mode) choice has a closed-form minimal power, so the whole
//! problem collapses to an assignment: pick one (RB, mode) per robot, no
//! RB shared. [`enumerate_exact`] brute-forces tiny instances as ground
//! truth; [`assignment_exact`] collapses modes per (robot, RB) and solves
//! a min-cost bipartite matching, which is exact because costs are
//! separable per robot and each RB hosts at most one transmission.
//!
//! These solve the same ε-restricted problem the SCA solvers do; they are
//! not oracles for the original problem with free error splits.

use std::io::Write;

use ndarray::Array3;
use thiserror::Error;

use crate::fbl;
use crate::model::{self, AssignmentSolution, ModelError, ProblemInstance};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("instance too large for enumeration: (M(N+1))^K = {combinations:.2e} exceeds {limit:.0e}")]
    InstanceTooLarge { combinations: f64, limit: f64 },
    #[error("robot {robot} has no usable mode: every (RB, mode) power overflows")]
    Infeasible { robot: usize },
    #[error("no conflict-free assignment exists")]
    NoAssignment,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Minimal power of one (robot, RB, mode) choice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeCost {
    pub robot: usize,
    pub rb: usize,
    /// 0 = direct, n ≥ 1 = relay n.
    pub mode: usize,
    /// Total watts for the choice; infinite marks an unusable mode.
    pub power_w: f64,
}

/// K×M×(N+1) table of minimal per-choice powers. `f64::INFINITY` is the
/// explicit unusable-mode marker; it is never a stand-in large number.
#[derive(Debug, Clone, PartialEq)]
pub struct CostTable {
    /// Indexed `[robot, rb, mode]` with mode 0 = direct.
    pub costs: Array3<f64>,
}

impl CostTable {
    pub fn iter(&self) -> impl Iterator<Item = ModeCost> + '_ {
        let (k_count, m_count, modes) = self.costs.dim();
        (0..k_count).flat_map(move |k| {
            (0..m_count).flat_map(move |m| {
                (0..modes).map(move |n| ModeCost {
                    robot: k,
                    rb: m,
                    mode: n,
                    power_w: self.costs[[k, m, n]],
                })
            })
        })
    }

    /// Cheapest mode per (robot, RB): `(power, mode)`.
    fn collapse(&self) -> ndarray::Array2<(f64, usize)> {
        let (k_count, m_count, modes) = self.costs.dim();
        ndarray::Array2::from_shape_fn((k_count, m_count), |(k, m)| {
            let mut best = (f64::INFINITY, 0usize);
            for n in 0..modes {
                let c = self.costs[[k, m, n]];
                if c < best.0 {
                    best = (c, n);
                }
            }
            best
        })
    }
}

/// Closed-form cost table under the fixed error splits: direct modes invert
/// the phase-I budget at `ε_max`, relay modes sum the two hop inversions at
/// `ε_max/2` each.
pub fn mode_costs(inst: &ProblemInstance) -> CostTable {
    let (k_count, m_count, modes) = (inst.num_robots, inst.num_rbs, inst.num_modes());
    let costs = Array3::from_shape_fn((k_count, m_count, modes), |(k, m, n)| {
        let bits = inst.payload_bits[k];
        let cost = if n == 0 {
            fbl::invert_power(&inst.direct_budget(k, m), bits)
        } else {
            let hop1 = fbl::invert_power(&inst.hop1_budget(k, n - 1, m), bits);
            let hop2 = fbl::invert_power(&inst.hop2_budget(n - 1, m), bits);
            hop1.and_then(|a| hop2.map(|b| a + b))
        };
        match cost {
            Ok(p) => {
                debug_assert!(p > 0.0);
                p
            }
            Err(_) => f64::INFINITY,
        }
    });
    CostTable { costs }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExactMethod {
    Enumeration,
    Assignment,
}

/// An exact optimum: per robot the chosen `(rb, mode)` and the total power.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactSolution {
    /// Per robot: (RB index, mode index with 0 = direct).
    pub choices: Vec<(usize, usize)>,
    pub total_power_w: f64,
    pub method: ExactMethod,
}

impl ExactSolution {
    /// Expands the choices into a full binary [`AssignmentSolution`] with
    /// closed-form powers.
    pub fn to_solution(&self, inst: &ProblemInstance) -> Result<AssignmentSolution, OracleError> {
        let mut shell = AssignmentSolution::zeros(inst);
        for (k, &(m, n)) in self.choices.iter().enumerate() {
            shell.phi[[k, n, m]] = 1.0;
        }
        Ok(model::round_to_binary(inst, &shell, 1e-9)?)
    }
}

const ENUMERATION_LIMIT: f64 = 1e7;

/// Exhaustive search over per-robot (RB, mode) choices, discarding RB
/// conflicts. Exact ground truth, deliberately restricted to tiny
/// instances.
pub fn enumerate_exact(inst: &ProblemInstance) -> Result<ExactSolution, OracleError> {
    let per_robot = (inst.num_rbs * inst.num_modes()) as f64;
    let combinations = per_robot.powi(inst.num_robots as i32);
    if combinations > ENUMERATION_LIMIT {
        return Err(OracleError::InstanceTooLarge {
            combinations,
            limit: ENUMERATION_LIMIT,
        });
    }
    assert!(inst.num_rbs <= 64, "RB conflict mask is a u64");

    let table = mode_costs(inst);
    let mut best_total = f64::INFINITY;
    let mut best_choices = Vec::new();
    let mut current = vec![(0usize, 0usize); inst.num_robots];

    fn recurse(
        table: &CostTable,
        inst: &ProblemInstance,
        k: usize,
        used_rbs: u64,
        running: f64,
        current: &mut Vec<(usize, usize)>,
        best_total: &mut f64,
        best_choices: &mut Vec<(usize, usize)>,
    ) {
        if running >= *best_total {
            return;
        }
        if k == inst.num_robots {
            *best_total = running;
            *best_choices = current.clone();
            return;
        }
        for m in 0..inst.num_rbs {
            if used_rbs & (1 << m) != 0 {
                continue;
            }
            for n in 0..inst.num_modes() {
                let c = table.costs[[k, m, n]];
                if !c.is_finite() {
                    continue;
                }
                current[k] = (m, n);
                recurse(
                    table,
                    inst,
                    k + 1,
                    used_rbs | (1 << m),
                    running + c,
                    current,
                    best_total,
                    best_choices,
                );
            }
        }
    }

    recurse(
        &table,
        inst,
        0,
        0,
        0.0,
        &mut current,
        &mut best_total,
        &mut best_choices,
    );

    if !best_total.is_finite() {
        return Err(OracleError::NoAssignment);
    }
    Ok(ExactSolution {
        choices: best_choices,
        total_power_w: best_total,
        method: ExactMethod::Enumeration,
    })
}

/// Min-cost bipartite matching robots→RBs over the mode-collapsed cost
/// matrix, via shortest augmenting paths with potentials. Polynomial time;
/// exact wherever [`enumerate_exact`] runs.
pub fn assignment_exact(inst: &ProblemInstance) -> Result<ExactSolution, OracleError> {
    let table = mode_costs(inst);
    let collapsed = table.collapse();
    let (rows, cols) = collapsed.dim();

    for k in 0..rows {
        if (0..cols).all(|m| !collapsed[[k, m]].0.is_finite()) {
            return Err(OracleError::Infeasible { robot: k });
        }
    }

    // matched_row[j] = row assigned to column j; `cols` is the virtual
    // start column of each augmentation phase.
    const NONE: usize = usize::MAX;
    let mut potential_row = vec![0.0f64; rows];
    let mut potential_col = vec![0.0f64; cols];
    let mut matched_row = vec![NONE; cols + 1];
    let mut predecessor = vec![cols; cols];

    for i in 0..rows {
        matched_row[cols] = i;
        let mut j0 = cols;
        let mut min_reduced = vec![f64::INFINITY; cols];
        let mut visited = vec![false; cols + 1];
        loop {
            visited[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = cols;
            for j in 0..cols {
                if visited[j] {
                    continue;
                }
                let reduced = collapsed[[i0, j]].0 - potential_row[i0] - potential_col[j];
                if reduced < min_reduced[j] {
                    min_reduced[j] = reduced;
                    predecessor[j] = j0;
                }
                if min_reduced[j] < delta {
                    delta = min_reduced[j];
                    j1 = j;
                }
            }
            if !delta.is_finite() {
                return Err(OracleError::NoAssignment);
            }
            for j in 0..cols {
                if visited[j] {
                    potential_row[matched_row[j]] += delta;
                    potential_col[j] -= delta;
                } else {
                    min_reduced[j] -= delta;
                }
            }
            potential_row[matched_row[cols]] += delta;
            j0 = j1;
            if matched_row[j0] == NONE {
                break;
            }
        }
        // Flip matches along the augmenting path.
        while j0 != cols {
            let j1 = predecessor[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
        }
    }

    let mut choices = vec![(0usize, 0usize); rows];
    let mut total = 0.0;
    for j in 0..cols {
        let i = matched_row[j];
        if i != NONE {
            let (cost, mode) = collapsed[[i, j]];
            choices[i] = (j, mode);
            total += cost;
        }
    }
    Ok(ExactSolution {
        choices,
        total_power_w: total,
        method: ExactMethod::Assignment,
    })
}

/// Dumps the cost table as CSV: robot, rb, mode, power_w ("inf" when the
/// mode is unusable).
pub fn write_costs_csv(table: &CostTable, out: &mut dyn Write) -> Result<(), OracleError> {
    writeln!(out, "robot,rb,mode,power_w")?;
    for entry in table.iter() {
        writeln!(
            out,
            "{},{},{},{}",
            entry.robot, entry.rb, entry.mode, entry.power_w
        )?;
    }
    Ok(())
}
