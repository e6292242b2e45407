//! Per-iteration penalized convex subproblems and their solver.
//!
//! Each outer SCA step minimizes `P̃_tot + F̃(φ)` over the relaxed
//! indicators and the `p̃` powers, subject to the perspective-rate
//! throughput and relay-link constraints, the per-RB and per-robot
//! assignment sums, boxes and nonnegativity. `F̃` is the linearized
//! penalty: for NCP the ℓ1²−ℓ2² sparsity penalty with the ℓ2² part
//! replaced by its tangent, for QP the concave `Σ(φ−φ²)` with `φ²`
//! replaced by its tangent (which makes `F̃` affine).
//!
//! The solver is a feasible-start log-barrier method. Its Newton systems
//! have heavy structure: the Hessian is a positive block-diagonal core
//! (2×2/3×3 blocks, one per (robot, RB, mode) triple) plus a handful of
//! rank-one terms (one per throughput/relay-link/RB constraint and per
//! NCP group), so each step is solved with block inversion and a
//! Sherman-Morrison-Woodbury correction instead of a dense factorization.
//! Equality rows (per-robot sums, plus per-RB sums when K = M leaves no
//! slack) go through a small Schur complement.
//!
//! Everything is deterministic: no randomness, no iteration-order
//! ambiguity.

use std::f64::consts::LN_2;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use ndarray::{Array2, Array3};
use thiserror::Error;

use crate::fbl;
use crate::model::{AssignmentSolution, ProblemInstance};

/// Lower clamp for indicators inside reporting-time perspective
/// evaluations; the barrier keeps solver iterates strictly positive.
const PHI_FLOOR: f64 = 1e-12;

/// Default relative duality-gap tolerance.
pub const DEFAULT_SUBPROBLEM_TOL: f64 = 1e-7;

/// Headroom above 1 for the indicator upper-bound barrier. The per-robot
/// equality pins single-mode instances at exactly φ = 1, so the bound
/// needs strictly positive slack there; packaged solutions clamp the
/// excess away.
const PHI_UPPER_MARGIN: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SubproblemError {
    #[error("penalty factor must be positive, got {0}")]
    NonPositiveFactor(f64),
    #[error("linearization point is not box/sum feasible: {0}")]
    BadLinearization(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("could not construct a strictly feasible start: {0}")]
    InfeasibleStart(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PenaltyKind {
    /// ℓ1² − ℓ2² sparsity penalty over the per-RB and per-robot indicator
    /// matrices.
    Ncp,
    /// Quadratic binary penalty `Σ(φ − φ²)`.
    Qp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    MaxIterations,
    NumericalFailure,
}

// ---------------------------------------------------------------------------
// Penalty evaluation
// ---------------------------------------------------------------------------

/// Sparsity residual `Σ_m(‖vec S_m‖₁² − ‖vec S_m‖₂²) + Σ_k(‖vec U_k‖₁² −
/// ‖vec U_k‖₂²)`; zero exactly when every RB and every robot carries at
/// most one positive indicator.
pub fn ncp_raw_residual(phi: &Array3<f64>) -> f64 {
    let (k_count, modes, m_count) = phi.dim();
    let mut total = 0.0;
    for m in 0..m_count {
        let mut l1 = 0.0;
        let mut l2 = 0.0;
        for k in 0..k_count {
            for n in 0..modes {
                let v = phi[[k, n, m]];
                l1 += v;
                l2 += v * v;
            }
        }
        total += l1 * l1 - l2;
    }
    for k in 0..k_count {
        let mut l1 = 0.0;
        let mut l2 = 0.0;
        for n in 0..modes {
            for m in 0..m_count {
                let v = phi[[k, n, m]];
                l1 += v;
                l2 += v * v;
            }
        }
        total += l1 * l1 - l2;
    }
    total
}

/// Exact NCP penalty `F1 = (λ/2)·`[`ncp_raw_residual`].
pub fn ncp_penalty(phi: &Array3<f64>, lambda: f64) -> f64 {
    0.5 * lambda * ncp_raw_residual(phi)
}

/// NCP penalty with each ℓ2² replaced by its tangent at `phi_lin`; tight
/// at the expansion point and nonnegative there.
pub fn ncp_penalty_linearized(phi: &Array3<f64>, phi_lin: &Array3<f64>, lambda: f64) -> f64 {
    let (k_count, modes, m_count) = phi.dim();
    let mut total = 0.0;
    for m in 0..m_count {
        let mut l1 = 0.0;
        for k in 0..k_count {
            for n in 0..modes {
                l1 += phi[[k, n, m]];
            }
        }
        total += l1 * l1;
    }
    for k in 0..k_count {
        let mut l1 = 0.0;
        for n in 0..modes {
            for m in 0..m_count {
                l1 += phi[[k, n, m]];
            }
        }
        total += l1 * l1;
    }
    // Each φ entry sits in exactly one S-group and one U-group, so the two
    // tangent families contribute 2·(2 φᵢᵀφ − ‖φᵢ‖²) in total.
    let mut cross = 0.0;
    let mut lin_sq = 0.0;
    for (&v, &vl) in phi.iter().zip(phi_lin.iter()) {
        cross += vl * v;
        lin_sq += vl * vl;
    }
    total -= 2.0 * (2.0 * cross - lin_sq);
    0.5 * lambda * total
}

/// Binary residual `Σ(φ − φ²)`; zero exactly on binary assignments.
pub fn qp_raw_residual(phi: &Array3<f64>) -> f64 {
    phi.iter().map(|&v| v - v * v).sum()
}

/// Exact QP penalty `F2 = β·`[`qp_raw_residual`].
pub fn qp_penalty(phi: &Array3<f64>, beta: f64) -> f64 {
    beta * qp_raw_residual(phi)
}

/// QP penalty with `φ²` replaced by its tangent at `phi_lin`: affine in φ,
/// majorizes [`qp_penalty`] everywhere and is tight at the expansion
/// point.
pub fn qp_penalty_linearized(phi: &Array3<f64>, phi_lin: &Array3<f64>, beta: f64) -> f64 {
    phi.iter()
        .zip(phi_lin.iter())
        .map(|(&v, &vl)| beta * (v - 2.0 * vl * v + vl * vl))
        .sum()
}

// ---------------------------------------------------------------------------
// Subproblem data
// ---------------------------------------------------------------------------

/// Per-link constants in solver units: `R̃(φ,p̂) = coef·φ·ln(1+g·p̂/φ) −
/// backoff·φ` bits, with `g` the noise-normalized gain divided by the
/// global power scale.
#[derive(Debug, Clone, Copy)]
struct Link {
    gain: f64,
    coef: f64,
    backoff: f64,
}

impl Link {
    fn from_budget(lb: &fbl::LinkBudget, h_scale: f64) -> Link {
        Link {
            gain: lb.gain() / h_scale,
            coef: lb.blocklength() / LN_2,
            backoff: lb.backoff_bits(),
        }
    }
}

/// One (robot, mode, RB) choice and the x-indices of its variables.
/// Variables of a triple are contiguous, which keeps the Hessian core
/// block-diagonal with blocks of size 2 (direct) or 3 (relay).
#[derive(Debug, Clone)]
struct Triple {
    robot: usize,
    /// 0 = direct, n ≥ 1 = relay n.
    mode: usize,
    rb: usize,
    x_phi: usize,
    /// Direct power, or the hop-1 power for relay triples.
    x_p1: usize,
    /// Hop-2 power for relay triples.
    x_p2: Option<usize>,
    /// Direct link (feeds throughput) or hop-1 link (feeds relay-link).
    link1: Link,
    /// Hop-2 link (feeds throughput), relay triples only.
    link2: Option<Link>,
}

/// One NCP penalty group (an S_m or U_k family): members plus the
/// linearization sums that let the (Σφ)² penalty be evaluated as small
/// nonnegative quantities near binary points instead of differences of
/// huge ones.
#[derive(Debug, Clone)]
struct NcpGroup {
    /// Triple indices of the member indicators.
    members: Vec<usize>,
    /// Per member: linearization mass of the other members.
    comp: Vec<f64>,
    /// Σ_j vl_j over the group.
    lin_sum: f64,
    /// Σ_j vl_j·comp_j = ‖vl‖₁² − ‖vl‖₂² of the group.
    lin_cross: f64,
}

/// A built penalized convex subproblem: problem data in solver scaling,
/// the penalty kind/factor and the linearization point, plus the derived
/// linear objective coefficients.
pub struct ConvexSubproblem {
    num_robots: usize,
    num_relays: usize,
    num_rbs: usize,
    payload_bits: Vec<f64>,
    kind: PenaltyKind,
    factor: f64,
    phi_lin: Array3<f64>,
    h_scale: f64,
    triples: Vec<Triple>,
    robot_triples: Vec<Vec<usize>>,
    n_vars: usize,
    n_phi: usize,
    /// Power cost per unit p̂ (1/h_scale turns p̂ back into watts).
    p_cost: f64,
    /// QP penalty-linear coefficient per φ, aligned with `triples`.
    phi_cost: Vec<f64>,
    /// Linearization value per triple.
    phi_lin_flat: Vec<f64>,
    /// NCP groups: one per RB (S_m) then one per robot (U_k).
    ncp_groups: Vec<NcpGroup>,
    /// K = M leaves the RB sums no slack; they become equalities.
    rb_as_equality: bool,
}

fn validate_phi_lin(inst: &ProblemInstance, phi_lin: &Array3<f64>) -> Result<(), SubproblemError> {
    let dims = (inst.num_robots, inst.num_modes(), inst.num_rbs);
    if phi_lin.dim() != dims {
        return Err(SubproblemError::DimensionMismatch(format!(
            "phi_lin is {:?}, instance wants {:?}",
            phi_lin.dim(),
            dims
        )));
    }
    let tol = 1e-6;
    for &v in phi_lin.iter() {
        if !(-tol..=1.0 + tol).contains(&v) {
            return Err(SubproblemError::BadLinearization(format!(
                "indicator {v} outside [0,1]"
            )));
        }
    }
    for k in 0..inst.num_robots {
        let mass: f64 = phi_lin.index_axis(ndarray::Axis(0), k).sum();
        if (mass - 1.0).abs() > 1e-5 {
            return Err(SubproblemError::BadLinearization(format!(
                "robot {k} carries mass {mass}, expected 1"
            )));
        }
    }
    for m in 0..inst.num_rbs {
        let used: f64 = (0..inst.num_robots)
            .map(|k| {
                (0..inst.num_modes())
                    .map(|n| phi_lin[[k, n, m]])
                    .sum::<f64>()
            })
            .sum();
        if used > 1.0 + 1e-5 {
            return Err(SubproblemError::BadLinearization(format!(
                "RB {m} carries mass {used} > 1"
            )));
        }
    }
    Ok(())
}

/// Gains span many tens of dB; a single global scale keeps the power
/// variables near unity without distorting the objective.
fn median_gain(inst: &ProblemInstance) -> f64 {
    let mut gains: Vec<f64> = inst
        .gains_direct
        .iter()
        .chain(inst.gains_hop1.iter())
        .chain(inst.gains_hop2.iter())
        .copied()
        .collect();
    gains.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = gains[gains.len() / 2];
    if mid > 0.0 && mid.is_finite() {
        mid
    } else {
        1.0
    }
}

fn build(
    inst: &ProblemInstance,
    phi_lin: &Array3<f64>,
    kind: PenaltyKind,
    factor: f64,
) -> Result<ConvexSubproblem, SubproblemError> {
    if !(factor > 0.0) {
        return Err(SubproblemError::NonPositiveFactor(factor));
    }
    validate_phi_lin(inst, phi_lin)?;

    let h_scale = median_gain(inst);
    let (k_count, m_count) = (inst.num_robots, inst.num_rbs);
    let mut triples = Vec::with_capacity(k_count * m_count * inst.num_modes());
    let mut robot_triples = vec![Vec::new(); k_count];
    let mut x = 0usize;
    for k in 0..k_count {
        for m in 0..m_count {
            robot_triples[k].push(triples.len());
            triples.push(Triple {
                robot: k,
                mode: 0,
                rb: m,
                x_phi: x,
                x_p1: x + 1,
                x_p2: None,
                link1: Link::from_budget(&inst.direct_budget(k, m), h_scale),
                link2: None,
            });
            x += 2;
            for n in 0..inst.num_relays {
                robot_triples[k].push(triples.len());
                triples.push(Triple {
                    robot: k,
                    mode: n + 1,
                    rb: m,
                    x_phi: x,
                    x_p1: x + 1,
                    x_p2: Some(x + 2),
                    link1: Link::from_budget(&inst.hop1_budget(k, n, m), h_scale),
                    link2: Some(Link::from_budget(&inst.hop2_budget(n, m), h_scale)),
                });
                x += 3;
            }
        }
    }
    let n_vars = x;
    let n_phi = triples.len();

    let phi_lin_flat: Vec<f64> = triples
        .iter()
        .map(|t| phi_lin[[t.robot, t.mode, t.rb]].clamp(0.0, 1.0))
        .collect();

    // QP penalty is affine after linearization; fold vl² per entry so the
    // objective never subtracts large constants.
    let mut phi_cost = vec![0.0; triples.len()];
    if kind == PenaltyKind::Qp {
        for (t, &vl) in phi_lin_flat.iter().enumerate() {
            phi_cost[t] = factor * (1.0 - 2.0 * vl);
        }
    }

    // NCP groups: per-RB S_m families first, then per-robot U_k families.
    let mut ncp_groups = Vec::new();
    if kind == PenaltyKind::Ncp {
        let mut families: Vec<Vec<usize>> = vec![Vec::new(); m_count + k_count];
        for (t, triple) in triples.iter().enumerate() {
            families[triple.rb].push(t);
            families[m_count + triple.robot].push(t);
        }
        for members in families {
            let lin_sum: f64 = members.iter().map(|&t| phi_lin_flat[t]).sum();
            let comp: Vec<f64> = members
                .iter()
                .map(|&t| (lin_sum - phi_lin_flat[t]).max(0.0))
                .collect();
            let lin_cross: f64 = members
                .iter()
                .zip(comp.iter())
                .map(|(&t, &c)| phi_lin_flat[t] * c)
                .sum();
            ncp_groups.push(NcpGroup {
                members,
                comp,
                lin_sum,
                lin_cross,
            });
        }
    }

    Ok(ConvexSubproblem {
        num_robots: k_count,
        num_relays: inst.num_relays,
        num_rbs: m_count,
        payload_bits: inst.payload_bits.clone(),
        kind,
        factor,
        phi_lin: phi_lin.clone(),
        h_scale,
        triples,
        robot_triples,
        n_vars,
        n_phi,
        p_cost: 1.0 / h_scale,
        phi_cost,
        phi_lin_flat,
        ncp_groups,
        rb_as_equality: k_count == m_count,
    })
}

/// Builds the NCP-penalized subproblem around `phi_lin` with factor λ.
pub fn build_ncp_subproblem(
    inst: &ProblemInstance,
    phi_lin: &Array3<f64>,
    lambda: f64,
) -> Result<ConvexSubproblem, SubproblemError> {
    build(inst, phi_lin, PenaltyKind::Ncp, lambda)
}

/// Builds the QP-penalized subproblem around `phi_lin` with factor β.
pub fn build_qp_subproblem(
    inst: &ProblemInstance,
    phi_lin: &Array3<f64>,
    beta: f64,
) -> Result<ConvexSubproblem, SubproblemError> {
    build(inst, phi_lin, PenaltyKind::Qp, beta)
}

/// Solver output: argmin values in watts, objective, status and achieved
/// residuals.
#[derive(Debug, Clone)]
pub struct SubproblemSolution {
    pub phi: Array3<f64>,
    pub p_hop1: Array3<f64>,
    pub p_hop2: Array3<f64>,
    pub p_direct: Array2<f64>,
    /// `P̃_tot + F̃` at the solution (watts plus penalty units).
    pub objective: f64,
    /// `P̃_tot` alone, watts.
    pub total_power_w: f64,
    pub status: SolveStatus,
    /// Worst constraint violation at the returned point.
    pub constraint_residual: f64,
    /// Certified duality-gap bound of the barrier method.
    pub gap_bound: f64,
    pub newton_iters: usize,
    pub barrier_stages: usize,
    /// Raw solver vector, reused to warm-start the next outer iteration.
    pub(crate) flat: Vec<f64>,
}

impl SubproblemSolution {
    /// Repackages the relaxed solution with the instance's fixed error
    /// splits for feasibility checking and rounding.
    pub fn to_assignment(&self, inst: &ProblemInstance) -> AssignmentSolution {
        let mut sol = AssignmentSolution::zeros(inst);
        sol.phi = self.phi.clone();
        sol.p_hop1 = self.p_hop1.clone();
        sol.p_hop2 = self.p_hop2.clone();
        sol.p_direct = self.p_direct.clone();
        sol
    }

    /// Indicators renormalized to exact per-robot unit mass, for use as
    /// the next linearization point.
    pub fn phi_normalized(&self) -> Array3<f64> {
        let mut phi = self.phi.clone();
        let (k_count, modes, m_count) = phi.dim();
        for k in 0..k_count {
            let mass: f64 = (0..modes)
                .map(|n| (0..m_count).map(|m| phi[[k, n, m]]).sum::<f64>())
                .sum();
            if mass > 0.0 {
                for n in 0..modes {
                    for m in 0..m_count {
                        phi[[k, n, m]] /= mass;
                    }
                }
            }
        }
        phi
    }
}

/// Solves a built subproblem to the given relative duality-gap tolerance.
pub fn solve_subproblem(
    sp: &ConvexSubproblem,
    tol: f64,
) -> Result<SubproblemSolution, SubproblemError> {
    sp.solve_warm(tol, None)
}

// ---------------------------------------------------------------------------
// Barrier solver
// ---------------------------------------------------------------------------

struct TermEval {
    value: f64,
    dphi: f64,
    dp: f64,
    /// Curvature weight: `−∇²R̃ = w·(p̂,−φ)(p̂,−φ)ᵀ`.
    w: f64,
}

fn eval_term(link: &Link, phi: f64, p: f64) -> TermEval {
    let u = phi + link.gain * p;
    let z = (link.gain * p / phi).ln_1p();
    TermEval {
        value: link.coef * phi * z - link.backoff * phi,
        dphi: link.coef * (z + phi / u - 1.0) - link.backoff,
        dp: link.coef * phi * link.gain / u,
        w: link.coef * link.gain * link.gain / (u * u * phi),
    }
}

/// One rank-one Hessian contribution `weight·v·vᵀ` with sparse `v`.
struct RankOne {
    weight: f64,
    entries: Vec<(usize, f64)>,
}

struct NewtonOutcome {
    iters: usize,
    /// Whether the decrement threshold was reached; only centered stages
    /// certify a duality gap.
    centered: bool,
}

impl ConvexSubproblem {
    pub fn penalty_kind(&self) -> PenaltyKind {
        self.kind
    }

    pub fn penalty_factor(&self) -> f64 {
        self.factor
    }

    pub fn num_variables(&self) -> usize {
        self.n_vars
    }

    /// Objective `P̃_tot + F̃` (power already in watts).
    ///
    /// Evaluated so that near-binary points accumulate small per-entry and
    /// per-group quantities: huge penalty factors must not wash out the
    /// watt-scale decrements the line search needs to see.
    fn objective(&self, x: &[f64]) -> f64 {
        let mut f = 0.0;
        for (t, triple) in self.triples.iter().enumerate() {
            f += self.p_cost * x[triple.x_p1];
            if let Some(p2) = triple.x_p2 {
                f += self.p_cost * x[p2];
            }
            if self.kind == PenaltyKind::Qp {
                let vl = self.phi_lin_flat[t];
                // φ(1−2vl) + vl² is exact near both binary corners.
                f += self.factor * (x[triple.x_phi] * (1.0 - 2.0 * vl) + vl * vl);
            }
        }
        if self.kind == PenaltyKind::Ncp {
            // Per group: (Σφ)² − 2Σvlφ + Σvl² = D² + 2Σφ·comp − lin_cross
            // with D = Σφ − Σvl; every term stays small near binary points.
            for g in &self.ncp_groups {
                let mut d = -g.lin_sum;
                let mut cross = 0.0;
                for (i, &t) in g.members.iter().enumerate() {
                    let phi = x[self.triples[t].x_phi];
                    d += phi;
                    cross += phi * g.comp[i];
                }
                f += 0.5 * self.factor * (d * d + 2.0 * cross - g.lin_cross);
            }
        }
        f
    }

    /// Domain check plus barrier value `t·f + Φ`; `None` outside the
    /// domain.
    fn bar_eval(&self, x: &[f64], t_scale: f64) -> Option<f64> {
        let mut barrier = 0.0;
        for &v in x {
            if v <= 0.0 {
                return None;
            }
            barrier -= v.ln();
        }
        for triple in &self.triples {
            let head = 1.0 + PHI_UPPER_MARGIN - x[triple.x_phi];
            if head <= 0.0 {
                return None;
            }
            barrier -= head.ln();
        }
        let mut tput = vec![0.0; self.num_robots];
        let mut relay = vec![0.0; self.num_robots];
        let mut rb_used = vec![0.0; self.num_rbs];
        for triple in &self.triples {
            let phi = x[triple.x_phi];
            rb_used[triple.rb] += phi;
            if let (Some(p2), Some(link2)) = (triple.x_p2, triple.link2.as_ref()) {
                let hop1 = eval_term(&triple.link1, phi, x[triple.x_p1]);
                let hop2 = eval_term(link2, phi, x[p2]);
                tput[triple.robot] += hop2.value;
                relay[triple.robot] += hop1.value - self.payload_bits[triple.robot] * phi;
            } else {
                tput[triple.robot] += eval_term(&triple.link1, phi, x[triple.x_p1]).value;
            }
        }
        for k in 0..self.num_robots {
            let slack = tput[k] - self.payload_bits[k];
            if slack <= 0.0 {
                return None;
            }
            barrier -= slack.ln();
            if self.num_relays > 0 {
                if relay[k] <= 0.0 {
                    return None;
                }
                barrier -= relay[k].ln();
            }
        }
        if !self.rb_as_equality {
            for m in 0..self.num_rbs {
                let slack = 1.0 - rb_used[m];
                if slack <= 0.0 {
                    return None;
                }
                barrier -= slack.ln();
            }
        }
        Some(t_scale * self.objective(x) + barrier)
    }

    /// Number of barrier terms (the duality-gap numerator).
    fn barrier_count(&self) -> usize {
        let mut m = self.n_vars + self.n_phi; // lower boxes plus φ upper bounds
        m += self.num_robots;
        if self.num_relays > 0 {
            m += self.num_robots;
        }
        if !self.rb_as_equality {
            m += self.num_rbs;
        }
        m
    }

    /// Equality rows: per-robot sums, plus per-RB sums (minus the last,
    /// which the robot rows imply) when K = M.
    fn equality_rows(&self) -> Vec<Vec<usize>> {
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); self.num_robots];
        let mut rb_rows: Vec<Vec<usize>> = vec![Vec::new(); self.num_rbs];
        for t in &self.triples {
            rows[t.robot].push(t.x_phi);
            rb_rows[t.rb].push(t.x_phi);
        }
        if self.rb_as_equality && self.num_rbs > 1 {
            rows.extend(rb_rows.into_iter().take(self.num_rbs - 1));
        }
        rows
    }

    /// Strictly feasible start around the linearization point: indicators
    /// blended with the uniform distribution, powers sized for a 15%
    /// throughput margin per unit indicator.
    fn cold_start(&self) -> Result<Vec<f64>, SubproblemError> {
        let uniform = 1.0 / (self.num_rbs as f64 * (self.num_relays + 1) as f64);
        let mut x = vec![0.0; self.n_vars];
        for triple in &self.triples {
            let vl = self.phi_lin[[triple.robot, triple.mode, triple.rb]].clamp(0.0, 1.0);
            let phi = 0.98 * vl + 0.02 * uniform;
            x[triple.x_phi] = phi;
            let bits = 1.15 * self.payload_bits[triple.robot];
            let p_unit_1 = invert_scaled(&triple.link1, bits).ok_or_else(|| {
                SubproblemError::InfeasibleStart(format!(
                    "link ({},{},{}) cannot reach {bits} bits",
                    triple.robot, triple.mode, triple.rb
                ))
            })?;
            x[triple.x_p1] = phi * p_unit_1;
            if let (Some(p2), Some(link2)) = (triple.x_p2, triple.link2.as_ref()) {
                let p_unit_2 = invert_scaled(link2, bits).ok_or_else(|| {
                    SubproblemError::InfeasibleStart(format!(
                        "hop-2 link ({},{},{}) cannot reach {bits} bits",
                        triple.robot, triple.mode, triple.rb
                    ))
                })?;
                x[p2] = phi * p_unit_2;
            }
        }
        Ok(x)
    }

    /// Barrier solve, optionally warm-started from a previous solution
    /// over the same feasible set.
    pub fn solve_warm(
        &self,
        tol: f64,
        warm: Option<&SubproblemSolution>,
    ) -> Result<SubproblemSolution, SubproblemError> {
        let mut x = match warm {
            Some(prev) if prev.flat.len() == self.n_vars => {
                if self.bar_eval(&prev.flat, 1.0).is_some() {
                    prev.flat.clone()
                } else {
                    self.cold_start()?
                }
            }
            _ => self.cold_start()?,
        };
        if self.bar_eval(&x, 1.0).is_none() {
            return Err(SubproblemError::InfeasibleStart(
                "constructed start violates a rate constraint".into(),
            ));
        }

        let m_count = self.barrier_count() as f64;
        let equalities = self.equality_rows();
        let scale0 = 1.0 + self.objective(&x).abs();
        let mut t = (m_count / (0.25 * scale0)).max(1e-2);
        let mut status = SolveStatus::Optimal;
        let mut newton_total = 0usize;
        let mut stages = 0usize;
        // Gap bound certified by the last completed centering stage.
        let mut certified_gap = f64::INFINITY;
        // Enormous penalty factors push inactive indicators toward
        // 1/(t·factor); below this coordinate floor f64 cannot center any
        // further, and the residual gap is penalty mass on indicators that
        // are already binary at any outer tolerance.
        const CENTER_FLOOR: f64 = 1e-13;
        const RELAXED_TOL: f64 = 1e-4;

        let mut stage_retries = 0usize;
        loop {
            stages += 1;
            match self.newton_minimize(&mut x, t, &equalities) {
                Ok(outcome) => {
                    newton_total += outcome.iters;
                    if outcome.centered {
                        certified_gap = m_count / t;
                        stage_retries = 0;
                    } else {
                        // Keep centering at this t; the stage is only
                        // certified once the decrement threshold is met.
                        stage_retries += 1;
                        if stage_retries <= 4 && stages < 60 {
                            continue;
                        }
                        let scale = 1.0 + self.objective(&x).abs();
                        if !(certified_gap <= RELAXED_TOL * scale) {
                            status = SolveStatus::MaxIterations;
                        }
                        break;
                    }
                }
                Err(reason) => {
                    if std::env::var_os("RELAYOPT_SOLVER_DEBUG").is_some() {
                        eprintln!("newton failure at stage {stages}, t={t:.3e}: {reason}");
                    }
                    let scale = 1.0 + self.objective(&x).abs();
                    if !(certified_gap <= RELAXED_TOL * scale) {
                        status = SolveStatus::NumericalFailure;
                    }
                    break;
                }
            }
            let scale = 1.0 + self.objective(&x).abs();
            if certified_gap <= tol * scale {
                break;
            }
            let mut min_slack = x.iter().copied().fold(f64::INFINITY, f64::min);
            for triple in &self.triples {
                min_slack = min_slack.min(1.0 + PHI_UPPER_MARGIN - x[triple.x_phi]);
            }
            if min_slack < CENTER_FLOOR && certified_gap <= RELAXED_TOL * scale {
                break;
            }
            if stages >= 60 {
                status = SolveStatus::MaxIterations;
                break;
            }
            t *= 20.0;
        }

        Ok(self.package(x, status, certified_gap, newton_total, stages))
    }

    /// Equality-constrained Newton minimization of `t·f + Φ`.
    #[allow(clippy::needless_range_loop)]
    fn newton_minimize(
        &self,
        x: &mut Vec<f64>,
        t: f64,
        equalities: &[Vec<usize>],
    ) -> Result<NewtonOutcome, &'static str> {
        let n = self.n_vars;
        let q = equalities.len();
        let mut iters = 0usize;
        for _ in 0..120 {
            iters += 1;

            // t·∇f. The NCP gradient λ(S_m + U_k − 2vl) is evaluated in
            // the cancellation-free form λ(D_S + comp_S + D_U + comp_U).
            let mut grad = vec![0.0; n];
            let mut rb_used = vec![0.0; self.num_rbs];
            for (idx, triple) in self.triples.iter().enumerate() {
                grad[triple.x_phi] += t * self.phi_cost[idx];
                grad[triple.x_p1] += t * self.p_cost;
                if let Some(p2) = triple.x_p2 {
                    grad[p2] += t * self.p_cost;
                }
                rb_used[triple.rb] += x[triple.x_phi];
            }
            if self.kind == PenaltyKind::Ncp {
                for g in &self.ncp_groups {
                    let d: f64 = g
                        .members
                        .iter()
                        .map(|&ti| x[self.triples[ti].x_phi])
                        .sum::<f64>()
                        - g.lin_sum;
                    for (i, &ti) in g.members.iter().enumerate() {
                        grad[self.triples[ti].x_phi] += t * self.factor * (d + g.comp[i]);
                    }
                }
            }

            // Box barriers, plus the φ upper bounds.
            let mut diag = vec![0.0; n];
            for j in 0..n {
                grad[j] -= 1.0 / x[j];
                diag[j] = 1.0 / (x[j] * x[j]);
            }
            for triple in &self.triples {
                let head = 1.0 + PHI_UPPER_MARGIN - x[triple.x_phi];
                if head <= 0.0 {
                    return Err("indicator at its upper bound");
                }
                grad[triple.x_phi] += 1.0 / head;
                diag[triple.x_phi] += 1.0 / (head * head);
            }

            // Rate constraints: values, sparse gradients, curvature terms.
            struct Curv {
                x_phi: usize,
                x_p: usize,
                w: f64,
                phi: f64,
                p: f64,
                tput_side: bool,
            }
            let mut tput = vec![0.0; self.num_robots];
            let mut relay = vec![0.0; self.num_robots];
            let mut grad_tput: Vec<Vec<(usize, f64)>> = vec![Vec::new(); self.num_robots];
            let mut grad_relay: Vec<Vec<(usize, f64)>> = vec![Vec::new(); self.num_robots];
            let mut curvs: Vec<Curv> = Vec::with_capacity(2 * self.triples.len());
            for triple in &self.triples {
                let phi = x[triple.x_phi];
                let k = triple.robot;
                if let (Some(p2), Some(link2)) = (triple.x_p2, triple.link2.as_ref()) {
                    let hop1 = eval_term(&triple.link1, phi, x[triple.x_p1]);
                    let hop2 = eval_term(link2, phi, x[p2]);
                    tput[k] += hop2.value;
                    relay[k] += hop1.value - self.payload_bits[k] * phi;
                    grad_tput[k].push((triple.x_phi, hop2.dphi));
                    grad_tput[k].push((p2, hop2.dp));
                    grad_relay[k].push((triple.x_phi, hop1.dphi - self.payload_bits[k]));
                    grad_relay[k].push((triple.x_p1, hop1.dp));
                    curvs.push(Curv {
                        x_phi: triple.x_phi,
                        x_p: p2,
                        w: hop2.w,
                        phi,
                        p: x[p2],
                        tput_side: true,
                    });
                    curvs.push(Curv {
                        x_phi: triple.x_phi,
                        x_p: triple.x_p1,
                        w: hop1.w,
                        phi,
                        p: x[triple.x_p1],
                        tput_side: false,
                    });
                } else {
                    let direct = eval_term(&triple.link1, phi, x[triple.x_p1]);
                    tput[k] += direct.value;
                    grad_tput[k].push((triple.x_phi, direct.dphi));
                    grad_tput[k].push((triple.x_p1, direct.dp));
                    curvs.push(Curv {
                        x_phi: triple.x_phi,
                        x_p: triple.x_p1,
                        w: direct.w,
                        phi,
                        p: x[triple.x_p1],
                        tput_side: true,
                    });
                }
            }
            let mut slack_tput = vec![0.0; self.num_robots];
            let mut slack_relay = vec![0.0; self.num_robots];
            for k in 0..self.num_robots {
                slack_tput[k] = tput[k] - self.payload_bits[k];
                slack_relay[k] = relay[k];
                if slack_tput[k] <= 0.0 || (self.num_relays > 0 && slack_relay[k] <= 0.0) {
                    return Err("rate slack nonpositive");
                }
            }
            for k in 0..self.num_robots {
                let s = 1.0 / slack_tput[k];
                for &(j, v) in &grad_tput[k] {
                    grad[j] -= s * v;
                }
                if self.num_relays > 0 {
                    let s = 1.0 / slack_relay[k];
                    for &(j, v) in &grad_relay[k] {
                        grad[j] -= s * v;
                    }
                }
            }
            let mut rb_slack = vec![0.0; self.num_rbs];
            if !self.rb_as_equality {
                for m in 0..self.num_rbs {
                    rb_slack[m] = 1.0 - rb_used[m];
                    if rb_slack[m] <= 0.0 {
                        return Err("rb slack nonpositive");
                    }
                }
                for triple in &self.triples {
                    grad[triple.x_phi] += 1.0 / rb_slack[triple.rb];
                }
            }

            // Block-diagonal core: box curvature plus per-term 2×2 blocks
            // weighted by 1/slack of the owning constraint.
            let mut blocks: Vec<[f64; 9]> = Vec::with_capacity(self.triples.len());
            let mut block_of = vec![(0usize, 0usize); n];
            for (b, triple) in self.triples.iter().enumerate() {
                let size = if triple.x_p2.is_some() { 3 } else { 2 };
                let mut m9 = [0.0f64; 9];
                for o in 0..size {
                    m9[o * 3 + o] = diag[triple.x_phi + o];
                    block_of[triple.x_phi + o] = (b, o);
                }
                blocks.push(m9);
            }
            for c in &curvs {
                let robot = self.triples[block_of[c.x_phi].0].robot;
                let s = if c.tput_side {
                    1.0 / slack_tput[robot]
                } else {
                    1.0 / slack_relay[robot]
                };
                let wv = c.w * s;
                let (b, o_phi) = block_of[c.x_phi];
                let (_, o_p) = block_of[c.x_p];
                let m9 = &mut blocks[b];
                m9[o_phi * 3 + o_phi] += wv * c.p * c.p;
                m9[o_p * 3 + o_p] += wv * c.phi * c.phi;
                m9[o_phi * 3 + o_p] -= wv * c.phi * c.p;
                m9[o_p * 3 + o_phi] -= wv * c.phi * c.p;
            }

            // Rank-one corrections: constraint gradients and NCP groups.
            let mut rank_ones: Vec<RankOne> = Vec::new();
            for k in 0..self.num_robots {
                rank_ones.push(RankOne {
                    weight: 1.0 / (slack_tput[k] * slack_tput[k]),
                    entries: std::mem::take(&mut grad_tput[k]),
                });
                if self.num_relays > 0 {
                    rank_ones.push(RankOne {
                        weight: 1.0 / (slack_relay[k] * slack_relay[k]),
                        entries: std::mem::take(&mut grad_relay[k]),
                    });
                }
            }
            let mut rb_phi_entries: Vec<Vec<(usize, f64)>> = vec![Vec::new(); self.num_rbs];
            for triple in &self.triples {
                rb_phi_entries[triple.rb].push((triple.x_phi, 1.0));
            }
            for (m, entries) in rb_phi_entries.into_iter().enumerate() {
                let mut weight = 0.0;
                if !self.rb_as_equality {
                    weight += 1.0 / (rb_slack[m] * rb_slack[m]);
                }
                if self.kind == PenaltyKind::Ncp {
                    weight += t * self.factor;
                }
                if weight > 0.0 {
                    rank_ones.push(RankOne { weight, entries });
                }
            }
            if self.kind == PenaltyKind::Ncp {
                for k in 0..self.num_robots {
                    let entries = self.robot_triples[k]
                        .iter()
                        .map(|&ti| (self.triples[ti].x_phi, 1.0))
                        .collect();
                    rank_ones.push(RankOne {
                        weight: t * self.factor,
                        entries,
                    });
                }
            }

            let mut block_inv: Vec<[f64; 9]> = Vec::with_capacity(blocks.len());
            for (b, m9) in blocks.iter().enumerate() {
                let size = if self.triples[b].x_p2.is_some() { 3 } else { 2 };
                block_inv.push(invert_small(m9, size).ok_or("block not positive definite")?);
            }
            let apply_binv = |r: &[f64], out: &mut [f64]| {
                for (b, triple) in self.triples.iter().enumerate() {
                    let size = if triple.x_p2.is_some() { 3 } else { 2 };
                    let base = triple.x_phi;
                    let inv = &block_inv[b];
                    for i in 0..size {
                        let mut acc = 0.0;
                        for jj in 0..size {
                            acc += inv[i * 3 + jj] * r[base + jj];
                        }
                        out[base + i] = acc;
                    }
                }
            };

            // One SPD Schur system over the rank-one multipliers y and
            // the equality multipliers ν, with Ṽ = V·W^½:
            //   [ I+ṼᵀB⁻¹Ṽ   ṼᵀB⁻¹Aᵀ ] [y]   [−ṼᵀB⁻¹∇]
            //   [ AB⁻¹Ṽ      AB⁻¹Aᵀ  ] [ν] = [−AB⁻¹∇ ],
            // then Δx = −B⁻¹(∇ + Ṽy + Aᵀν). Every entry is a positive
            // accumulation, so the factorization survives the extreme
            // barrier weights near convergence.
            let r_count = rank_ones.len();
            for ro in rank_ones.iter_mut() {
                let sw = ro.weight.sqrt();
                if !sw.is_finite() {
                    return Err("rank-one weight overflow");
                }
                for e in ro.entries.iter_mut() {
                    e.1 *= sw;
                }
            }
            let total = r_count + q;
            // Columns of B⁻¹[Ṽ Aᵀ].
            let mut cols: Vec<Vec<f64>> = Vec::with_capacity(total);
            let mut scratch = vec![0.0; n];
            for ro in rank_ones.iter() {
                scratch.iter_mut().for_each(|v| *v = 0.0);
                for &(j, v) in &ro.entries {
                    scratch[j] = v;
                }
                let mut out = vec![0.0; n];
                apply_binv(&scratch, &mut out);
                cols.push(out);
            }
            for row in equalities.iter() {
                scratch.iter_mut().for_each(|v| *v = 0.0);
                for &j in row {
                    scratch[j] = 1.0;
                }
                let mut out = vec![0.0; n];
                apply_binv(&scratch, &mut out);
                cols.push(out);
            }
            let sparse_dot = |idx: usize, dense: &[f64]| -> f64 {
                if idx < r_count {
                    rank_ones[idx]
                        .entries
                        .iter()
                        .map(|&(j, v)| v * dense[j])
                        .sum()
                } else {
                    equalities[idx - r_count].iter().map(|&j| dense[j]).sum()
                }
            };
            let mut schur = DMatrix::<f64>::zeros(total, total);
            for a in 0..total {
                for b in 0..total {
                    schur[(a, b)] = sparse_dot(a, &cols[b]);
                }
            }
            for a in 0..r_count {
                schur[(a, a)] += 1.0;
            }
            let mut binv_grad = vec![0.0; n];
            apply_binv(&grad, &mut binv_grad);
            let mut rhs = DMatrix::<f64>::zeros(total, 1);
            for a in 0..total {
                rhs[(a, 0)] = -sparse_dot(a, &binv_grad);
            }
            // Aim A·Δx at the (tiny) equality residual instead of 0 so
            // rounding drift in the per-robot sums self-corrects.
            for (e, row) in equalities.iter().enumerate() {
                let residual: f64 = row.iter().map(|&j| x[j]).sum::<f64>() - 1.0;
                rhs[(r_count + e, 0)] += residual;
            }
            // Escalating diagonal scaling against rounding-induced
            // indefiniteness; the system is SPD in exact arithmetic.
            let mut multipliers = None;
            for bump in [0.0, 1e-13, 1e-9] {
                let mut trial = schur.clone();
                for a in 0..total {
                    trial[(a, a)] *= 1.0 + bump;
                }
                if let Some(chol) = trial.cholesky() {
                    multipliers = Some(chol.solve(&rhs));
                    break;
                }
            }
            let multipliers = multipliers.ok_or("schur cholesky failed")?;

            let mut delta = vec![0.0; n];
            for j in 0..n {
                let mut acc = binv_grad[j];
                for a in 0..total {
                    acc += cols[a][j] * multipliers[(a, 0)];
                }
                delta[j] = -acc;
            }

            let decrement_sq: f64 =
                -grad.iter().zip(delta.iter()).map(|(g, d)| g * d).sum::<f64>();
            let bar_now = self.bar_eval(x, t).ok_or("iterate left the domain")?;
            if decrement_sq <= 2e-10 * (1.0 + bar_now.abs()) {
                return Ok(NewtonOutcome {
                    iters,
                    centered: true,
                });
            }

            // Cap the step at the positivity boundary, then backtrack with
            // an Armijo condition on t·f + Φ.
            let mut step: f64 = 1.0;
            for j in 0..n {
                if delta[j] < 0.0 {
                    step = step.min(-0.995 * x[j] / delta[j]);
                }
            }
            for triple in &self.triples {
                let d = delta[triple.x_phi];
                if d > 0.0 {
                    let head = 1.0 + PHI_UPPER_MARGIN - x[triple.x_phi];
                    step = step.min(0.995 * head / d);
                }
            }
            let directional = -decrement_sq;
            let mut accepted = false;
            for _ in 0..60 {
                let trial: Vec<f64> = x
                    .iter()
                    .zip(delta.iter())
                    .map(|(xv, dv)| xv + step * dv)
                    .collect();
                if let Some(value) = self.bar_eval(&trial, t) {
                    if value <= bar_now + 0.25 * step * directional {
                        *x = trial;
                        accepted = true;
                        break;
                    }
                }
                step *= 0.5;
            }
            if !accepted {
                if decrement_sq <= 1e-6 * (1.0 + bar_now.abs()) {
                    return Ok(NewtonOutcome {
                        iters,
                        centered: true,
                    });
                }
                return Err("line search stalled");
            }
        }
        // Iteration cap: the point improved but was not certified centered.
        Ok(NewtonOutcome {
            iters: 120,
            centered: false,
        })
    }

    fn package(
        &self,
        x: Vec<f64>,
        status: SolveStatus,
        gap: f64,
        newton_iters: usize,
        stages: usize,
    ) -> SubproblemSolution {
        let modes = self.num_relays + 1;
        let mut phi = Array3::zeros((self.num_robots, modes, self.num_rbs));
        let mut p_hop1 = Array3::zeros((self.num_robots, self.num_relays, self.num_rbs));
        let mut p_hop2 = Array3::zeros((self.num_robots, self.num_relays, self.num_rbs));
        let mut p_direct = Array2::zeros((self.num_robots, self.num_rbs));
        for triple in &self.triples {
            phi[[triple.robot, triple.mode, triple.rb]] = x[triple.x_phi].clamp(0.0, 1.0);
            let p1 = x[triple.x_p1] / self.h_scale;
            if let Some(p2) = triple.x_p2 {
                p_hop1[[triple.robot, triple.mode - 1, triple.rb]] = p1;
                p_hop2[[triple.robot, triple.mode - 1, triple.rb]] = x[p2] / self.h_scale;
            } else {
                p_direct[[triple.robot, triple.rb]] = p1;
            }
        }
        let total_power_w = p_hop1.sum() + p_hop2.sum() + p_direct.sum();
        let objective = self.objective(&x);
        let constraint_residual = self.residual(&x);
        SubproblemSolution {
            phi,
            p_hop1,
            p_hop2,
            p_direct,
            objective,
            total_power_w,
            status,
            constraint_residual,
            gap_bound: gap,
            newton_iters,
            barrier_stages: stages,
            flat: x,
        }
    }

    /// Worst violation over all constraint families at a solver point.
    fn residual(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for &v in x {
            worst = worst.max(-v);
        }
        let mut tput = vec![0.0; self.num_robots];
        let mut relay = vec![0.0; self.num_robots];
        let mut rb_used = vec![0.0; self.num_rbs];
        let mut robot_mass = vec![0.0; self.num_robots];
        for triple in &self.triples {
            let phi = x[triple.x_phi].max(PHI_FLOOR);
            rb_used[triple.rb] += x[triple.x_phi];
            robot_mass[triple.robot] += x[triple.x_phi];
            if let (Some(p2), Some(link2)) = (triple.x_p2, triple.link2.as_ref()) {
                tput[triple.robot] += eval_term(link2, phi, x[p2].max(0.0)).value;
                relay[triple.robot] +=
                    eval_term(&triple.link1, phi, x[triple.x_p1].max(0.0)).value
                        - self.payload_bits[triple.robot] * x[triple.x_phi];
            } else {
                tput[triple.robot] +=
                    eval_term(&triple.link1, phi, x[triple.x_p1].max(0.0)).value;
            }
        }
        for k in 0..self.num_robots {
            worst = worst.max(self.payload_bits[k] - tput[k]);
            if self.num_relays > 0 {
                worst = worst.max(-relay[k]);
            }
            worst = worst.max((robot_mass[k] - 1.0).abs());
        }
        for m in 0..self.num_rbs {
            worst = worst.max(rb_used[m] - 1.0);
        }
        worst
    }

    /// Documented text form of the subproblem for external cross-checks:
    /// dimensions, penalty, scaling, objective shape and the linearization
    /// point.
    pub fn dump_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "penalized convex subproblem");
        let _ = writeln!(
            s,
            "dims: robots={} relays={} rbs={} vars={} (phi={}, powers={})",
            self.num_robots,
            self.num_relays,
            self.num_rbs,
            self.n_vars,
            self.n_phi,
            self.n_vars - self.n_phi
        );
        let _ = writeln!(
            s,
            "penalty: {:?} factor={} power_scale=1/{}",
            self.kind, self.factor, self.h_scale
        );
        let _ = writeln!(
            s,
            "objective: sum(p_hat)/h_scale + {}",
            match self.kind {
                PenaltyKind::Ncp => "0.5*factor*sum(linearized l1^2-l2^2 groups)",
                PenaltyKind::Qp => "factor*sum(phi(1-2phi_lin) + phi_lin^2)",
            },
        );
        let _ = writeln!(
            s,
            "constraints: {} throughput, {} relay-link, {} rb-{}, per-robot sums = 1, boxes",
            self.num_robots,
            if self.num_relays > 0 {
                self.num_robots
            } else {
                0
            },
            if self.rb_as_equality {
                self.num_rbs - 1
            } else {
                self.num_rbs
            },
            if self.rb_as_equality {
                "equalities"
            } else {
                "inequalities"
            },
        );
        let _ = writeln!(s, "linearization point (robot, mode, rb, value):");
        for triple in &self.triples {
            let v = self.phi_lin[[triple.robot, triple.mode, triple.rb]];
            if v > 1e-9 {
                let _ = writeln!(s, "  {} {} {} {}", triple.robot, triple.mode, triple.rb, v);
            }
        }
        s
    }
}

/// Power (in scaled units) reaching `bits` on a solver link; `None` when
/// the exponent overflows.
fn invert_scaled(link: &Link, bits: f64) -> Option<f64> {
    let bl_bits = link.coef * LN_2;
    let exponent = (bits + link.backoff) / bl_bits;
    if exponent > 1020.0 {
        return None;
    }
    Some((exponent.exp2() - 1.0) / link.gain)
}

/// Inverts a symmetric positive-definite 2×2 or 3×3 block stored row-major
/// in a 3×3 frame.
fn invert_small(m: &[f64; 9], size: usize) -> Option<[f64; 9]> {
    let mut out = [0.0f64; 9];
    if size == 2 {
        let (a, b, c) = (m[0], m[1], m[4]);
        let det = a * c - b * b;
        if !(det > 0.0) || !det.is_finite() {
            return None;
        }
        out[0] = c / det;
        out[1] = -b / det;
        out[3] = -b / det;
        out[4] = a / det;
        Some(out)
    } else {
        let (a, b, c) = (m[0], m[1], m[2]);
        let (d, e) = (m[4], m[5]);
        let f = m[8];
        let co0 = d * f - e * e;
        let co1 = -(b * f - c * e);
        let co2 = b * e - c * d;
        let det = a * co0 + b * co1 + c * co2;
        if !(det > 0.0) || !det.is_finite() {
            return None;
        }
        out[0] = co0 / det;
        out[1] = co1 / det;
        out[2] = co2 / det;
        out[3] = co1 / det;
        out[4] = (a * f - c * c) / det;
        out[5] = -(a * e - b * c) / det;
        out[6] = co2 / det;
        out[7] = -(a * e - b * c) / det;
        out[8] = (a * d - b * b) / det;
        Some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::test_instance;
    use crate::model::{check_feasibility, DEFAULT_FEASIBILITY_TOL};
    use crate::oracle;
    use ndarray::Array3 as A3;

    fn uniform_phi(inst: &ProblemInstance) -> A3<f64> {
        A3::from_elem(
            (inst.num_robots, inst.num_modes(), inst.num_rbs),
            1.0 / (inst.num_rbs as f64 * inst.num_modes() as f64),
        )
    }

    #[test]
    fn builders_reject_nonpositive_factors() {
        let inst = test_instance(1, 2, 1, 3);
        let phi = uniform_phi(&inst);
        assert!(matches!(
            build_ncp_subproblem(&inst, &phi, 0.0),
            Err(SubproblemError::NonPositiveFactor(_))
        ));
        assert!(matches!(
            build_qp_subproblem(&inst, &phi, -1.0),
            Err(SubproblemError::NonPositiveFactor(_))
        ));
    }

    #[test]
    fn builders_reject_bad_linearization() {
        let inst = test_instance(1, 2, 1, 3);
        let mut phi = uniform_phi(&inst);
        phi[[0, 0, 0]] += 0.5; // breaks the per-robot sum
        assert!(matches!(
            build_qp_subproblem(&inst, &phi, 1.0),
            Err(SubproblemError::BadLinearization(_))
        ));
    }

    #[test]
    fn ncp_penalty_vanishes_on_exclusive_binary() {
        let mut phi = A3::zeros((2, 2, 3));
        phi[[0, 0, 0]] = 1.0;
        phi[[1, 1, 1]] = 1.0;
        assert_eq!(ncp_raw_residual(&phi), 0.0);
        assert_eq!(ncp_penalty(&phi, 7.0), 0.0);
        assert!(ncp_penalty_linearized(&phi, &phi, 7.0).abs() < 1e-12);
    }

    /// A single robot split half/half over two RBs: its U-matrix is
    /// (0.5, 0.5), so F1 = (λ/2)(1² − 0.5) = 0.25λ.
    #[test]
    fn ncp_penalty_half_split_value() {
        let mut phi = A3::zeros((1, 1, 2));
        phi[[0, 0, 0]] = 0.5;
        phi[[0, 0, 1]] = 0.5;
        let lambda = 3.0;
        assert!((ncp_penalty(&phi, lambda) - 0.25 * lambda).abs() < 1e-12);
    }

    #[test]
    fn ncp_linearized_is_tight_at_expansion_point() {
        let inst = test_instance(3, 2, 1, 3);
        let phi = uniform_phi(&inst);
        let lambda = 2.5;
        let exact = ncp_penalty(&phi, lambda);
        let lin = ncp_penalty_linearized(&phi, &phi, lambda);
        assert!((exact - lin).abs() < 1e-10, "{exact} vs {lin}");
        assert!(lin >= 0.0);
    }

    #[test]
    fn qp_penalty_values() {
        let mut phi = A3::zeros((1, 1, 2));
        phi[[0, 0, 0]] = 0.5;
        phi[[0, 0, 1]] = 0.5;
        let beta = 4.0;
        // Two entries, each φ − φ² = 0.25.
        assert!((qp_penalty(&phi, beta) - 0.5 * beta).abs() < 1e-12);
        assert!((qp_penalty_linearized(&phi, &phi, beta) - 0.5 * beta).abs() < 1e-12);
        let mut binary = A3::zeros((1, 1, 2));
        binary[[0, 0, 0]] = 1.0;
        assert_eq!(qp_penalty(&binary, beta), 0.0);
        assert!(qp_penalty_linearized(&binary, &binary, beta).abs() < 1e-12);
    }

    /// β(φ−2φᵢφ+φᵢ²) − β(φ−φ²) = β(φ−φᵢ)² ≥ 0.
    #[test]
    fn qp_linearized_majorizes_exact() {
        use rand_chacha::rand_core::{RngCore, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut unit = || (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        for _ in 0..500 {
            let mut phi = A3::zeros((2, 2, 2));
            let mut phi_lin = A3::zeros((2, 2, 2));
            for v in phi.iter_mut() {
                *v = unit();
            }
            for v in phi_lin.iter_mut() {
                *v = unit();
            }
            let beta = 1.0 + unit() * 10.0;
            assert!(
                qp_penalty_linearized(&phi, &phi_lin, beta) >= qp_penalty(&phi, beta) - 1e-10
            );
        }
    }

    #[test]
    fn single_direct_link_matches_closed_form() {
        let inst = test_instance(41, 1, 0, 1);
        let sp = build_qp_subproblem(&inst, &uniform_phi(&inst), 1e-3).unwrap();
        let sol = solve_subproblem(&sp, DEFAULT_SUBPROBLEM_TOL).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        let expected =
            fbl::invert_power(&inst.direct_budget(0, 0), inst.payload_bits[0]).unwrap();
        let got = sol.p_direct[[0, 0]];
        assert!(
            ((got - expected) / expected).abs() < 1e-6,
            "got {got}, closed form {expected}"
        );
        assert!((sol.phi[[0, 0, 0]] - 1.0).abs() < 1e-9);
    }

    /// With hop gains far above the direct gain the relaxation already
    /// sits at the relay vertex after a single solve.
    #[test]
    fn strong_relay_gains_select_relay_mode() {
        use ndarray::{Array2, Array3};
        let inst = ProblemInstance::new(
            vec![800.0],
            1e-5,
            0.5e-3,
            0.5e-3,
            360e3,
            Array2::from_elem((1, 2), 2.0),
            Array3::from_elem((1, 1, 2), 5e4),
            Array2::from_elem((1, 2), 5e4),
        )
        .unwrap();
        let sp = build_qp_subproblem(&inst, &uniform_phi(&inst), 1e-3).unwrap();
        let sol = solve_subproblem(&sp, DEFAULT_SUBPROBLEM_TOL).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        let relay_mass: f64 = (0..2).map(|m| sol.phi[[0, 1, m]]).sum();
        assert!(relay_mass > 0.9, "relay mass {relay_mass}");
        let exact = oracle::assignment_exact(&inst).unwrap();
        assert!(
            sol.total_power_w <= 1.05 * exact.total_power_w,
            "{} vs oracle {}",
            sol.total_power_w,
            exact.total_power_w
        );
        assert!(sol.total_power_w >= exact.total_power_w * (1.0 - 1e-6));
    }

    #[test]
    fn huge_factor_keeps_binary_linearization_point() {
        let inst = test_instance(43, 2, 1, 3);
        let exact = oracle::assignment_exact(&inst).unwrap();
        let mut phi_lin = A3::zeros((2, 2, 3));
        for (k, &(m, n)) in exact.choices.iter().enumerate() {
            phi_lin[[k, n, m]] = 1.0;
        }
        let sp = build_qp_subproblem(&inst, &phi_lin, 1e6).unwrap();
        let sol = solve_subproblem(&sp, DEFAULT_SUBPROBLEM_TOL).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        for (k, &(m, n)) in exact.choices.iter().enumerate() {
            assert!(
                sol.phi[[k, n, m]] > 1.0 - 1e-4,
                "phi[{k},{n},{m}] = {}",
                sol.phi[[k, n, m]]
            );
        }
        // At this factor the β-scaled penalty is limited by the f64
        // centering floor; the raw binary residual is the meaningful
        // measure of "penalty ≈ 0".
        assert!(qp_raw_residual(&sol.phi) < 1e-6, "raw {}", qp_raw_residual(&sol.phi));
    }

    #[test]
    fn optimal_points_pass_relaxed_feasibility() {
        for seed in [45, 46] {
            let inst = test_instance(seed, 2, 1, 3);
            for kind in [PenaltyKind::Ncp, PenaltyKind::Qp] {
                let sp = build(&inst, &uniform_phi(&inst), kind, 1e-3).unwrap();
                let sol = solve_subproblem(&sp, DEFAULT_SUBPROBLEM_TOL).unwrap();
                assert_eq!(sol.status, SolveStatus::Optimal);
                assert!(sol.constraint_residual <= 10.0 * DEFAULT_SUBPROBLEM_TOL);
                let report = check_feasibility(
                    &inst,
                    &sol.to_assignment(&inst),
                    10.0 * DEFAULT_FEASIBILITY_TOL,
                )
                .unwrap();
                assert!(
                    report.feasible,
                    "seed {seed} {kind:?}: worst {}",
                    report.worst_violation
                );
            }
        }
    }

    /// Numerical curvature of the perspective rate along random directions
    /// stays nonpositive.
    #[test]
    fn perspective_curvature_is_nonpositive() {
        use rand_chacha::rand_core::{RngCore, SeedableRng};
        let lb = fbl::LinkBudget::new(50.0, 0.5e-3, 360e3, 1e-5).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut unit = || (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        for _ in 0..200 {
            let phi = 0.05 + 0.9 * unit();
            let p = 0.01 + unit();
            let (dphi, dp) = (unit() - 0.5, unit() - 0.5);
            let h = 1e-4;
            let f = |s: f64| {
                fbl::perspective_rate((phi + s * dphi).max(1e-9), (p + s * dp).max(0.0), &lb)
            };
            let second_diff = f(h) - 2.0 * f(0.0) + f(-h);
            assert!(
                second_diff <= 1e-7,
                "positive curvature {second_diff} at phi={phi} p={p}"
            );
        }
    }

    #[test]
    fn solves_are_deterministic() {
        let inst = test_instance(47, 2, 1, 3);
        let sp = build_qp_subproblem(&inst, &uniform_phi(&inst), 1e-3).unwrap();
        let a = solve_subproblem(&sp, DEFAULT_SUBPROBLEM_TOL).unwrap();
        let b = solve_subproblem(&sp, DEFAULT_SUBPROBLEM_TOL).unwrap();
        assert_eq!(a.phi, b.phi);
        assert_eq!(a.p_direct, b.p_direct);
        assert_eq!(a.total_power_w, b.total_power_w);
    }

    /// K = M leaves the RB sums without slack; they are handled as
    /// equality rows and the solve still works.
    #[test]
    fn square_instances_use_rb_equalities() {
        let inst = test_instance(49, 2, 1, 2);
        let sp = build_qp_subproblem(&inst, &uniform_phi(&inst), 1e-3).unwrap();
        let sol = solve_subproblem(&sp, DEFAULT_SUBPROBLEM_TOL).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        for m in 0..2 {
            let used: f64 = (0..2)
                .flat_map(|k| (0..2).map(move |n| (k, n)))
                .map(|(k, n)| sol.phi[[k, n, m]])
                .sum();
            assert!((used - 1.0).abs() < 1e-6, "RB {m} mass {used}");
        }
    }

    #[test]
    fn dump_text_describes_problem() {
        let inst = test_instance(51, 2, 1, 3);
        let sp = build_ncp_subproblem(&inst, &uniform_phi(&inst), 0.5).unwrap();
        let text = sp.dump_text();
        assert!(text.contains("penalized convex subproblem"));
        assert!(text.contains("Ncp factor=0.5"));
        assert!(text.contains("throughput"));
    }

    #[test]
    fn warm_start_reuses_previous_point() {
        let inst = test_instance(53, 2, 1, 3);
        let sp = build_qp_subproblem(&inst, &uniform_phi(&inst), 1e-3).unwrap();
        let cold = solve_subproblem(&sp, DEFAULT_SUBPROBLEM_TOL).unwrap();
        let sp2 = build_qp_subproblem(&inst, &cold.phi_normalized(), 2.5e-3).unwrap();
        let warm = sp2.solve_warm(DEFAULT_SUBPROBLEM_TOL, Some(&cold)).unwrap();
        assert_eq!(warm.status, SolveStatus::Optimal);
        assert!(warm.total_power_w > 0.0);
    }
}
