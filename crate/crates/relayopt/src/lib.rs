//! Energy-minimal relay selection, resource-block assignment and transmit
//! power allocation for ultra-reliable short-packet uplink in a factory cell.
//!
//! The crate is organized around one pipeline:
//!
//! 1. [`scenario`] draws a random factory layout and converts geometry plus
//!    Rayleigh fading into normalized channel gains,
//! 2. [`model`] holds the optimization problem data, the fixed error-split
//!    policy and a full feasibility checker,
//! 3. [`subproblem`] builds and solves the per-iteration penalized convex
//!    programs (NCP and QP penalties) with a structured barrier method,
//! 4. [`sca`] runs the outer successive-convex-approximation loops and
//!    rounds the relaxed assignment to a binary one,
//! 5. [`oracle`] provides exact reference solvers (exhaustive enumeration
//!    and min-cost matching) for the same fixed-split problem,
//! 6. [`sweep`] is the experiment harness: seeded parameter sweeps, paired
//!    algorithm comparisons and CSV emission.
//!
//! [`fbl`] supplies the finite-blocklength rate mathematics everything else
//! is built on.

pub mod fbl;
pub mod model;
pub mod oracle;
pub mod sca;
pub mod scenario;
pub mod subproblem;
pub mod sweep;

pub use fbl::{q_inv, rate_approx, rate_exact, Dispersion, LinkBudget};
pub use model::{AssignmentSolution, FeasibilityReport, ProblemInstance};
pub use oracle::ExactSolution;
pub use sca::{Algorithm, ScaConfig, SolverReport};
pub use scenario::{FactoryLayout, Scenario, SystemParams};
pub use subproblem::{ConvexSubproblem, SubproblemSolution};
pub use sweep::{SweepResult, SweepSpec};

