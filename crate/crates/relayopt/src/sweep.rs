//! Experiment harness: seeded parameter sweeps, paired algorithm
//! comparisons, and CSV emission.
//!
//! A sweep fixes every parameter except one, draws `realizations` fresh
//! channels per swept value, runs the selected solvers and aggregates
//! means, deviations and transmission-mode proportions over the converged
//! runs. Seeds derive deterministically from `(base_seed, value,
//! realization)`, so a sweep spec reproduces byte-identical CSV output.
//!
//! Realizations are independent and run in parallel; aggregation reduces
//! indexed results, so the schedule cannot affect the output.

use std::io::Write;

use rayon::prelude::*;
use serde::Deserialize;
use thiserror::Error;

use crate::model::ProblemInstance;
use crate::oracle;
use crate::sca::{self, ScaConfig};
use crate::scenario::{self, FactoryLayout, Scenario, SystemParams};

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("invalid sweep: {0}")]
    BadSpec(String),
    #[error("could not parse sweep config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParameter {
    Robots,
    EpsMax,
    Theta,
    PayloadBits,
    Relays,
}

impl SweepParameter {
    pub fn name(self) -> &'static str {
        match self {
            SweepParameter::Robots => "k",
            SweepParameter::EpsMax => "eps_max",
            SweepParameter::Theta => "theta",
            SweepParameter::PayloadBits => "b",
            SweepParameter::Relays => "n",
        }
    }

    /// Whether the parameter shapes the drawn scenario (geometry or
    /// dimensions) rather than only the optimization instance.
    pub fn affects_scenario(self) -> bool {
        matches!(
            self,
            SweepParameter::Robots | SweepParameter::Relays | SweepParameter::Theta
        )
    }

    pub fn parse(s: &str) -> Result<Self, SweepError> {
        match s.to_ascii_lowercase().as_str() {
            "k" | "robots" => Ok(SweepParameter::Robots),
            "eps_max" | "eps" => Ok(SweepParameter::EpsMax),
            "theta" => Ok(SweepParameter::Theta),
            "b" | "bits" | "payload" => Ok(SweepParameter::PayloadBits),
            "n" | "relays" => Ok(SweepParameter::Relays),
            other => Err(SweepError::BadSpec(format!(
                "unknown sweep parameter {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlgoSelection {
    Ncp,
    Qp,
    Both,
    Oracle,
}

impl AlgoSelection {
    fn algos(self) -> Vec<&'static str> {
        match self {
            AlgoSelection::Ncp => vec!["ncp"],
            AlgoSelection::Qp => vec!["qp"],
            AlgoSelection::Both => vec!["ncp", "qp"],
            AlgoSelection::Oracle => vec!["oracle"],
        }
    }

    pub fn parse(s: &str) -> Result<Self, SweepError> {
        match s.to_ascii_lowercase().as_str() {
            "ncp" => Ok(AlgoSelection::Ncp),
            "qp" => Ok(AlgoSelection::Qp),
            "both" => Ok(AlgoSelection::Both),
            "oracle" => Ok(AlgoSelection::Oracle),
            other => Err(SweepError::BadSpec(format!("unknown algorithm {other:?}"))),
        }
    }
}

/// Everything held constant during a sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedParams {
    pub num_robots: usize,
    pub num_rbs: usize,
    pub num_relays: usize,
    pub theta: f64,
    pub eps_max: f64,
    pub payload_bits: f64,
    pub radius_m: f64,
    pub tau1_s: f64,
    pub tau2_s: f64,
    pub bandwidth_hz: f64,
    pub noise_dbm_per_hz: f64,
}

impl Default for FixedParams {
    fn default() -> Self {
        FixedParams {
            num_robots: 4,
            num_rbs: 10,
            num_relays: 4,
            theta: 0.5,
            eps_max: 1e-5,
            payload_bits: 1000.0,
            radius_m: 300.0,
            tau1_s: 0.5e-3,
            tau2_s: 0.5e-3,
            bandwidth_hz: 360e3,
            noise_dbm_per_hz: -174.0,
        }
    }
}

/// One sweep: the swept parameter and its values, fixed parameters,
/// realization count, solver selection and the base seed.
#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
    pub fixed: FixedParams,
    pub realizations: usize,
    pub algorithms: AlgoSelection,
    pub base_seed: u64,
    /// Replay this stored layout, redrawing fading only. Restricted to
    /// sweeps that do not alter the geometry or dimensions.
    pub fixed_layout: Option<Scenario>,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<(), SweepError> {
        if self.values.is_empty() {
            return Err(SweepError::BadSpec("value list is empty".into()));
        }
        if self.realizations == 0 {
            return Err(SweepError::BadSpec("need at least one realization".into()));
        }
        for &v in &self.values {
            match self.parameter {
                SweepParameter::Robots | SweepParameter::Relays => {
                    if v < 0.0 || v.fract() != 0.0 {
                        return Err(SweepError::BadSpec(format!(
                            "{} must take nonnegative integer values, got {v}",
                            self.parameter.name()
                        )));
                    }
                    if self.parameter == SweepParameter::Robots && v < 1.0 {
                        return Err(SweepError::BadSpec("need at least one robot".into()));
                    }
                }
                SweepParameter::EpsMax | SweepParameter::Theta => {
                    if !(v > 0.0 && v < 1.0) {
                        return Err(SweepError::BadSpec(format!(
                            "{} values must lie in (0,1), got {v}",
                            self.parameter.name()
                        )));
                    }
                }
                SweepParameter::PayloadBits => {
                    if !(v > 0.0) {
                        return Err(SweepError::BadSpec(format!(
                            "payload must be positive, got {v}"
                        )));
                    }
                }
            }
            let params = self.apply(v);
            if params.num_rbs < params.num_robots {
                return Err(SweepError::BadSpec(format!(
                    "value {v} gives {} robots for {} RBs",
                    params.num_robots, params.num_rbs
                )));
            }
        }
        // Relay-location studies need relays to locate.
        if self.parameter == SweepParameter::Theta && self.fixed.num_relays == 0 {
            return Err(SweepError::BadSpec(
                "theta sweep requires at least one relay".into(),
            ));
        }
        if let Some(layout) = &self.fixed_layout {
            if !matches!(
                self.parameter,
                SweepParameter::EpsMax | SweepParameter::PayloadBits
            ) {
                return Err(SweepError::BadSpec(
                    "fixed layout only combines with eps_max or payload sweeps".into(),
                ));
            }
            layout
                .validate()
                .map_err(|e| SweepError::BadSpec(format!("fixed layout invalid: {e}")))?;
            if layout.layout.num_robots != self.fixed.num_robots
                || layout.layout.num_relays != self.fixed.num_relays
                || layout.layout.num_rbs != self.fixed.num_rbs
            {
                return Err(SweepError::BadSpec(
                    "fixed layout dimensions disagree with the sweep".into(),
                ));
            }
        }
        Ok(())
    }

    /// Fixed parameters with the swept value substituted.
    fn apply(&self, value: f64) -> FixedParams {
        let mut p = self.fixed;
        match self.parameter {
            SweepParameter::Robots => p.num_robots = value as usize,
            SweepParameter::EpsMax => p.eps_max = value,
            SweepParameter::Theta => p.theta = value,
            SweepParameter::PayloadBits => p.payload_bits = value,
            SweepParameter::Relays => p.num_relays = value as usize,
        }
        p
    }

    /// Parses a TOML sweep configuration.
    ///
    /// ```toml
    /// base_seed = 42
    /// realizations = 100
    /// algorithms = "both"
    ///
    /// [sweep]
    /// parameter = "k"
    /// values = [2, 4, 6, 8]
    ///
    /// [fixed]            # all keys optional
    /// num_rbs = 10
    /// num_relays = 4
    /// theta = 0.5
    /// eps_max = 1e-5
    /// payload_bits = 1000.0
    /// ```
    pub fn from_toml_str(text: &str) -> Result<SweepSpec, SweepError> {
        #[derive(Deserialize)]
        struct RawSweep {
            parameter: String,
            values: Vec<f64>,
        }
        #[derive(Deserialize, Default)]
        #[serde(deny_unknown_fields)]
        struct RawFixed {
            num_robots: Option<usize>,
            num_rbs: Option<usize>,
            num_relays: Option<usize>,
            theta: Option<f64>,
            eps_max: Option<f64>,
            payload_bits: Option<f64>,
            radius_m: Option<f64>,
            tau1_ms: Option<f64>,
            tau2_ms: Option<f64>,
            bandwidth_khz: Option<f64>,
            noise_dbm_per_hz: Option<f64>,
        }
        #[derive(Deserialize)]
        struct Raw {
            base_seed: Option<u64>,
            realizations: Option<usize>,
            algorithms: Option<String>,
            sweep: RawSweep,
            fixed: Option<RawFixed>,
        }
        let raw: Raw = toml::from_str(text).map_err(|e| SweepError::BadConfig(e.to_string()))?;
        let mut fixed = FixedParams::default();
        if let Some(f) = raw.fixed {
            if let Some(v) = f.num_robots {
                fixed.num_robots = v;
            }
            if let Some(v) = f.num_rbs {
                fixed.num_rbs = v;
            }
            if let Some(v) = f.num_relays {
                fixed.num_relays = v;
            }
            if let Some(v) = f.theta {
                fixed.theta = v;
            }
            if let Some(v) = f.eps_max {
                fixed.eps_max = v;
            }
            if let Some(v) = f.payload_bits {
                fixed.payload_bits = v;
            }
            if let Some(v) = f.radius_m {
                fixed.radius_m = v;
            }
            if let Some(v) = f.tau1_ms {
                fixed.tau1_s = v * 1e-3;
            }
            if let Some(v) = f.tau2_ms {
                fixed.tau2_s = v * 1e-3;
            }
            if let Some(v) = f.bandwidth_khz {
                fixed.bandwidth_hz = v * 1e3;
            }
            if let Some(v) = f.noise_dbm_per_hz {
                fixed.noise_dbm_per_hz = v;
            }
        }
        let spec = SweepSpec {
            parameter: SweepParameter::parse(&raw.sweep.parameter)?,
            values: raw.sweep.values,
            fixed,
            realizations: raw.realizations.unwrap_or(100),
            algorithms: raw
                .algorithms
                .as_deref()
                .map(AlgoSelection::parse)
                .transpose()?
                .unwrap_or(AlgoSelection::Both),
            base_seed: raw.base_seed.unwrap_or(1),
            fixed_layout: None,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Splitmix-style seed derivation; stable across platforms and versions.
/// Realization `j` of swept value `v` uses
/// `mix(base ^ mix(v.to_bits() ^ mix(j)))` with the splitmix64 finalizer.
/// Sweeps pass `v.to_bits()` only for scenario-shaping parameters; values
/// that leave the channel untouched (eps_max, payload) pass 0, so all
/// points of such a curve share channel realizations and their means are
/// directly comparable.
pub fn derive_seed(base_seed: u64, value_bits: u64, realization: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e3779b97f4a7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }
    mix(base_seed ^ mix(value_bits ^ mix(realization)))
}

/// One solver run on one realization.
#[derive(Debug, Clone)]
enum RunOutcome {
    Solved {
        power_w: f64,
        iterations: usize,
        /// Mode per robot: 0 = direct, n = relay n.
        modes: Vec<usize>,
    },
    NotConverged,
    Failed,
}

fn build_instance(
    params: &FixedParams,
    seed: u64,
    fixed_layout: Option<&Scenario>,
) -> Result<ProblemInstance, String> {
    let scenario = match fixed_layout {
        Some(base) => scenario::regenerate_fading(base, seed),
        None => {
            let layout = FactoryLayout {
                radius_m: params.radius_m,
                num_robots: params.num_robots,
                num_relays: params.num_relays,
                num_rbs: params.num_rbs,
                distance_factor: params.theta,
                seed,
            };
            let system = SystemParams {
                bandwidth_hz: params.bandwidth_hz,
                noise_dbm_per_hz: params.noise_dbm_per_hz,
            };
            scenario::generate_scenario(&layout, &system).map_err(|e| e.to_string())?
        }
    };
    ProblemInstance::from_scenario(
        &scenario,
        params.payload_bits,
        params.eps_max,
        params.tau1_s,
        params.tau2_s,
    )
    .map_err(|e| e.to_string())
}

fn run_algo(inst: &ProblemInstance, algo: &str) -> RunOutcome {
    match algo {
        "oracle" => match oracle::assignment_exact(inst) {
            Ok(exact) => RunOutcome::Solved {
                power_w: exact.total_power_w,
                iterations: 0,
                modes: exact.choices.iter().map(|&(_, n)| n).collect(),
            },
            Err(_) => RunOutcome::Failed,
        },
        _ => {
            let cfg = ScaConfig::default();
            let result = match algo {
                "ncp" => sca::solve_ncp(inst, &cfg),
                _ => sca::solve_qp(inst, &cfg),
            };
            match result {
                Ok(report) if report.converged => RunOutcome::Solved {
                    power_w: report.total_power_w.expect("converged report"),
                    iterations: report.iterations_used,
                    modes: report
                        .solution
                        .expect("converged report")
                        .modes()
                        .iter()
                        .map(|m| m.map(|(_, n)| n).unwrap_or(0))
                        .collect(),
                },
                Ok(_) => RunOutcome::NotConverged,
                Err(_) => RunOutcome::Failed,
            }
        }
    }
}

/// Aggregates for one (swept value, algorithm) pair. Means and deviations
/// are over converged runs only; non-converged and failed counts are
/// reported alongside.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub parameter: String,
    pub value: f64,
    pub algorithm: String,
    pub realizations: usize,
    pub converged: usize,
    pub failed: usize,
    pub mean_power_w: f64,
    pub std_power_w: f64,
    pub mean_iterations: f64,
    /// Fraction of robots (over converged runs) per transmission mode:
    /// index 0 is direct, index n is relay n. Sums to 1.
    pub mode_proportions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub parameter: SweepParameter,
    pub cells: Vec<SweepCell>,
    /// Largest relay count across the sweep; fixes the CSV column count.
    pub max_relays: usize,
    pub realizations: usize,
    pub base_seed: u64,
}

impl SweepResult {
    pub fn cell(&self, value: f64, algorithm: &str) -> Option<&SweepCell> {
        self.cells
            .iter()
            .find(|c| c.value == value && c.algorithm == algorithm)
    }
}

/// Runs a sweep: for each (value, realization) generate the scenario with
/// a derived seed, build the instance, run the selected solvers and
/// aggregate. Per-realization failures are counted, never fatal.
pub fn run_sweep(spec: &SweepSpec) -> Result<SweepResult, SweepError> {
    spec.validate()?;
    let algos = spec.algorithms.algos();
    let max_relays = spec
        .values
        .iter()
        .map(|&v| spec.apply(v).num_relays)
        .max()
        .unwrap_or(spec.fixed.num_relays);

    let mut cells = Vec::new();
    for &value in &spec.values {
        let params = spec.apply(value);
        // One pass per realization, all algorithms on the same instance.
        let value_bits = if spec.parameter.affects_scenario() {
            value.to_bits()
        } else {
            0
        };
        let outcomes: Vec<Vec<RunOutcome>> = (0..spec.realizations)
            .into_par_iter()
            .map(|j| {
                let seed = derive_seed(spec.base_seed, value_bits, j as u64);
                match build_instance(&params, seed, spec.fixed_layout.as_ref()) {
                    Ok(inst) => algos.iter().map(|algo| run_algo(&inst, algo)).collect(),
                    Err(_) => algos.iter().map(|_| RunOutcome::Failed).collect(),
                }
            })
            .collect();

        for (ai, algo) in algos.iter().enumerate() {
            let mut powers = Vec::new();
            let mut iterations = Vec::new();
            let mut mode_counts = vec![0usize; max_relays + 1];
            let mut failed = 0usize;
            for row in &outcomes {
                match &row[ai] {
                    RunOutcome::Solved {
                        power_w,
                        iterations: iters,
                        modes,
                    } => {
                        powers.push(*power_w);
                        iterations.push(*iters);
                        for &mode in modes {
                            mode_counts[mode] += 1;
                        }
                    }
                    RunOutcome::NotConverged => {}
                    RunOutcome::Failed => failed += 1,
                }
            }
            let converged = powers.len();
            let mean = if converged > 0 {
                powers.iter().sum::<f64>() / converged as f64
            } else {
                f64::NAN
            };
            let std = if converged > 1 {
                let var = powers.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>()
                    / (converged as f64 - 1.0);
                var.sqrt()
            } else {
                0.0
            };
            let mean_iters = if converged > 0 {
                iterations.iter().sum::<usize>() as f64 / converged as f64
            } else {
                f64::NAN
            };
            let robots_total: usize = mode_counts.iter().sum();
            let mode_proportions = if robots_total > 0 {
                mode_counts
                    .iter()
                    .map(|&c| c as f64 / robots_total as f64)
                    .collect()
            } else {
                vec![0.0; max_relays + 1]
            };
            cells.push(SweepCell {
                parameter: spec.parameter.name().to_string(),
                value,
                algorithm: algo.to_string(),
                realizations: spec.realizations,
                converged,
                failed,
                mean_power_w: mean,
                std_power_w: std,
                mean_iterations: mean_iters,
                mode_proportions,
            });
        }
    }

    Ok(SweepResult {
        parameter: spec.parameter,
        cells,
        max_relays,
        realizations: spec.realizations,
        base_seed: spec.base_seed,
    })
}

/// One paired NCP/QP realization.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub realization: usize,
    pub seed: u64,
    pub ncp_power_w: Option<f64>,
    pub qp_power_w: Option<f64>,
    pub ncp_iterations: Option<usize>,
    pub qp_iterations: Option<usize>,
    /// `|ncp − qp| / qp`, present when both converged.
    pub rel_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
    pub median_rel_gap: Option<f64>,
    pub mean_iterations_ncp: f64,
    pub mean_iterations_qp: f64,
    pub converged_ncp: usize,
    pub converged_qp: usize,
}

/// Runs NCP and QP paired on the spec's fixed parameters, one row per
/// realization. Seeds derive with value bits 0.
pub fn compare_algorithms(spec: &SweepSpec) -> Result<ComparisonTable, SweepError> {
    if spec.algorithms != AlgoSelection::Both {
        return Err(SweepError::BadSpec(
            "comparison requires algorithms = both".into(),
        ));
    }
    if spec.realizations == 0 {
        return Err(SweepError::BadSpec("need at least one realization".into()));
    }
    let rows: Vec<ComparisonRow> = (0..spec.realizations)
        .into_par_iter()
        .map(|j| {
            let seed = derive_seed(spec.base_seed, 0, j as u64);
            let mut row = ComparisonRow {
                realization: j,
                seed,
                ncp_power_w: None,
                qp_power_w: None,
                ncp_iterations: None,
                qp_iterations: None,
                rel_gap: None,
            };
            if let Ok(inst) = build_instance(&spec.fixed, seed, None) {
                if let RunOutcome::Solved {
                    power_w,
                    iterations,
                    ..
                } = run_algo(&inst, "ncp")
                {
                    row.ncp_power_w = Some(power_w);
                    row.ncp_iterations = Some(iterations);
                }
                if let RunOutcome::Solved {
                    power_w,
                    iterations,
                    ..
                } = run_algo(&inst, "qp")
                {
                    row.qp_power_w = Some(power_w);
                    row.qp_iterations = Some(iterations);
                }
                if let (Some(a), Some(b)) = (row.ncp_power_w, row.qp_power_w) {
                    row.rel_gap = Some((a - b).abs() / b);
                }
            }
            row
        })
        .collect();

    let mut gaps: Vec<f64> = rows.iter().filter_map(|r| r.rel_gap).collect();
    gaps.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median_rel_gap = if gaps.is_empty() {
        None
    } else {
        Some(gaps[gaps.len() / 2])
    };
    let ncp_iters: Vec<usize> = rows.iter().filter_map(|r| r.ncp_iterations).collect();
    let qp_iters: Vec<usize> = rows.iter().filter_map(|r| r.qp_iterations).collect();
    let mean = |v: &[usize]| {
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<usize>() as f64 / v.len() as f64
        }
    };
    Ok(ComparisonTable {
        median_rel_gap,
        mean_iterations_ncp: mean(&ncp_iters),
        mean_iterations_qp: mean(&qp_iters),
        converged_ncp: ncp_iters.len(),
        converged_qp: qp_iters.len(),
        rows,
    })
}

/// CSV emission: one row per (swept value, algorithm), deterministic
/// column order, relay-proportion columns padded to the sweep's maximum.
pub fn emit_csv(result: &SweepResult, out: &mut dyn Write) -> Result<(), SweepError> {
    let mut header = String::from(
        "parameter,value,algorithm,realizations,converged,failed,mean_power_w,std_power_w,mean_iterations,prop_direct",
    );
    for n in 1..=result.max_relays {
        header.push_str(&format!(",prop_relay{n}"));
    }
    writeln!(out, "{header}")?;
    for cell in &result.cells {
        let mut line = format!(
            "{},{},{},{},{},{},{},{},{}",
            cell.parameter,
            cell.value,
            cell.algorithm,
            cell.realizations,
            cell.converged,
            cell.failed,
            cell.mean_power_w,
            cell.std_power_w,
            cell.mean_iterations,
        );
        for n in 0..=result.max_relays {
            let p = cell.mode_proportions.get(n).copied().unwrap_or(0.0);
            line.push_str(&format!(",{p}"));
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Parses a CSV written by [`emit_csv`] back into cells.
pub fn read_csv(text: &str) -> Result<Vec<SweepCell>, SweepError> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| SweepError::BadConfig(e.to_string()))?
        .clone();
    let relay_cols = headers
        .iter()
        .filter(|h| h.starts_with("prop_relay"))
        .count();
    let mut cells = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| SweepError::BadConfig(e.to_string()))?;
        let get = |i: usize| -> &str { record.get(i).unwrap_or("") };
        let parse_f = |i: usize| -> Result<f64, SweepError> {
            get(i)
                .parse()
                .map_err(|_| SweepError::BadConfig(format!("bad float {:?}", get(i))))
        };
        let parse_u = |i: usize| -> Result<usize, SweepError> {
            get(i)
                .parse()
                .map_err(|_| SweepError::BadConfig(format!("bad count {:?}", get(i))))
        };
        let mut proportions = Vec::with_capacity(relay_cols + 1);
        for c in 0..=relay_cols {
            proportions.push(parse_f(9 + c)?);
        }
        cells.push(SweepCell {
            parameter: get(0).to_string(),
            value: parse_f(1)?,
            algorithm: get(2).to_string(),
            realizations: parse_u(3)?,
            converged: parse_u(4)?,
            failed: parse_u(5)?,
            mean_power_w: parse_f(6)?,
            std_power_w: parse_f(7)?,
            mean_iterations: parse_f(8)?,
            mode_proportions: proportions,
        });
    }
    Ok(cells)
}

/// Per-realization comparison CSV.
pub fn emit_comparison_csv(
    table: &ComparisonTable,
    out: &mut dyn Write,
) -> Result<(), SweepError> {
    writeln!(
        out,
        "realization,seed,ncp_power_w,qp_power_w,ncp_iterations,qp_iterations,rel_gap"
    )?;
    let fmt_f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let fmt_u = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
    for row in &table.rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            row.realization,
            row.seed,
            fmt_f(row.ncp_power_w),
            fmt_f(row.qp_power_w),
            fmt_u(row.ncp_iterations),
            fmt_u(row.qp_iterations),
            fmt_f(row.rel_gap),
        )?;
    }
    Ok(())
}

fn watts_to_dbm(w: f64) -> f64 {
    10.0 * w.log10() + 30.0
}

/// Human-readable summary: means ± deviations in watts and dBm, mode
/// proportions and convergence statistics.
pub fn emit_summary(result: &SweepResult, out: &mut dyn Write) -> Result<(), SweepError> {
    writeln!(
        out,
        "sweep over {} ({} realizations per value, base seed {})",
        result.parameter.name(),
        result.realizations,
        result.base_seed
    )?;
    for cell in &result.cells {
        let prop: Vec<String> = cell
            .mode_proportions
            .iter()
            .enumerate()
            .map(|(n, p)| {
                if n == 0 {
                    format!("direct {:.1}%", p * 100.0)
                } else {
                    format!("relay{} {:.1}%", n, p * 100.0)
                }
            })
            .collect();
        writeln!(
            out,
            "  {}={:<8} {:<6} mean {:.6} W ({:.2} dBm) ± {:.6} W, iters {:.1}, converged {}/{} (failed {}), modes: {}",
            cell.parameter,
            cell.value,
            cell.algorithm,
            cell.mean_power_w,
            watts_to_dbm(cell.mean_power_w),
            cell.std_power_w,
            cell.mean_iterations,
            cell.converged,
            cell.realizations,
            cell.failed,
            prop.join(" "),
        )?;
    }
    Ok(())
}

/// Comparison summary: median gap, convergence and mean iteration counts.
pub fn emit_comparison_summary(
    table: &ComparisonTable,
    out: &mut dyn Write,
) -> Result<(), SweepError> {
    writeln!(
        out,
        "paired NCP/QP comparison over {} realizations",
        table.rows.len()
    )?;
    match table.median_rel_gap {
        Some(gap) => writeln!(
            out,
            "  median relative power gap |ncp-qp|/qp: {:.4}%",
            gap * 100.0
        )?,
        None => writeln!(out, "  no realization converged under both algorithms")?,
    }
    writeln!(
        out,
        "  ncp: {}/{} converged, mean {:.1} iterations",
        table.converged_ncp,
        table.rows.len(),
        table.mean_iterations_ncp
    )?;
    writeln!(
        out,
        "  qp:  {}/{} converged, mean {:.1} iterations",
        table.converged_qp,
        table.rows.len(),
        table.mean_iterations_qp
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro_spec() -> SweepSpec {
        SweepSpec {
            parameter: SweepParameter::Robots,
            values: vec![1.0, 2.0],
            fixed: FixedParams {
                num_rbs: 3,
                num_relays: 1,
                payload_bits: 600.0,
                ..FixedParams::default()
            },
            realizations: 2,
            algorithms: AlgoSelection::Both,
            base_seed: 7,
            fixed_layout: None,
        }
    }

    #[test]
    fn validation_rejects_bad_specs() {
        let mut spec = micro_spec();
        spec.values.clear();
        assert!(spec.validate().is_err());

        let mut spec = micro_spec();
        spec.parameter = SweepParameter::Theta;
        spec.values = vec![0.3, 0.5];
        spec.fixed.num_relays = 0;
        assert!(spec.validate().is_err());

        let mut spec = micro_spec();
        spec.values = vec![5.0]; // 5 robots on 3 RBs
        assert!(spec.validate().is_err());

        let mut spec = micro_spec();
        spec.parameter = SweepParameter::EpsMax;
        spec.values = vec![2.0];
        assert!(spec.validate().is_err());
    }

    /// derive_seed(1, 0, 0), computed once from the documented recipe.
    const FROZEN_SEED_1_0_0: u64 = 0x2f32a78496c67c60;

    #[test]
    fn seed_derivation_is_stable_and_spread() {
        let a = derive_seed(42, 2.0f64.to_bits(), 0);
        assert_eq!(a, derive_seed(42, 2.0f64.to_bits(), 0));
        // Frozen reference pins the documented recipe across versions.
        assert_eq!(derive_seed(1, 0, 0), FROZEN_SEED_1_0_0);
        assert_ne!(a, derive_seed(42, 2.0f64.to_bits(), 1));
        assert_ne!(a, derive_seed(43, 2.0f64.to_bits(), 0));
        assert_ne!(a, derive_seed(42, 4.0f64.to_bits(), 0));
    }

    #[test]
    fn micro_sweep_aggregates_and_round_trips() {
        let spec = micro_spec();
        let result = run_sweep(&spec).unwrap();
        // 2 values × 2 algorithms.
        assert_eq!(result.cells.len(), 4);
        for cell in &result.cells {
            assert_eq!(cell.realizations, 2);
            assert!(cell.converged > 0, "cell {cell:?}");
            let sum: f64 = cell.mode_proportions.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "proportions sum {sum}");
            assert!(cell.mean_power_w > 0.0);
        }

        let mut buf = Vec::new();
        emit_csv(&result, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let parsed = read_csv(&text).unwrap();
        assert_eq!(parsed, result.cells);
    }

    #[test]
    fn sweeps_reproduce_identical_bytes() {
        let spec = micro_spec();
        let mut a = Vec::new();
        emit_csv(&run_sweep(&spec).unwrap(), &mut a).unwrap();
        let mut b = Vec::new();
        emit_csv(&run_sweep(&spec).unwrap(), &mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn oracle_selection_runs() {
        let mut spec = micro_spec();
        spec.algorithms = AlgoSelection::Oracle;
        let result = run_sweep(&spec).unwrap();
        assert_eq!(result.cells.len(), 2);
        for cell in &result.cells {
            assert_eq!(cell.algorithm, "oracle");
            assert_eq!(cell.converged, 2);
            assert_eq!(cell.mean_iterations, 0.0);
        }
    }

    #[test]
    fn empty_result_gives_header_only_csv() {
        let result = SweepResult {
            parameter: SweepParameter::Robots,
            cells: vec![],
            max_relays: 2,
            realizations: 0,
            base_seed: 0,
        };
        let mut buf = Vec::new();
        emit_csv(&result, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("parameter,value,algorithm"));
    }

    #[test]
    fn comparison_produces_paired_rows() {
        let spec = SweepSpec {
            parameter: SweepParameter::Robots,
            values: vec![2.0],
            fixed: FixedParams {
                num_robots: 2,
                num_rbs: 3,
                num_relays: 1,
                payload_bits: 600.0,
                ..FixedParams::default()
            },
            realizations: 3,
            algorithms: AlgoSelection::Both,
            base_seed: 11,
            fixed_layout: None,
        };
        let table = compare_algorithms(&spec).unwrap();
        assert_eq!(table.rows.len(), 3);
        assert!(table.median_rel_gap.is_some());
        assert!(table.converged_ncp > 0 && table.converged_qp > 0);
        let mut buf = Vec::new();
        emit_comparison_csv(&table, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 4);
        let mut buf = Vec::new();
        emit_comparison_summary(&table, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().contains("median"));
    }

    #[test]
    fn toml_config_parses_with_defaults() {
        let text = r#"
            base_seed = 9
            realizations = 5
            algorithms = "qp"

            [sweep]
            parameter = "eps_max"
            values = [1e-7, 1e-5]

            [fixed]
            num_robots = 2
            num_rbs = 4
            num_relays = 1
            payload_bits = 800.0
        "#;
        let spec = SweepSpec::from_toml_str(text).unwrap();
        assert_eq!(spec.parameter, SweepParameter::EpsMax);
        assert_eq!(spec.realizations, 5);
        assert_eq!(spec.algorithms, AlgoSelection::Qp);
        assert_eq!(spec.fixed.num_robots, 2);
        assert_eq!(spec.fixed.bandwidth_hz, 360e3); // default retained
        assert!(SweepSpec::from_toml_str("nonsense = [").is_err());
    }

    #[test]
    fn fixed_layout_restricted_to_fading_sweeps() {
        use crate::scenario::{generate_scenario, FactoryLayout, SystemParams};
        let layout = FactoryLayout {
            radius_m: 300.0,
            num_robots: 2,
            num_relays: 1,
            num_rbs: 3,
            distance_factor: 0.5,
            seed: 3,
        };
        let stored = generate_scenario(&layout, &SystemParams::default()).unwrap();
        let mut spec = micro_spec();
        spec.fixed.num_robots = 2;
        spec.fixed_layout = Some(stored.clone());
        // Robots sweep with a fixed layout is contradictory.
        assert!(spec.validate().is_err());

        let spec = SweepSpec {
            parameter: SweepParameter::EpsMax,
            values: vec![1e-5, 1e-3],
            fixed: FixedParams {
                num_robots: 2,
                num_rbs: 3,
                num_relays: 1,
                payload_bits: 600.0,
                ..FixedParams::default()
            },
            realizations: 2,
            algorithms: AlgoSelection::Qp,
            base_seed: 5,
            fixed_layout: Some(stored),
        };
        let result = run_sweep(&spec).unwrap();
        assert_eq!(result.cells.len(), 2);
        for cell in &result.cells {
            assert!(cell.converged > 0);
        }
    }
}
