//! Experiment CLI: scenario generation, single-instance solves, exact
//! baselines, parameter sweeps and paired NCP/QP comparisons.

use std::fs;
use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use relayopt::model::{self, ProblemInstance};
use relayopt::oracle;
use relayopt::sca::{self, Algorithm, ScaConfig};
use relayopt::scenario::{self, FactoryLayout, SystemParams};
use relayopt::sweep::{self, AlgoSelection, FixedParams, SweepSpec};

#[derive(Parser)]
#[command(
    name = "relayopt",
    about = "Energy-minimal relay selection, RB assignment and power allocation for short-packet uplink",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random factory scenario file.
    Generate(GenerateArgs),
    /// Solve one instance with a penalty-SCA algorithm.
    Solve(SolveArgs),
    /// Exact baseline for one instance.
    Oracle(OracleArgs),
    /// Run a parameter sweep from a TOML config.
    Sweep(SweepArgs),
    /// Paired NCP/QP comparison over channel realizations.
    Compare(CompareArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 4)]
    robots: usize,
    #[arg(long, default_value_t = 4)]
    relays: usize,
    #[arg(long, default_value_t = 10)]
    rbs: usize,
    #[arg(long, default_value_t = 300.0)]
    radius_m: f64,
    /// Relay circle radius as a fraction of the cell radius.
    #[arg(long, default_value_t = 0.5)]
    theta: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 360.0)]
    bandwidth_khz: f64,
    #[arg(long, default_value_t = -174.0)]
    noise_dbm_hz: f64,
    /// Output scenario file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InstanceArgs {
    /// Scenario file written by `generate`.
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, default_value_t = 1000.0)]
    payload_bits: f64,
    #[arg(long, default_value_t = 1e-5)]
    eps_max: f64,
    #[arg(long, default_value_t = 0.5)]
    tau1_ms: f64,
    #[arg(long, default_value_t = 0.5)]
    tau2_ms: f64,
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    instance: InstanceArgs,
    /// Algorithm: ncp or qp.
    #[arg(long, default_value = "qp")]
    algo: String,
    /// Write the solution dump here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the iteration trace CSV here.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    max_iters: usize,
}

#[derive(Args)]
struct OracleArgs {
    #[command(flatten)]
    instance: InstanceArgs,
    /// enumerate, assignment, or auto (assignment, cross-checked by
    /// enumeration when small enough).
    #[arg(long, default_value = "auto")]
    method: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Sweep config in TOML form.
    #[arg(long)]
    config: PathBuf,
    /// Output CSV; summary prints to stdout either way.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the config's realization count.
    #[arg(long)]
    realizations: Option<usize>,
    /// Override the config's base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's algorithm selection.
    #[arg(long)]
    algo: Option<String>,
    /// Replay a stored scenario, redrawing only the fading per
    /// realization.
    #[arg(long)]
    fixed_layout: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long, default_value_t = 4)]
    robots: usize,
    #[arg(long, default_value_t = 4)]
    relays: usize,
    #[arg(long, default_value_t = 10)]
    rbs: usize,
    #[arg(long, default_value_t = 0.5)]
    theta: f64,
    #[arg(long, default_value_t = 1e-5)]
    eps_max: f64,
    #[arg(long, default_value_t = 1000.0)]
    payload_bits: f64,
    #[arg(long, default_value_t = 100)]
    realizations: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Per-realization CSV output.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Generate(args) => generate(args),
        Command::Solve(args) => solve(args),
        Command::Oracle(args) => oracle_cmd(args),
        Command::Sweep(args) => sweep_cmd(args),
        Command::Compare(args) => compare(args),
    }
}

fn generate(args: GenerateArgs) -> Result<()> {
    let layout = FactoryLayout {
        radius_m: args.radius_m,
        num_robots: args.robots,
        num_relays: args.relays,
        num_rbs: args.rbs,
        distance_factor: args.theta,
        seed: args.seed,
    };
    let system = SystemParams {
        bandwidth_hz: args.bandwidth_khz * 1e3,
        noise_dbm_per_hz: args.noise_dbm_hz,
    };
    let s = scenario::generate_scenario(&layout, &system)?;
    scenario::save_scenario(&s, &args.out)?;
    println!(
        "wrote scenario: {} robots, {} relays, {} RBs, seed {} -> {}",
        args.robots,
        args.relays,
        args.rbs,
        args.seed,
        args.out.display()
    );
    Ok(())
}

fn load_instance(args: &InstanceArgs) -> Result<ProblemInstance> {
    let s = scenario::load_scenario(&args.scenario)
        .with_context(|| format!("loading {}", args.scenario.display()))?;
    Ok(ProblemInstance::from_scenario(
        &s,
        args.payload_bits,
        args.eps_max,
        args.tau1_ms * 1e-3,
        args.tau2_ms * 1e-3,
    )?)
}

fn solve(args: SolveArgs) -> Result<()> {
    let inst = load_instance(&args.instance)?;
    let algorithm = match args.algo.to_ascii_lowercase().as_str() {
        "ncp" => Algorithm::Ncp,
        "qp" => Algorithm::Qp,
        other => bail!("unknown algorithm {other:?}; expected ncp or qp"),
    };
    let cfg = ScaConfig {
        max_outer_iters: args.max_iters,
        ..ScaConfig::default()
    };
    let report = match algorithm {
        Algorithm::Ncp => sca::solve_ncp(&inst, &cfg)?,
        Algorithm::Qp => sca::solve_qp(&inst, &cfg)?,
    };

    println!(
        "{} on {} robots / {} relays / {} RBs:",
        algorithm, inst.num_robots, inst.num_relays, inst.num_rbs
    );
    println!(
        "  converged: {} in {} outer iterations ({:.1} ms)",
        report.converged,
        report.iterations_used,
        report.wall_time.as_secs_f64() * 1e3
    );
    for (i, rec) in report.iterations.iter().enumerate() {
        println!(
            "  iter {:2}: p_tot {:.6} W, penalty {:.3e}, factor {:.3e}",
            i + 1,
            rec.total_power_w,
            rec.penalty_value,
            rec.penalty_factor
        );
    }
    if let Some(trace_path) = &args.trace {
        let mut file = fs::File::create(trace_path)?;
        sca::write_trace_csv(&report, &mut file)?;
        println!("  trace -> {}", trace_path.display());
    }
    if report.converged {
        let total = report.total_power_w.expect("converged");
        println!(
            "  total power: {:.6} W ({:.2} dBm), min active SNR {:.2} dB",
            total,
            10.0 * total.log10() + 30.0,
            10.0 * report.min_active_snr.unwrap_or(f64::NAN).log10()
        );
        let solution = report.solution.as_ref().expect("converged");
        for (k, mode) in solution.modes().iter().enumerate() {
            match mode {
                Some((m, 0)) => println!("  robot {k}: direct on RB {m}"),
                Some((m, n)) => println!("  robot {k}: relay {n} on RB {m}"),
                None => println!("  robot {k}: unassigned"),
            }
        }
        if let Some(out) = &args.out {
            let mut file = fs::File::create(out)?;
            model::write_solution(
                solution,
                report.feasibility.as_ref().expect("converged"),
                report.min_active_snr,
                &mut file,
            )?;
            println!("  solution -> {}", out.display());
        }
    } else {
        println!(
            "  no convergence within {} iterations (binary residual {:.2e}); rerun with a larger --max-iters",
            args.max_iters, report.binary_residual
        );
    }
    Ok(())
}

fn oracle_cmd(args: OracleArgs) -> Result<()> {
    let inst = load_instance(&args.instance)?;
    let exact = match args.method.to_ascii_lowercase().as_str() {
        "enumerate" => oracle::enumerate_exact(&inst)?,
        "assignment" => oracle::assignment_exact(&inst)?,
        "auto" => {
            let assignment = oracle::assignment_exact(&inst)?;
            if let Ok(enumerated) = oracle::enumerate_exact(&inst) {
                let gap = (enumerated.total_power_w - assignment.total_power_w).abs();
                if gap > 1e-9 * assignment.total_power_w {
                    bail!(
                        "oracle disagreement: enumeration {} W vs assignment {} W",
                        enumerated.total_power_w,
                        assignment.total_power_w
                    );
                }
            }
            assignment
        }
        other => bail!("unknown method {other:?}"),
    };
    println!(
        "exact optimum ({:?}): {:.6} W ({:.2} dBm)",
        exact.method,
        exact.total_power_w,
        10.0 * exact.total_power_w.log10() + 30.0
    );
    for (k, &(m, n)) in exact.choices.iter().enumerate() {
        if n == 0 {
            println!("  robot {k}: direct on RB {m}");
        } else {
            println!("  robot {k}: relay {n} on RB {m}");
        }
    }
    if let Some(out) = &args.out {
        let solution = exact.to_solution(&inst)?;
        let report = model::check_feasibility(&inst, &solution, model::DEFAULT_FEASIBILITY_TOL)?;
        let mut file = fs::File::create(out)?;
        model::write_solution(
            &solution,
            &report,
            solution.min_active_snr(&inst),
            &mut file,
        )?;
        println!("  solution -> {}", out.display());
    }
    Ok(())
}

fn sweep_cmd(args: SweepArgs) -> Result<()> {
    let text = fs::read_to_string(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    let mut spec = SweepSpec::from_toml_str(&text)?;
    if let Some(r) = args.realizations {
        spec.realizations = r;
    }
    if let Some(s) = args.seed {
        spec.base_seed = s;
    }
    if let Some(algo) = &args.algo {
        spec.algorithms = AlgoSelection::parse(algo)?;
    }
    if let Some(path) = &args.fixed_layout {
        spec.fixed_layout = Some(scenario::load_scenario(path)?);
    }
    spec.validate()?;

    let result = sweep::run_sweep(&spec)?;
    let mut stdout = std::io::stdout();
    sweep::emit_summary(&result, &mut stdout)?;
    stdout.flush()?;
    if let Some(out) = &args.out {
        let mut file = fs::File::create(out)?;
        sweep::emit_csv(&result, &mut file)?;
        println!("csv -> {}", out.display());
    }
    Ok(())
}

fn compare(args: CompareArgs) -> Result<()> {
    let spec = SweepSpec {
        parameter: sweep::SweepParameter::Robots,
        values: vec![args.robots as f64],
        fixed: FixedParams {
            num_robots: args.robots,
            num_rbs: args.rbs,
            num_relays: args.relays,
            theta: args.theta,
            eps_max: args.eps_max,
            payload_bits: args.payload_bits,
            ..FixedParams::default()
        },
        realizations: args.realizations,
        algorithms: AlgoSelection::Both,
        base_seed: args.seed,
        fixed_layout: None,
    };
    let table = sweep::compare_algorithms(&spec)?;
    let mut stdout = std::io::stdout();
    sweep::emit_comparison_summary(&table, &mut stdout)?;
    stdout.flush()?;
    if let Some(out) = &args.out {
        let mut file = fs::File::create(out)?;
        sweep::emit_comparison_csv(&table, &mut file)?;
        println!("csv -> {}", out.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn generate_solve_oracle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scn = dir.path().join("factory.scn");
        generate(GenerateArgs {
            robots: 2,
            relays: 1,
            rbs: 3,
            radius_m: 300.0,
            theta: 0.5,
            seed: 5,
            bandwidth_khz: 360.0,
            noise_dbm_hz: -174.0,
            out: scn.clone(),
        })
        .unwrap();

        let instance = InstanceArgs {
            scenario: scn.clone(),
            payload_bits: 800.0,
            eps_max: 1e-5,
            tau1_ms: 0.5,
            tau2_ms: 0.5,
        };
        let sol_path = dir.path().join("solution.txt");
        let trace_path = dir.path().join("trace.csv");
        solve(SolveArgs {
            instance,
            algo: "qp".into(),
            out: Some(sol_path.clone()),
            trace: Some(trace_path.clone()),
            max_iters: 50,
        })
        .unwrap();
        assert!(sol_path.exists());
        let trace = fs::read_to_string(&trace_path).unwrap();
        assert!(trace.starts_with("iter,p_tot,penalty_value,penalty_factor"));

        let instance = InstanceArgs {
            scenario: scn,
            payload_bits: 800.0,
            eps_max: 1e-5,
            tau1_ms: 0.5,
            tau2_ms: 0.5,
        };
        oracle_cmd(OracleArgs {
            instance,
            method: "auto".into(),
            out: None,
        })
        .unwrap();
    }

    #[test]
    fn sweep_command_runs_config() {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("sweep.toml");
        fs::write(
            &config,
            r#"
                base_seed = 3
                realizations = 2
                algorithms = "qp"

                [sweep]
                parameter = "b"
                values = [600.0, 800.0]

                [fixed]
                num_robots = 2
                num_rbs = 3
                num_relays = 1
            "#,
        )
        .unwrap();
        let out = dir.path().join("result.csv");
        sweep_cmd(SweepArgs {
            config,
            out: Some(out.clone()),
            realizations: None,
            seed: None,
            algo: None,
            fixed_layout: None,
        })
        .unwrap();
        let text = fs::read_to_string(out).unwrap();
        assert_eq!(text.lines().count(), 3); // header + 2 values x 1 algo
    }

    #[test]
    fn compare_command_writes_rows() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("compare.csv");
        compare(CompareArgs {
            robots: 2,
            relays: 1,
            rbs: 3,
            theta: 0.5,
            eps_max: 1e-5,
            payload_bits: 600.0,
            realizations: 2,
            seed: 2,
            out: Some(out.clone()),
        })
        .unwrap();
        let text = fs::read_to_string(out).unwrap();
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn bad_algorithm_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let scn = dir.path().join("factory.scn");
        generate(GenerateArgs {
            robots: 1,
            relays: 0,
            rbs: 1,
            radius_m: 300.0,
            theta: 0.5,
            seed: 5,
            bandwidth_khz: 360.0,
            noise_dbm_hz: -174.0,
            out: scn.clone(),
        })
        .unwrap();
        let instance = InstanceArgs {
            scenario: scn,
            payload_bits: 800.0,
            eps_max: 1e-5,
            tau1_ms: 0.5,
            tau2_ms: 0.5,
        };
        assert!(solve(SolveArgs {
            instance,
            algo: "magic".into(),
            out: None,
            trace: None,
            max_iters: 50,
        })
        .is_err());
    }
}
