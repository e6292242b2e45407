//! Random factory scenarios: node placement, Rayleigh fading, path loss,
//! and the conversion to normalized channel gains.
//!
//! The controller sits at the origin of a disk of radius `r`. Relays are
//! pinned on the inner circle of radius `θ·r` at uniform angular spacing;
//! robots are drawn uniformly over the disk area. Every (link, RB) pair
//! gets one independent complex Gaussian fading draw, and the linear gain
//! folds fading, path loss and per-RB noise power into a single 1/W value,
//! so `gain * power` is directly the receive SNR.
//!
//! Generation is bitwise deterministic in `(layout, system)`: the ChaCha
//! stream and the draw order below are part of the file contract.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Current scenario file schema. Bump on any incompatible change.
pub const SCHEMA_VERSION: u32 = 1;

/// Path-loss model `35.3 + 37.6·log10(d)` dB at distance `d` meters.
pub fn path_loss_db(distance_m: f64) -> f64 {
    35.3 + 37.6 * distance_m.log10()
}

/// Robots closer than this to the controller or a relay are re-sampled;
/// the path-loss model is not meant for sub-meter distances.
const MIN_SEPARATION_M: f64 = 1.0;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error("invalid system parameters: {0}")]
    InvalidSystem(String),
    #[error("could not place robot {robot} after {attempts} attempts")]
    PlacementFailed { robot: usize, attempts: usize },
    #[error("scenario file was written by schema v{found}, this build reads up to v{supported}")]
    SchemaVersion { found: u32, supported: u32 },
    #[error("malformed scenario file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Factory geometry and dimensioning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactoryLayout {
    /// Cell radius in meters.
    pub radius_m: f64,
    /// Number of robots K.
    pub num_robots: usize,
    /// Number of relays N (may be zero).
    pub num_relays: usize,
    /// Number of resource blocks M; must be at least K.
    pub num_rbs: usize,
    /// Relay circle radius as a fraction θ of the cell radius, in (0,1).
    pub distance_factor: f64,
    /// RNG seed for placement and fading.
    pub seed: u64,
}

impl FactoryLayout {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if !(self.radius_m > 0.0) {
            return Err(ScenarioError::InvalidLayout(format!(
                "radius must be positive, got {}",
                self.radius_m
            )));
        }
        if self.num_robots == 0 {
            return Err(ScenarioError::InvalidLayout(
                "need at least one robot".into(),
            ));
        }
        if self.num_rbs < self.num_robots {
            return Err(ScenarioError::InvalidLayout(format!(
                "num_rbs = {} < num_robots = {}: one-RB-per-robot assignment is infeasible",
                self.num_rbs, self.num_robots
            )));
        }
        if !(self.distance_factor > 0.0 && self.distance_factor < 1.0) {
            return Err(ScenarioError::InvalidLayout(format!(
                "distance factor must lie in (0,1), got {}",
                self.distance_factor
            )));
        }
        Ok(())
    }
}

/// Bandwidth and noise floor shared by all RBs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    /// Bandwidth of one RB in Hz.
    pub bandwidth_hz: f64,
    /// Noise power spectral density in dBm/Hz.
    pub noise_dbm_per_hz: f64,
}

impl Default for SystemParams {
    fn default() -> Self {
        SystemParams {
            bandwidth_hz: 360e3,
            noise_dbm_per_hz: -174.0,
        }
    }
}

impl SystemParams {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if !(self.bandwidth_hz > 0.0) {
            return Err(ScenarioError::InvalidSystem(format!(
                "bandwidth must be positive, got {}",
                self.bandwidth_hz
            )));
        }
        if !self.noise_dbm_per_hz.is_finite() {
            return Err(ScenarioError::InvalidSystem(
                "noise density must be finite".into(),
            ));
        }
        Ok(())
    }

    /// Per-RB noise power `N0·W` in watts.
    pub fn noise_power_w(&self) -> f64 {
        10f64.powf((self.noise_dbm_per_hz - 30.0) / 10.0) * self.bandwidth_hz
    }
}

/// A fully drawn factory: positions plus normalized channel gains for all
/// robot→controller, robot→relay and relay→controller links on every RB.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub schema_version: u32,
    pub layout: FactoryLayout,
    pub system: SystemParams,
    /// Robot positions, meters, controller at the origin.
    pub robot_positions: Vec<[f64; 2]>,
    /// Relay positions, meters, on the circle of radius θ·r.
    pub relay_positions: Vec<[f64; 2]>,
    /// K×M normalized gains robot→controller, 1/W.
    pub gains_direct: Array2<f64>,
    /// K×N×M normalized gains robot→relay, 1/W.
    pub gains_hop1: Array3<f64>,
    /// N×M normalized gains relay→controller, 1/W.
    pub gains_hop2: Array2<f64>,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Uniform f64 in [0,1) from the raw ChaCha stream; fixed bit recipe so the
/// draw sequence never depends on library internals.
fn unit(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Squared magnitude of one circularly-symmetric complex Gaussian draw with
/// unit variance. The phase is drawn too (and discarded) so the stream
/// layout matches one complex coefficient per (link, RB).
fn fading_mag2(rng: &mut ChaCha8Rng) -> f64 {
    let u = unit(rng);
    let _phase = 2.0 * PI * unit(rng);
    // |h|² of CN(0,1) is Exp(1); inversion sampling of the magnitude.
    -(1.0 - u).ln()
}

fn linear_gain(distance_m: f64, mag2: f64, noise_w: f64) -> f64 {
    mag2 * 10f64.powf(-path_loss_db(distance_m) / 10.0) / noise_w
}

/// Draws a scenario: robot placement, relay geometry, one fading draw per
/// (link, RB), and the fold into normalized gains.
///
/// Draw order (part of the determinism contract): robot positions in robot
/// order, then direct fading (k-major, then m), hop-1 fading (k, n, m),
/// hop-2 fading (n, m).
pub fn generate_scenario(
    layout: &FactoryLayout,
    system: &SystemParams,
) -> Result<Scenario, ScenarioError> {
    layout.validate()?;
    system.validate()?;
    let (k_count, n_count, m_count) = (layout.num_robots, layout.num_relays, layout.num_rbs);
    let mut rng = ChaCha8Rng::seed_from_u64(layout.seed);

    let relay_radius = layout.distance_factor * layout.radius_m;
    let relay_positions: Vec<[f64; 2]> = (1..=n_count)
        .map(|n| {
            let angle = 2.0 * PI * n as f64 / n_count as f64;
            [relay_radius * angle.cos(), relay_radius * angle.sin()]
        })
        .collect();

    let mut robot_positions = Vec::with_capacity(k_count);
    for k in 0..k_count {
        let mut placed = None;
        let max_attempts = 1000;
        for _ in 0..max_attempts {
            let radius = layout.radius_m * unit(&mut rng).sqrt();
            let angle = 2.0 * PI * unit(&mut rng);
            let pos = [radius * angle.cos(), radius * angle.sin()];
            let clear_of_controller = dist(pos, [0.0, 0.0]) >= MIN_SEPARATION_M;
            let clear_of_relays = relay_positions
                .iter()
                .all(|&rp| dist(pos, rp) >= MIN_SEPARATION_M);
            if clear_of_controller && clear_of_relays {
                placed = Some(pos);
                break;
            }
        }
        robot_positions.push(placed.ok_or(ScenarioError::PlacementFailed {
            robot: k,
            attempts: max_attempts,
        })?);
    }

    let noise_w = system.noise_power_w();
    let mut gains_direct = Array2::zeros((k_count, m_count));
    for k in 0..k_count {
        let d = dist(robot_positions[k], [0.0, 0.0]);
        for m in 0..m_count {
            gains_direct[[k, m]] = linear_gain(d, fading_mag2(&mut rng), noise_w);
        }
    }
    let mut gains_hop1 = Array3::zeros((k_count, n_count, m_count));
    for k in 0..k_count {
        for n in 0..n_count {
            let d = dist(robot_positions[k], relay_positions[n]);
            for m in 0..m_count {
                gains_hop1[[k, n, m]] = linear_gain(d, fading_mag2(&mut rng), noise_w);
            }
        }
    }
    let mut gains_hop2 = Array2::zeros((n_count, m_count));
    for n in 0..n_count {
        let d = dist(relay_positions[n], [0.0, 0.0]);
        for m in 0..m_count {
            gains_hop2[[n, m]] = linear_gain(d, fading_mag2(&mut rng), noise_w);
        }
    }

    Ok(Scenario {
        schema_version: SCHEMA_VERSION,
        layout: *layout,
        system: *system,
        robot_positions,
        relay_positions,
        gains_direct,
        gains_hop1,
        gains_hop2,
    })
}

/// Keeps the stored geometry but redraws all fading with a new seed. Used
/// by fixed-layout sweeps that average over channel realizations only.
pub fn regenerate_fading(base: &Scenario, seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise_w = base.system.noise_power_w();
    let (k_count, n_count, m_count) = (
        base.layout.num_robots,
        base.layout.num_relays,
        base.layout.num_rbs,
    );

    let mut out = base.clone();
    out.layout.seed = seed;
    for k in 0..k_count {
        let d = dist(base.robot_positions[k], [0.0, 0.0]);
        for m in 0..m_count {
            out.gains_direct[[k, m]] = linear_gain(d, fading_mag2(&mut rng), noise_w);
        }
    }
    for k in 0..k_count {
        for n in 0..n_count {
            let d = dist(base.robot_positions[k], base.relay_positions[n]);
            for m in 0..m_count {
                out.gains_hop1[[k, n, m]] = linear_gain(d, fading_mag2(&mut rng), noise_w);
            }
        }
    }
    for n in 0..n_count {
        let d = dist(base.relay_positions[n], [0.0, 0.0]);
        for m in 0..m_count {
            out.gains_hop2[[n, m]] = linear_gain(d, fading_mag2(&mut rng), noise_w);
        }
    }
    out
}

impl Scenario {
    /// Structural validation: dimensions, gain positivity, relay geometry.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.layout.validate()?;
        self.system.validate()?;
        let (k_count, n_count, m_count) = (
            self.layout.num_robots,
            self.layout.num_relays,
            self.layout.num_rbs,
        );
        if self.robot_positions.len() != k_count
            || self.relay_positions.len() != n_count
            || self.gains_direct.dim() != (k_count, m_count)
            || self.gains_hop1.dim() != (k_count, n_count, m_count)
            || self.gains_hop2.dim() != (n_count, m_count)
        {
            return Err(ScenarioError::Malformed(
                "field dimensions disagree with layout".into(),
            ));
        }
        let all_positive = self.gains_direct.iter().all(|&g| g > 0.0 && g.is_finite())
            && self.gains_hop1.iter().all(|&g| g > 0.0 && g.is_finite())
            && self.gains_hop2.iter().all(|&g| g > 0.0 && g.is_finite());
        if !all_positive {
            return Err(ScenarioError::Malformed(
                "gains must be strictly positive and finite".into(),
            ));
        }
        let relay_radius = self.layout.distance_factor * self.layout.radius_m;
        for (n, &pos) in self.relay_positions.iter().enumerate() {
            let r = dist(pos, [0.0, 0.0]);
            if ((r - relay_radius) / relay_radius).abs() > 1e-9 {
                return Err(ScenarioError::Malformed(format!(
                    "relay {n} sits at radius {r}, expected {relay_radius}"
                )));
            }
        }
        Ok(())
    }
}

const FILE_HEADER: &str = "\
# relayopt scenario file
# positions: meters, controller at the origin
# gains: linear 1/W, fading x path-loss / (N0*W per-RB noise power)
# bandwidth_hz: Hz; noise_dbm_per_hz: dBm/Hz; radius_m: meters
# body: one JSON document; lines starting with '#' are ignored on load
";

/// Writes a scenario as a commented, versioned structured-text file.
pub fn save_scenario(scenario: &Scenario, path: &Path) -> Result<(), ScenarioError> {
    let mut file = fs::File::create(path)?;
    file.write_all(FILE_HEADER.as_bytes())?;
    let body = serde_json::to_string_pretty(scenario)
        .map_err(|e| ScenarioError::Malformed(e.to_string()))?;
    file.write_all(body.as_bytes())?;
    file.write_all(b"\n")?;
    Ok(())
}

/// Loads and validates a scenario file written by [`save_scenario`].
pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = fs::read_to_string(path)?;
    let body: String = text
        .lines()
        .filter(|line| !line.trim_start().starts_with('#'))
        .collect::<Vec<_>>()
        .join("\n");

    // Peek at the version before strict decoding so newer files produce a
    // versioned error instead of a parse error.
    #[derive(Deserialize)]
    struct VersionProbe {
        schema_version: u32,
    }
    let probe: VersionProbe = serde_json::from_str(&body)
        .map_err(|e| ScenarioError::Malformed(format!("not a scenario file: {e}")))?;
    if probe.schema_version > SCHEMA_VERSION {
        return Err(ScenarioError::SchemaVersion {
            found: probe.schema_version,
            supported: SCHEMA_VERSION,
        });
    }

    let scenario: Scenario =
        serde_json::from_str(&body).map_err(|e| ScenarioError::Malformed(e.to_string()))?;
    scenario.validate()?;
    Ok(scenario)
}
