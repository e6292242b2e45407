//! Finite-blocklength rate mathematics.
//!
//! Short packets do not reach Shannon capacity: the achievable number of
//! bits over `τW` symbols carries a dispersion-scaled `Q⁻¹(ε)` backoff.
//! This module provides the exact normal-approximation rate, the `V ≈ 1`
//! lower bound the optimizer works with, its perspective transform, the
//! Gaussian tail inverse and the closed-form power inversion.
//!
//! All functions are pure; rates are in bits, powers in watts, gains in
//! normalized 1/W (so `gain * power` is the receive SNR).

use std::f64::consts::{LN_2, PI};

use thiserror::Error;

/// Below this indicator value the perspective rate is the continuous
/// extension, exactly 0.
pub const PHI_CLAMP: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum FblError {
    #[error("error probability must lie strictly inside (0,1), got {0}")]
    ProbabilityDomain(f64),
    #[error("invalid link budget: {0}")]
    InvalidBudget(String),
    #[error("target of {bits} bits needs exponent {exponent:.2} > 1024; infeasible for this blocklength")]
    PowerOverflow { bits: f64, exponent: f64 },
}

/// Rate parameters of one link: normalized gain, phase duration, RB
/// bandwidth and decoding error probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkBudget {
    gain: f64,
    duration_s: f64,
    bandwidth_hz: f64,
    error_prob: f64,
}

impl LinkBudget {
    pub fn new(
        gain: f64,
        duration_s: f64,
        bandwidth_hz: f64,
        error_prob: f64,
    ) -> Result<Self, FblError> {
        if !(gain > 0.0) || !gain.is_finite() {
            return Err(FblError::InvalidBudget(format!(
                "gain must be positive and finite, got {gain}"
            )));
        }
        if !(duration_s > 0.0) || !(bandwidth_hz > 0.0) {
            return Err(FblError::InvalidBudget(format!(
                "duration {duration_s} s and bandwidth {bandwidth_hz} Hz must be positive"
            )));
        }
        let blocklength = duration_s * bandwidth_hz;
        if blocklength < 1.0 {
            return Err(FblError::InvalidBudget(format!(
                "blocklength τW = {blocklength} is below one symbol"
            )));
        }
        if !(error_prob > 0.0 && error_prob < 1.0) {
            return Err(FblError::ProbabilityDomain(error_prob));
        }
        Ok(Self {
            gain,
            duration_s,
            bandwidth_hz,
            error_prob,
        })
    }

    pub fn gain(&self) -> f64 {
        self.gain
    }

    pub fn duration_s(&self) -> f64 {
        self.duration_s
    }

    pub fn bandwidth_hz(&self) -> f64 {
        self.bandwidth_hz
    }

    pub fn error_prob(&self) -> f64 {
        self.error_prob
    }

    /// Blocklength `τW` in symbols.
    pub fn blocklength(&self) -> f64 {
        self.duration_s * self.bandwidth_hz
    }

    /// Bits subtracted per unit indicator in the V≈1 approximation:
    /// `√(τW)·Q⁻¹(ε)/ln 2`.
    pub fn backoff_bits(&self) -> f64 {
        let q = q_inv(self.error_prob).expect("validated on construction");
        self.blocklength().sqrt() * q / LN_2
    }
}

/// Channel dispersion `V = 1 − (1 + SNR)⁻²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dispersion(f64);

impl Dispersion {
    pub fn from_snr(snr: f64) -> Self {
        assert!(snr >= 0.0, "SNR must be nonnegative, got {snr}");
        let g = 1.0 + snr;
        Dispersion(1.0 - 1.0 / (g * g))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Complementary error function, accurate to a few ulp over the range the
/// rate math visits. Positive-term series below the crossover, Lentz
/// continued fraction above it.
fn erfc(x: f64) -> f64 {
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    if x == 0.0 {
        return 1.0;
    }
    if x > 27.3 {
        // Q(x·√2) underflows f64 below this anyway.
        return 0.0;
    }
    let inv_sqrt_pi = 1.0 / PI.sqrt();
    if x < 2.0 {
        // erf(x) = 2/√π · e^{−x²} · Σ 2ⁿ x^{2n+1} / (2n+1)!!, all terms
        // positive, no cancellation.
        let x2 = x * x;
        let mut term = x;
        let mut sum = x;
        let mut n = 0u32;
        while term > sum * 1e-18 && n < 200 {
            n += 1;
            term *= 2.0 * x2 / (2.0 * n as f64 + 1.0);
            sum += term;
        }
        1.0 - 2.0 * inv_sqrt_pi * (-x2).exp() * sum
    } else {
        // √π e^{x²} erfc(x) = 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))
        // evaluated with the modified Lentz algorithm.
        let tiny = 1e-300;
        let mut f = tiny;
        let mut c = f;
        let mut d = 0.0;
        for j in 1..=200u32 {
            let a = if j == 1 { 1.0 } else { (j as f64 - 1.0) / 2.0 };
            d = x + a * d;
            if d.abs() < tiny {
                d = tiny;
            }
            c = x + a / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = c * d;
            f *= delta;
            if (delta - 1.0).abs() < 1e-17 {
                break;
            }
        }
        inv_sqrt_pi * (-x * x).exp() * f
    }
}

/// Gaussian tail integral `Q(x) = ∫_x^∞ φ(t) dt`.
pub fn gaussian_tail(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

/// Standard normal density.
fn gaussian_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Inverse of the Gaussian tail: the `x` with `Q(x) = eps`.
///
/// Newton iteration on `ln Q(x) − ln ε`, which is concave and monotone, so
/// the iteration converges globally from the asymptotic tail guess.
pub fn q_inv(eps: f64) -> Result<f64, FblError> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(FblError::ProbabilityDomain(eps));
    }
    if eps == 0.5 {
        return Ok(0.0);
    }
    if eps > 0.5 {
        return Ok(-q_inv(1.0 - eps)?);
    }
    let ln_eps = eps.ln();
    let mut x = if eps >= 0.1 {
        0.0
    } else {
        (-2.0 * (2.0 * eps).ln()).sqrt()
    };
    for _ in 0..60 {
        let q = gaussian_tail(x);
        let step = (q.ln() - ln_eps) * q / gaussian_pdf(x);
        x += step;
        if step.abs() <= 1e-15 * (1.0 + x.abs()) {
            break;
        }
    }
    Ok(x)
}

/// Exact normal-approximation rate in bits:
/// `τW·(log₂(1+hp) − √(V/(τW))·Q⁻¹(ε)/ln 2)` with `V = 1 − (1+hp)⁻²`.
///
/// May be negative; callers treat negative values as zero deliverable
/// payload.
pub fn rate_exact(lb: &LinkBudget, power_w: f64) -> f64 {
    assert!(power_w >= 0.0, "power must be nonnegative");
    let snr = lb.gain * power_w;
    let bl = lb.blocklength();
    let v = Dispersion::from_snr(snr).value();
    let q = q_inv(lb.error_prob).expect("validated on construction");
    bl * (snr.ln_1p() / LN_2 - (v / bl).sqrt() * q / LN_2)
}

/// Rate with the dispersion approximated by 1:
/// `τW·(log₂(1+hp) − Q⁻¹(ε)/(√(τW)·ln 2))`.
///
/// A lower bound on [`rate_exact`] for `ε ≤ 1/2`, tight at moderate SNR.
pub fn rate_approx(lb: &LinkBudget, power_w: f64) -> f64 {
    assert!(power_w >= 0.0, "power must be nonnegative");
    let snr = lb.gain * power_w;
    let bl = lb.blocklength();
    bl * (snr.ln_1p() / LN_2) - lb.backoff_bits()
}

/// The unique power with `rate_approx(lb, p) = target_bits`:
/// `p = (2^(B/(τW) + Q⁻¹(ε)/(√(τW)·ln 2)) − 1)/h`.
pub fn invert_power(lb: &LinkBudget, target_bits: f64) -> Result<f64, FblError> {
    assert!(target_bits > 0.0, "target payload must be positive");
    let bl = lb.blocklength();
    let exponent = target_bits / bl + lb.backoff_bits() / bl;
    if exponent > 1024.0 {
        return Err(FblError::PowerOverflow {
            bits: target_bits,
            exponent,
        });
    }
    Ok((exponent.exp2() - 1.0) / lb.gain)
}

/// Perspective form of [`rate_approx`]:
/// `τW·(φ·log₂(1 + h·p̃/φ) − φ·Q⁻¹(ε)/(√(τW)·ln 2))`,
/// continuously extended to 0 at `φ = 0`. Jointly concave in `(φ, p̃)`.
pub fn perspective_rate(phi: f64, p_tilde_w: f64, lb: &LinkBudget) -> f64 {
    debug_assert!(phi >= 0.0 && phi <= 1.0 + 1e-9, "indicator out of range: {phi}");
    debug_assert!(p_tilde_w >= 0.0, "power must be nonnegative");
    if phi <= PHI_CLAMP {
        return 0.0;
    }
    let bl = lb.blocklength();
    let ratio = lb.gain * p_tilde_w / phi;
    bl * phi * (ratio.ln_1p() / LN_2) - phi * lb.backoff_bits()
}
