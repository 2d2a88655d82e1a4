//! Closed-form action of the Gaussian semigroup `P_t f(x) = E[f(x + μt + √t·Z)]`
//! on piecewise-harmonic functions.
//!
//! Each piece is `γ₀ + γ₁·e^{λ(y - a)}` (or affine), so its contribution is a
//! Gaussian mass plus a truncated exponential moment. Mass differences are
//! taken from whichever tail is smaller.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use thiserror::Error;

use crate::harmonic::{GeneratorParams, PiecewiseHarmonic};

/// Exponents above this are recombined in log space.
const LOG_SPACE_EXPONENT: f64 = 700.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SemigroupError {
    #[error("invalid interval [{lower}, {upper}]")]
    InvalidInterval { lower: f64, upper: f64 },
    #[error("variance must be finite and > 0, got {0}")]
    InvalidVariance(f64),
    #[error("elapsed time must be finite and > 0, got {0}")]
    InvalidTime(f64),
}

/// Drift and elapsed time of `P_t` with unit volatility; `variance = t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SemigroupParams {
    pub mu: f64,
    pub t: f64,
    pub variance: f64,
}

impl SemigroupParams {
    /// The semigroup generated by `βf' + ½f''`, so `μ = β`.
    pub fn new(beta: f64, t: f64) -> Result<Self, SemigroupError> {
        if !(t > 0.0 && t.is_finite()) {
            return Err(SemigroupError::InvalidTime(t));
        }
        Ok(Self { mu: beta, t, variance: t })
    }

    pub fn for_generator(params: &GeneratorParams) -> Result<Self, SemigroupError> {
        Self::new(params.beta, params.mesh)
    }

    /// Rescaled Black–Scholes log-price semigroup over calendar time `t`.
    pub fn from_black_scholes(r: f64, delta: f64, sigma: f64, t: f64) -> Result<Self, SemigroupError> {
        let p = GeneratorParams::from_black_scholes(r, delta, sigma, t)
            .map_err(|_| SemigroupError::InvalidTime(t))?;
        Self::for_generator(&p)
    }

    pub fn std_dev(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// Standard normal distribution function.
pub fn gaussian_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

pub fn gaussian_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// `(Φ(z), 1 - Φ(z))` with the smaller one computed directly.
#[derive(Debug, Clone, Copy)]
struct Tails {
    lower: f64,
    upper: f64,
}

impl Tails {
    fn at(z: f64) -> Self {
        if z < 0.0 {
            let lower = 0.5 * libm::erfc(-z * FRAC_1_SQRT_2);
            Tails { lower, upper: 1.0 - lower }
        } else {
            let upper = 0.5 * libm::erfc(z * FRAC_1_SQRT_2);
            Tails { lower: 1.0 - upper, upper }
        }
    }

    /// `Φ(b) - Φ(a)` for `a ≤ b`.
    fn mass(a: Tails, za: f64, b: Tails, zb: f64) -> f64 {
        let m = if za >= 0.0 {
            a.upper - b.upper
        } else if zb <= 0.0 {
            b.lower - a.lower
        } else {
            1.0 - a.lower - b.upper
        };
        m.max(0.0)
    }
}

fn gaussian_mass(za: f64, zb: f64) -> f64 {
    Tails::mass(Tails::at(za), za, Tails::at(zb), zb)
}

fn scaled(exponent: f64, mass: f64) -> f64 {
    if mass == 0.0 {
        0.0
    } else if exponent > LOG_SPACE_EXPONENT {
        (exponent + mass.ln()).exp()
    } else {
        exponent.exp() * mass
    }
}

/// `E[e^{λZ}·1{lower ≤ Z ≤ upper}]` for `Z ~ N(mean, variance)`; bounds may be infinite.
pub fn partial_expectation_exp(
    lambda: f64,
    lower: f64,
    upper: f64,
    mean: f64,
    variance: f64,
) -> Result<f64, SemigroupError> {
    if lower.is_nan() || upper.is_nan() || lower > upper {
        return Err(SemigroupError::InvalidInterval { lower, upper });
    }
    if !(variance > 0.0 && variance.is_finite()) {
        return Err(SemigroupError::InvalidVariance(variance));
    }
    let s = variance.sqrt();
    let shift = mean + lambda * variance;
    let mass = gaussian_mass((lower - shift) / s, (upper - shift) / s);
    Ok(scaled(lambda * mean + 0.5 * lambda * lambda * variance, mass))
}

/// `P_t pw(x)` in closed form.
pub fn apply_semigroup(pw: &PiecewiseHarmonic, params: &SemigroupParams, x: f64) -> f64 {
    let mean = x + params.mu * params.t;
    let var = params.variance;
    let s = var.sqrt();
    let lambda = pw.left_ext().exponent();
    let affine = pw.left_ext().is_affine();
    let breaks = pw.grid().abscissas();

    // Distribution-function tails at each breakpoint, for the plain Gaussian
    // (z0) and for the exponentially tilted one (z1).
    let z0: Vec<f64> = breaks.iter().map(|b| (b - mean) / s).collect();
    let z1: Vec<f64> = if affine {
        Vec::new()
    } else {
        breaks.iter().map(|b| (b - mean - lambda * var) / s).collect()
    };
    let t0: Vec<Tails> = z0.iter().map(|&z| Tails::at(z)).collect();
    let t1: Vec<Tails> = z1.iter().map(|&z| Tails::at(z)).collect();
    let far_lo = Tails { lower: 0.0, upper: 1.0 };
    let far_hi = Tails { lower: 1.0, upper: 0.0 };

    let n_seg = breaks.len() + 1;
    let mut total = 0.0;
    for i in 0..n_seg {
        let piece = if i == 0 {
            pw.left_ext()
        } else if i == n_seg - 1 {
            pw.right_ext()
        } else {
            &pw.pieces()[i - 1]
        };
        let lo = i.checked_sub(1);
        let hi = (i < breaks.len()).then_some(i);
        let bound = |k: Option<usize>, z: &[f64], t: &[Tails], far: Tails, inf: f64| match k {
            Some(k) => (z[k], t[k]),
            None => (inf, far),
        };
        let (za, ta) = bound(lo, &z0, &t0, far_lo, f64::NEG_INFINITY);
        let (zb, tb) = bound(hi, &z0, &t0, far_hi, f64::INFINITY);
        let mass0 = Tails::mass(ta, za, tb, zb);
        let mut contrib = piece.gamma0 * mass0;
        if piece.gamma1 != 0.0 {
            let a = piece.anchor;
            if affine {
                let dens = |z: f64| if z.is_finite() { gaussian_pdf(z) } else { 0.0 };
                contrib += piece.gamma1 * ((mean - a) * mass0 + s * (dens(za) - dens(zb)));
            } else {
                let (ya, ua) = bound(lo, &z1, &t1, far_lo, f64::NEG_INFINITY);
                let (yb, ub) = bound(hi, &z1, &t1, far_hi, f64::INFINITY);
                let mass1 = Tails::mass(ua, ya, ub, yb);
                let exponent = lambda * (mean - a) + 0.5 * lambda * lambda * var;
                contrib += piece.gamma1 * scaled(exponent, mass1);
            }
        }
        total += contrib;
    }
    total
}
