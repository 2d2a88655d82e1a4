//! Independent references: Black–Scholes closed forms, the perpetual American
//! put, adaptive quadrature and a brute-force dense-grid dynamic programme.
//!
//! Nothing here calls into the pricers; the distribution function is taken
//! straight from `libm::erfc`.

pub mod dense;
pub mod quadrature;

use thiserror::Error;

use crate::OptionKind;

pub use dense::{dense_dp_bermudan, DenseGridSpec, DenseSolution, Horizon, OracleModel, OraclePayoff};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("invalid dense grid: {0}")]
    InvalidGrid(String),
    #[error("value iteration did not converge after {iterations} steps (last residual {residual:.3e})")]
    NotConverged { iterations: usize, residual: f64 },
}

fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Black–Scholes price with continuous dividend yield `delta`.
pub fn bs_european(
    spot: f64,
    strike: f64,
    r: f64,
    delta: f64,
    sigma: f64,
    maturity: f64,
    kind: OptionKind,
) -> Result<f64, OracleError> {
    for (name, v) in [("spot", spot), ("strike", strike), ("sigma", sigma), ("maturity", maturity)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(OracleError::InvalidParams(format!("{name} must be finite and > 0, got {v}")));
        }
    }
    if !(r.is_finite() && delta.is_finite()) {
        return Err(OracleError::InvalidParams("rates must be finite".into()));
    }
    let vol = sigma * maturity.sqrt();
    let d1 = ((spot / strike).ln() + (r - delta + 0.5 * sigma * sigma) * maturity) / vol;
    let d2 = d1 - vol;
    let fwd_spot = spot * (-delta * maturity).exp();
    let pv_strike = strike * (-r * maturity).exp();
    Ok(match kind {
        OptionKind::Call => fwd_spot * norm_cdf(d1) - pv_strike * norm_cdf(d2),
        OptionKind::Put => pv_strike * norm_cdf(-d2) - fwd_spot * norm_cdf(-d1),
    })
}

/// Exponent `γ < 0` of the perpetual put value `∝ S^γ` in the continuation region.
pub fn perpetual_put_exponent(r: f64, delta: f64, sigma: f64) -> f64 {
    let var = sigma * sigma;
    let b = r - delta - 0.5 * var;
    (-b - (b * b + 2.0 * var * r).sqrt()) / var
}

/// Perpetual American put with continuous dividend yield `delta`.
///
/// Exercise boundary `S* = K·γ/(γ - 1)`; above it the value is
/// `(K - S*)·(S/S*)^γ`, below it `K - S`.
pub fn perpetual_american_put_bound(spot: f64, strike: f64, r: f64, delta: f64, sigma: f64) -> Result<f64, OracleError> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(OracleError::InvalidParams(format!("r must be > 0, got {r}")));
    }
    for (name, v) in [("spot", spot), ("strike", strike), ("sigma", sigma)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(OracleError::InvalidParams(format!("{name} must be finite and > 0, got {v}")));
        }
    }
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(OracleError::InvalidParams(format!("delta must be finite and >= 0, got {delta}")));
    }
    let gamma = perpetual_put_exponent(r, delta, sigma);
    let boundary = strike * gamma / (gamma - 1.0);
    Ok(if spot <= boundary {
        strike - spot
    } else {
        (strike - boundary) * (spot / boundary).powf(gamma)
    })
}
