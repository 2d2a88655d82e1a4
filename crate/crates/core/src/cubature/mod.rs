//! Cubature pricer for basket options on a log-price lattice.
//!
//! A convex cubature rule defines `Af = Σ α_k f(· - x_k)`, and the pricer
//! iterates `𝒟f = (c·Af) ∨ g` from `g ∨ 0`. Rules are normalized so that
//! every `e^{x_i}` is `A`-invariant, which makes basket payoffs and their
//! majorants exact on the lattice.

mod iterate;
pub mod lattice;
pub mod rule;

use thiserror::Error;

use crate::OptionKind;

pub use iterate::{
    apply_d, default_lattice_bounds, exercise_region, iterate_dates, iterate_perpetual, iterate_perpetual_from,
    CubatureRun, ExerciseMask,
};
pub use lattice::{apply_a, LatticeFunction, LatticeSpec};
pub use rule::{degree3_rule, gauss_hermite_rule, normalize_rule, tensor_rule, CubatureRule, NormalizedRule};

#[derive(Debug, Error)]
pub enum CubatureError {
    #[error("invalid cubature order: {0}")]
    InvalidOrder(String),
    #[error("invalid cubature rule: {0}")]
    InvalidRule(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("invalid lattice: {0}")]
    InvalidLattice(String),
    #[error("invalid lattice values: {0}")]
    InvalidValues(String),
    #[error("invalid payoff: {0}")]
    InvalidPayoff(String),
    #[error("invalid iteration config: {0}")]
    InvalidConfig(String),
    #[error("lattice too small: {0}")]
    LatticeTooSmall(String),
    #[error("iteration did not converge after {} steps", run.report.iterations)]
    NotConverged { run: Box<CubatureRun> },
}

/// Basket put `K - Σβ_i e^{x_i}` or call `Σβ_i e^{x_i} - K`, with one-period
/// discount factor `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct BasketPayoff {
    strike: f64,
    betas: Vec<f64>,
    kind: OptionKind,
    discount: f64,
}

impl BasketPayoff {
    pub fn new(kind: OptionKind, strike: f64, betas: Vec<f64>, discount: f64) -> Result<Self, CubatureError> {
        if !(strike >= 0.0 && strike.is_finite()) {
            return Err(CubatureError::InvalidPayoff(format!("strike must be finite and >= 0, got {strike}")));
        }
        check_betas(&betas)?;
        if !(discount > 0.0 && discount < 1.0) {
            return Err(CubatureError::InvalidPayoff(format!("discount must lie in (0, 1), got {discount}")));
        }
        Ok(Self { strike, betas, kind, discount })
    }

    /// Payoff with discount `c = e^{-r t}`.
    pub fn from_rate(kind: OptionKind, strike: f64, betas: Vec<f64>, r: f64, t: f64) -> Result<Self, CubatureError> {
        if !(r > 0.0 && t > 0.0 && (r * t).is_finite()) {
            return Err(CubatureError::InvalidPayoff(format!("need r > 0 and t > 0, got r = {r}, t = {t}")));
        }
        Self::new(kind, strike, betas, (-r * t).exp())
    }

    pub fn dim(&self) -> usize {
        self.betas.len()
    }

    pub fn strike(&self) -> f64 {
        self.strike
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn kind(&self) -> OptionKind {
        self.kind
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    fn basket(&self, x: &[f64]) -> f64 {
        self.betas.iter().zip(x).filter(|(b, _)| **b > 0.0).map(|(b, xi)| b * xi.exp()).sum()
    }

    pub fn g(&self, x: &[f64]) -> f64 {
        match self.kind {
            OptionKind::Put => self.strike - self.basket(x),
            OptionKind::Call => self.basket(x) - self.strike,
        }
    }

    /// Majorant: `K` for the put, the basket itself for the call.
    pub fn h(&self, x: &[f64]) -> f64 {
        match self.kind {
            OptionKind::Put => self.strike,
            OptionKind::Call => self.basket(x),
        }
    }

    pub fn g_plus(&self, x: &[f64]) -> f64 {
        self.g(x).max(0.0)
    }
}

fn check_betas(betas: &[f64]) -> Result<(), CubatureError> {
    if betas.is_empty() {
        return Err(CubatureError::InvalidPayoff("need at least one basket weight".into()));
    }
    if betas.iter().any(|b| !(*b >= 0.0 && b.is_finite())) {
        return Err(CubatureError::InvalidPayoff(format!("basket weights must be >= 0, got {betas:?}")));
    }
    let total: f64 = betas.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(CubatureError::InvalidPayoff(format!("basket weights sum to {total}, not 1")));
    }
    Ok(())
}

/// Sufficient condition `r ≥ max β_i / 2` for the basket put payoff to be
/// subharmonic.
pub fn check_basket_subharmonicity(r: f64, betas: &[f64]) -> bool {
    let max = betas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    r >= max / 2.0
}
