//! One-dimensional Bermudan pricing by piecewise-harmonic value iteration.
//!
//! The operator is
//! `𝒦(v)_j = max(e^{-rt}·P_t(𝓘(v) ∨ c)(a_j), g(a_j))`
//! on the support nodes `a_j`, where `𝓘` is harmonic interpolation and `c` a
//! harmonic lower bound. Iterating from `g ∨ 0` gives Bermudan prices with
//! one more exercise date per step; the limit is the perpetual price.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::harmonic::{interpolate, max_with_harmonic, GeneratorParams, HarmonicError, HarmonicFunction, PiecewiseHarmonic, SupportGrid};
use crate::report::{step_stats, IterationConfig, IterationReport, Monitor, Verdict};
use crate::semigroup::{apply_semigroup, SemigroupError, SemigroupParams};

/// Allowed gap between rescaled drift and `-1/2` for built-in setups.
const HARMONIC_DRIFT_TOL: f64 = 1e-12;
/// Sample points per grid interval when checking `c ≤ g`.
const MESH_REFINE: usize = 8;
const SETUP_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum PricerError {
    #[error(
        "built-in call and put setups require r = delta so that the payoff is harmonic \
         (rescaled drift must be -1/2, got {beta})"
    )]
    HarmonicityViolated { beta: f64 },
    #[error("grid bound violated: {0}")]
    GridBoundViolated(String),
    #[error("invalid payoff setup: {0}")]
    SetupInvalid(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Harmonic(#[from] HarmonicError),
    #[error(transparent)]
    Semigroup(#[from] SemigroupError),
    #[error("no convergence after {} iterations (last residual {:e})", .report.iterations, .report.final_residual().unwrap_or(f64::NAN))]
    NotConverged { report: Box<IterationReport>, values: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PayoffKind {
    Call,
    Put,
    Custom,
}

type Payoff = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Payoff `g` with its harmonic bounds `c ≤ g` (on the grid hull) and `g ≤ h`.
#[derive(Clone)]
pub struct PayoffSetup {
    pub kind: PayoffKind,
    pub strike: f64,
    g: Payoff,
    pub c: HarmonicFunction,
    pub h: HarmonicFunction,
}

impl fmt::Debug for PayoffSetup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PayoffSetup")
            .field("kind", &self.kind)
            .field("strike", &self.strike)
            .field("c", &self.c)
            .field("h", &self.h)
            .finish_non_exhaustive()
    }
}

impl PayoffSetup {
    /// User-certified `(g, c, h)`; checked by [`PayoffSetup::validate`].
    pub fn custom(g: impl Fn(f64) -> f64 + Send + Sync + 'static, c: HarmonicFunction, h: HarmonicFunction) -> Self {
        Self { kind: PayoffKind::Custom, strike: f64::NAN, g: Arc::new(g), c, h }
    }

    pub fn payoff(&self, x: f64) -> f64 {
        (self.g)(x)
    }

    /// Checks `c ≤ g` on a fine mesh of the hull, `g ≤ h`, `c ≤ h` and
    /// `h ≥ 0` on a wide sample of the line, and matching drifts.
    pub fn validate(&self, grid: &SupportGrid, params: &GeneratorParams) -> Result<(), PricerError> {
        for (name, f) in [("c", &self.c), ("h", &self.h)] {
            let same = if params.beta.abs() < crate::harmonic::AFFINE_THRESHOLD {
                f.is_affine()
            } else {
                f.beta == params.beta
            };
            if !same {
                return Err(PricerError::SetupInvalid(format!(
                    "{name} has drift {} but the generator has {}",
                    f.beta, params.beta
                )));
            }
        }
        let tol = |v: f64| SETUP_TOL * v.abs().max(1.0);
        for x in hull_mesh(grid) {
            let (c, g) = (self.c.eval(x), self.payoff(x));
            if c > g + tol(g) {
                return Err(PricerError::SetupInvalid(format!("c = {c} exceeds g = {g} at x = {x}")));
            }
        }
        for x in wide_sample(grid) {
            let (c, g, h) = (self.c.eval(x), self.payoff(x), self.h.eval(x));
            if g > h + tol(h) {
                return Err(PricerError::SetupInvalid(format!("g = {g} exceeds h = {h} at x = {x}")));
            }
            if c > h + tol(h) {
                return Err(PricerError::SetupInvalid(format!("c = {c} exceeds h = {h} at x = {x}")));
            }
            if h < -tol(0.0) {
                return Err(PricerError::SetupInvalid(format!("h = {h} is negative at x = {x}")));
            }
        }
        Ok(())
    }
}

fn hull_mesh(grid: &SupportGrid) -> Vec<f64> {
    let a = grid.abscissas();
    let mut out = Vec::with_capacity(a.len() * MESH_REFINE);
    for w in a.windows(2) {
        for k in 0..MESH_REFINE {
            out.push(w[0] + (w[1] - w[0]) * k as f64 / MESH_REFINE as f64);
        }
    }
    out.push(grid.upper());
    out
}

fn wide_sample(grid: &SupportGrid) -> Vec<f64> {
    let mut out = hull_mesh(grid);
    for k in 0..=40 {
        let d = 0.01 * 1.3f64.powi(k);
        out.push(grid.lower() - d);
        out.push(grid.upper() + d);
    }
    out
}

fn require_harmonic_drift(params: &GeneratorParams) -> Result<(), PricerError> {
    if (params.beta + 0.5).abs() > HARMONIC_DRIFT_TOL {
        return Err(PricerError::HarmonicityViolated { beta: params.beta });
    }
    Ok(())
}

fn check_strike(strike: f64) -> Result<(), PricerError> {
    if !(strike >= 0.0 && strike.is_finite()) {
        return Err(PricerError::SetupInvalid(format!("strike must be finite and >= 0, got {strike}")));
    }
    Ok(())
}

/// Call `g = e^x - K` with `c = e^{a_0} - K` and `h = a_h + e^x`, where
/// `a_h = max(0, -K, c)` keeps `h` above both zero and `c`.
pub fn make_call_setup(strike: f64, grid: &SupportGrid, params: &GeneratorParams) -> Result<PayoffSetup, PricerError> {
    check_strike(strike)?;
    require_harmonic_drift(params)?;
    if strike > 0.0 && grid.lower() < strike.ln() {
        return Err(PricerError::GridBoundViolated(format!(
            "call grid must start at or above ln K = {}, got a_0 = {}",
            strike.ln(),
            grid.lower()
        )));
    }
    let beta = params.beta;
    let c0 = grid.lower().exp() - strike;
    let a_h = 0f64.max(-strike).max(c0);
    let setup = PayoffSetup {
        kind: PayoffKind::Call,
        strike,
        g: Arc::new(move |x: f64| x.exp() - strike),
        c: HarmonicFunction::constant(c0, beta),
        h: HarmonicFunction::new(a_h, 1.0, beta, 0.0),
    };
    setup.validate(grid, params)?;
    Ok(setup)
}

/// Put `g = K - e^x` with `c = K - e^{a_m}` and `h = K`.
pub fn make_put_setup(strike: f64, grid: &SupportGrid, params: &GeneratorParams) -> Result<PayoffSetup, PricerError> {
    check_strike(strike)?;
    require_harmonic_drift(params)?;
    if grid.upper() > strike.ln() {
        return Err(PricerError::GridBoundViolated(format!(
            "put grid must end at or below ln K = {}, got a_m = {}",
            strike.ln(),
            grid.upper()
        )));
    }
    let beta = params.beta;
    let setup = PayoffSetup {
        kind: PayoffKind::Put,
        strike,
        g: Arc::new(move |x: f64| strike - x.exp()),
        c: HarmonicFunction::constant(strike - grid.upper().exp(), beta),
        h: HarmonicFunction::constant(strike, beta),
    };
    setup.validate(grid, params)?;
    Ok(setup)
}

fn check_values(values: &[f64], grid: &SupportGrid) -> Result<(), PricerError> {
    if values.len() != grid.len() {
        return Err(HarmonicError::LengthMismatch { expected: grid.len(), actual: values.len() }.into());
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(PricerError::InvalidInput("values must be finite".into()));
    }
    Ok(())
}

/// `e^{-rt}·P_t(𝓘(v) ∨ c)` at every support node.
pub fn continuation(
    values: &[f64],
    setup: &PayoffSetup,
    grid: &SupportGrid,
    params: &GeneratorParams,
) -> Result<Vec<f64>, PricerError> {
    check_values(values, grid)?;
    let sg = SemigroupParams::for_generator(params)?;
    continuation_unchecked(values, setup, grid, params, &sg)
}

fn continuation_unchecked(
    values: &[f64],
    setup: &PayoffSetup,
    grid: &SupportGrid,
    params: &GeneratorParams,
    sg: &SemigroupParams,
) -> Result<Vec<f64>, PricerError> {
    let pw = max_with_harmonic(&interpolate(values, grid, params)?, &setup.c)?;
    let discount = params.discount();
    Ok(grid.abscissas().par_iter().map(|&a| discount * apply_semigroup(&pw, sg, a)).collect())
}

fn apply_k(
    values: &[f64],
    setup: &PayoffSetup,
    grid: &SupportGrid,
    params: &GeneratorParams,
    sg: &SemigroupParams,
) -> Result<Vec<f64>, PricerError> {
    let mut out = continuation_unchecked(values, setup, grid, params, sg)?;
    out.iter_mut().zip(grid.abscissas()).for_each(|(v, &a)| *v = v.max(setup.payoff(a)));
    Ok(out)
}

/// One application of `𝒦` at the support nodes.
pub fn operator_k(
    values: &[f64],
    setup: &PayoffSetup,
    grid: &SupportGrid,
    params: &GeneratorParams,
) -> Result<Vec<f64>, PricerError> {
    check_values(values, grid)?;
    setup.validate(grid, params)?;
    let sg = SemigroupParams::for_generator(params)?;
    apply_k(values, setup, grid, params, &sg)
}

/// `g ∨ 0` at the support nodes.
pub fn initial_values(setup: &PayoffSetup, grid: &SupportGrid) -> Vec<f64> {
    grid.abscissas().iter().map(|&a| setup.payoff(a).max(0.0)).collect()
}

/// `h` at the support nodes.
pub fn majorant_values(setup: &PayoffSetup, grid: &SupportGrid) -> Vec<f64> {
    grid.abscissas().iter().map(|&a| setup.h.eval(a)).collect()
}

/// `𝒦^n(g ∨ 0)` at the nodes and its interpolant (`n = 0` gives `g ∨ 0`).
pub fn price_bermudan(
    n_dates: usize,
    setup: &PayoffSetup,
    grid: &SupportGrid,
    params: &GeneratorParams,
) -> Result<(Vec<f64>, PiecewiseHarmonic), PricerError> {
    setup.validate(grid, params)?;
    let sg = SemigroupParams::for_generator(params)?;
    let mut v = initial_values(setup, grid);
    for _ in 0..n_dates {
        v = apply_k(&v, setup, grid, params, &sg)?;
    }
    let pw = interpolate(&v, grid, params)?;
    Ok((v, pw))
}

/// Starting point of the perpetual iteration.
#[derive(Debug, Clone, PartialEq)]
pub enum Start {
    /// `g ∨ 0`: iterates increase to the least fixed point.
    Payoff,
    /// `h`: iterates decrease to a fixed point above the least one.
    Majorant,
}

/// Perpetual price as the limit of `𝒦^n(g ∨ 0)`.
pub fn price_perpetual(
    setup: &PayoffSetup,
    grid: &SupportGrid,
    params: &GeneratorParams,
    config: &IterationConfig,
) -> Result<(PiecewiseHarmonic, IterationReport), PricerError> {
    price_perpetual_from(Start::Payoff, setup, grid, params, config)
}

/// Perpetual iteration from a chosen start. Monotonicity violations count
/// steps against the expected direction (up from `g ∨ 0`, down from `h`).
pub fn price_perpetual_from(
    start: Start,
    setup: &PayoffSetup,
    grid: &SupportGrid,
    params: &GeneratorParams,
    config: &IterationConfig,
) -> Result<(PiecewiseHarmonic, IterationReport), PricerError> {
    config.validate().map_err(PricerError::InvalidInput)?;
    setup.validate(grid, params)?;
    let sg = SemigroupParams::for_generator(params)?;
    let h = majorant_values(setup, grid);
    let mut v = match start {
        Start::Payoff => initial_values(setup, grid),
        Start::Majorant => h.clone(),
    };
    let mut monitor = Monitor::new(*config);
    loop {
        let next = apply_k(&v, setup, grid, params, &sg)?;
        let (residual, violations) = match start {
            Start::Payoff => step_stats(&v, &next),
            Start::Majorant => {
                let neg = |x: &[f64]| x.iter().map(|y| -y).collect::<Vec<_>>();
                step_stats(&neg(&v), &neg(&next))
            }
        };
        let slack = h.iter().zip(&next).map(|(h, q)| h - q).fold(f64::INFINITY, f64::min);
        v = next;
        match monitor.record(residual, violations, slack) {
            Verdict::Continue => continue,
            Verdict::Converged => break,
            Verdict::Stagnated | Verdict::Exhausted => {
                return Err(PricerError::NotConverged { report: Box::new(monitor.finish()), values: v });
            }
        }
    }
    Ok((interpolate(&v, grid, params)?, monitor.finish()))
}
