//! The operator `𝒟f = (c·Af) ∨ g` and its fixed-point iteration.
//!
//! Off-lattice queries see the exact `g ∨ 0`. With that clamp the lattice
//! operator is monotone, a `c`-contraction in sup-norm and exact on `g`, so
//! monotonicity, contraction and the shrinking exercise region are checked
//! on every node. The classical safe interior (margin `n·max|x_k|` after `n`
//! steps) is reported alongside.

use rayon::prelude::*;

use super::lattice::{LatticeFunction, LatticeSpec, Stencil};
use super::rule::{CubatureRule, NormalizedRule};
use super::{BasketPayoff, CubatureError};
use crate::harmonic_pricer::Start;
use crate::report::{step_stats, IterationConfig, IterationReport, Monitor, Verdict};

/// Tolerance for `q_{n+1} = g` in the exercise mask.
const EXERCISE_TOL: f64 = 1e-10;
/// Tolerance for `q_n = g` when checking that the mask shrinks.
const EXERCISE_PREV_TOL: f64 = 1e-9;

/// Exercise mask of `q_{n+1}` and the count of masked nodes where `q_n ≠ g`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExerciseMask {
    pub mask: Vec<bool>,
    pub violations: usize,
}

/// Result of a lattice iteration.
#[derive(Debug, Clone)]
pub struct CubatureRun {
    pub q: LatticeFunction,
    pub report: IterationReport,
    /// Nodes with `q = g` at the last step.
    pub exercise: Vec<bool>,
    /// Steps, summed over nodes, where a node entered the exercise mask
    /// without having been in it the step before.
    pub exercise_violations: usize,
    /// Nodes at distance `max|x_k|` from the boundary.
    pub one_step_interior: usize,
    /// Nodes at distance `n·max|x_k|` from the boundary after the last step.
    pub safe_interior: usize,
}

/// `𝒟f = (c·Af) ∨ g` with `g ∨ 0` outside the lattice.
pub fn apply_d(
    f: &LatticeFunction,
    rule: &impl AsRef<CubatureRule>,
    payoff: &BasketPayoff,
) -> Result<LatticeFunction, CubatureError> {
    let spec = f.spec();
    check_dims(spec, payoff)?;
    let op = Operator::new(spec, rule.as_ref(), payoff)?;
    LatticeFunction::new(spec.clone(), op.apply(f.values()))
}

/// Mask `{q_{n+1} = g}` and the nodes in it where `q_n ≠ g`.
pub fn exercise_region(prev: &LatticeFunction, next: &LatticeFunction, payoff: &BasketPayoff) -> ExerciseMask {
    let spec = next.spec();
    let g: Vec<f64> = (0..spec.len()).into_par_iter().map(|k| payoff.g(&spec.node(k))).collect();
    mask_from(prev.values(), next.values(), &g)
}

fn mask_from(prev: &[f64], next: &[f64], g: &[f64]) -> ExerciseMask {
    let mut violations = 0;
    let mask = next
        .iter()
        .zip(prev)
        .zip(g)
        .map(|((q1, q0), g)| {
            let hit = (q1 - g).abs() <= EXERCISE_TOL;
            if hit && (q0 - g).abs() > EXERCISE_PREV_TOL {
                violations += 1;
            }
            hit
        })
        .collect();
    ExerciseMask { mask, violations }
}

/// Per-axis bounds `[ln K - 6√(t·n), ln K + 2√(t·n)]` with `n = ⌈ln tol / ln c⌉`.
pub fn default_lattice_bounds(
    payoff: &BasketPayoff,
    t: f64,
    tol: f64,
) -> Result<(Vec<f64>, Vec<f64>), CubatureError> {
    if !(payoff.strike() > 0.0) {
        return Err(CubatureError::InvalidLattice("default bounds need a positive strike".into()));
    }
    if !(t > 0.0 && t.is_finite() && tol > 0.0 && tol < 1.0) {
        return Err(CubatureError::InvalidLattice(format!("need t > 0 and 0 < tol < 1, got t = {t}, tol = {tol}")));
    }
    let n_est = (tol.ln() / payoff.discount().ln()).ceil();
    let spread = (t * n_est).sqrt();
    let centre = payoff.strike().ln();
    let d = payoff.dim();
    Ok((vec![centre - 6.0 * spread; d], vec![centre + 2.0 * spread; d]))
}

/// Perpetual price as the limit of `𝒟^n(g ∨ 0)`.
pub fn iterate_perpetual(
    payoff: &BasketPayoff,
    rule: &NormalizedRule,
    spec: &LatticeSpec,
    config: &IterationConfig,
) -> Result<CubatureRun, CubatureError> {
    iterate_perpetual_from(Start::Payoff, payoff, rule, spec, config)
}

/// Perpetual iteration from `g ∨ 0` (increasing) or from `h` (decreasing).
/// Monotonicity violations count steps against the expected direction.
pub fn iterate_perpetual_from(
    start: Start,
    payoff: &BasketPayoff,
    rule: &NormalizedRule,
    spec: &LatticeSpec,
    config: &IterationConfig,
) -> Result<CubatureRun, CubatureError> {
    config.validate().map_err(CubatureError::InvalidConfig)?;
    let mut driver = Driver::new(start, payoff, rule.rule(), spec, *config)?;
    loop {
        match driver.step() {
            Verdict::Continue => continue,
            Verdict::Converged => return Ok(driver.finish()),
            Verdict::Stagnated | Verdict::Exhausted => {
                return Err(CubatureError::NotConverged { run: Box::new(driver.finish()) })
            }
        }
    }
}

/// Bermudan price with `n` exercise dates, `𝒟^n(g ∨ 0)`.
pub fn iterate_dates(
    n: usize,
    payoff: &BasketPayoff,
    rule: &NormalizedRule,
    spec: &LatticeSpec,
) -> Result<CubatureRun, CubatureError> {
    let config = IterationConfig { tol: 0.0, max_iter: n.max(1), record_trace: false };
    let mut driver = Driver::new(Start::Payoff, payoff, rule.rule(), spec, config)?;
    for _ in 0..n {
        driver.step();
    }
    Ok(driver.finish())
}

fn check_dims(spec: &LatticeSpec, payoff: &BasketPayoff) -> Result<(), CubatureError> {
    if payoff.dim() != spec.dim() {
        return Err(CubatureError::DimensionMismatch { expected: spec.dim(), actual: payoff.dim() });
    }
    Ok(())
}

struct Operator<'a> {
    spec: &'a LatticeSpec,
    stencil: Stencil,
    payoff: &'a BasketPayoff,
    g: Vec<f64>,
}

impl<'a> Operator<'a> {
    fn new(spec: &'a LatticeSpec, rule: &CubatureRule, payoff: &'a BasketPayoff) -> Result<Self, CubatureError> {
        let stencil = Stencil::new(spec, rule)?;
        let g = (0..spec.len()).into_par_iter().map(|k| payoff.g(&spec.node(k))).collect();
        Ok(Self { spec, stencil, payoff, g })
    }

    fn apply(&self, values: &[f64]) -> Vec<f64> {
        let c = self.payoff.discount();
        let exterior = |x: &[f64]| self.payoff.g_plus(x);
        let mut out = self.stencil.apply(self.spec, values, &exterior);
        out.par_iter_mut().zip(&self.g).for_each(|(v, g)| *v = (c * *v).max(*g));
        out
    }
}

struct Driver<'a> {
    start: Start,
    op: Operator<'a>,
    h: Vec<f64>,
    q: Vec<f64>,
    exercise: Vec<bool>,
    exercise_violations: usize,
    monitor: Monitor,
    reach: Vec<f64>,
    one_step_interior: usize,
}

impl<'a> Driver<'a> {
    fn new(
        start: Start,
        payoff: &'a BasketPayoff,
        rule: &CubatureRule,
        spec: &'a LatticeSpec,
        config: IterationConfig,
    ) -> Result<Self, CubatureError> {
        check_dims(spec, payoff)?;
        let op = Operator::new(spec, rule, payoff)?;
        let reach = rule.reach();
        let one_step_interior = spec.interior_count(&reach);
        if one_step_interior == 0 {
            return Err(CubatureError::LatticeTooSmall(format!(
                "no node lies {reach:?} away from the boundary"
            )));
        }
        let h: Vec<f64> = (0..spec.len()).into_par_iter().map(|k| payoff.h(&spec.node(k))).collect();
        let q = match start {
            Start::Payoff => op.g.iter().map(|g| g.max(0.0)).collect(),
            Start::Majorant => h.clone(),
        };
        let exercise = q.iter().zip(&op.g).map(|(q, g)| (q - g).abs() <= EXERCISE_TOL).collect();
        Ok(Self {
            start,
            op,
            h,
            q,
            exercise,
            exercise_violations: 0,
            monitor: Monitor::new(config),
            reach,
            one_step_interior,
        })
    }

    fn step(&mut self) -> Verdict {
        let next = self.op.apply(&self.q);
        let (residual, violations) = match self.start {
            Start::Payoff => step_stats(&self.q, &next),
            Start::Majorant => {
                let neg = |x: &[f64]| x.iter().map(|y| -y).collect::<Vec<_>>();
                step_stats(&neg(&self.q), &neg(&next))
            }
        };
        let slack = self.h.iter().zip(&next).map(|(h, q)| h - q).fold(f64::INFINITY, f64::min);
        if self.start == Start::Payoff {
            let m = mask_from(&self.q, &next, &self.op.g);
            self.exercise_violations += m.violations;
            self.exercise = m.mask;
        } else {
            self.exercise = next.iter().zip(&self.op.g).map(|(q, g)| (q - g).abs() <= EXERCISE_TOL).collect();
        }
        self.q = next;
        self.monitor.record(residual, violations, slack)
    }

    fn finish(self) -> CubatureRun {
        let report = self.monitor.finish();
        let n = report.iterations as f64;
        let margin: Vec<f64> = self.reach.iter().map(|r| r * n).collect();
        let safe_interior = self.op.spec.interior_count(&margin);
        let q = LatticeFunction::new(self.op.spec.clone(), self.q).expect("iterates stay finite");
        CubatureRun {
            q,
            report,
            exercise: self.exercise,
            exercise_violations: self.exercise_violations,
            one_step_interior: self.one_step_interior,
            safe_interior,
        }
    }
}
