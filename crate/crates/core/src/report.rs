//! Iteration control and per-step diagnostics shared by both pricers.

use serde::{Deserialize, Serialize};

/// Consecutive non-decreasing residuals that count as stagnation.
pub const STAGNATION_WINDOW: usize = 50;
/// Slack below which a decrease between iterates counts as a violation.
pub const MONOTONICITY_SLACK: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IterationConfig {
    /// Sup-norm stopping tolerance on successive iterates.
    pub tol: f64,
    pub max_iter: usize,
    /// Keep one [`IterationRow`] per step.
    pub record_trace: bool,
}

impl Default for IterationConfig {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 100_000, record_trace: false }
    }
}

impl IterationConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(format!("tol must be positive, got {}", self.tol));
        }
        if self.max_iter == 0 {
            return Err("max_iter must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRow {
    pub iteration: usize,
    pub residual: f64,
    pub ratio: Option<f64>,
    /// `min_j (h_j - q_j)`; negative means the majorant was crossed.
    pub min_slack_to_h: f64,
    pub violations: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iterations: usize,
    pub residuals: Vec<f64>,
    /// `(n, residual[n] / residual[n-1])`, kept where the denominator exceeds `10·tol`.
    pub contraction_ratios: Vec<(usize, f64)>,
    /// Node decreases beyond [`MONOTONICITY_SLACK`], summed over all steps.
    pub monotonicity_violations: usize,
    pub min_slack_to_h: f64,
    pub converged: bool,
    pub stagnated: bool,
    pub trace: Vec<IterationRow>,
}

impl IterationReport {
    pub fn final_residual(&self) -> Option<f64> {
        self.residuals.last().copied()
    }

    pub fn max_ratio(&self) -> Option<f64> {
        self.contraction_ratios.iter().map(|r| r.1).reduce(f64::max)
    }
}

/// Outcome of recording one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Continue,
    Converged,
    Stagnated,
    Exhausted,
}

/// Accumulates an [`IterationReport`] and decides when to stop.
#[derive(Debug, Clone)]
pub struct Monitor {
    config: IterationConfig,
    report: IterationReport,
    flat_run: usize,
}

impl Monitor {
    pub fn new(config: IterationConfig) -> Self {
        let report = IterationReport { min_slack_to_h: f64::INFINITY, ..Default::default() };
        Self { config, report, flat_run: 0 }
    }

    pub fn config(&self) -> &IterationConfig {
        &self.config
    }

    pub fn record(&mut self, residual: f64, violations: usize, min_slack_to_h: f64) -> Verdict {
        let r = &mut self.report;
        r.iterations += 1;
        let n = r.iterations;
        let ratio = match r.residuals.last() {
            Some(&prev) if prev > 10.0 * self.config.tol => Some(residual / prev),
            _ => None,
        };
        if let Some(q) = ratio {
            r.contraction_ratios.push((n, q));
        }
        match r.residuals.last() {
            Some(&prev) if residual >= prev => self.flat_run += 1,
            _ => self.flat_run = 0,
        }
        r.residuals.push(residual);
        r.monotonicity_violations += violations;
        r.min_slack_to_h = r.min_slack_to_h.min(min_slack_to_h);
        if self.config.record_trace {
            r.trace.push(IterationRow { iteration: n, residual, ratio, min_slack_to_h, violations });
        }
        if residual < self.config.tol {
            r.converged = true;
            Verdict::Converged
        } else if self.flat_run >= STAGNATION_WINDOW {
            r.stagnated = true;
            Verdict::Stagnated
        } else if n >= self.config.max_iter {
            Verdict::Exhausted
        } else {
            Verdict::Continue
        }
    }

    pub fn finish(self) -> IterationReport {
        self.report
    }
}

/// Sup-norm of `next - prev` and the count of entries with `next < prev - slack`.
pub fn step_stats(prev: &[f64], next: &[f64]) -> (f64, usize) {
    prev.iter().zip(next).fold((0.0, 0), |(res, viol), (p, q)| {
        let d = q - p;
        (res.max(d.abs()), viol + usize::from(d < -MONOTONICITY_SLACK))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratios_skip_small_denominators() {
        let mut m = Monitor::new(IterationConfig { tol: 1e-3, max_iter: 10, record_trace: true });
        assert_eq!(m.record(1.0, 0, 0.0), Verdict::Continue);
        assert_eq!(m.record(0.5, 0, 0.0), Verdict::Continue);
        assert_eq!(m.record(0.005, 0, 0.0), Verdict::Continue);
        assert_eq!(m.record(0.0001, 0, 0.0), Verdict::Converged);
        let r = m.finish();
        assert_eq!(r.contraction_ratios, vec![(2, 0.5), (3, 0.01)]);
        assert!(r.converged);
        assert_eq!(r.trace.len(), 4);
        assert_eq!(r.trace[3].ratio, None);
    }

    #[test]
    fn stagnation_and_cap() {
        let mut m = Monitor::new(IterationConfig { tol: 1e-12, max_iter: 1000, record_trace: false });
        let mut last = Verdict::Continue;
        for _ in 0..=STAGNATION_WINDOW {
            last = m.record(1.0, 0, 0.0);
        }
        assert_eq!(last, Verdict::Stagnated);

        let mut m = Monitor::new(IterationConfig { tol: 1e-12, max_iter: 3, record_trace: false });
        m.record(3.0, 0, 0.0);
        m.record(2.0, 0, 0.0);
        assert_eq!(m.record(1.0, 2, -1.0), Verdict::Exhausted);
        let r = m.finish();
        assert_eq!(r.monotonicity_violations, 2);
        assert_eq!(r.min_slack_to_h, -1.0);
        assert!(!r.converged);
    }

    #[test]
    fn step_stats_counts_decreases() {
        let (res, viol) = step_stats(&[1.0, 2.0, 3.0], &[1.5, 2.0, 2.0]);
        assert_eq!(res, 1.0);
        assert_eq!(viol, 1);
    }

    #[test]
    fn config_validation() {
        assert!(IterationConfig::default().validate().is_ok());
        assert!(IterationConfig { tol: 0.0, ..Default::default() }.validate().is_err());
        assert!(IterationConfig { max_iter: 0, ..Default::default() }.validate().is_err());
    }
}
