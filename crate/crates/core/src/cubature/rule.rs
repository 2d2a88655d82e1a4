//! Cubature rules for Gaussian increments and their normalization.

use nalgebra::{DMatrix, SymmetricEigen};

use super::CubatureError;

/// Largest Gauss–Hermite order accepted.
pub const MAX_GAUSS_HERMITE: usize = 100;

/// Points `x_k ∈ ℝ^d` with convex weights `α_k`; the averaging operator is
/// `Af = Σ α_k f(· - x_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CubatureRule {
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl CubatureRule {
    pub fn new(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self, CubatureError> {
        if points.is_empty() || points.len() != weights.len() {
            return Err(CubatureError::InvalidRule(format!(
                "{} points with {} weights",
                points.len(),
                weights.len()
            )));
        }
        let d = points[0].len();
        if d == 0 || points.iter().any(|p| p.len() != d) {
            return Err(CubatureError::InvalidRule("points must share a positive dimension".into()));
        }
        if points.iter().flatten().chain(&weights).any(|v| !v.is_finite()) {
            return Err(CubatureError::InvalidRule("non-finite point or weight".into()));
        }
        if weights.iter().any(|&w| w < 0.0) {
            return Err(CubatureError::InvalidRule("weights must be nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-14 * weights.len() as f64 {
            return Err(CubatureError::InvalidRule(format!("weights sum to {total}, not 1")));
        }
        for (i, p) in points.iter().enumerate() {
            if points[..i].contains(p) {
                return Err(CubatureError::InvalidRule(format!("duplicate point {p:?}")));
            }
        }
        Ok(Self { points, weights })
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `Σ α_k Π_i (x_k)_i^{p_i}`.
    pub fn moment(&self, powers: &[i32]) -> f64 {
        self.points
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * x.iter().zip(powers).map(|(xi, &p)| xi.powi(p)).product::<f64>())
            .sum()
    }

    /// `max_k |(x_k)_i|` for each axis.
    pub fn reach(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.points.iter().map(|x| x[i].abs()).fold(0.0, f64::max)).collect()
    }

    /// `Af(x) = Σ α_k f(x - x_k)`, evaluated exactly.
    pub fn average(&self, f: impl Fn(&[f64]) -> f64, x: &[f64]) -> f64 {
        let mut y = vec![0.0; x.len()];
        self.points
            .iter()
            .zip(&self.weights)
            .map(|(p, w)| {
                y.iter_mut().zip(x).zip(p).for_each(|((y, x), p)| *y = x - p);
                w * f(&y)
            })
            .sum()
    }
}

impl AsRef<CubatureRule> for CubatureRule {
    fn as_ref(&self) -> &CubatureRule {
        self
    }
}

fn renormalized(points: Vec<Vec<f64>>, mut weights: Vec<f64>) -> Result<CubatureRule, CubatureError> {
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    CubatureRule::new(points, weights)
}

fn check_time(t: f64) -> Result<(), CubatureError> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(CubatureError::InvalidOrder(format!("time step must be positive, got {t}")));
    }
    Ok(())
}

/// `n`-point Gauss–Hermite rule for `Normal(μt, t)` (Golub–Welsch).
pub fn gauss_hermite_rule(n_points: usize, t: f64, mu: f64) -> Result<CubatureRule, CubatureError> {
    if n_points == 0 || n_points > MAX_GAUSS_HERMITE {
        return Err(CubatureError::InvalidOrder(format!(
            "Gauss-Hermite order must be in 1..={MAX_GAUSS_HERMITE}, got {n_points}"
        )));
    }
    check_time(t)?;
    if !mu.is_finite() {
        return Err(CubatureError::InvalidOrder(format!("drift must be finite, got {mu}")));
    }
    // Jacobi matrix of the probabilists' Hermite recurrence
    let jacobi = DMatrix::from_fn(n_points, n_points, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64).sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(jacobi);
    let mut nodes: Vec<(f64, f64)> = (0..n_points)
        .map(|k| (eig.eigenvalues[k], eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    nodes.sort_by(|a, b| a.0.total_cmp(&b.0));
    // restore exact symmetry about zero
    for k in 0..n_points / 2 {
        let (lo, hi) = (nodes[k], nodes[n_points - 1 - k]);
        let z = 0.5 * (hi.0 - lo.0);
        let w = 0.5 * (hi.1 + lo.1);
        nodes[k] = (-z, w);
        nodes[n_points - 1 - k] = (z, w);
    }
    if n_points % 2 == 1 {
        nodes[n_points / 2].0 = 0.0;
    }
    let s = t.sqrt();
    let points = nodes.iter().map(|(z, _)| vec![mu * t + s * z]).collect();
    let weights = nodes.iter().map(|(_, w)| *w).collect();
    renormalized(points, weights)
}

/// `d`-fold product of a one-dimensional rule.
pub fn tensor_rule(rule_1d: &CubatureRule, d: usize) -> Result<CubatureRule, CubatureError> {
    if rule_1d.dim() != 1 {
        return Err(CubatureError::DimensionMismatch { expected: 1, actual: rule_1d.dim() });
    }
    if d == 0 {
        return Err(CubatureError::InvalidOrder("dimension must be at least 1".into()));
    }
    let m = rule_1d.len();
    let total = m.checked_pow(d as u32).ok_or_else(|| CubatureError::InvalidOrder("tensor rule too large".into()))?;
    let mut points = Vec::with_capacity(total);
    let mut weights = Vec::with_capacity(total);
    for mut k in 0..total {
        let mut p = vec![0.0; d];
        let mut w = 1.0;
        for axis in (0..d).rev() {
            let i = k % m;
            k /= m;
            p[axis] = rule_1d.points[i][0];
            w *= rule_1d.weights[i];
        }
        points.push(p);
        weights.push(w);
    }
    renormalized(points, weights)
}

/// `2d` points `±sqrt(d·t)·e_i` with weights `1/(2d)`: matches the mean and
/// covariance `t·I` of a centred Gaussian, and all odd moments.
pub fn degree3_rule(d: usize, t: f64) -> Result<CubatureRule, CubatureError> {
    if d == 0 {
        return Err(CubatureError::InvalidOrder("dimension must be at least 1".into()));
    }
    check_time(t)?;
    let r = (d as f64 * t).sqrt();
    let mut points = Vec::with_capacity(2 * d);
    for i in 0..d {
        for sign in [1.0, -1.0] {
            let mut p = vec![0.0; d];
            p[i] = sign * r;
            points.push(p);
        }
    }
    CubatureRule::new(points, vec![1.0 / (2 * d) as f64; 2 * d])
}

/// A rule shifted so that `Σ α_k e^{-(x_k)_i} = 1` on every axis, which makes
/// each `e^{x_i}` invariant under the averaging operator.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedRule {
    rule: CubatureRule,
    shift: Vec<f64>,
}

impl NormalizedRule {
    pub fn rule(&self) -> &CubatureRule {
        &self.rule
    }

    /// The per-axis shift `δ` added to the original points.
    pub fn shift(&self) -> &[f64] {
        &self.shift
    }

    /// `max_i |Σ α_k e^{-(x_k)_i} - 1|`.
    pub fn condition_residual(&self) -> f64 {
        (0..self.rule.dim())
            .map(|i| {
                let s: f64 = self.rule.points.iter().zip(&self.rule.weights).map(|(x, w)| w * (-x[i]).exp()).sum();
                (s - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }
}

impl AsRef<CubatureRule> for NormalizedRule {
    fn as_ref(&self) -> &CubatureRule {
        &self.rule
    }
}

/// Shifts points by `δ_i = ln Σ α_k e^{-(y_k)_i}`.
pub fn normalize_rule(rule: &CubatureRule) -> NormalizedRule {
    let shift: Vec<f64> = (0..rule.dim())
        .map(|i| {
            // log-sum-exp over the terms -y_ki + ln α_k
            let terms: Vec<f64> = rule
                .points
                .iter()
                .zip(&rule.weights)
                .filter(|(_, w)| **w > 0.0)
                .map(|(y, w)| w.ln() - y[i])
                .collect();
            let top = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            top + terms.iter().map(|v| (v - top).exp()).sum::<f64>().ln()
        })
        .collect();
    let points = rule.points.iter().map(|y| y.iter().zip(&shift).map(|(y, d)| y + d).collect()).collect();
    NormalizedRule { rule: CubatureRule { points, weights: rule.weights.clone() }, shift }
}
