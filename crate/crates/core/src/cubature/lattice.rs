//! Rectangular lattices in log-price space and the lattice averaging operator.
//!
//! Between nodes a lattice function is interpolated multilinearly in the
//! price coordinates `e^{x_i}`, so functions affine in each `e^{x_i}` (the
//! basket payoffs and their majorants) are reproduced exactly. Queries that
//! leave the lattice take an exact exterior function instead.

use rayon::prelude::*;

use super::rule::CubatureRule;
use super::CubatureError;

/// Fractions this close to a node snap onto it.
const SNAP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LatticeSpec {
    origin: Vec<f64>,
    spacing: Vec<f64>,
    extents: Vec<usize>,
}

impl LatticeSpec {
    pub fn new(origin: Vec<f64>, spacing: Vec<f64>, extents: Vec<usize>) -> Result<Self, CubatureError> {
        let d = origin.len();
        if d == 0 || spacing.len() != d || extents.len() != d {
            return Err(CubatureError::InvalidLattice("origin, spacing and extents need one entry per axis".into()));
        }
        if origin.iter().any(|o| !o.is_finite()) || spacing.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(CubatureError::InvalidLattice("origin must be finite and spacing positive".into()));
        }
        if extents.iter().any(|&n| n < 2) {
            return Err(CubatureError::InvalidLattice("each axis needs at least two nodes".into()));
        }
        extents
            .iter()
            .try_fold(1usize, |acc, &n| acc.checked_mul(n))
            .ok_or_else(|| CubatureError::InvalidLattice("lattice too large".into()))?;
        Ok(Self { origin, spacing, extents })
    }

    /// Lattice on `[lower_i, upper_i]` with a common step, which must divide
    /// every axis length.
    pub fn from_bounds(lower: &[f64], upper: &[f64], step: f64) -> Result<Self, CubatureError> {
        if lower.len() != upper.len() {
            return Err(CubatureError::DimensionMismatch { expected: lower.len(), actual: upper.len() });
        }
        if !(step > 0.0 && step.is_finite()) {
            return Err(CubatureError::InvalidLattice(format!("step must be positive, got {step}")));
        }
        let mut extents = Vec::with_capacity(lower.len());
        for (l, u) in lower.iter().zip(upper) {
            if !(l < u) {
                return Err(CubatureError::InvalidLattice(format!("need lower < upper, got [{l}, {u}]")));
            }
            let cells = (u - l) / step;
            if (cells - cells.round()).abs() > 1e-6 {
                return Err(CubatureError::InvalidLattice(format!(
                    "step {step} does not divide [{l}, {u}]"
                )));
            }
            extents.push(cells.round() as usize + 1);
        }
        Self::new(lower.to_vec(), vec![step; lower.len()], extents)
    }

    pub fn dim(&self) -> usize {
        self.origin.len()
    }

    pub fn len(&self) -> usize {
        self.extents.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn origin(&self) -> &[f64] {
        &self.origin
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn extents(&self) -> &[usize] {
        &self.extents
    }

    pub fn lower(&self, axis: usize) -> f64 {
        self.origin[axis]
    }

    pub fn upper(&self, axis: usize) -> f64 {
        self.coordinate(axis, self.extents[axis] - 1)
    }

    pub fn coordinate(&self, axis: usize, i: usize) -> f64 {
        self.origin[axis] + self.spacing[axis] * i as f64
    }

    /// Row-major flat index (last axis fastest).
    pub fn flat_index(&self, index: &[usize]) -> usize {
        index.iter().zip(&self.extents).fold(0, |acc, (&i, &n)| acc * n + i)
    }

    pub fn unravel(&self, mut flat: usize, index: &mut [usize]) {
        for axis in (0..self.dim()).rev() {
            index[axis] = flat % self.extents[axis];
            flat /= self.extents[axis];
        }
    }

    pub fn node(&self, flat: usize) -> Vec<f64> {
        let mut idx = vec![0; self.dim()];
        self.unravel(flat, &mut idx);
        idx.iter().enumerate().map(|(a, &i)| self.coordinate(a, i)).collect()
    }

    /// Nodes at distance at least `margin_i` from both ends of every axis.
    pub fn interior_count(&self, margin: &[f64]) -> usize {
        self.extents
            .iter()
            .zip(&self.spacing)
            .zip(margin)
            .map(|((&n, &h), &m)| {
                let k = (m / h - 1e-9).ceil().max(0.0) as usize;
                n.saturating_sub(2 * k)
            })
            .product()
    }

    /// Whether node `flat` lies at distance at least `margin_i` from the boundary.
    pub fn in_interior(&self, flat: usize, margin: &[f64]) -> bool {
        let mut idx = vec![0; self.dim()];
        self.unravel(flat, &mut idx);
        idx.iter().zip(&self.extents).zip(&self.spacing).zip(margin).all(|(((&i, &n), &h), &m)| {
            let k = (m / h - 1e-9).ceil().max(0.0) as usize;
            i >= k && i + k < n
        })
    }
}

/// Values on the nodes of a [`LatticeSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeFunction {
    spec: LatticeSpec,
    values: Vec<f64>,
}

impl LatticeFunction {
    pub fn new(spec: LatticeSpec, values: Vec<f64>) -> Result<Self, CubatureError> {
        if values.len() != spec.len() {
            return Err(CubatureError::InvalidValues(format!(
                "lattice has {} nodes, got {} values",
                spec.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CubatureError::InvalidValues("values must be finite".into()));
        }
        Ok(Self { spec, values })
    }

    pub fn from_fn(spec: LatticeSpec, f: impl Fn(&[f64]) -> f64 + Sync) -> Result<Self, CubatureError> {
        let values = (0..spec.len()).into_par_iter().map(|k| f(&spec.node(k))).collect();
        Self::new(spec, values)
    }

    pub fn spec(&self) -> &LatticeSpec {
        &self.spec
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.values[self.spec.flat_index(index)]
    }

    /// Price-space multilinear interpolation; `None` off the lattice.
    pub fn interpolate(&self, x: &[f64]) -> Option<f64> {
        let d = self.spec.dim();
        let mut base = vec![0usize; d];
        let mut hi = vec![0.0; d];
        for a in 0..d {
            let u = (x[a] - self.spec.origin[a]) / self.spec.spacing[a];
            let n = self.spec.extents[a];
            if !(u >= -SNAP && u <= (n - 1) as f64 + SNAP) {
                return None;
            }
            let (o, w) = split(u, self.spec.spacing[a]);
            let o = o.clamp(0, n as isize - 1) as usize;
            if o == n - 1 && w > 0.0 {
                return None;
            }
            base[a] = o;
            hi[a] = w;
        }
        Some(corner_sum(&self.spec, &self.values, &base, &hi))
    }
}

/// Splits a fractional node position into `(node, upper weight)`.
fn split(u: f64, step: f64) -> (isize, f64) {
    let mut o = u.floor();
    let mut frac = u - o;
    if frac < SNAP {
        frac = 0.0;
    } else if frac > 1.0 - SNAP {
        o += 1.0;
        frac = 0.0;
    }
    let w = if frac == 0.0 { 0.0 } else { (frac * step).exp_m1() / step.exp_m1() };
    (o as isize, w)
}

fn corner_sum(spec: &LatticeSpec, values: &[f64], base: &[usize], hi: &[f64]) -> f64 {
    let d = base.len();
    let mut total = 0.0;
    'corner: for corner in 0..(1usize << d) {
        let mut w = 1.0;
        let mut flat = 0;
        for a in 0..d {
            let up = corner >> a & 1 == 1;
            if up && hi[a] == 0.0 {
                continue 'corner;
            }
            w *= if up { hi[a] } else { 1.0 - hi[a] };
            flat = flat * spec.extents[a] + base[a] + usize::from(up);
        }
        total += w * values[flat];
    }
    total
}

struct StencilPoint {
    weight: f64,
    shift: Vec<f64>,
    offset: Vec<isize>,
    hi: Vec<f64>,
}

/// Node-independent interpolation stencil of a rule on a lattice.
pub(crate) struct Stencil {
    points: Vec<StencilPoint>,
}

impl Stencil {
    pub(crate) fn new(spec: &LatticeSpec, rule: &CubatureRule) -> Result<Self, CubatureError> {
        if rule.dim() != spec.dim() {
            return Err(CubatureError::DimensionMismatch { expected: spec.dim(), actual: rule.dim() });
        }
        let points = rule
            .points()
            .iter()
            .zip(rule.weights())
            .map(|(x, &weight)| {
                let (offset, hi) = x.iter().zip(&spec.spacing).map(|(xi, &h)| split(-xi / h, h)).unzip();
                StencilPoint { weight, shift: x.clone(), offset, hi }
            })
            .collect();
        Ok(Self { points })
    }

    /// `Σ α_k f̂(x - x_k)` at every node, with `exterior` for off-lattice queries.
    pub(crate) fn apply(
        &self,
        spec: &LatticeSpec,
        values: &[f64],
        exterior: &(dyn Fn(&[f64]) -> f64 + Sync),
    ) -> Vec<f64> {
        let d = spec.dim();
        (0..spec.len())
            .into_par_iter()
            .map_init(
                || (vec![0usize; d], vec![0usize; d], vec![0.0; d]),
                |(idx, base, query), k| {
                    spec.unravel(k, idx);
                    let mut total = 0.0;
                    for p in &self.points {
                        let mut inside = true;
                        for a in 0..d {
                            let lo = idx[a] as isize + p.offset[a];
                            let top = lo + isize::from(p.hi[a] > 0.0);
                            if lo < 0 || top >= spec.extents[a] as isize {
                                inside = false;
                                break;
                            }
                            base[a] = lo as usize;
                        }
                        let v = if inside {
                            corner_sum(spec, values, base, &p.hi)
                        } else {
                            for a in 0..d {
                                query[a] = spec.coordinate(a, idx[a]) - p.shift[a];
                            }
                            exterior(query)
                        };
                        total += p.weight * v;
                    }
                    total
                },
            )
            .collect()
    }
}

/// `Af` on the lattice, with `exterior` used for queries that leave it.
pub fn apply_a(
    f: &LatticeFunction,
    rule: &impl AsRef<CubatureRule>,
    exterior: impl Fn(&[f64]) -> f64 + Sync,
) -> Result<LatticeFunction, CubatureError> {
    let stencil = Stencil::new(&f.spec, rule.as_ref())?;
    let values = stencil.apply(&f.spec, &f.values, &exterior);
    LatticeFunction::new(f.spec.clone(), values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cubature::rule::{gauss_hermite_rule, normalize_rule, tensor_rule};

    #[test]
    fn bounds_and_indices() {
        let s = LatticeSpec::from_bounds(&[-6.0, 0.0], &[2.0, 1.0], 0.01).unwrap();
        assert_eq!(s.extents(), &[801, 101]);
        assert!((s.upper(0) - 2.0).abs() < 1e-12);
        let mut idx = [0; 2];
        s.unravel(s.flat_index(&[17, 42]), &mut idx);
        assert_eq!(idx, [17, 42]);
        assert!(LatticeSpec::from_bounds(&[0.0], &[1.0], 0.3).is_err());
        assert!(LatticeSpec::from_bounds(&[1.0], &[0.0], 0.1).is_err());
        assert_eq!(s.interior_count(&[1.0, 0.0]), 601 * 101);
        assert!(s.in_interior(s.flat_index(&[100, 0]), &[1.0, 0.0]));
        assert!(!s.in_interior(s.flat_index(&[99, 0]), &[1.0, 0.0]));
    }

    #[test]
    fn interpolation_is_exact_in_price() {
        let s = LatticeSpec::from_bounds(&[-1.0, -1.0], &[1.0, 1.0], 0.25).unwrap();
        let f = |x: &[f64]| 2.0 + 3.0 * x[0].exp() - x[1].exp() + 0.5 * (x[0] + x[1]).exp();
        let lf = LatticeFunction::from_fn(s, f).unwrap();
        for x in [[0.1, -0.37], [-1.0, 1.0], [0.999, 0.0], [0.25, 0.5]] {
            assert!((lf.interpolate(&x).unwrap() - f(&x)).abs() < 1e-13);
        }
        assert!(lf.interpolate(&[1.1, 0.0]).is_none());
    }

    #[test]
    fn constant_is_preserved() {
        let s = LatticeSpec::from_bounds(&[-6.0], &[6.0], 0.01).unwrap();
        let rule = normalize_rule(&gauss_hermite_rule(5, 1.0, 0.0).unwrap());
        let f = LatticeFunction::new(s.clone(), vec![3.5; s.len()]).unwrap();
        let out = apply_a(&f, &rule, |_| 3.5).unwrap();
        assert!(out.values().iter().all(|v| (v - 3.5).abs() < 1e-14));
    }

    #[test]
    fn basket_payoff_is_invariant_on_interior() {
        let s = LatticeSpec::from_bounds(&[-3.0, -3.0], &[2.0, 2.0], 0.05).unwrap();
        let rule = normalize_rule(&tensor_rule(&gauss_hermite_rule(3, 0.25, 0.0).unwrap(), 2).unwrap());
        let g = |x: &[f64]| 1.0 - 0.5 * x[0].exp() - 0.5 * x[1].exp();
        let f = LatticeFunction::from_fn(s.clone(), g).unwrap();
        let out = apply_a(&f, &rule, |_| 0.0).unwrap();
        let reach = rule.rule().reach();
        for k in 0..s.len() {
            if s.in_interior(k, &reach) {
                assert!((out.values()[k] - f.values()[k]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn exponential_matches_direct_sum() {
        let s = LatticeSpec::from_bounds(&[-4.0], &[4.0], 0.01).unwrap();
        let rule = normalize_rule(&gauss_hermite_rule(5, 1.0, 0.0).unwrap());
        let f = LatticeFunction::from_fn(s.clone(), |x| x[0].exp()).unwrap();
        let out = apply_a(&f, &rule, |x| x[0].exp()).unwrap();
        let k = 400;
        let x = s.coordinate(0, k);
        let direct: f64 = rule.rule().points().iter().zip(rule.rule().weights()).map(|(p, w)| w * (x - p[0]).exp()).sum();
        assert!((out.values()[k] - direct).abs() < 1e-13);
        assert!((out.values()[k] - x.exp()).abs() < 1e-13);
    }

    #[test]
    fn dimension_mismatch() {
        let s = LatticeSpec::from_bounds(&[0.0], &[1.0], 0.5).unwrap();
        let f = LatticeFunction::new(s, vec![0.0; 3]).unwrap();
        let rule = tensor_rule(&gauss_hermite_rule(2, 1.0, 0.0).unwrap(), 2).unwrap();
        assert!(matches!(apply_a(&f, &rule, |_| 0.0), Err(CubatureError::DimensionMismatch { .. })));
    }
}
