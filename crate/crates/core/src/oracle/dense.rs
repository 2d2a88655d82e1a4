//! Brute-force Bermudan prices on a dense log-price grid.
//!
//! Each backward step integrates the Gaussian transition kernel by the
//! trapezoid rule over ±8 standard deviations, with the value function
//! linearly interpolated between grid nodes and replaced by `g ∨ 0` beyond
//! the grid. Because the grid is uniform the resulting weights depend only on
//! the node offset, so a step is a discrete correlation, done by FFT. The
//! contribution of the off-grid region never changes and is computed once.
//!
//! Dimensions 1 and 2 are supported (independent, identically distributed
//! log-prices, so the kernel is separable).

use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::OracleError;
use crate::OptionKind;

const KERNEL_HALF_WIDTH: f64 = 8.0;

/// Uniform grid with `n_points` nodes per axis on `[lower_i, upper_i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGridSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub n_points: usize,
    /// Trapezoid nodes across the ±8σ kernel support.
    pub quad_points: usize,
}

impl DenseGridSpec {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, n_points: usize, quad_points: usize) -> Result<Self, OracleError> {
        let spec = Self { lower, upper, n_points, quad_points };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), OracleError> {
        let d = self.lower.len();
        if d == 0 || d > 2 || self.upper.len() != d {
            return Err(OracleError::InvalidGrid(format!(
                "need 1 or 2 axes with matching bounds, got {} lower / {} upper",
                d,
                self.upper.len()
            )));
        }
        if self.lower.iter().zip(&self.upper).any(|(l, u)| !(l < u) || !l.is_finite() || !u.is_finite()) {
            return Err(OracleError::InvalidGrid("each axis needs finite lower < upper".into()));
        }
        if self.n_points < 1001 || self.n_points.is_multiple_of(2) {
            return Err(OracleError::InvalidGrid(format!(
                "n_points must be odd and >= 1001, got {}",
                self.n_points
            )));
        }
        if self.quad_points < 8001 {
            return Err(OracleError::InvalidGrid(format!("quad_points must be >= 8001, got {}", self.quad_points)));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn step(&self, axis: usize) -> f64 {
        (self.upper[axis] - self.lower[axis]) / (self.n_points - 1) as f64
    }

    pub fn coordinate(&self, axis: usize, i: isize) -> f64 {
        self.lower[axis] + self.step(axis) * i as f64
    }

    pub fn len(&self) -> usize {
        self.n_points.pow(self.dim() as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Black–Scholes dynamics per axis, calendar units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleModel {
    pub r: f64,
    pub delta: f64,
    pub sigma: f64,
    /// Time between exercise dates.
    pub t: f64,
}

impl OracleModel {
    fn validate(&self) -> Result<(), OracleError> {
        if !(self.sigma > 0.0 && self.t > 0.0 && self.r.is_finite() && self.delta.is_finite()) {
            return Err(OracleError::InvalidParams(format!("bad model {self:?}")));
        }
        Ok(())
    }
}

/// `K - Σβᵢe^{xᵢ}` (put) or `Σβᵢe^{xᵢ} - K` (call).
#[derive(Debug, Clone, PartialEq)]
pub struct OraclePayoff {
    pub kind: OptionKind,
    pub strike: f64,
    pub betas: Vec<f64>,
}

impl OraclePayoff {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let basket: f64 = self.betas.iter().zip(x).map(|(b, xi)| b * xi.exp()).sum();
        match self.kind {
            OptionKind::Put => self.strike - basket,
            OptionKind::Call => basket - self.strike,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Horizon {
    /// `n` exercise dates (`n = 0` returns `g ∨ 0`).
    Dates(usize),
    /// Value iteration until the sup-norm step drops below `tol`.
    Perpetual { tol: f64, max_iter: usize },
}

#[derive(Debug, Clone)]
pub struct DenseSolution {
    pub spec: DenseGridSpec,
    /// Row-major node values (last axis fastest).
    pub values: Vec<f64>,
    /// Discounted expectation from the final step.
    pub continuation: Vec<f64>,
    pub payoff: Vec<f64>,
    pub iterations: usize,
    pub residuals: Vec<f64>,
}

impl DenseSolution {
    pub fn node(&self, index: &[usize]) -> f64 {
        self.values[flat(index, self.spec.n_points)]
    }

    pub fn node_coordinates(&self, index: &[usize]) -> Vec<f64> {
        index.iter().enumerate().map(|(a, &i)| self.spec.coordinate(a, i as isize)).collect()
    }

    /// Multilinear interpolation of `field` at `x`; `None` off the grid.
    pub fn interpolate_field(&self, field: &[f64], x: &[f64]) -> Option<f64> {
        let n = self.spec.n_points;
        let d = self.spec.dim();
        let mut base = vec![0usize; d];
        let mut frac = vec![0.0; d];
        for a in 0..d {
            let u = (x[a] - self.spec.lower[a]) / self.spec.step(a);
            if !(u >= -1e-9 && u <= (n - 1) as f64 + 1e-9) {
                return None;
            }
            let u = u.clamp(0.0, (n - 1) as f64);
            let i = (u.floor() as usize).min(n - 2);
            base[a] = i;
            frac[a] = u - i as f64;
        }
        let mut total = 0.0;
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut idx = base.clone();
            for a in 0..d {
                if corner >> a & 1 == 1 {
                    w *= frac[a];
                    idx[a] += 1;
                } else {
                    w *= 1.0 - frac[a];
                }
            }
            if w != 0.0 {
                total += w * field[flat(&idx, n)];
            }
        }
        Some(total)
    }

    pub fn interpolate(&self, x: &[f64]) -> Option<f64> {
        self.interpolate_field(&self.values, x)
    }
}

fn flat(index: &[usize], n: usize) -> usize {
    index.iter().fold(0, |acc, &i| acc * n + i)
}

/// Trapezoid weights of the transition kernel spread onto grid offsets.
/// Returns `(first_offset, weights)`.
fn kernel_weights(model: &OracleModel, step: f64, quad_points: usize) -> (isize, Vec<f64>) {
    let drift = (model.r - model.delta - 0.5 * model.sigma * model.sigma) * model.t;
    let sd = model.sigma * model.t.sqrt();
    let h = 2.0 * KERNEL_HALF_WIDTH / (quad_points - 1) as f64;
    let norm = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    let shift = |z: f64| (drift + sd * z) / step;
    let first = shift(-KERNEL_HALF_WIDTH).floor() as isize;
    let last = shift(KERNEL_HALF_WIDTH).floor() as isize + 1;
    let mut w = vec![0.0; (last - first + 1) as usize];
    for q in 0..quad_points {
        let z = -KERNEL_HALF_WIDTH + h * q as f64;
        let end = if q == 0 || q == quad_points - 1 { 0.5 } else { 1.0 };
        let weight = end * h * norm * (-0.5 * z * z).exp();
        let u = shift(z);
        let o = u.floor();
        let f = u - o;
        let k = (o as isize - first) as usize;
        w[k] += weight * (1.0 - f);
        w[k + 1] += weight * f;
    }
    (first, w)
}

/// `out[i] = Σ_j w_j · x[i + j - start]` for `i in 0..n_out`, by FFT.
///
/// Two real lines travel through one complex transform (the kernel is real,
/// so the real and imaginary parts stay separate).
struct Correlator {
    size: usize,
    spectrum: Vec<Complex<f64>>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    offset: isize,
    linear_len: usize,
    n_in: usize,
    n_out: usize,
}

impl Correlator {
    fn new(first: isize, weights: &[f64], start: isize, n_in: usize, n_out: usize) -> Self {
        let len = weights.len();
        let linear_len = n_in + len - 1;
        let size = linear_len.next_power_of_two();
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(size);
        let inv = planner.plan_fft_inverse(size);
        let mut spectrum = vec![Complex::new(0.0, 0.0); size];
        for (k, w) in weights.iter().rev().enumerate() {
            spectrum[k] = Complex::new(*w, 0.0);
        }
        fwd.process(&mut spectrum);
        let scale = 1.0 / size as f64;
        spectrum.iter_mut().for_each(|c| *c *= scale);
        let last = first + len as isize - 1;
        Self { size, spectrum, fwd, inv, offset: last - start, linear_len, n_in, n_out }
    }

    /// Correlates `a` and, if given, `b` (both of length `n_in`).
    fn apply_pair(&self, a: &[f64], b: Option<&[f64]>, out_a: &mut [f64], out_b: Option<&mut [f64]>, buf: &mut Vec<Complex<f64>>) {
        debug_assert_eq!(a.len(), self.n_in);
        buf.clear();
        match b {
            Some(b) => buf.extend(a.iter().zip(b).map(|(&x, &y)| Complex::new(x, y))),
            None => buf.extend(a.iter().map(|&x| Complex::new(x, 0.0))),
        }
        buf.resize(self.size, Complex::new(0.0, 0.0));
        self.fwd.process(buf);
        buf.iter_mut().zip(&self.spectrum).for_each(|(b, s)| *b *= s);
        self.inv.process(buf);
        let at = |i: usize| {
            let s = i as isize + self.offset;
            if s >= 0 && (s as usize) < self.linear_len {
                buf[s as usize]
            } else {
                Complex::new(0.0, 0.0)
            }
        };
        for (i, o) in out_a.iter_mut().enumerate().take(self.n_out) {
            *o = at(i).re;
        }
        if let Some(out_b) = out_b {
            for (i, o) in out_b.iter_mut().enumerate().take(self.n_out) {
                *o = at(i).im;
            }
        }
    }

    fn apply(&self, input: &[f64], out: &mut [f64], buf: &mut Vec<Complex<f64>>) {
        self.apply_pair(input, None, out, None, buf);
    }
}

/// Correlates every row of a row-major `rows × n_in` block, two at a time.
fn correlate_rows(corr: &Correlator, input: &[f64], n_in: usize, n_out: usize) -> Vec<f64> {
    let rows = input.len() / n_in;
    let mut out = vec![0.0; rows * n_out];
    out.par_chunks_mut(2 * n_out)
        .zip(input.par_chunks(2 * n_in))
        .for_each_init(Vec::new, |buf, (o, x)| {
            if x.len() == 2 * n_in {
                let (oa, ob) = o.split_at_mut(n_out);
                corr.apply_pair(&x[..n_in], Some(&x[n_in..]), oa, Some(ob), buf);
            } else {
                corr.apply(x, o, buf);
            }
        });
    out
}

fn transpose(values: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = values[i * cols + j];
        }
    }
    out
}

/// Applies the (separable) transition kernel to grid functions.
struct Transition {
    n: usize,
    dim: usize,
    inner: Correlator,
    /// Kernel image of `g ∨ 0` on the off-grid region, on grid nodes.
    exterior: Vec<f64>,
}

impl Transition {
    fn new(spec: &DenseGridSpec, model: &OracleModel, payoff: &OraclePayoff) -> Self {
        let n = spec.n_points;
        let dim = spec.dim();
        let (first, w) = kernel_weights(model, spec.step(0), spec.quad_points);
        let last = first + w.len() as isize - 1;
        let pad_lo = first.min(0);
        let n_pad = (n as isize + last.max(0) - pad_lo) as usize;
        let outer = Correlator::new(first, &w, pad_lo, n_pad, n);
        let inner = Correlator::new(first, &w, 0, n, n);
        let in_grid = |i: isize| i >= 0 && i < n as isize;
        let outside = |idx: &[isize]| -> f64 {
            if idx.iter().all(|&i| in_grid(i)) {
                0.0
            } else {
                let x: Vec<f64> = idx.iter().enumerate().map(|(a, &i)| spec.coordinate(a, i)).collect();
                payoff.eval(&x).max(0.0)
            }
        };
        let exterior = match dim {
            1 => {
                let padded: Vec<f64> = (0..n_pad as isize).map(|p| outside(&[p + pad_lo])).collect();
                let mut out = vec![0.0; n];
                outer.apply(&padded, &mut out, &mut Vec::new());
                out
            }
            _ => {
                // axis 1 for every padded axis-0 row, then axis 0 per column
                let padded: Vec<f64> = (0..n_pad as isize)
                    .into_par_iter()
                    .flat_map_iter(|p| (0..n_pad as isize).map(move |q| (p, q)).collect::<Vec<_>>())
                    .map(|(p, q)| outside(&[p + pad_lo, q + pad_lo]))
                    .collect();
                let rows = correlate_rows(&outer, &padded, n_pad, n);
                let cols = correlate_rows(&outer, &transpose(&rows, n_pad, n), n_pad, n);
                transpose(&cols, n, n)
            }
        };
        Self { n, dim, inner, exterior }
    }

    /// Undiscounted expectation of `values` (with `g ∨ 0` off the grid).
    fn expectation(&self, values: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut out = match self.dim {
            1 => {
                let mut out = vec![0.0; n];
                self.inner.apply(values, &mut out, &mut Vec::new());
                out
            }
            _ => {
                let rows = correlate_rows(&self.inner, values, n, n);
                let cols = correlate_rows(&self.inner, &transpose(&rows, n, n), n, n);
                transpose(&cols, n, n)
            }
        };
        out.iter_mut().zip(&self.exterior).for_each(|(o, e)| *o += e);
        out
    }
}

/// Backward induction (or value iteration) for `g` on the dense grid.
pub fn dense_dp_bermudan(
    spec: &DenseGridSpec,
    model: &OracleModel,
    payoff: &OraclePayoff,
    horizon: Horizon,
) -> Result<DenseSolution, OracleError> {
    spec.validate()?;
    model.validate()?;
    if payoff.betas.len() != spec.dim() {
        return Err(OracleError::InvalidParams(format!(
            "payoff has {} weights for a {}-dimensional grid",
            payoff.betas.len(),
            spec.dim()
        )));
    }
    if spec.dim() == 2 && (spec.step(0) - spec.step(1)).abs() > 1e-12 * spec.step(0) {
        return Err(OracleError::InvalidGrid("2-D grids need equal spacing on both axes".into()));
    }
    let n = spec.n_points;
    let d = spec.dim();
    let mut index = vec![0usize; d];
    let mut g = Vec::with_capacity(spec.len());
    for k in 0..spec.len() {
        let mut rem = k;
        for a in (0..d).rev() {
            index[a] = rem % n;
            rem /= n;
        }
        let x: Vec<f64> = index.iter().enumerate().map(|(a, &i)| spec.coordinate(a, i as isize)).collect();
        g.push(payoff.eval(&x));
    }
    let transition = Transition::new(spec, model, payoff);
    let discount = (-model.r * model.t).exp();

    let mut values: Vec<f64> = g.iter().map(|v| v.max(0.0)).collect();
    let mut continuation = vec![0.0; values.len()];
    let mut residuals = Vec::new();
    let (steps, tol) = match horizon {
        Horizon::Dates(n) => (n, None),
        Horizon::Perpetual { tol, max_iter } => (max_iter, Some(tol)),
    };
    let mut iterations = 0;
    for _ in 0..steps {
        continuation = transition.expectation(&values);
        continuation.iter_mut().for_each(|c| *c *= discount);
        let next: Vec<f64> = continuation.iter().zip(&g).map(|(c, gv)| c.max(*gv)).collect();
        let residual = next.iter().zip(&values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        values = next;
        iterations += 1;
        residuals.push(residual);
        if let Some(tol) = tol {
            if residual < tol {
                break;
            }
        }
    }
    if let Some(tol) = tol {
        let last = residuals.last().copied().unwrap_or(f64::INFINITY);
        if !(last < tol) {
            return Err(OracleError::NotConverged { iterations, residual: last });
        }
    }
    Ok(DenseSolution { spec: spec.clone(), values, continuation, payoff: g, iterations, residuals })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::bs_european;

    fn put(strike: f64) -> OraclePayoff {
        OraclePayoff { kind: OptionKind::Put, strike, betas: vec![1.0] }
    }

    #[test]
    fn kernel_mass_is_one() {
        let model = OracleModel { r: 0.05, delta: 0.05, sigma: 1.0, t: 1.0 };
        let (_, w) = kernel_weights(&model, 0.004, 8001);
        let total: f64 = w.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spec_validation() {
        assert!(DenseGridSpec::new(vec![0.0], vec![1.0], 1000, 8001).is_err());
        assert!(DenseGridSpec::new(vec![0.0], vec![1.0], 1002, 8001).is_err());
        assert!(DenseGridSpec::new(vec![1.0], vec![0.0], 1001, 8001).is_err());
        assert!(DenseGridSpec::new(vec![0.0], vec![1.0], 1001, 8000).is_err());
        assert!(DenseGridSpec::new(vec![0.0; 3], vec![1.0; 3], 1001, 8001).is_err());
        assert!(DenseGridSpec::new(vec![0.0], vec![1.0], 1001, 8001).is_ok());
    }

    #[test]
    fn one_date_is_european() {
        let spec = DenseGridSpec::new(vec![-6.0], vec![2.0], 4001, 16001).unwrap();
        let model = OracleModel { r: 0.05, delta: 0.05, sigma: 1.0, t: 1.0 };
        let sol = dense_dp_bermudan(&spec, &model, &put(1.0), Horizon::Dates(1)).unwrap();
        for i in (1000..3000).step_by(50) {
            let x = spec.coordinate(0, i);
            let want = bs_european(x.exp(), 1.0, 0.05, 0.05, 1.0, 1.0, OptionKind::Put).unwrap();
            assert!((sol.continuation[i as usize] - want).abs() < 1e-6, "x={x}");
        }
    }

    #[test]
    fn zero_dates_is_payoff() {
        let spec = DenseGridSpec::new(vec![-1.0], vec![1.0], 1001, 8001).unwrap();
        let model = OracleModel { r: 0.05, delta: 0.05, sigma: 1.0, t: 1.0 };
        let sol = dense_dp_bermudan(&spec, &model, &put(1.0), Horizon::Dates(0)).unwrap();
        for (v, g) in sol.values.iter().zip(&sol.payoff) {
            assert_eq!(*v, g.max(0.0));
        }
    }

    #[test]
    fn two_dimensional_reduces_to_one() {
        let model = OracleModel { r: 0.05, delta: 0.05, sigma: 1.0, t: 0.5 };
        let flat = DenseGridSpec::new(vec![-8.0], vec![8.0], 1001, 8001).unwrap();
        let one = dense_dp_bermudan(&flat, &model, &put(1.0), Horizon::Dates(2)).unwrap();
        let spec = DenseGridSpec::new(vec![-8.0, -8.0], vec![8.0, 8.0], 1001, 8001).unwrap();
        let payoff = OraclePayoff { kind: OptionKind::Put, strike: 1.0, betas: vec![1.0, 0.0] };
        let two = dense_dp_bermudan(&spec, &model, &payoff, Horizon::Dates(2)).unwrap();
        // away from the axis-1 edges, where the exterior is g ∨ 0 rather than v
        for i in (0..1001).step_by(100) {
            for j in (400..=600).step_by(50) {
                let v = two.node(&[i, j]);
                assert!((v - one.values[i]).abs() < 1e-10, "({i},{j}): {v} vs {}", one.values[i]);
            }
        }
    }

    #[test]
    fn perpetual_dominates_finite_and_stays_below_strike() {
        let spec = DenseGridSpec::new(vec![-6.0], vec![4.0], 2001, 8001).unwrap();
        let model = OracleModel { r: 0.05, delta: 0.05, sigma: 1.0, t: 0.5 };
        let perp = dense_dp_bermudan(&spec, &model, &put(1.0), Horizon::Perpetual { tol: 1e-10, max_iter: 100_000 }).unwrap();
        let finite = dense_dp_bermudan(&spec, &model, &put(1.0), Horizon::Dates(5)).unwrap();
        for (p, f) in perp.values.iter().zip(&finite.values) {
            assert!(*p >= f - 1e-12);
            assert!(*p <= 1.0 + 1e-12);
        }
        assert!(perp.residuals.last().unwrap() < &1e-10);
    }

    #[test]
    fn perpetual_cap_is_an_error() {
        let spec = DenseGridSpec::new(vec![-6.0], vec![4.0], 1001, 8001).unwrap();
        let model = OracleModel { r: 0.05, delta: 0.05, sigma: 1.0, t: 0.5 };
        let err = dense_dp_bermudan(&spec, &model, &put(1.0), Horizon::Perpetual { tol: 1e-10, max_iter: 3 }).unwrap_err();
        assert!(matches!(err, OracleError::NotConverged { iterations: 3, .. }));
    }
}
