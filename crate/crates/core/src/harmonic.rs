//! Functions harmonic for the constant-coefficient generator `f ↦ βf' + ½f''`.
//!
//! The harmonic space is two-dimensional: `span{1, e^{-2βx}}` when `β ≠ 0`
//! and the affine functions when `β = 0`. Every piece is stored in a basis
//! anchored at a nearby abscissa so that `e^{-2β(x - anchor)}` stays in range
//! on the interval where the piece is used.
//!
//! [`PiecewiseHarmonic`] carries a strictly increasing list of breakpoints, one
//! harmonic piece per bounded interval and one harmonic extension on each of
//! the two unbounded half-lines. [`interpolate`] builds the piecewise-harmonic
//! interpolant through node values; [`max_with_harmonic`] composes it with a
//! harmonic lower bound exactly, inserting crossing points as breakpoints.

use thiserror::Error;

/// Below this `|β|` the affine basis `{1, x - anchor}` is used.
pub const AFFINE_THRESHOLD: f64 = 1e-12;

/// Largest accepted ∞-norm condition number of the 2×2 interpolation system.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HarmonicError {
    #[error("coincident abscissas at {0}")]
    CoincidentAbscissas(f64),
    #[error("harmonic interpolation between {a0} and {a1} is ill-conditioned (condition number {condition:.3e})")]
    IllConditioned { a0: f64, a1: f64, condition: f64 },
    #[error("expected {expected} values, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("invalid support grid: {0}")]
    InvalidGrid(String),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("generator drift mismatch: {0} vs {1}")]
    BetaMismatch(f64, f64),
    #[error("invalid generator parameters: {0}")]
    InvalidParams(String),
}

/// Drift, discount rate and exercise mesh of the generator, in time units
/// where the volatility is one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorParams {
    pub beta: f64,
    pub rate: f64,
    pub mesh: f64,
}

impl GeneratorParams {
    pub fn new(beta: f64, rate: f64, mesh: f64) -> Result<Self, HarmonicError> {
        if !beta.is_finite() {
            return Err(HarmonicError::InvalidParams(format!("beta must be finite, got {beta}")));
        }
        if !(rate >= 0.0 && rate.is_finite()) {
            return Err(HarmonicError::InvalidParams(format!("rate must be finite and >= 0, got {rate}")));
        }
        if !(mesh > 0.0 && mesh.is_finite()) {
            return Err(HarmonicError::InvalidParams(format!("mesh must be finite and > 0, got {mesh}")));
        }
        Ok(Self { beta, rate, mesh })
    }

    /// Black–Scholes log-price dynamics rescaled to unit volatility.
    ///
    /// Time is measured in units of `σ²·t`, so the drift becomes
    /// `(r - δ)/σ² - ½`, the rate `r/σ²` and the mesh `σ²·t`. The discount
    /// factor `e^{-rate·mesh}` equals `e^{-r·t}`.
    pub fn from_black_scholes(r: f64, delta: f64, sigma: f64, t: f64) -> Result<Self, HarmonicError> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(HarmonicError::InvalidParams(format!("sigma must be finite and > 0, got {sigma}")));
        }
        let var = sigma * sigma;
        Self::new((r - delta) / var - 0.5, r / var, var * t)
    }

    pub fn discount(&self) -> f64 {
        (-self.rate * self.mesh).exp()
    }
}

/// `x ↦ γ₀ + γ₁·e^{-2β(x - anchor)}`, or `γ₀ + γ₁·(x - anchor)` in the affine case.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HarmonicFunction {
    pub gamma0: f64,
    pub gamma1: f64,
    pub beta: f64,
    pub anchor: f64,
}

impl HarmonicFunction {
    pub fn new(gamma0: f64, gamma1: f64, beta: f64, anchor: f64) -> Self {
        Self { gamma0, gamma1, beta, anchor }
    }

    pub fn constant(value: f64, beta: f64) -> Self {
        Self::new(value, 0.0, beta, 0.0)
    }

    pub fn is_affine(&self) -> bool {
        self.beta.abs() < AFFINE_THRESHOLD
    }

    /// Exponent `λ = -2β` of the non-constant basis element.
    pub fn exponent(&self) -> f64 {
        -2.0 * self.beta
    }

    pub fn is_constant(&self) -> bool {
        self.gamma1 == 0.0
    }

    /// Value of the non-constant basis element at `x`.
    pub fn basis(&self, x: f64) -> f64 {
        if self.is_affine() {
            x - self.anchor
        } else {
            (self.exponent() * (x - self.anchor)).exp()
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        if self.gamma1 == 0.0 {
            return self.gamma0;
        }
        self.gamma0 + self.gamma1 * self.basis(x)
    }

    /// The same function expressed with a different anchor.
    pub fn rebased(&self, anchor: f64) -> Self {
        if self.gamma1 == 0.0 {
            return Self { anchor, ..*self };
        }
        if self.is_affine() {
            Self {
                gamma0: self.gamma0 + self.gamma1 * (anchor - self.anchor),
                anchor,
                ..*self
            }
        } else {
            Self {
                gamma1: self.gamma1 * (self.exponent() * (anchor - self.anchor)).exp(),
                anchor,
                ..*self
            }
        }
    }

    fn same_beta(&self, other: &Self) -> bool {
        self.beta == other.beta || (self.is_affine() && other.is_affine())
    }
}

/// The unique harmonic function through `(a0, c0)` and `(a1, c1)`, anchored at `min(a0, a1)`.
pub fn solve_harmonic_through(
    a0: f64,
    c0: f64,
    a1: f64,
    c1: f64,
    params: &GeneratorParams,
) -> Result<HarmonicFunction, HarmonicError> {
    if !(a0.is_finite() && a1.is_finite()) {
        return Err(HarmonicError::NonFinite("abscissa"));
    }
    if !(c0.is_finite() && c1.is_finite()) {
        return Err(HarmonicError::NonFinite("ordinate"));
    }
    if a0 == a1 {
        return Err(HarmonicError::CoincidentAbscissas(a0));
    }
    let ((lo, c_lo), (hi, c_hi)) = if a0 < a1 { ((a0, c0), (a1, c1)) } else { ((a1, c1), (a0, c0)) };
    let width = hi - lo;
    let beta = params.beta;

    if beta.abs() < AFFINE_THRESHOLD {
        // System [[1, 0], [1, width]].
        let condition = (1.0 + width).max(1.0) * (2.0 / width).max(1.0);
        if !(condition <= MAX_CONDITION) {
            return Err(HarmonicError::IllConditioned { a0, a1, condition });
        }
        let slope = (c_hi - c_lo) / width;
        return Ok(HarmonicFunction::new(c_lo, slope, beta, lo));
    }

    // System [[1, 1], [1, E]] with E = e^{λ·width}.
    let lambda = -2.0 * beta;
    let e_hi = (lambda * width).exp();
    let gap = (lambda * width).exp_m1();
    let row = (1.0 + e_hi).max(2.0);
    let condition = row * row / gap.abs();
    if !(condition.is_finite() && condition <= MAX_CONDITION) {
        return Err(HarmonicError::IllConditioned { a0, a1, condition });
    }
    let gamma1 = (c_hi - c_lo) / gap;
    Ok(HarmonicFunction::new(c_lo - gamma1, gamma1, beta, lo))
}

/// Strictly increasing support abscissas `a₀ < … < a_m`, `m ≥ 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportGrid {
    abscissas: Vec<f64>,
}

impl SupportGrid {
    pub fn new(abscissas: Vec<f64>) -> Result<Self, HarmonicError> {
        if abscissas.len() < 2 {
            return Err(HarmonicError::InvalidGrid(format!(
                "need at least two abscissas, got {}",
                abscissas.len()
            )));
        }
        if abscissas.iter().any(|a| !a.is_finite()) {
            return Err(HarmonicError::InvalidGrid("abscissas must be finite".into()));
        }
        if let Some(w) = abscissas.windows(2).find(|w| w[0] >= w[1]) {
            return Err(HarmonicError::InvalidGrid(format!(
                "abscissas must be strictly increasing ({} >= {})",
                w[0], w[1]
            )));
        }
        Ok(Self { abscissas })
    }

    /// `n_nodes` equally spaced abscissas from `lower` to `upper` inclusive.
    pub fn uniform(lower: f64, upper: f64, n_nodes: usize) -> Result<Self, HarmonicError> {
        if n_nodes < 2 || !(lower < upper) {
            return Err(HarmonicError::InvalidGrid(format!(
                "uniform grid needs lower < upper and >= 2 nodes (got [{lower}, {upper}], {n_nodes})"
            )));
        }
        let step = (upper - lower) / (n_nodes - 1) as f64;
        let mut abscissas: Vec<f64> = (0..n_nodes).map(|i| lower + step * i as f64).collect();
        abscissas[n_nodes - 1] = upper;
        Self::new(abscissas)
    }

    pub fn abscissas(&self) -> &[f64] {
        &self.abscissas
    }

    /// Number of nodes, `m + 1`.
    pub fn len(&self) -> usize {
        self.abscissas.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn lower(&self) -> f64 {
        self.abscissas[0]
    }

    pub fn upper(&self) -> f64 {
        self.abscissas[self.abscissas.len() - 1]
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lower() <= x && x <= self.upper()
    }
}

/// A continuous function that is harmonic between consecutive breakpoints
/// and on the two outer half-lines.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseHarmonic {
    grid: SupportGrid,
    pieces: Vec<HarmonicFunction>,
    left_ext: HarmonicFunction,
    right_ext: HarmonicFunction,
}

/// One maximal interval of a [`PiecewiseHarmonic`] together with its piece.
/// Unbounded ends are `±∞`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub lo: f64,
    pub hi: f64,
    pub piece: HarmonicFunction,
}

impl PiecewiseHarmonic {
    /// Assemble from parts. `pieces.len()` must be `grid.len() - 1` and all
    /// pieces must share one drift.
    pub fn from_parts(
        grid: SupportGrid,
        pieces: Vec<HarmonicFunction>,
        left_ext: HarmonicFunction,
        right_ext: HarmonicFunction,
    ) -> Result<Self, HarmonicError> {
        if pieces.len() + 1 != grid.len() {
            return Err(HarmonicError::LengthMismatch {
                expected: grid.len() - 1,
                actual: pieces.len(),
            });
        }
        for p in pieces.iter().chain([&left_ext, &right_ext]) {
            if !p.same_beta(&left_ext) {
                return Err(HarmonicError::BetaMismatch(left_ext.beta, p.beta));
            }
        }
        Ok(Self { grid, pieces, left_ext, right_ext })
    }

    pub fn constant(value: f64, grid: SupportGrid, beta: f64) -> Self {
        let h = HarmonicFunction::constant(value, beta);
        let pieces = vec![h; grid.len() - 1];
        Self { grid, pieces, left_ext: h, right_ext: h }
    }

    pub fn grid(&self) -> &SupportGrid {
        &self.grid
    }

    pub fn pieces(&self) -> &[HarmonicFunction] {
        &self.pieces
    }

    pub fn left_ext(&self) -> &HarmonicFunction {
        &self.left_ext
    }

    pub fn right_ext(&self) -> &HarmonicFunction {
        &self.right_ext
    }

    pub fn beta(&self) -> f64 {
        self.left_ext.beta
    }

    /// Value at `x`. At a shared breakpoint the piece to the left is used.
    pub fn evaluate(&self, x: f64) -> f64 {
        let a = self.grid.abscissas();
        if x < a[0] {
            return self.left_ext.eval(x);
        }
        if x > a[a.len() - 1] {
            return self.right_ext.eval(x);
        }
        let below = a.partition_point(|&ai| ai < x);
        let idx = below.saturating_sub(1).min(self.pieces.len() - 1);
        self.pieces[idx].eval(x)
    }

    /// Values at the breakpoints.
    pub fn node_values(&self) -> Vec<f64> {
        self.grid.abscissas().iter().map(|&x| self.evaluate(x)).collect()
    }

    /// All segments from `-∞` to `+∞` in order.
    pub fn segments(&self) -> Vec<Segment> {
        let a = self.grid.abscissas();
        let mut out = Vec::with_capacity(self.pieces.len() + 2);
        out.push(Segment { lo: f64::NEG_INFINITY, hi: a[0], piece: self.left_ext });
        for (i, p) in self.pieces.iter().enumerate() {
            out.push(Segment { lo: a[i], hi: a[i + 1], piece: *p });
        }
        out.push(Segment { lo: a[a.len() - 1], hi: f64::INFINITY, piece: self.right_ext });
        out
    }

    /// Largest relative jump between adjacent segments at a shared breakpoint.
    pub fn max_discontinuity(&self) -> f64 {
        let segs = self.segments();
        segs.windows(2)
            .map(|w| {
                let x = w[0].hi;
                let (l, r) = (w[0].piece.eval(x), w[1].piece.eval(x));
                (l - r).abs() / l.abs().max(r.abs()).max(1.0)
            })
            .fold(0.0, f64::max)
    }
}

/// Piecewise-harmonic interpolation of `values` on `grid`.
///
/// Piece `i` is the harmonic function through `(a_i, v_i)` and
/// `(a_{i+1}, v_{i+1})`; the outer half-lines reuse the outermost pieces.
pub fn interpolate(
    values: &[f64],
    grid: &SupportGrid,
    params: &GeneratorParams,
) -> Result<PiecewiseHarmonic, HarmonicError> {
    if values.len() != grid.len() {
        return Err(HarmonicError::LengthMismatch { expected: grid.len(), actual: values.len() });
    }
    let a = grid.abscissas();
    let pieces = (0..a.len() - 1)
        .map(|i| solve_harmonic_through(a[i], values[i], a[i + 1], values[i + 1], params))
        .collect::<Result<Vec<_>, _>>()?;
    let left_ext = pieces[0];
    let right_ext = pieces[pieces.len() - 1];
    Ok(PiecewiseHarmonic { grid: grid.clone(), pieces, left_ext, right_ext })
}

/// Exact piecewise-harmonic representation of `x ↦ max(pw(x), h(x))`.
///
/// Two harmonic functions with the same drift differ by a harmonic function,
/// which is monotone, so each segment contains at most one crossing and it is
/// found in closed form.
pub fn max_with_harmonic(
    pw: &PiecewiseHarmonic,
    h: &HarmonicFunction,
) -> Result<PiecewiseHarmonic, HarmonicError> {
    if !pw.left_ext.same_beta(h) {
        return Err(HarmonicError::BetaMismatch(pw.beta(), h.beta));
    }
    let mut out: Vec<Segment> = Vec::with_capacity(pw.pieces.len() + 4);
    for seg in pw.segments() {
        let cross = crossing(&seg.piece, h, seg.lo, seg.hi);
        match cross {
            Some(root) => {
                push_winner(&mut out, seg.lo, root, &seg.piece, h);
                push_winner(&mut out, root, seg.hi, &seg.piece, h);
            }
            None => push_winner(&mut out, seg.lo, seg.hi, &seg.piece, h),
        }
    }

    let n = out.len();
    let breakpoints: Vec<f64> = out[..n - 1].iter().map(|s| s.hi).collect();
    let grid = SupportGrid::new(breakpoints)?;
    let pieces = out[1..n - 1].iter().map(|s| s.piece).collect();
    Ok(PiecewiseHarmonic {
        grid,
        pieces,
        left_ext: out[0].piece,
        right_ext: out[n - 1].piece,
    })
}

/// Crossing of `p` and `h` strictly inside `(lo, hi)`, if any.
fn crossing(p: &HarmonicFunction, h: &HarmonicFunction, lo: f64, hi: f64) -> Option<f64> {
    let h = h.rebased(p.anchor);
    let d0 = p.gamma0 - h.gamma0;
    let d1 = p.gamma1 - h.gamma1;
    if d1 == 0.0 {
        return None;
    }
    let root = if p.is_affine() {
        p.anchor - d0 / d1
    } else {
        let ratio = -d0 / d1;
        if !(ratio > 0.0) {
            return None;
        }
        p.anchor + ratio.ln() / p.exponent()
    };
    if !root.is_finite() {
        return None;
    }
    let margin = |x: f64| 1e-13 * x.abs().max(1.0);
    let inside_lo = lo == f64::NEG_INFINITY || root - lo > margin(lo);
    let inside_hi = hi == f64::INFINITY || hi - root > margin(hi);
    (inside_lo && inside_hi).then_some(root)
}

fn push_winner(out: &mut Vec<Segment>, lo: f64, hi: f64, p: &HarmonicFunction, h: &HarmonicFunction) {
    let probe = match (lo.is_finite(), hi.is_finite()) {
        (true, true) => 0.5 * (lo + hi),
        (false, true) => hi - 1.0,
        (true, false) => lo + 1.0,
        (false, false) => 0.0,
    };
    let piece = if p.eval(probe) >= h.eval(probe) {
        *p
    } else if h.is_constant() {
        *h
    } else {
        // keep the exponential basis in range on this segment
        let anchor = if lo.is_finite() { lo } else { hi };
        h.rebased(anchor)
    };
    out.push(Segment { lo, hi, piece });
}
