//! Helpers shared by the property and acceptance suites.
#![allow(dead_code)]

use bermudan_core::harmonic::{interpolate, max_with_harmonic, GeneratorParams, HarmonicFunction, PiecewiseHarmonic, SupportGrid};
use bermudan_core::oracle::quadrature::integrate_piecewise;
use bermudan_core::semigroup::SemigroupParams;
use rand::Rng;

/// Random strictly increasing grid with `n` nodes inside `[lo, hi]`.
pub fn random_grid<R: Rng>(rng: &mut R, n: usize, lo: f64, hi: f64) -> SupportGrid {
    loop {
        let mut xs: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        xs.sort_by(f64::total_cmp);
        if xs.windows(2).all(|w| w[1] - w[0] > 1e-3) {
            return SupportGrid::new(xs).unwrap();
        }
    }
}

/// Random piecewise-harmonic function: an interpolant of random node values,
/// optionally floored by a random constant so breakpoints also fall between
/// nodes.
pub fn random_piecewise<R: Rng>(rng: &mut R, beta: f64) -> PiecewiseHarmonic {
    let n = rng.gen_range(2..9);
    let grid = random_grid(rng, n, -2.0, 2.0);
    let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..2.0)).collect();
    let params = GeneratorParams::new(beta, 0.0, 1.0).unwrap();
    let pw = interpolate(&values, &grid, &params).unwrap();
    if rng.gen_bool(0.5) {
        max_with_harmonic(&pw, &HarmonicFunction::constant(rng.gen_range(-0.5..1.0), beta)).unwrap()
    } else {
        pw
    }
}

/// `P_t pw(x)` by adaptive quadrature of `pw` against the Gaussian density.
pub fn semigroup_by_quadrature(pw: &PiecewiseHarmonic, params: &SemigroupParams, x: f64) -> f64 {
    let mean = x + params.mu * params.t;
    let s = params.variance.sqrt();
    let lambda = pw.left_ext().exponent().abs().max(pw.right_ext().exponent().abs());
    let reach = lambda * params.variance + 15.0 * s;
    let breaks: Vec<f64> = pw.segments().iter().map(|seg| seg.hi).filter(|h| h.is_finite()).collect();
    let density = |y: f64| (-0.5 * ((y - mean) / s).powi(2)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
    integrate_piecewise(|y| pw.evaluate(y) * density(y), mean - reach, mean + reach, &breaks, 1e-11)
}

/// A random convex function (the subharmonic family for `β = 0`).
#[derive(Debug, Clone)]
pub struct ConvexFn {
    quad: f64,
    kinks: Vec<(f64, f64)>,
    exp: (f64, f64),
    line: (f64, f64),
}

impl ConvexFn {
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let kinks = (0..rng.gen_range(0..4)).map(|_| (rng.gen_range(0.0..2.0), rng.gen_range(-2.0..2.0))).collect();
        Self {
            quad: rng.gen_range(0.0..1.0),
            kinks,
            exp: (rng.gen_range(0.0..0.5), rng.gen_range(-1.5..1.5)),
            line: (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.line.0
            + self.line.1 * x
            + self.quad * x * x
            + self.kinks.iter().map(|(w, k)| w * (x - k).abs()).sum::<f64>()
            + self.exp.0 * (self.exp.1 * x).exp()
    }
}
