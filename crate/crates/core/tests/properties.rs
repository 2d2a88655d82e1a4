//! Property tests for the harmonic core, the semigroup and the cubature operator.

mod common;

use bermudan_core::cubature::{
    apply_a, apply_d, degree3_rule, gauss_hermite_rule, iterate_dates, normalize_rule, tensor_rule, BasketPayoff,
    CubatureRule, LatticeFunction, LatticeSpec, NormalizedRule,
};
use bermudan_core::harmonic::{interpolate, max_with_harmonic, GeneratorParams, HarmonicFunction, SupportGrid};
use bermudan_core::harmonic_pricer::{make_call_setup, make_put_setup, operator_k};
use bermudan_core::semigroup::{apply_semigroup, SemigroupParams};
use bermudan_core::OptionKind;
use common::{random_grid, random_piecewise, semigroup_by_quadrature, ConvexFn};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn interpolation_reproduces_harmonics(
        seed in any::<u64>(),
        beta in prop_oneof![Just(0.0), -2.0..2.0f64],
        g0 in -3.0..3.0f64,
        g1 in -3.0..3.0f64,
    ) {
        let mut r = rng(seed);
        let n = r.gen_range(2..12);
        let grid = random_grid(&mut r, n, -3.0, 3.0);
        let h = HarmonicFunction::new(g0, g1, beta, r.gen_range(-1.0..1.0));
        let params = GeneratorParams::new(beta, 0.0, 1.0).unwrap();
        let values: Vec<f64> = grid.abscissas().iter().map(|&a| h.eval(a)).collect();
        let pw = interpolate(&values, &grid, &params).unwrap();
        for _ in 0..200 {
            let x = r.gen_range(-5.0..5.0);
            prop_assert!(close(pw.evaluate(x), h.eval(x), 1e-10), "x={x}: {} vs {}", pw.evaluate(x), h.eval(x));
        }
    }

    #[test]
    fn interpolation_hits_nodes_and_is_monotone(seed in any::<u64>(), beta in -1.5..1.5f64) {
        let mut r = rng(seed);
        let n = r.gen_range(2..15);
        let grid = random_grid(&mut r, n, -3.0, 3.0);
        let params = GeneratorParams::new(beta, 0.0, 1.0).unwrap();
        let u: Vec<f64> = (0..n).map(|_| r.gen_range(-2.0..2.0)).collect();
        let v: Vec<f64> = u.iter().map(|x| x + r.gen_range(0.0..1.0)).collect();
        let pu = interpolate(&u, &grid, &params).unwrap();
        let pv = interpolate(&v, &grid, &params).unwrap();
        for (i, &a) in grid.abscissas().iter().enumerate() {
            prop_assert!(close(pu.evaluate(a), u[i], 1e-12));
        }
        for _ in 0..200 {
            let x = r.gen_range(grid.lower()..=grid.upper());
            prop_assert!(pu.evaluate(x) <= pv.evaluate(x) + 1e-10);
        }
    }

    #[test]
    fn convex_interpolation_majorant_and_envelope(seed in any::<u64>()) {
        let mut r = rng(seed);
        let f = ConvexFn::random(&mut r);
        let n = r.gen_range(2..10);
        let grid = random_grid(&mut r, n, -2.0, 2.0);
        let params = GeneratorParams::new(0.0, 0.0, 1.0).unwrap();
        let values: Vec<f64> = grid.abscissas().iter().map(|&a| f.eval(a)).collect();
        let pw = interpolate(&values, &grid, &params).unwrap();
        for _ in 0..200 {
            let x = r.gen_range(grid.lower()..=grid.upper());
            prop_assert!(pw.evaluate(x) >= f.eval(x) - 1e-10);
            let env = pw.pieces().iter().map(|p| p.eval(x)).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!((pw.evaluate(x) - env).abs() <= 1e-10 * env.abs().max(1.0));
            let out = if r.gen_bool(0.5) { grid.lower() - r.gen_range(0.0..3.0) } else { grid.upper() + r.gen_range(0.0..3.0) };
            prop_assert!(pw.evaluate(out) <= f.eval(out) + 1e-10);
        }
    }

    #[test]
    fn subharmonic_below_harmonic_stays_below(seed in any::<u64>()) {
        // β = -1/2: harmonics are a + b·e^x and maxima of them are subharmonic
        let mut r = rng(seed);
        let beta = -0.5;
        let (a, b) = (r.gen_range(0.0..2.0), r.gen_range(0.0..2.0));
        let h = HarmonicFunction::new(a, b, beta, 0.0);
        let lines: Vec<(f64, f64)> = (0..r.gen_range(1..4)).map(|_| (a - r.gen_range(0.0..2.0), b - r.gen_range(0.0..2.0))).collect();
        let f = |x: f64| lines.iter().map(|(p, q)| p + q * x.exp()).fold(f64::NEG_INFINITY, f64::max);
        let n = r.gen_range(2..10);
        let grid = random_grid(&mut r, n, -3.0, 2.0);
        let params = GeneratorParams::new(beta, 0.0, 1.0).unwrap();
        let values: Vec<f64> = grid.abscissas().iter().map(|&x| f(x)).collect();
        let pw = interpolate(&values, &grid, &params).unwrap();
        for _ in 0..200 {
            let x = r.gen_range(-10.0..6.0);
            prop_assert!(pw.evaluate(x) <= h.eval(x) + 1e-10 * h.eval(x).max(1.0));
        }
    }

    #[test]
    fn semigroup_conserves_mass_and_harmonics(
        beta in -1.5..1.5f64,
        t in 0.01..3.0f64,
        x in -4.0..4.0f64,
        g0 in -2.0..2.0f64,
        g1 in -2.0..2.0f64,
    ) {
        prop_assume!(beta.abs() * t <= 5.0);
        let params = GeneratorParams::new(beta, 0.0, 1.0).unwrap();
        let sg = SemigroupParams::new(beta, t).unwrap();
        let grid = SupportGrid::uniform(-1.0, 1.0, 3).unwrap();
        let one = interpolate(&[1.0; 3], &grid, &params).unwrap();
        prop_assert!((apply_semigroup(&one, &sg, x) - 1.0).abs() <= 1e-12);
        let h = HarmonicFunction::new(g0, g1, beta, 0.0);
        let vals: Vec<f64> = grid.abscissas().iter().map(|&a| h.eval(a)).collect();
        let pw = interpolate(&vals, &grid, &params).unwrap();
        prop_assert!(close(apply_semigroup(&pw, &sg, x), h.eval(x), 1e-10));
    }

    #[test]
    fn semigroup_matches_quadrature_and_is_monotone(seed in any::<u64>(), beta in -1.0..1.0f64, t in 0.05..2.0f64) {
        let mut r = rng(seed);
        let pw = random_piecewise(&mut r, beta);
        let sg = SemigroupParams::new(beta, t).unwrap();
        let upper = max_with_harmonic(&pw, &HarmonicFunction::constant(r.gen_range(-0.5..1.5), beta)).unwrap();
        for _ in 0..5 {
            let x = r.gen_range(-3.0..3.0);
            let exact = apply_semigroup(&pw, &sg, x);
            let quad = semigroup_by_quadrature(&pw, &sg, x);
            prop_assert!((exact - quad).abs() <= 1e-8, "{exact} vs {quad}");
            prop_assert!(apply_semigroup(&upper, &sg, x) >= exact - 1e-10);
        }
    }

    #[test]
    fn operator_k_stays_between_bounds(seed in any::<u64>()) {
        let mut r = rng(seed);
        let rate = r.gen_range(0.01..0.2);
        let sigma = r.gen_range(0.3..1.5);
        let t = r.gen_range(0.05..1.0);
        let strike: f64 = r.gen_range(0.5..2.0);
        let params = GeneratorParams::from_black_scholes(rate, rate, sigma, t).unwrap();
        let n = r.gen_range(5..30);
        let (grid, setup) = if r.gen_bool(0.5) {
            let hi = strike.ln() - r.gen_range(0.0..0.5);
            let grid = SupportGrid::uniform(hi - r.gen_range(1.0..4.0), hi, n).unwrap();
            let s = make_put_setup(strike, &grid, &params).unwrap();
            (grid, s)
        } else {
            let lo = strike.ln() + r.gen_range(0.0..0.5);
            let grid = SupportGrid::uniform(lo, lo + r.gen_range(1.0..3.0), n).unwrap();
            let s = make_call_setup(strike, &grid, &params).unwrap();
            (grid, s)
        };
        // admissible input: a maximum of harmonics below h, hence subharmonic and ≤ h
        let (hp, hq) = match setup.kind {
            bermudan_core::harmonic_pricer::PayoffKind::Put => (strike, 0.0),
            _ => (setup.h.eval(0.0) - 1.0, 1.0),
        };
        let lines: Vec<(f64, f64)> =
            (0..r.gen_range(0..4)).map(|_| (hp - r.gen_range(0.0..1.0), hq - r.gen_range(0.0..1.0))).collect();
        let v: Vec<f64> = grid.abscissas().iter().map(|&a| {
            lines.iter().map(|(p, q)| p + q * a.exp()).fold(setup.payoff(a).max(0.0), f64::max)
        }).collect();
        let k = operator_k(&v, &setup, &grid, &params).unwrap();
        for (i, &a) in grid.abscissas().iter().enumerate() {
            prop_assert!(k[i] >= setup.payoff(a).max(0.0) - 1e-12);
            prop_assert!(k[i] >= setup.c.eval(a) - 1e-12);
            prop_assert!(k[i] <= setup.h.eval(a) + 1e-10 * setup.h.eval(a).max(1.0));
        }
    }
}

fn random_rule<R: Rng>(r: &mut R, d: usize) -> NormalizedRule {
    let t = r.gen_range(0.05..1.0);
    let raw = if r.gen_bool(0.5) {
        degree3_rule(d, t).unwrap()
    } else {
        tensor_rule(&gauss_hermite_rule(r.gen_range(1..6), t, 0.0).unwrap(), d).unwrap()
    };
    normalize_rule(&raw)
}

fn random_payoff<R: Rng>(r: &mut R, d: usize) -> BasketPayoff {
    let mut betas: Vec<f64> = (0..d).map(|_| r.gen_range(0.1..1.0)).collect();
    let s: f64 = betas.iter().sum();
    betas.iter_mut().for_each(|b| *b /= s);
    let kind = if r.gen_bool(0.7) { OptionKind::Put } else { OptionKind::Call };
    BasketPayoff::new(kind, r.gen_range(0.0..2.0), betas, r.gen_range(0.5..0.999)).unwrap()
}

fn random_lattice<R: Rng>(r: &mut R, rule: &NormalizedRule) -> LatticeSpec {
    let d = rule.rule().dim();
    let reach = rule.rule().reach().into_iter().fold(0.0, f64::max);
    let step = [0.05, 0.1, 0.2][r.gen_range(0..3)];
    let min_cells = (2.0 * reach / step).ceil() as usize + 4;
    let cells = min_cells + if d == 1 { r.gen_range(10..80) } else { r.gen_range(5..20) };
    let lower: Vec<f64> = (0..d).map(|_| -((r.gen_range(10..40) as f64) * step)).collect();
    let upper: Vec<f64> = lower.iter().map(|l| l + cells as f64 * step).collect();
    LatticeSpec::from_bounds(&lower, &upper, step).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn operator_d_is_sound(seed in any::<u64>()) {
        let mut r = rng(seed);
        let d = r.gen_range(1..3);
        let rule = random_rule(&mut r, d);
        let payoff = random_payoff(&mut r, d);
        let spec = random_lattice(&mut r, &rule);
        let u = LatticeFunction::from_fn(spec.clone(), |x| payoff.g_plus(x)).unwrap();
        let bumps: Vec<f64> = (0..spec.len()).map(|_| r.gen_range(0.0..0.5)).collect();
        let v = LatticeFunction::new(spec.clone(), u.values().iter().zip(&bumps).map(|(a, b)| a + b).collect()).unwrap();
        let du = apply_d(&u, &rule, &payoff).unwrap();
        let dv = apply_d(&v, &rule, &payoff).unwrap();
        for k in 0..spec.len() {
            let x = spec.node(k);
            prop_assert!(du.values()[k].max(0.0) >= payoff.g_plus(&x) - 1e-12);
            prop_assert!(du.values()[k] <= dv.values()[k] + 1e-12);
            prop_assert!(du.values()[k] >= u.values()[k] - 1e-10);
        }
    }

    #[test]
    fn lattice_iterates_shrink_exercise_region(seed in any::<u64>()) {
        let mut r = rng(seed);
        let d = r.gen_range(1..3);
        let rule = random_rule(&mut r, d);
        let payoff = random_payoff(&mut r, d);
        let spec = random_lattice(&mut r, &rule);
        let run = iterate_dates(8, &payoff, &rule, &spec).unwrap();
        prop_assert_eq!(run.report.monotonicity_violations, 0);
        prop_assert_eq!(run.exercise_violations, 0);
        for (_, ratio) in &run.report.contraction_ratios {
            prop_assert!(*ratio <= payoff.discount() + 1e-6);
        }
    }

    #[test]
    fn normalization_only_shifts_means(seed in any::<u64>()) {
        let mut r = rng(seed);
        let d = r.gen_range(1..4);
        let m = r.gen_range(1..8);
        let mut w: Vec<f64> = (0..m).map(|_| r.gen_range(0.1..1.0)).collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= s);
        let total: f64 = w.iter().sum();
        w[0] += 1.0 - total;
        let pts: Vec<Vec<f64>> = (0..m).map(|_| (0..d).map(|_| r.gen_range(-2.0..2.0)).collect()).collect();
        let rule = CubatureRule::new(pts, w).unwrap();
        let norm = normalize_rule(&rule);
        prop_assert!(norm.condition_residual() <= 1e-12);
        let nr = norm.rule();
        prop_assert!((nr.weights().iter().sum::<f64>() - 1.0).abs() <= 1e-14 * m as f64);
        for i in 0..d {
            let mut e = vec![0; d];
            e[i] = 1;
            let mean0 = rule.moment(&e);
            let mean1 = nr.moment(&e);
            prop_assert!((mean1 - mean0 - norm.shift()[i]).abs() <= 1e-12);
            e[i] = 2;
            let var0 = rule.moment(&e) - mean0 * mean0;
            let var1 = nr.moment(&e) - mean1 * mean1;
            prop_assert!((var1 - var0).abs() <= 1e-10);
        }
    }
}

/// `Σ α_k f(x - x_k)` evaluated exactly, without any lattice.
fn average(rule: &CubatureRule, f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> f64 {
    rule.points()
        .iter()
        .zip(rule.weights())
        .map(|(p, w)| {
            let y: Vec<f64> = x.iter().zip(p).map(|(a, b)| a - b).collect();
            w * f(&y)
        })
        .sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// `A𝒟f ≥ 𝒟f` for `f` in `Q` (`Af ≥ f ≥ 0`, `f ≤ h`), by exact recursion on ℝ^d.
    #[test]
    fn averaged_operator_dominates(seed in any::<u64>()) {
        let mut r = rng(seed);
        let d = r.gen_range(1..3);
        let rule = random_rule(&mut r, d);
        let rule = rule.rule().clone();
        prop_assume!(rule.len() <= 9);
        let payoff = random_payoff(&mut r, d);
        let c = payoff.discount();
        let f0 = |x: &[f64]| payoff.g_plus(x);
        let d0 = |x: &[f64]| (c * average(&rule, &f0, x)).max(payoff.g(x));
        let d1 = |x: &[f64]| (c * average(&rule, &d0, x)).max(payoff.g(x));
        let h = |x: &[f64]| payoff.h(x);
        let dh = |x: &[f64]| (c * average(&rule, &h, x)).max(payoff.g(x));
        for _ in 0..20 {
            let x: Vec<f64> = (0..d).map(|_| r.gen_range(-2.5..1.5)).collect();
            // f0 and h belong to Q
            prop_assert!(average(&rule, &f0, &x) >= f0(&x) - 1e-10);
            for (dd, name) in [(&d0 as &dyn Fn(&[f64]) -> f64, "g+"), (&d1, "Dg+"), (&dh, "h")] {
                let lhs = average(&rule, dd, &x);
                let rhs = dd(&x);
                prop_assert!(lhs >= rhs - 1e-10 * rhs.abs().max(1.0), "{name} at {x:?}: {lhs} < {rhs}");
            }
        }
    }

    /// The same inequality on a lattice, checked on the two-step safe interior.
    #[test]
    fn averaged_operator_dominates_on_lattice(seed in any::<u64>()) {
        let mut r = rng(seed);
        let d = r.gen_range(1..3);
        let rule = random_rule(&mut r, d);
        let payoff = random_payoff(&mut r, d);
        let spec = random_lattice(&mut r, &rule);
        let f = LatticeFunction::from_fn(spec.clone(), |x| payoff.g_plus(x)).unwrap();
        let df = apply_d(&f, &rule, &payoff).unwrap();
        let adf = apply_a(&df, &rule, |x| payoff.g_plus(x)).unwrap();
        let margin: Vec<f64> = rule.rule().reach().iter().map(|m| 2.0 * m).collect();
        for k in 0..spec.len() {
            if spec.in_interior(k, &margin) {
                prop_assert!(adf.values()[k] >= df.values()[k] - 1e-10);
            }
        }
    }
}
