//! Batch front-end: `run <config>` prices one job from a TOML file and
//! writes values, iteration report and summary; `compare <a> <b>` diffs two
//! values files by nearest-node matching.
//!
//! Exit codes: 0 success, 1 I/O or other failure, 2 no convergence,
//! 3 invalid configuration or input, 4 invariant violated during the run.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::cubature::{
    self, default_lattice_bounds, degree3_rule, gauss_hermite_rule, normalize_rule, tensor_rule, BasketPayoff,
    CubatureError, CubatureRun, LatticeSpec,
};
use crate::harmonic::{GeneratorParams, SupportGrid};
use crate::harmonic_pricer::{
    initial_values, majorant_values, make_call_setup, make_put_setup, operator_k, price_perpetual, PayoffSetup,
    PricerError,
};
use crate::oracle::{dense_dp_bermudan, DenseGridSpec, Horizon, OracleError, OracleModel, OraclePayoff};
use crate::report::{step_stats, IterationConfig, IterationReport, Monitor, Verdict};
use crate::OptionKind;

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_NOT_CONVERGED: i32 = 2;
pub const EXIT_INVALID: i32 = 3;
pub const EXIT_INVARIANT: i32 = 4;

/// Default value floor for `compare`.
pub const DEFAULT_FLOOR: f64 = 0.01;
/// `price = payoff` within this counts as exercise.
const EXERCISE_TOL: f64 = 1e-10;
/// Allowed excess of a contraction ratio over the discount factor.
const RATIO_SLACK: f64 = 1e-6;
const SLACK_TOL: f64 = 1e-10;
/// `r` and `delta` closer than this count as equal.
const RATE_TOL: f64 = 1e-12;

#[derive(Debug, Parser)]
#[command(name = "bermudan", version, about = "Bermudan and perpetual-Bermudan option pricer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Price one job described by a TOML config.
    Run { config: PathBuf },
    /// Compare two values CSVs; `b` is the reference.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Only nodes where the reference value exceeds this are compared.
        #[arg(long, default_value_t = DEFAULT_FLOOR)]
        floor: f64,
        /// Also write the comparison JSON here.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("grids incomparable: {0}")]
    GridsIncomparable(String),
    #[error("{0}")]
    NotConverged(String),
    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::GridsIncomparable(_) => EXIT_INVALID,
            CliError::NotConverged(_) => EXIT_NOT_CONVERGED,
            CliError::Io { .. } | CliError::Other(_) => EXIT_OTHER,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "invalid_config",
            CliError::GridsIncomparable(_) => "grids_incomparable",
            CliError::NotConverged(_) => "not_converged",
            CliError::Io { .. } => "io",
            CliError::Other(_) => "other",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Harmonic,
    Cubature,
    Oracle,
}

/// Black–Scholes model; rates per year, times in years.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub r: f64,
    pub delta: f64,
    pub sigma: f64,
    /// Time between exercise dates.
    pub t: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PayoffSection {
    pub kind: OptionKind,
    pub strike: f64,
    #[serde(default = "one_asset")]
    pub betas: Vec<f64>,
}

fn one_asset() -> Vec<f64> {
    vec![1.0]
}

/// Support grid of the harmonic method, in log-price.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub lower: f64,
    pub upper: f64,
    pub nodes: usize,
}

/// Cubature lattice in log-price; bounds default from strike, `t` and `tol`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeSection {
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
    pub step: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    GaussHermite,
    Degree3,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleSection {
    pub kind: RuleKind,
    /// Gauss–Hermite points per axis.
    pub points: Option<usize>,
}

/// Dense oracle grid in log-price.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseSection {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub points: usize,
    #[serde(default = "default_quad_points")]
    pub quad_points: usize,
}

fn default_quad_points() -> usize {
    8001
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IterationSection {
    pub tol: f64,
    pub max_iter: usize,
    /// Write one report row per iteration.
    pub record_trace: bool,
    /// Number of exercise dates; perpetual when absent.
    pub dates: Option<usize>,
}

impl Default for IterationSection {
    fn default() -> Self {
        let base = IterationConfig::default();
        Self { tol: base.tol, max_iter: base.max_iter, record_trace: true, dates: None }
    }
}

impl IterationSection {
    fn config(&self) -> IterationConfig {
        IterationConfig { tol: self.tol, max_iter: self.max_iter, record_trace: self.record_trace }
    }
}

/// Output paths, relative to the config file's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub values: PathBuf,
    pub report: Option<PathBuf>,
    pub summary: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobConfig {
    pub method: Method,
    pub model: ModelSection,
    pub payoff: PayoffSection,
    pub grid: Option<GridSection>,
    pub lattice: Option<LatticeSection>,
    pub rule: Option<RuleSection>,
    pub dense: Option<DenseSection>,
    #[serde(default)]
    pub iteration: IterationSection,
    pub output: OutputSection,
}

impl JobConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let m = &self.model;
        for (name, v) in [("r", m.r), ("delta", m.delta), ("sigma", m.sigma), ("t", m.t)] {
            if !v.is_finite() {
                return Err(CliError::Config(format!("model.{name} must be finite")));
            }
        }
        if !(m.sigma > 0.0 && m.t > 0.0) {
            return Err(CliError::Config("model.sigma and model.t must be > 0".into()));
        }
        if m.r < 0.0 {
            return Err(CliError::Config("model.r must be >= 0".into()));
        }
        self.iteration.config().validate().map_err(CliError::Config)?;
        let missing = |s: &str| CliError::Config(format!("method {:?} needs a [{s}] section", self.method));
        match self.method {
            Method::Harmonic => {
                self.grid.as_ref().ok_or_else(|| missing("grid"))?;
                if self.payoff.betas.len() != 1 {
                    return Err(CliError::Config("the harmonic method prices a single asset".into()));
                }
            }
            Method::Cubature => {
                self.lattice.as_ref().ok_or_else(|| missing("lattice"))?;
                self.rule.as_ref().ok_or_else(|| missing("rule"))?;
            }
            Method::Oracle => {
                self.dense.as_ref().ok_or_else(|| missing("dense"))?;
            }
        }
        Ok(())
    }
}

/// Priced nodes and iteration history of one job.
#[derive(Debug, Clone)]
pub struct JobOutput {
    pub dim: usize,
    /// Node coordinates (log-price), one vector per node.
    pub nodes: Vec<Vec<f64>>,
    pub prices: Vec<f64>,
    pub payoffs: Vec<f64>,
    pub report: IterationReport,
    /// Invariant breaches found during the run.
    pub invariant_failures: Vec<String>,
    pub diagnostics: Value,
}

/// Job outcome before anything is written.
#[derive(Debug)]
pub enum Outcome {
    Done(JobOutput),
    NotConverged(JobOutput),
}

/// Runs `config` without touching the filesystem.
pub fn execute(config: &JobConfig) -> Result<Outcome, CliError> {
    config.validate()?;
    match config.method {
        Method::Harmonic => run_harmonic(config),
        Method::Cubature => run_cubature(config),
        Method::Oracle => run_oracle(config),
    }
}

fn pricer_error(e: PricerError) -> CliError {
    match e {
        PricerError::NotConverged { .. } => CliError::NotConverged(e.to_string()),
        PricerError::HarmonicityViolated { .. }
        | PricerError::GridBoundViolated(_)
        | PricerError::SetupInvalid(_)
        | PricerError::InvalidInput(_)
        | PricerError::Harmonic(_) => CliError::Config(e.to_string()),
        PricerError::Semigroup(_) => CliError::Other(e.to_string()),
    }
}

fn run_harmonic(config: &JobConfig) -> Result<Outcome, CliError> {
    let m = &config.model;
    let g = config.grid.as_ref().expect("validated");
    let params = GeneratorParams::from_black_scholes(m.r, m.delta, m.sigma, m.t)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let grid = SupportGrid::uniform(g.lower, g.upper, g.nodes).map_err(|e| CliError::Config(e.to_string()))?;
    let strike = config.payoff.strike;
    let setup = match config.payoff.kind {
        OptionKind::Put => make_put_setup(strike, &grid, &params),
        OptionKind::Call => make_call_setup(strike, &grid, &params),
    }
    .map_err(pricer_error)?;

    let h = majorant_values(&setup, &grid);
    let (values, report, converged) = match config.iteration.dates {
        Some(n) => {
            let (v, report) = harmonic_dates(n, &setup, &grid, &params, config.iteration.record_trace)?;
            (v, report, true)
        }
        None => match price_perpetual(&setup, &grid, &params, &config.iteration.config()) {
            Ok((pw, report)) => (pw.node_values(), report, true),
            Err(PricerError::NotConverged { report, values }) => (values, *report, false),
            Err(e) => return Err(pricer_error(e)),
        },
    };
    let nodes: Vec<Vec<f64>> = grid.abscissas().iter().map(|&a| vec![a]).collect();
    let payoffs = grid.abscissas().iter().map(|&a| setup.payoff(a)).collect();
    let mut failures = common_failures(&report);
    if let Some(k) = values.iter().zip(&h).position(|(v, h)| v > &(h + SLACK_TOL)) {
        failures.push(format!("price exceeds the majorant at node {k}"));
    }
    let out = JobOutput {
        dim: 1,
        nodes,
        prices: values,
        payoffs,
        report,
        invariant_failures: failures,
        diagnostics: json!({
            "beta": params.beta,
            "rate": params.rate,
            "mesh": params.mesh,
            "discount": params.discount(),
        }),
    };
    Ok(if converged { Outcome::Done(out) } else { Outcome::NotConverged(out) })
}

fn harmonic_dates(
    n: usize,
    setup: &PayoffSetup,
    grid: &SupportGrid,
    params: &GeneratorParams,
    record_trace: bool,
) -> Result<(Vec<f64>, IterationReport), CliError> {
    let h = majorant_values(setup, grid);
    let mut monitor = Monitor::new(IterationConfig { tol: 0.0, max_iter: n.max(1), record_trace });
    let mut v = initial_values(setup, grid);
    for _ in 0..n {
        let next = operator_k(&v, setup, grid, params).map_err(pricer_error)?;
        let (residual, violations) = step_stats(&v, &next);
        let slack = h.iter().zip(&next).map(|(h, q)| h - q).fold(f64::INFINITY, f64::min);
        monitor.record(residual, violations, slack);
        v = next;
    }
    Ok((v, monitor.finish()))
}

fn common_failures(report: &IterationReport) -> Vec<String> {
    let mut failures = Vec::new();
    if report.monotonicity_violations > 0 {
        failures.push(format!("{} monotonicity violations", report.monotonicity_violations));
    }
    if report.min_slack_to_h < -SLACK_TOL {
        failures.push(format!("price exceeds the majorant by {:e}", -report.min_slack_to_h));
    }
    failures
}

fn cubature_error(e: CubatureError) -> CliError {
    match e {
        CubatureError::NotConverged { .. } => CliError::NotConverged(e.to_string()),
        _ => CliError::Config(e.to_string()),
    }
}

fn require_equal_rates(m: &ModelSection, method: &str) -> Result<(), CliError> {
    if (m.r - m.delta).abs() > RATE_TOL {
        return Err(CliError::Config(format!(
            "the {method} method requires r = delta (normalized rules make each asset price a martingale), \
             got r = {}, delta = {}",
            m.r, m.delta
        )));
    }
    Ok(())
}

fn run_cubature(config: &JobConfig) -> Result<Outcome, CliError> {
    let m = &config.model;
    require_equal_rates(m, "cubature")?;
    let p = &config.payoff;
    let d = p.betas.len();
    let payoff = BasketPayoff::from_rate(p.kind, p.strike, p.betas.clone(), m.r, m.t).map_err(cubature_error)?;
    let variance = m.sigma * m.sigma * m.t;
    let rule_cfg = config.rule.as_ref().expect("validated");
    let raw = match rule_cfg.kind {
        RuleKind::GaussHermite => {
            let n = rule_cfg
                .points
                .ok_or_else(|| CliError::Config("rule.points is required for gauss_hermite".into()))?;
            tensor_rule(&gauss_hermite_rule(n, variance, 0.0).map_err(cubature_error)?, d)
        }
        RuleKind::Degree3 => degree3_rule(d, variance),
    }
    .map_err(cubature_error)?;
    let rule = normalize_rule(&raw);
    let spec = lattice_spec(config, &payoff, variance)?;

    let (run, converged) = match config.iteration.dates {
        Some(n) => (cubature::iterate_dates(n, &payoff, &rule, &spec).map_err(cubature_error)?, true),
        None => match cubature::iterate_perpetual(&payoff, &rule, &spec, &config.iteration.config()) {
            Ok(run) => (run, true),
            Err(CubatureError::NotConverged { run }) => (*run, false),
            Err(e) => return Err(cubature_error(e)),
        },
    };
    let CubatureRun { q, report, exercise_violations, one_step_interior, safe_interior, .. } = run;
    let mut failures = common_failures(&report);
    if exercise_violations > 0 {
        failures.push(format!("{exercise_violations} exercise-region growth events"));
    }
    let c = payoff.discount();
    if let Some(&(n, ratio)) = report.contraction_ratios.iter().find(|(_, r)| *r > c + RATIO_SLACK) {
        failures.push(format!("contraction ratio {ratio} > {c} at iteration {n}"));
    }
    let nodes: Vec<Vec<f64>> = (0..spec.len()).map(|k| spec.node(k)).collect();
    let payoffs = nodes.iter().map(|x| payoff.g(x)).collect();
    let out = JobOutput {
        dim: d,
        nodes,
        prices: q.into_values(),
        payoffs,
        report,
        invariant_failures: failures,
        diagnostics: json!({
            "discount": c,
            "rule_points": rule.rule().len(),
            "rule_shift": rule.shift(),
            "lattice_extents": spec.extents(),
            "one_step_interior": one_step_interior,
            "safe_interior": safe_interior,
            "exercise_violations": exercise_violations,
        }),
    };
    Ok(if converged { Outcome::Done(out) } else { Outcome::NotConverged(out) })
}

fn lattice_spec(config: &JobConfig, payoff: &BasketPayoff, variance: f64) -> Result<LatticeSpec, CliError> {
    let l = config.lattice.as_ref().expect("validated");
    let d = payoff.dim();
    let (lower, upper) = match (&l.lower, &l.upper) {
        (Some(lo), Some(hi)) => (lo.clone(), hi.clone()),
        (None, None) => {
            let (lo, hi) = default_lattice_bounds(payoff, variance, config.iteration.tol).map_err(cubature_error)?;
            // round the upper end out to a whole number of steps
            let hi = lo.iter().zip(&hi).map(|(a, b)| a + ((b - a) / l.step).ceil() * l.step).collect();
            (lo, hi)
        }
        _ => return Err(CliError::Config("give both lattice.lower and lattice.upper, or neither".into())),
    };
    if lower.len() != d || upper.len() != d {
        return Err(CliError::Config(format!("lattice bounds need {d} entries, one per basket weight")));
    }
    LatticeSpec::from_bounds(&lower, &upper, l.step).map_err(cubature_error)
}

fn run_oracle(config: &JobConfig) -> Result<Outcome, CliError> {
    let m = &config.model;
    let p = &config.payoff;
    let ds = config.dense.as_ref().expect("validated");
    let d = p.betas.len();
    if ds.lower.len() != d || ds.upper.len() != d {
        return Err(CliError::Config(format!("dense bounds need {d} entries, one per basket weight")));
    }
    let spec = DenseGridSpec::new(ds.lower.clone(), ds.upper.clone(), ds.points, ds.quad_points)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let model = OracleModel { r: m.r, delta: m.delta, sigma: m.sigma, t: m.t };
    let payoff = OraclePayoff { kind: p.kind, strike: p.strike, betas: p.betas.clone() };
    let it = &config.iteration;
    let horizon = match it.dates {
        Some(n) => Horizon::Dates(n),
        None => Horizon::Perpetual { tol: it.tol, max_iter: it.max_iter },
    };
    let sol = match dense_dp_bermudan(&spec, &model, &payoff, horizon) {
        Ok(sol) => sol,
        Err(e @ OracleError::NotConverged { .. }) => return Err(CliError::NotConverged(e.to_string())),
        Err(e) => return Err(CliError::Config(e.to_string())),
    };
    let mut monitor = Monitor::new(IterationConfig { tol: it.tol, max_iter: usize::MAX, record_trace: it.record_trace });
    for &r in &sol.residuals {
        if monitor.record(r, 0, f64::NAN) == Verdict::Converged && it.dates.is_none() {
            break;
        }
    }
    let mut report = monitor.finish();
    report.converged = true;
    let len = sol.values.len();
    let mut idx = vec![0usize; d];
    let nodes: Vec<Vec<f64>> = (0..len)
        .map(|k| {
            let mut rest = k;
            for a in (0..d).rev() {
                idx[a] = rest % spec.n_points;
                rest /= spec.n_points;
            }
            sol.node_coordinates(&idx)
        })
        .collect();
    let mut failures = Vec::new();
    if let Some(k) = sol.values.iter().zip(&sol.payoff).position(|(v, g)| *v < g.max(0.0) - SLACK_TOL) {
        failures.push(format!("value below the payoff at node {k}"));
    }
    let out = JobOutput {
        dim: d,
        nodes,
        prices: sol.values.clone(),
        payoffs: sol.payoff.clone(),
        report,
        invariant_failures: failures,
        diagnostics: json!({ "grid_points": spec.n_points, "quad_points": spec.quad_points }),
    };
    Ok(Outcome::Done(out))
}

/// Number format for CSV and JSON: shortest round-trip (at most 17
/// significant digits), with an exponent outside `[1e-5, 1e16)`.
pub fn fmt_num(v: f64) -> String {
    if !v.is_finite() {
        return String::new();
    }
    let a = v.abs();
    if a == 0.0 || (1e-5..1e16).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

fn coord_header(dim: usize) -> String {
    (1..=dim).map(|i| format!("x{i}")).collect::<Vec<_>>().join(",")
}

/// Values CSV: coordinates, price, payoff and exercise flag per node.
pub fn values_csv(out: &JobOutput) -> String {
    let mut s = format!("{},price,payoff,exercise\n", coord_header(out.dim));
    for ((x, v), g) in out.nodes.iter().zip(&out.prices).zip(&out.payoffs) {
        for c in x {
            s.push_str(&fmt_num(*c));
            s.push(',');
        }
        let ex = u8::from((v - g).abs() <= EXERCISE_TOL);
        let _ = writeln!(s, "{},{},{ex}", fmt_num(*v), fmt_num(*g));
    }
    s
}

/// Report CSV: one row per recorded iteration.
pub fn report_csv(report: &IterationReport) -> String {
    let mut s = String::from("iteration,residual,ratio,min_slack_to_h,violations\n");
    for r in &report.trace {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.iteration,
            fmt_num(r.residual),
            r.ratio.map(fmt_num).unwrap_or_default(),
            fmt_num(r.min_slack_to_h),
            r.violations
        );
    }
    s
}

fn num(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}

fn summary_json(config: &JobConfig, out: &JobOutput, status: &str, exit: i32, wall: f64) -> Value {
    let r = &out.report;
    json!({
        "status": status,
        "exit_code": exit,
        "method": config.method,
        "converged": r.converged,
        "iterations": r.iterations,
        "final_residual": r.final_residual().map(num),
        "max_contraction_ratio": r.max_ratio().map(num),
        "monotonicity_violations": r.monotonicity_violations,
        "min_slack_to_h": num(r.min_slack_to_h),
        "stagnated": r.stagnated,
        "invariant_failures": out.invariant_failures,
        "nodes": out.prices.len(),
        "wall_time_s": wall,
        "diagnostics": out.diagnostics,
        "config": config,
    })
}

fn error_json(err: &CliError) -> Value {
    json!({ "status": "error", "kind": err.kind(), "exit_code": err.exit_code(), "message": err.to_string() })
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn write_json(path: &Path, v: &Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(v).map_err(|e| CliError::Other(e.to_string()))?;
    write(path, &(text + "\n"))
}

/// `run <config>`: returns the process exit code.
pub fn run(config_path: &Path) -> i32 {
    let start = Instant::now();
    let base = config_path.parent().unwrap_or(Path::new("")).to_path_buf();
    let text = match fs::read_to_string(config_path) {
        Ok(t) => t,
        Err(source) => return report_error(&CliError::Io { path: config_path.to_path_buf(), source }, None),
    };
    let config = match JobConfig::from_toml(&text) {
        Ok(c) => c,
        Err(e) => return report_error(&e, None),
    };
    let summary = resolve(&base, &config.output.summary);
    let outcome = match execute(&config) {
        Ok(o) => o,
        Err(e) => return report_error(&e, Some(&summary)),
    };
    let (out, status, exit) = match outcome {
        Outcome::NotConverged(out) => (out, "not_converged", EXIT_NOT_CONVERGED),
        Outcome::Done(out) if !out.invariant_failures.is_empty() => (out, "invariant_violation", EXIT_INVARIANT),
        Outcome::Done(out) => (out, "ok", EXIT_OK),
    };
    let result = (|| {
        write(&resolve(&base, &config.output.values), &values_csv(&out))?;
        if let Some(p) = &config.output.report {
            write(&resolve(&base, p), &report_csv(&out.report))?;
        }
        let wall = start.elapsed().as_secs_f64();
        write_json(&summary, &summary_json(&config, &out, status, exit, wall))
    })();
    match result {
        Ok(()) => {
            if exit != EXIT_OK {
                eprintln!("{status}: {}", out.invariant_failures.join("; "));
            }
            exit
        }
        Err(e) => report_error(&e, None),
    }
}

fn report_error(err: &CliError, summary: Option<&Path>) -> i32 {
    let record = error_json(err);
    eprintln!("{record}");
    if let Some(p) = summary {
        let _ = write_json(p, &record);
    }
    err.exit_code()
}

/// Nodes and prices read back from a values CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ValuesTable {
    pub dim: usize,
    pub nodes: Vec<Vec<f64>>,
    pub prices: Vec<f64>,
}

impl ValuesTable {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let bad = |m: String| CliError::GridsIncomparable(m);
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<&str> = lines.next().ok_or_else(|| bad("empty values file".into()))?.split(',').collect();
        let price_col = header.iter().position(|h| h.trim() == "price").ok_or_else(|| bad("no price column".into()))?;
        if price_col == 0 {
            return Err(bad("no coordinate columns".into()));
        }
        let mut nodes = Vec::new();
        let mut prices = Vec::new();
        for (i, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != header.len() {
                return Err(bad(format!("row {} has {} cells, header has {}", i + 1, cells.len(), header.len())));
            }
            let parse = |s: &str| s.trim().parse::<f64>().map_err(|_| bad(format!("row {}: bad number {s:?}", i + 1)));
            nodes.push(cells[..price_col].iter().map(|c| parse(c)).collect::<Result<Vec<_>, _>>()?);
            prices.push(parse(cells[price_col])?);
        }
        if nodes.is_empty() {
            return Err(bad("values file has no rows".into()));
        }
        Ok(Self { dim: price_col, nodes, prices })
    }

    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let mut lo = vec![f64::INFINITY; self.dim];
        let mut hi = vec![f64::NEG_INFINITY; self.dim];
        for x in &self.nodes {
            for a in 0..self.dim {
                lo[a] = lo[a].min(x[a]);
                hi[a] = hi[a].max(x[a]);
            }
        }
        (lo, hi)
    }
}

/// Gap statistics of `compare`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub matched: usize,
    pub compared: usize,
    pub floor: f64,
    pub max_rel_gap: f64,
    pub mean_rel_gap: f64,
    pub max_abs_gap: f64,
    pub mean_abs_gap: f64,
    /// Node of `a` with the largest relative gap.
    pub worst_node: Option<Vec<f64>>,
}

/// Nearest-node lookup into a values table.
struct Locator<'a> {
    table: &'a ValuesTable,
    /// Sorted distinct coordinates per axis when the table is a full tensor grid.
    axes: Option<Vec<Vec<f64>>>,
    index: Vec<usize>,
}

impl<'a> Locator<'a> {
    fn new(table: &'a ValuesTable) -> Self {
        let axes: Vec<Vec<f64>> = (0..table.dim)
            .map(|a| {
                let mut v: Vec<f64> = table.nodes.iter().map(|x| x[a]).collect();
                v.sort_by(f64::total_cmp);
                v.dedup();
                v
            })
            .collect();
        let total = axes.iter().try_fold(1usize, |acc, v| acc.checked_mul(v.len()));
        if total == Some(table.nodes.len()) {
            let mut index = vec![usize::MAX; table.nodes.len()];
            let mut complete = true;
            for (k, x) in table.nodes.iter().enumerate() {
                let flat = Self::flat(&axes, x);
                if index[flat] != usize::MAX {
                    complete = false;
                    break;
                }
                index[flat] = k;
            }
            if complete {
                return Self { table, axes: Some(axes), index };
            }
        }
        Self { table, axes: None, index: Vec::new() }
    }

    fn flat(axes: &[Vec<f64>], x: &[f64]) -> usize {
        axes.iter().zip(x).fold(0, |acc, (axis, &v)| acc * axis.len() + nearest(axis, v))
    }

    fn find(&self, x: &[f64]) -> usize {
        match &self.axes {
            Some(axes) => self.index[Self::flat(axes, x)],
            None => {
                let dist = |y: &[f64]| y.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                (0..self.table.nodes.len())
                    .min_by(|&i, &j| dist(&self.table.nodes[i]).total_cmp(&dist(&self.table.nodes[j])))
                    .expect("table is non-empty")
            }
        }
    }
}

fn nearest(sorted: &[f64], v: f64) -> usize {
    let i = sorted.partition_point(|&s| s < v);
    if i == 0 {
        0
    } else if i == sorted.len() || v - sorted[i - 1] <= sorted[i] - v {
        i - 1
    } else {
        i
    }
}

/// Matches each node of `a` inside the hull of `b` to the nearest node of
/// `b` and reports gaps where `b`'s value exceeds `floor`.
pub fn compare_tables(a: &ValuesTable, b: &ValuesTable, floor: f64) -> Result<Comparison, CliError> {
    if a.dim != b.dim {
        return Err(CliError::GridsIncomparable(format!("dimensions differ: {} vs {}", a.dim, b.dim)));
    }
    let (lo_b, hi_b) = b.bounds();
    let (lo_a, hi_a) = a.bounds();
    if (0..a.dim).any(|i| hi_a[i] < lo_b[i] || hi_b[i] < lo_a[i]) {
        return Err(CliError::GridsIncomparable("grid bounds are disjoint".into()));
    }
    let locator = Locator::new(b);
    let eps = 1e-12;
    let mut c = Comparison {
        matched: 0,
        compared: 0,
        floor,
        max_rel_gap: 0.0,
        mean_rel_gap: 0.0,
        max_abs_gap: 0.0,
        mean_abs_gap: 0.0,
        worst_node: None,
    };
    for (x, va) in a.nodes.iter().zip(&a.prices) {
        if (0..a.dim).any(|i| x[i] < lo_b[i] - eps || x[i] > hi_b[i] + eps) {
            continue;
        }
        c.matched += 1;
        let vb = b.prices[locator.find(x)];
        if !(vb > floor) {
            continue;
        }
        c.compared += 1;
        let abs = (va - vb).abs();
        let rel = abs / vb.abs();
        c.mean_abs_gap += abs;
        c.mean_rel_gap += rel;
        c.max_abs_gap = c.max_abs_gap.max(abs);
        if rel > c.max_rel_gap || c.worst_node.is_none() {
            c.max_rel_gap = c.max_rel_gap.max(rel);
            c.worst_node = Some(x.clone());
        }
    }
    if c.matched == 0 {
        return Err(CliError::GridsIncomparable("no node of the first grid lies inside the second".into()));
    }
    if c.compared > 0 {
        c.mean_abs_gap /= c.compared as f64;
        c.mean_rel_gap /= c.compared as f64;
    }
    Ok(c)
}

/// `compare <a> <b>`: prints the comparison JSON and returns the exit code.
pub fn compare(a: &Path, b: &Path, floor: f64, output: Option<&Path>) -> i32 {
    let result = (|| {
        let ta = ValuesTable::parse(&fs::read_to_string(a).map_err(io_err(a))?)?;
        let tb = ValuesTable::parse(&fs::read_to_string(b).map_err(io_err(b))?)?;
        let c = compare_tables(&ta, &tb, floor)?;
        let v = serde_json::to_value(&c).map_err(|e| CliError::Other(e.to_string()))?;
        if let Some(p) = output {
            write_json(p, &v)?;
        }
        Ok::<_, CliError>(v)
    })();
    match result {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).unwrap_or_default());
            EXIT_OK
        }
        Err(e) => report_error(&e, output),
    }
}

/// Entry point shared by the binary and the tests.
pub fn main_with(cli: Cli) -> i32 {
    match cli.command {
        Command::Run { config } => run(&config),
        Command::Compare { a, b, floor, output } => compare(&a, &b, floor, output.as_deref()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const PUT: &str = r#"
method = "harmonic"
[model]
r = 0.05
delta = 0.05
sigma = 1.0
t = 0.25
[payoff]
kind = "put"
strike = 1.0
[grid]
lower = -2.302585092994046
upper = 0.0
nodes = 41
[output]
values = "v.csv"
summary = "s.json"
"#;

    #[test]
    fn parses_and_validates() {
        let c = JobConfig::from_toml(PUT).unwrap();
        c.validate().unwrap();
        assert_eq!(c.iteration.tol, 1e-10);
        assert!(c.iteration.record_trace);
        assert!(JobConfig::from_toml(&PUT.replace("nodes = 41", "nodes = 41\nbogus = 1")).is_err());
        let c = JobConfig::from_toml(&PUT.replace("\"harmonic\"", "\"cubature\"")).unwrap();
        assert!(matches!(c.validate(), Err(CliError::Config(_))));
    }

    #[test]
    fn harmonic_job_runs() {
        let c = JobConfig::from_toml(PUT).unwrap();
        let Outcome::Done(out) = execute(&c).unwrap() else { panic!("not converged") };
        assert!(out.invariant_failures.is_empty());
        assert!(out.report.final_residual().unwrap() < 1e-10);
        let csv = values_csv(&out);
        assert!(csv.starts_with("x1,price,payoff,exercise\n"));
        assert_eq!(csv.lines().count(), 42);
    }

    #[test]
    fn unequal_rates_rejected() {
        let c = JobConfig::from_toml(&PUT.replace("delta = 0.05", "delta = 0.0")).unwrap();
        let err = execute(&c).unwrap_err();
        assert_eq!(err.exit_code(), EXIT_INVALID);
        assert!(err.to_string().contains("require r = delta"));
    }

    #[test]
    fn number_format_round_trips() {
        for v in [0.0, 1.0, -0.1, 1.0 / 3.0, 1e-300, 6.02e23, 123456.789, -2.5e-7] {
            let s = fmt_num(v);
            assert_eq!(s.parse::<f64>().unwrap(), v, "{s}");
        }
        assert_eq!(fmt_num(f64::NAN), "");
    }

    #[test]
    fn nearest_index() {
        let v = [0.0, 1.0, 2.0];
        assert_eq!(nearest(&v, -5.0), 0);
        assert_eq!(nearest(&v, 0.49), 0);
        assert_eq!(nearest(&v, 0.51), 1);
        assert_eq!(nearest(&v, 7.0), 2);
    }

    #[test]
    fn compare_tables_basics() {
        let a = ValuesTable::parse("x1,price\n0,1\n1,2\n2,0.001\n").unwrap();
        let same = compare_tables(&a, &a, 0.01).unwrap();
        assert_eq!((same.compared, same.max_rel_gap, same.max_abs_gap), (2, 0.0, 0.0));
        let b = ValuesTable::parse("x1,price\n-0.1,1.1\n1.1,2\n").unwrap();
        let c = compare_tables(&a, &b, 0.01).unwrap();
        assert_eq!((c.matched, c.compared), (2, 2));
        assert!((c.max_abs_gap - 0.1).abs() < 1e-12);
        assert!((c.max_rel_gap - 0.1 / 1.1).abs() < 1e-12);
        assert_eq!(c.worst_node, Some(vec![0.0]));
        let c = compare_tables(&b, &a, 0.01).unwrap();
        assert_eq!((c.matched, c.max_abs_gap), (1, 0.0));
        let two = ValuesTable::parse("x1,x2,price\n0,0,1\n").unwrap();
        assert!(matches!(compare_tables(&a, &two, 0.01), Err(CliError::GridsIncomparable(_))));
        let far = ValuesTable::parse("x1,price\n10,1\n").unwrap();
        assert!(matches!(compare_tables(&a, &far, 0.01), Err(CliError::GridsIncomparable(_))));
        assert!(ValuesTable::parse("x1,price\n").is_err());
        assert!(ValuesTable::parse("").is_err());
    }
}
