//! Monte Carlo harness: shared truth/measurement generation, ARMSE aggregation, CSV and SVG output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::filters::{run_filter, DivergenceCause, FilterError, FilterVariant};
use crate::linalg::cholesky_lower;
use crate::models::{CstrModel, LtiModel, Model, ModelError, VanDerPolModel};
use crate::odesolve::{OdeMethod, OdeOptions, OdeStats};
use crate::sim::{checksum, euler_maruyama, synthesize_measurements, MeasurementRecord, NormalStream, SimError, Trajectory};

/// Exact CSV header of a report.
pub const CSV_HEADER: &str = "scenario,param,variant,armse,mean_cpu_s,failed_runs,first_failure_t";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("truth simulation failed: {0}")]
    Sim(#[from] SimError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scenario {
    /// Sampling-period sweep on the CSTR.
    CstrAccuracy,
    /// Measurement ill-conditioning sweep on the CSTR.
    CstrIllCond,
    /// Stiffness sweep on the Van der Pol oscillator.
    VdpStiffness,
    /// Sampling-period sweep on the linear reference model.
    LtiOracle,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::CstrAccuracy, Scenario::CstrIllCond, Scenario::VdpStiffness, Scenario::LtiOracle];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::CstrAccuracy => "cstr",
            Scenario::CstrIllCond => "cstr-ill",
            Scenario::VdpStiffness => "vdp",
            Scenario::LtiOracle => "lti-test",
        }
    }

    pub fn default_sweep(self) -> Vec<f64> {
        match self {
            Scenario::CstrAccuracy => (1..=10).map(|i| 0.5 * i as f64).collect(),
            Scenario::CstrIllCond => (1..=15).map(|p| 10f64.powi(-p)).collect(),
            Scenario::VdpStiffness => (0..=4).map(|p| 10f64.powi(p)).collect(),
            Scenario::LtiOracle => vec![0.5],
        }
    }

    pub fn default_method(self) -> OdeMethod {
        match self {
            Scenario::VdpStiffness => OdeMethod::StiffImplicit,
            _ => OdeMethod::NonstiffRK45,
        }
    }

    /// What the sweep parameter means, for axis labels.
    pub fn param_label(self) -> &'static str {
        match self {
            Scenario::CstrAccuracy | Scenario::LtiOracle => "sampling period",
            Scenario::CstrIllCond => "ill-conditioning delta",
            Scenario::VdpStiffness => "stiffness lambda",
        }
    }

    fn default_truth_dt(self) -> f64 {
        match self {
            Scenario::VdpStiffness => 1e-5,
            _ => 1e-3,
        }
    }

    /// Builds the model for one sweep value.
    pub fn model(self, param: f64) -> Result<Box<dyn Model>, ModelError> {
        Ok(match self {
            Scenario::CstrAccuracy => Box::new(CstrModel::new()),
            Scenario::CstrIllCond => Box::new(CstrModel::ill_conditioned(param)?),
            Scenario::VdpStiffness => Box::new(VanDerPolModel::new(param)?),
            Scenario::LtiOracle => Box::new(LtiModel::reference()),
        })
    }
}

impl FromStr for Scenario {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s.trim())
            .ok_or_else(|| ExperimentError::Config(format!("unknown scenario '{s}' (expected cstr, cstr-ill, vdp or lti-test)")))
    }
}

/// Sampling period and horizon for one sweep value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub period: f64,
    pub horizon: f64,
    pub truth_dt: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub variants: Vec<FilterVariant>,
    pub alpha: f64,
    pub let_tol: f64,
    pub max_step: f64,
    pub runs: usize,
    pub base_seed: u64,
    pub sweep: Vec<f64>,
    /// Overrides the scenario's ODE method.
    pub method: Option<OdeMethod>,
    /// Overrides the scenario's fixed sampling period (ignored where the period is the sweep value).
    pub period: Option<f64>,
    pub horizon: Option<f64>,
    pub truth_dt: Option<f64>,
    pub timing: bool,
    pub output_path: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(scenario: Scenario) -> Self {
        ExperimentConfig {
            scenario,
            variants: FilterVariant::ALL.to_vec(),
            alpha: 1e3,
            let_tol: 1e-4,
            max_step: 0.1,
            runs: 100,
            base_seed: 42,
            sweep: scenario.default_sweep(),
            method: None,
            period: None,
            horizon: None,
            truth_dt: None,
            timing: true,
            output_path: None,
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |msg: String| Err(ExperimentError::Config(msg));
        if self.runs == 0 {
            return bad("runs must be at least 1".into());
        }
        if self.sweep.is_empty() || self.sweep.iter().any(|p| !p.is_finite()) {
            return bad("sweep must be a nonempty list of finite values".into());
        }
        if self.variants.is_empty() {
            return bad("at least one filter variant is required".into());
        }
        for (name, v) in [("alpha", self.alpha), ("tolerance", self.let_tol), ("max step", self.max_step)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("period", self.period), ("horizon", self.horizon), ("truth step", self.truth_dt)] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return bad(format!("{name} must be positive, got {v}"));
                }
            }
        }
        for &p in &self.sweep {
            self.grid(p)?;
        }
        Ok(())
    }

    pub fn ode_options(&self) -> OdeOptions {
        OdeOptions::with_tolerance(self.let_tol, self.method.unwrap_or(self.scenario.default_method())).max_step(self.max_step)
    }

    pub fn grid(&self, param: f64) -> Result<TimeGrid, ExperimentError> {
        let truth_dt = self.truth_dt.unwrap_or(self.scenario.default_truth_dt());
        let (period, horizon) = match self.scenario {
            Scenario::CstrAccuracy => (param, self.horizon.unwrap_or(30.0)),
            Scenario::CstrIllCond => (self.period.unwrap_or(1.0), self.horizon.unwrap_or(30.0)),
            Scenario::VdpStiffness => (self.period.unwrap_or(0.2), self.horizon.unwrap_or(2.0)),
            Scenario::LtiOracle => (param, self.horizon.unwrap_or(50.0 * param)),
        };
        if !(period > 0.0) || period > horizon {
            return Err(ExperimentError::Config(format!("sampling period {period} must lie in (0, horizon {horizon}]")));
        }
        Ok(TimeGrid { period, horizon, truth_dt })
    }
}

/// Truth and measurements shared by every variant within one Monte Carlo run.
#[derive(Debug, Clone)]
pub struct RunData {
    pub seed: u64,
    pub truth: Trajectory,
    pub measurements: Vec<MeasurementRecord>,
    /// True states at the measurement instants.
    pub truth_at_measurements: Vec<Vec<f64>>,
    pub checksum: u64,
    /// How many times the truth step was refined after a blow-up.
    pub dt_refinements: u32,
}

/// Initial truth state: the prior mean for the CSTR scenarios, a draw from the prior otherwise.
///
/// A unit-variance draw around the CSTR inflow concentrations is mostly negative in some species,
/// and the quadratic rate term then escapes to infinity within seconds.
fn initial_state(scenario: Scenario, model: &dyn Model, seed: u64) -> Result<Vec<f64>, ExperimentError> {
    let mean = model.x0_mean().to_vec();
    if matches!(scenario, Scenario::CstrAccuracy | Scenario::CstrIllCond) {
        return Ok(mean);
    }
    let l = cholesky_lower(model.x0_cov()).map_err(|_| ModelError::NotPositiveDefinite("initial covariance"))?;
    let mut w = vec![0.0; mean.len()];
    // A third independent stream: state noise uses `seed`, measurements one jump ahead.
    NormalStream::jumped(seed ^ 0x9e37_79b9_7f4a_7c15).fill(&mut w);
    Ok(mean.iter().zip(l.as_matrix().mul_vec(&w)).map(|(m, d)| m + d).collect())
}

/// Deterministic truth and measurements for `run_index` at one sweep value.
pub fn generate_run_data(config: &ExperimentConfig, param: f64, run_index: usize) -> Result<RunData, ExperimentError> {
    let model = config.scenario.model(param)?;
    let grid = config.grid(param)?;
    let seed = config.base_seed.wrapping_add(run_index as u64);
    let x0 = initial_state(config.scenario, model.as_ref(), seed)?;
    let mut dt = grid.truth_dt;
    let mut dt_refinements = 0;
    let truth = loop {
        match euler_maruyama(model.as_ref(), &x0, dt, grid.horizon, seed) {
            Ok(t) => break t,
            Err(SimError::NonFiniteState { .. }) if config.scenario == Scenario::VdpStiffness && dt_refinements < 2 => {
                dt /= 10.0;
                dt_refinements += 1;
            }
            Err(e) => return Err(e.into()),
        }
    };
    let measurements = synthesize_measurements(&truth, model.as_ref(), grid.period, seed)?;
    let truth_at_measurements = measurements
        .iter()
        .map(|m| truth.state_at(m.time).expect("measurement on the truth grid").to_vec())
        .collect();
    let checksum = checksum(&truth, &measurements);
    Ok(RunData { seed, truth, measurements, truth_at_measurements, checksum, dt_refinements })
}

#[derive(Debug, Error, PartialEq)]
#[error("shape mismatch: {0}")]
pub struct ShapeMismatch(String);

/// `sqrt( (1/(M K)) sum_runs sum_k sum_j (x_true - x_hat)^2 )`: components are summed, not averaged.
pub fn armse(truth_runs: &[Vec<Vec<f64>>], estimate_runs: &[Vec<Vec<f64>>]) -> Result<f64, ShapeMismatch> {
    if truth_runs.len() != estimate_runs.len() || truth_runs.is_empty() {
        return Err(ShapeMismatch(format!("{} truth runs vs {} estimate runs", truth_runs.len(), estimate_runs.len())));
    }
    let k = truth_runs[0].len();
    let mut total = 0.0;
    for (r, (tr, er)) in truth_runs.iter().zip(estimate_runs).enumerate() {
        if tr.len() != k || er.len() != k {
            return Err(ShapeMismatch(format!("run {r} has {} / {} instants, expected {k}", tr.len(), er.len())));
        }
        total += squared_error(tr, er).map_err(|e| ShapeMismatch(format!("run {r}: {}", e.0)))?;
    }
    if k == 0 {
        return Err(ShapeMismatch("no instants".into()));
    }
    Ok((total / (truth_runs.len() * k) as f64).sqrt())
}

fn squared_error(truth: &[Vec<f64>], est: &[Vec<f64>]) -> Result<f64, ShapeMismatch> {
    let mut s = 0.0;
    for (x, y) in truth.iter().zip(est) {
        if x.len() != y.len() {
            return Err(ShapeMismatch(format!("state length {} vs {}", x.len(), y.len())));
        }
        s += x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(s)
}

/// Result of one variant on one Monte Carlo run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub variant: FilterVariant,
    pub run_index: usize,
    pub checksum: u64,
    pub instants: usize,
    /// Sum of squared errors over instants and components; `None` when the filter diverged.
    pub squared_error: Option<f64>,
    pub divergence: Option<(f64, DivergenceCause)>,
    pub cpu_seconds: f64,
    pub stats: OdeStats,
}

/// Runs every configured variant on one shared data set.
pub fn run_variants(
    config: &ExperimentConfig,
    model: &dyn Model,
    data: &RunData,
    run_index: usize,
) -> Result<Vec<RunOutcome>, ExperimentError> {
    let opts = config.ode_options();
    let mut out = Vec::with_capacity(config.variants.len());
    for &variant in &config.variants {
        let start = Instant::now();
        let run = run_filter(variant, model, &data.measurements, config.alpha, &opts)?;
        let cpu_seconds = start.elapsed().as_secs_f64();
        let mut divergence = run.divergence.map(|d| (d.time, d.cause));
        let mut squared_error = None;
        if divergence.is_none() {
            let est: Vec<Vec<f64>> = run.posterior_means().map(<[f64]>::to_vec).collect();
            let e = squared_error_or_shape(&data.truth_at_measurements, &est)?;
            if e.is_finite() {
                squared_error = Some(e);
            } else {
                let t = data.measurements.last().map_or(0.0, |m| m.time);
                divergence = Some((t, DivergenceCause::NonFinite));
            }
        }
        out.push(RunOutcome {
            variant,
            run_index,
            checksum: data.checksum,
            instants: data.measurements.len(),
            squared_error,
            divergence,
            cpu_seconds,
            stats: run.stats,
        });
    }
    Ok(out)
}

fn squared_error_or_shape(truth: &[Vec<f64>], est: &[Vec<f64>]) -> Result<f64, ExperimentError> {
    if truth.len() != est.len() {
        return Err(ExperimentError::Config(format!("{} estimates for {} instants", est.len(), truth.len())));
    }
    squared_error(truth, est).map_err(|e| ExperimentError::Config(e.0))
}

/// Aggregate of one (sweep value, variant) pair over all Monte Carlo runs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub scenario: Scenario,
    pub param: f64,
    pub variant: FilterVariant,
    pub runs: usize,
    /// ARMSE over the runs that completed; `None` when every run diverged.
    pub armse: Option<f64>,
    pub mean_cpu_seconds: Option<f64>,
    pub failed_runs: usize,
    pub first_failure_time: Option<f64>,
    pub causes: BTreeMap<&'static str, usize>,
    pub stats: OdeStats,
}

impl RunReport {
    pub fn completed_all(&self) -> bool {
        self.failed_runs == 0
    }

    pub fn failures_with(&self, cause: DivergenceCause) -> usize {
        self.causes.get(cause.as_str()).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub reports: Vec<RunReport>,
    /// Human-readable harness events, such as truth-step refinements.
    pub notes: Vec<String>,
}

fn aggregate(config: &ExperimentConfig, param: f64, variant: FilterVariant, outcomes: &[&RunOutcome]) -> RunReport {
    let mut causes = BTreeMap::new();
    let mut failed_runs = 0;
    let mut first_failure_time: Option<f64> = None;
    let mut total = 0.0;
    let mut instants = 0;
    let mut stats = OdeStats::default();
    for o in outcomes {
        stats += o.stats;
        match (o.squared_error, o.divergence) {
            (Some(e), _) => {
                total += e;
                instants += o.instants;
            }
            (None, Some((t, cause))) => {
                failed_runs += 1;
                *causes.entry(cause.as_str()).or_insert(0) += 1;
                first_failure_time = Some(first_failure_time.map_or(t, |f| f.min(t)));
            }
            (None, None) => unreachable!("a run either scores or diverges"),
        }
    }
    let armse = (instants > 0).then(|| (total / instants as f64).sqrt());
    let mean_cpu_seconds = config
        .timing
        .then(|| outcomes.iter().map(|o| o.cpu_seconds).sum::<f64>() / outcomes.len() as f64);
    RunReport {
        scenario: config.scenario,
        param,
        variant,
        runs: outcomes.len(),
        armse,
        mean_cpu_seconds,
        failed_runs,
        first_failure_time,
        causes,
        stats,
    }
}

/// Runs the whole sweep and, when an output path is set, writes the CSV report there.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome, ExperimentError> {
    config.validate()?;
    let mut reports = Vec::new();
    let mut notes = Vec::new();
    for &param in &config.sweep {
        let model = config.scenario.model(param)?;
        let per_run: Vec<Result<(u32, Vec<RunOutcome>), ExperimentError>> = (0..config.runs)
            .into_par_iter()
            .map(|r| {
                let data = generate_run_data(config, param, r)?;
                Ok((data.dt_refinements, run_variants(config, model.as_ref(), &data, r)?))
            })
            .collect();
        let mut outcomes = Vec::with_capacity(config.runs);
        for (r, res) in per_run.into_iter().enumerate() {
            let (refinements, o) = res?;
            if refinements > 0 {
                notes.push(format!(
                    "{} param {}: run {r} truth step refined {refinements}x after a non-finite state",
                    config.scenario.name(),
                    fmt_num(param)
                ));
            }
            outcomes.push(o);
        }
        for (vi, &variant) in config.variants.iter().enumerate() {
            let column: Vec<&RunOutcome> = outcomes.iter().map(|o| &o[vi]).collect();
            reports.push(aggregate(config, param, variant, &column));
        }
    }
    if let Some(path) = &config.output_path {
        write_csv_file(&reports, path)?;
    }
    Ok(ExperimentOutcome { reports, notes })
}

/// Shortest round-trip decimal, switching to exponent form outside `[1e-4, 1e15)`.
pub fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else if v == 0.0 || (1e-4..1e15).contains(&v.abs()) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

pub fn write_csv<W: Write>(reports: &[RunReport], mut out: W) -> io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in reports {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.scenario.name(),
            fmt_num(r.param),
            r.variant.id(),
            fmt_num(r.armse.unwrap_or(f64::NAN)),
            r.mean_cpu_seconds.map(fmt_num).unwrap_or_default(),
            r.failed_runs,
            r.first_failure_time.map(fmt_num).unwrap_or_default(),
        )?;
    }
    Ok(())
}

pub fn write_csv_file(reports: &[RunReport], path: &Path) -> Result<(), ExperimentError> {
    let io_err = |source| ExperimentError::Io { path: path.to_path_buf(), source };
    let mut buf = Vec::new();
    write_csv(reports, &mut buf).map_err(io_err)?;
    fs::write(path, buf).map_err(io_err)
}

// ---------------------------------------------------------------------------
// SVG plots
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    ArmseVsDelta,
    ArmseVsDeltaIll,
    ArmseVsLambda,
    CpuVsDelta,
}

impl PlotKind {
    pub fn name(self) -> &'static str {
        match self {
            PlotKind::ArmseVsDelta => "armse_vs_delta",
            PlotKind::ArmseVsDeltaIll => "armse_vs_deltaill",
            PlotKind::ArmseVsLambda => "armse_vs_lambda",
            PlotKind::CpuVsDelta => "cpu_vs_delta",
        }
    }

    /// The natural plot for a scenario.
    pub fn for_scenario(s: Scenario) -> Self {
        match s {
            Scenario::CstrAccuracy | Scenario::LtiOracle => PlotKind::ArmseVsDelta,
            Scenario::CstrIllCond => PlotKind::ArmseVsDeltaIll,
            Scenario::VdpStiffness => PlotKind::ArmseVsLambda,
        }
    }

    fn log_x(self) -> bool {
        matches!(self, PlotKind::ArmseVsDeltaIll | PlotKind::ArmseVsLambda)
    }

    fn log_y(self) -> bool {
        !matches!(self, PlotKind::CpuVsDelta)
    }

    fn labels(self) -> (&'static str, &'static str) {
        match self {
            PlotKind::ArmseVsDelta => ("sampling period (s)", "ARMSE"),
            PlotKind::ArmseVsDeltaIll => ("ill-conditioning delta", "ARMSE"),
            PlotKind::ArmseVsLambda => ("stiffness lambda", "ARMSE"),
            PlotKind::CpuVsDelta => ("sampling period (s)", "mean CPU time (s)"),
        }
    }

    fn value(self, r: &RunReport) -> Option<f64> {
        let v = match self {
            PlotKind::CpuVsDelta => r.mean_cpu_seconds,
            _ => r.armse,
        };
        v.filter(|v| v.is_finite() && (!self.log_y() || *v > 0.0))
    }
}

impl FromStr for PlotKind {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [PlotKind::ArmseVsDelta, PlotKind::ArmseVsDeltaIll, PlotKind::ArmseVsLambda, PlotKind::CpuVsDelta]
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| ExperimentError::Config(format!("unknown plot kind '{s}'")))
    }
}

const PALETTE: [&str; 7] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf"];
const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 60.0;

struct Axis {
    log: bool,
    lo: f64,
    hi: f64,
    ticks: Vec<(f64, String)>,
}

impl Axis {
    fn new(values: &[f64], log: bool) -> Self {
        let (mut lo, mut hi) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if !lo.is_finite() {
            (lo, hi) = if log { (0.1, 10.0) } else { (0.0, 1.0) };
        }
        if log {
            let (a, b) = (lo.log10().floor() as i32, hi.log10().ceil() as i32);
            let b = if a == b { b + 1 } else { b };
            let ticks = (a..=b).map(|p| (10f64.powi(p), format!("1e{p}"))).collect();
            Axis { log, lo: 10f64.powi(a), hi: 10f64.powi(b), ticks }
        } else {
            if hi - lo <= 0.0 {
                let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.1 };
                lo -= pad;
                hi += pad;
            }
            let raw = (hi - lo) / 5.0;
            let mag = 10f64.powf(raw.log10().floor());
            let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
            let lo = (lo / step).floor() * step;
            let hi = (hi / step).ceil() * step;
            let n = ((hi - lo) / step).round() as i64;
            let ticks = (0..=n)
                .map(|i| {
                    let v = lo + i as f64 * step;
                    (v, fmt_num((v / step).round() * step))
                })
                .collect();
            Axis { log, lo, hi, ticks }
        }
    }

    fn frac(&self, v: f64) -> f64 {
        if self.log {
            (v.log10() - self.lo.log10()) / (self.hi.log10() - self.lo.log10())
        } else {
            (v - self.lo) / (self.hi - self.lo)
        }
    }
}

/// Renders reports as a standalone SVG line chart, one series per variant.
///
/// Missing values (diverged or absent) break the line; a series without any value is listed in
/// the legend as diverged.
pub fn render_plot(reports: &[RunReport], kind: PlotKind) -> Result<String, ExperimentError> {
    if reports.is_empty() {
        return Err(ExperimentError::Config("nothing to plot".into()));
    }
    let mut variants: Vec<FilterVariant> = Vec::new();
    for r in reports {
        if !variants.contains(&r.variant) {
            variants.push(r.variant);
        }
    }
    let xs: Vec<f64> = reports.iter().map(|r| r.param).filter(|p| !kind.log_x() || *p > 0.0).collect();
    let ys: Vec<f64> = reports.iter().filter_map(|r| kind.value(r)).collect();
    let xa = Axis::new(&xs, kind.log_x());
    let ya = Axis::new(&ys, kind.log_y());
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let px = |v: f64| LEFT + xa.frac(v) * pw;
    let py = |v: f64| TOP + (1.0 - ya.frac(v)) * ph;
    let (xlabel, ylabel) = kind.labels();

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<title>{}</title>"#, kind.name());
    let _ = writeln!(s, r##"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##);
    for (v, label) in &xa.ticks {
        let x = px(*v);
        let _ = writeln!(
            s,
            r##"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="#444"/><text class="xtick" x="{x:.2}" y="{:.2}" text-anchor="middle">{label}</text>"##,
            TOP + ph,
            TOP + ph + 5.0,
            TOP + ph + 20.0
        );
    }
    for (v, label) in &ya.ticks {
        let y = py(*v);
        let _ = writeln!(
            s,
            r##"<line x1="{:.2}" y1="{y:.2}" x2="{LEFT}" y2="{y:.2}" stroke="#444"/><text class="ytick" x="{:.2}" y="{:.2}" text-anchor="end">{label}</text>"##,
            LEFT - 5.0,
            LEFT - 8.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{xlabel}</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 15.0
    );
    let _ = writeln!(
        s,
        r#"<text x="20" y="{:.2}" text-anchor="middle" transform="rotate(-90 20 {:.2})">{ylabel}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0
    );

    for (i, &variant) in variants.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let mut series: Vec<&RunReport> = reports.iter().filter(|r| r.variant == variant).collect();
        series.sort_by(|a, b| a.param.total_cmp(&b.param));
        let mut path = String::new();
        let mut pen_down = false;
        let mut marks = 0;
        for r in &series {
            match kind.value(r).filter(|_| !kind.log_x() || r.param > 0.0) {
                Some(v) => {
                    let (x, y) = (px(r.param), py(v));
                    let _ = write!(path, "{}{x:.2},{y:.2} ", if pen_down { "L" } else { "M" });
                    let _ = writeln!(
                        s,
                        r#"<circle class="mark" data-variant="{}" cx="{x:.2}" cy="{y:.2}" r="3" fill="{colour}"/>"#,
                        variant.id()
                    );
                    pen_down = true;
                    marks += 1;
                }
                None => pen_down = false,
            }
        }
        if !path.is_empty() {
            let _ = writeln!(s, r#"<path d="{}" fill="none" stroke="{colour}" stroke-width="1.5"/>"#, path.trim_end());
        }
        let ly = TOP + 15.0 + 18.0 * i as f64;
        let lx = WIDTH - RIGHT + 15.0;
        let label = if marks == 0 { format!("{} (diverged)", variant.id()) } else { variant.id().to_string() };
        let _ = writeln!(
            s,
            r#"<g class="legend"><line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{colour}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{label}</text></g>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn emit_plot(reports: &[RunReport], kind: PlotKind, path: &Path) -> Result<(), ExperimentError> {
    let svg = render_plot(reports, kind)?;
    fs::write(path, svg).map_err(|source| ExperimentError::Io { path: path.to_path_buf(), source })
}
