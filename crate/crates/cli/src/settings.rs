//! Run settings gathered from a flat `key = value` file and command-line flags.

use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use cdekf_core::{ExperimentConfig, FilterVariant, OdeMethod, PlotKind, Scenario};

/// Every field is optional so that a file and the flags can be layered.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings {
    pub scenario: Option<Scenario>,
    pub filters: Option<Vec<FilterVariant>>,
    pub alpha: Option<f64>,
    pub tol: Option<f64>,
    pub max_step: Option<f64>,
    pub runs: Option<usize>,
    pub seed: Option<u64>,
    pub sweep: Option<Vec<f64>>,
    pub period: Option<f64>,
    pub horizon: Option<f64>,
    pub truth_dt: Option<f64>,
    pub method: Option<OdeMethod>,
    pub out: Option<PathBuf>,
    pub plot: Option<PathBuf>,
    pub plot_kind: Option<PlotKind>,
    pub timing: Option<bool>,
}

pub fn parse_method(s: &str) -> Result<OdeMethod> {
    match s.trim() {
        "rk45" | "nonstiff" => Ok(OdeMethod::NonstiffRK45),
        "stiff" | "implicit" => Ok(OdeMethod::StiffImplicit),
        other => bail!("unknown ODE method '{other}' (expected rk45 or stiff)"),
    }
}

pub fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<T>().map_err(|e| anyhow!("'{p}': {e}")))
        .collect()
}

fn parse_bool(s: &str) -> Result<bool> {
    match s.trim() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        other => bail!("expected a boolean, got '{other}'"),
    }
}

fn num<T: FromStr>(s: &str) -> Result<T>
where
    T::Err: std::error::Error + Send + Sync + 'static,
{
    Ok(s.trim().parse::<T>()?)
}

impl Settings {
    /// Parses `key = value` lines; `#` starts a comment, blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Settings::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key = value", lineno + 1))?;
            s.set(key.trim(), value.trim()).with_context(|| format!("line {}", lineno + 1))?;
        }
        Ok(s)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.replace('-', "_");
        match key.as_str() {
            "scenario" => self.scenario = Some(value.parse()?),
            "filters" | "variants" => self.filters = Some(parse_list(value)?),
            "alpha" => self.alpha = Some(num(value)?),
            "tol" | "let_tol" => self.tol = Some(num(value)?),
            "max_step" => self.max_step = Some(num(value)?),
            "runs" => self.runs = Some(num(value)?),
            "seed" | "base_seed" => self.seed = Some(num(value)?),
            "sweep" => self.sweep = Some(parse_list(value)?),
            "period" => self.period = Some(num(value)?),
            "horizon" => self.horizon = Some(num(value)?),
            "truth_dt" => self.truth_dt = Some(num(value)?),
            "method" => self.method = Some(parse_method(value)?),
            "out" | "output_path" => self.out = Some(PathBuf::from(value)),
            "plot" => self.plot = Some(PathBuf::from(value)),
            "plot_kind" => self.plot_kind = Some(value.parse()?),
            "timing" => self.timing = Some(parse_bool(value)?),
            other => bail!("unknown setting '{other}'"),
        }
        Ok(())
    }

    /// Fields set in `over` win.
    pub fn layered(self, over: Settings) -> Settings {
        Settings {
            scenario: over.scenario.or(self.scenario),
            filters: over.filters.or(self.filters),
            alpha: over.alpha.or(self.alpha),
            tol: over.tol.or(self.tol),
            max_step: over.max_step.or(self.max_step),
            runs: over.runs.or(self.runs),
            seed: over.seed.or(self.seed),
            sweep: over.sweep.or(self.sweep),
            period: over.period.or(self.period),
            horizon: over.horizon.or(self.horizon),
            truth_dt: over.truth_dt.or(self.truth_dt),
            method: over.method.or(self.method),
            out: over.out.or(self.out),
            plot: over.plot.or(self.plot),
            plot_kind: over.plot_kind.or(self.plot_kind),
            timing: over.timing.or(self.timing),
        }
    }

    pub fn into_config(self) -> Result<ExperimentConfig> {
        let scenario = self.scenario.ok_or_else(|| anyhow!("a scenario is required (--scenario or scenario = ...)"))?;
        let mut c = ExperimentConfig::new(scenario);
        if let Some(v) = self.filters {
            c.variants = v;
        }
        c.alpha = self.alpha.unwrap_or(c.alpha);
        c.let_tol = self.tol.unwrap_or(c.let_tol);
        c.max_step = self.max_step.unwrap_or(c.max_step);
        c.runs = self.runs.unwrap_or(c.runs);
        c.base_seed = self.seed.unwrap_or(c.base_seed);
        if let Some(s) = self.sweep {
            c.sweep = s;
        }
        c.period = self.period;
        c.horizon = self.horizon;
        c.truth_dt = self.truth_dt;
        c.method = self.method;
        c.timing = self.timing.unwrap_or(true);
        c.output_path = self.out;
        c.validate()?;
        Ok(c)
    }
}
