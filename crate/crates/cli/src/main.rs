mod settings;

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use cdekf_core::experiment::{fmt_num, generate_run_data, write_csv};
use cdekf_core::{emit_plot, run_experiment, FilterVariant, OdeMethod, PlotKind, Scenario};
use clap::{Args, Parser, Subcommand};

use settings::{parse_method, Settings};

#[derive(Parser)]
#[command(name = "cdekf", version, about = "Monte Carlo experiments for continuous-discrete Kalman filters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario sweep and write the CSV report.
    Run(RunArgs),
    /// Write one simulated truth trajectory (and its measurements) as CSV.
    Simulate(SimulateArgs),
    /// List scenarios and filter variants.
    List,
}

#[derive(Args)]
struct RunArgs {
    /// Flat key = value settings file; flags given here take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_scenario)]
    scenario: Option<Scenario>,
    /// Comma-separated variant ids.
    #[arg(long, value_delimiter = ',', value_parser = parse_variant)]
    filters: Option<Vec<FilterVariant>>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_step: Option<f64>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated sweep values replacing the scenario default.
    #[arg(long, value_delimiter = ',')]
    sweep: Option<Vec<f64>>,
    #[arg(long)]
    period: Option<f64>,
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long)]
    truth_dt: Option<f64>,
    /// Integrator override: rk45 or stiff.
    #[arg(long, value_parser = parse_ode_method)]
    method: Option<OdeMethod>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    plot: Option<PathBuf>,
    /// armse_vs_delta, armse_vs_deltaill, armse_vs_lambda or cpu_vs_delta.
    #[arg(long, value_parser = parse_plot_kind)]
    plot_kind: Option<PlotKind>,
    /// Leave the timing column empty so that repeated runs give identical bytes.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_parser = parse_scenario)]
    scenario: Scenario,
    /// Sweep value selecting the model (period, delta or lambda); defaults to the first sweep entry.
    #[arg(long)]
    param: Option<f64>,
    /// Monte Carlo run index; the seed is the base seed plus this.
    #[arg(long, default_value_t = 0)]
    run: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    measurements: Option<PathBuf>,
}

fn parse_scenario(s: &str) -> Result<Scenario, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn parse_variant(s: &str) -> Result<FilterVariant, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn parse_ode_method(s: &str) -> Result<OdeMethod, String> {
    parse_method(s).map_err(|e| e.to_string())
}

fn parse_plot_kind(s: &str) -> Result<PlotKind, String> {
    s.parse().map_err(|e| format!("{e}"))
}

impl RunArgs {
    fn settings(&self) -> Result<Settings> {
        let base = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                Settings::parse(&text).with_context(|| format!("in {}", path.display()))?
            }
            None => Settings::default(),
        };
        let flags = Settings {
            scenario: self.scenario,
            filters: self.filters.clone(),
            alpha: self.alpha,
            tol: self.tol,
            max_step: self.max_step,
            runs: self.runs,
            seed: self.seed,
            sweep: self.sweep.clone(),
            period: self.period,
            horizon: self.horizon,
            truth_dt: self.truth_dt,
            method: self.method,
            out: self.out.clone(),
            plot: self.plot.clone(),
            plot_kind: self.plot_kind,
            timing: self.no_timing.then_some(false),
        };
        Ok(base.layered(flags))
    }
}

fn run(args: &RunArgs) -> Result<()> {
    let settings = args.settings()?;
    let plot = settings.plot.clone();
    let plot_kind = settings.plot_kind;
    let config = settings.into_config()?;
    let outcome = run_experiment(&config)?;
    for note in &outcome.notes {
        eprintln!("note: {note}");
    }
    if config.output_path.is_none() {
        write_csv(&outcome.reports, io::stdout().lock())?;
    } else {
        let mut err = io::stderr().lock();
        for r in &outcome.reports {
            let armse = r.armse.map_or_else(|| "diverged".to_string(), fmt_num);
            writeln!(err, "{:>10} {:<10} armse {:<22} failed {}/{}", fmt_num(r.param), r.variant.id(), armse, r.failed_runs, r.runs)?;
        }
    }
    if let Some(path) = plot {
        let kind = plot_kind.unwrap_or(PlotKind::for_scenario(config.scenario));
        emit_plot(&outcome.reports, kind, &path)?;
    }
    Ok(())
}

fn simulate(args: &SimulateArgs) -> Result<()> {
    let mut config = cdekf_core::ExperimentConfig::new(args.scenario);
    config.base_seed = args.seed;
    let param = args.param.unwrap_or(config.sweep[0]);
    config.sweep = vec![param];
    config.validate()?;
    let data = generate_run_data(&config, param, args.run)?;
    let file = File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    data.truth.write_csv(BufWriter::new(file))?;
    if let Some(path) = &args.measurements {
        let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
        let m = data.measurements.first().map_or(0, |r| r.value.len());
        let header: Vec<String> = (1..=m).map(|i| format!("z{i}")).collect();
        writeln!(w, "k,t,{}", header.join(","))?;
        for (k, rec) in data.measurements.iter().enumerate() {
            let vals: Vec<String> = rec.value.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{},{},{}", k + 1, rec.time, vals.join(","))?;
        }
        w.flush()?;
    }
    eprintln!("checksum {:016x}", data.checksum);
    Ok(())
}

fn list() {
    println!("scenarios:");
    for s in Scenario::ALL {
        let sweep: Vec<String> = s.default_sweep().into_iter().map(fmt_num).collect();
        println!("  {:<9} {} sweep [{}]", s.name(), s.param_label(), sweep.join(", "));
    }
    println!("filters:");
    for v in FilterVariant::ALL {
        println!("  {}", v.id());
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => run(args),
        Command::Simulate(args) => simulate(args),
        Command::List => {
            list();
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
