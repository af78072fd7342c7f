//! Command-line front end. Each subcommand is a plain function returning the
//! text to print, so it can be driven from tests as well as from `main`.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use crate::alps::{run, RunControl};
use crate::data::{load_config, load_dataset, write_dataset, Dataset, HEADER};
use crate::expr::{format_infix, format_number};
use crate::fitness::{FitnessReport, Objective, OdeProblem};
use crate::genotype::TREES;
use crate::kinetics::{
    dataset_file_name, reference_system, synthesize, SynthSpec, AUSTENITE_START,
};
use crate::ode::{
    format_model, integrate_rk45, parse_model, DeSystem, IntegratorSettings, SECTION_NAMES,
};

#[derive(Debug, Parser)]
#[command(
    name = "phasekin",
    version,
    about = "Evolve and evaluate ODE models of phase-transformation kinetics"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic cooling trajectories.
    Synth(SynthArgs),
    /// Evolve a model from a run configuration.
    Fit(FitArgs),
    /// Score a model against datasets.
    Eval(EvalArgs),
    /// Write model predictions next to a dataset.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Comma-separated cooling rates in K/s.
    #[arg(long, value_parser = parse_rates, default_value = "0.6,2.5,10,40,80")]
    pub rates: Rates,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    /// Relative sd of multiplicative noise on the rate columns.
    #[arg(long, default_value_t = 0.0)]
    pub noise_sd: f64,
    #[arg(long, default_value_t = 830.0)]
    pub t_start: f64,
    #[arg(long, default_value_t = 34.0)]
    pub t_end: f64,
    /// Generate from this model instead of the built-in reference system.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Also write the generating model to this file.
    #[arg(long)]
    pub model_out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rates(pub Vec<f64>);

fn parse_rates(s: &str) -> Result<Rates, String> {
    let rates = s
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.parse::<f64>()
                .map_err(|_| format!("`{p}` is not a number"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if rates.is_empty() {
        return Err("at least one cooling rate is required".into());
    }
    Ok(Rates(rates))
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Run configuration (TOML).
    pub config: PathBuf,
    /// Overrides the seed from the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Evaluation threads; defaults to the number of cores.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub workers: Option<u32>,
    /// Directory for the model, history and report files.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Stop after this much wall-clock time and keep the best so far.
    #[arg(long)]
    pub stop_after_seconds: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(required = true)]
    pub datasets: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}

pub fn load_model(path: &Path) -> Result<DeSystem, CliError> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    parse_model(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_datasets(paths: &[PathBuf]) -> Result<Vec<Dataset>, CliError> {
    paths
        .iter()
        .map(|p| load_dataset(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display()))))
        .collect()
}

pub fn execute(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Fit(a) => cmd_fit(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Simulate(a) => cmd_simulate(&a),
    }
}

#[derive(Serialize)]
struct Manifest {
    seed: u64,
    cooling_rates: Vec<f64>,
    t_start: f64,
    t_end: f64,
    samples_per_trajectory: usize,
    noise_sd: f64,
    model: String,
    files: Vec<String>,
}

pub fn cmd_synth(args: &SynthArgs) -> Result<String, CliError> {
    let spec = SynthSpec {
        cooling_rates: args.rates.0.clone(),
        t_start: args.t_start,
        t_end: args.t_end,
        samples_per_trajectory: args.samples,
        noise_sd: args.noise_sd,
        seed: args.seed,
        integrator: IntegratorSettings::default(),
    };
    spec.validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let (system, model_name) = match &args.model {
        Some(p) => (load_model(p)?, p.display().to_string()),
        None => (reference_system(), "reference".to_string()),
    };
    let datasets = synthesize(&system, &AUSTENITE_START, &spec)
        .map_err(|e| CliError::Runtime(e.to_string()))?;

    create_dir(&args.out)?;
    let mut files = Vec::new();
    for d in &datasets {
        let name = dataset_file_name(d.ks);
        let path = args.out.join(&name);
        write_dataset(&path, d).map_err(data_err)?;
        files.push(name);
    }
    let manifest = Manifest {
        seed: spec.seed,
        cooling_rates: spec.cooling_rates.clone(),
        t_start: spec.t_start,
        t_end: spec.t_end,
        samples_per_trajectory: spec.samples_per_trajectory,
        noise_sd: spec.noise_sd,
        model: model_name,
        files: files.clone(),
    };
    let manifest = toml::to_string(&manifest).expect("manifest serializes");
    write_file(&args.out.join("manifest.toml"), &manifest)?;
    if let Some(p) = &args.model_out {
        write_file(p, &format_model(&system))?;
    }
    Ok(format!(
        "wrote {} datasets to {}\n",
        files.len(),
        args.out.display()
    ))
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), format_number)
}

/// Text rendering of a fitness report, one `key value` pair per line.
pub fn format_report(report: &FitnessReport, datasets: &[Dataset]) -> String {
    let mut out = String::new();
    writeln!(out, "total_nmse {}", format_number(report.total)).unwrap();
    writeln!(out, "penalized {}", report.penalized).unwrap();
    if report.penalized {
        writeln!(out, "progress {}", format_number(report.progress)).unwrap();
    }
    for (d, v) in datasets.iter().zip(&report.per_dataset) {
        writeln!(
            out,
            "dataset ks={} {}",
            format_number(d.ks),
            format_number(*v)
        )
        .unwrap();
    }
    for (name, v) in SECTION_NAMES.iter().zip(report.per_variable) {
        writeln!(out, "variable {name} {}", cell(v)).unwrap();
    }
    out
}

fn format_equations(system: &DeSystem) -> String {
    const LHS: [&str; TREES] = ["d(P1dot)/dt", "d(P2dot)/dt", "d(P3dot)/dt", "d(RA)/dt"];
    LHS.iter()
        .zip(&system.trees)
        .map(|(lhs, t)| format!("{lhs} = {}\n", format_infix(t)))
        .collect()
}

pub fn cmd_fit(args: &FitArgs) -> Result<String, CliError> {
    let mut config = load_config(&args.config).map_err(data_err)?;
    if let Some(seed) = args.seed {
        config.alps.seed = seed;
    }
    config.validate().map_err(data_err)?;
    if config.datasets.is_empty() {
        return Err(CliError::Data("configuration lists no datasets".into()));
    }
    let training: Vec<Dataset> = load_datasets(&config.datasets)?
        .iter()
        .map(|d| d.head_fraction(config.train_fraction))
        .collect();
    let variation = config.variation().map_err(data_err)?;
    let active = variation.active;
    let problem = OdeProblem {
        objective: Objective::new(&training, config.integrator_settings(), active),
        variation,
        memetic_iterations: config.memetic.max_iterations,
    };

    create_dir(&args.out)?;
    let model_path = args.out.join(&config.output.model);
    let history_path = args.out.join(&config.output.history);
    let report_path = args.out.join(&config.output.report);
    let history_file = fs::File::create(&history_path)
        .map_err(|e| CliError::Data(format!("{}: {e}", history_path.display())))?;
    let mut history = BufWriter::new(history_file);

    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = args.workers {
        builder = builder.num_threads(w as usize);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let deadline = match args.stop_after_seconds {
        Some(s) if s.is_finite() && s >= 0.0 => Some(Instant::now() + Duration::from_secs_f64(s)),
        Some(s) => return Err(CliError::Usage(format!("invalid --stop-after-seconds {s}"))),
        None => None,
    };
    let result = pool
        .install(|| {
            run(
                &config.alps,
                &problem,
                RunControl {
                    deadline,
                    stop: None,
                    history_sink: Some(&mut history),
                },
            )
        })
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    history
        .flush()
        .map_err(|e| CliError::Runtime(e.to_string()))?;

    let best = DeSystem::new(result.best.trees.clone());
    write_file(&model_path, &format_model(&best))?;
    let report = problem.objective.evaluate(&best);
    let mut text = format!(
        "generations {}\ninterrupted {}\n",
        result.generations, result.interrupted
    );
    text.push_str(&format_report(&report, &training));
    text.push('\n');
    text.push_str(&format_equations(&best));
    write_file(&report_path, &text)?;
    Ok(text)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<String, CliError> {
    let system = load_model(&args.model)?;
    let datasets = load_datasets(&args.datasets)?;
    let objective = Objective::new(&datasets, IntegratorSettings::default(), [true; TREES]);
    Ok(format_report(&objective.evaluate(&system), &datasets))
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<String, CliError> {
    let system = load_model(&args.model)?;
    let data = load_datasets(std::slice::from_ref(&args.data))?.remove(0);
    let traj = integrate_rk45(
        &system,
        &data.initial_state(),
        &data.signal(),
        &IntegratorSettings::default(),
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut out = String::new();
    out.push_str(&HEADER.join(","));
    out.push_str(",pred_p1dot,pred_p2dot,pred_p3dot,pred_ra\n");
    let ks = format_number(data.ks);
    for (r, y) in data.rows.iter().zip(&traj.samples) {
        out.push_str(&ks);
        for v in [r.temp, r.t, r.p1dot, r.p2dot, r.p3dot, r.p4dot, r.ra]
            .into_iter()
            .chain(*y)
        {
            out.push(',');
            out.push_str(&format_number(v));
        }
        out.push('\n');
    }
    write_file(&args.out, &out)?;
    Ok(format!(
        "wrote {} rows to {}\n",
        data.len(),
        args.out.display()
    ))
}
