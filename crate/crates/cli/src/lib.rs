//! `evcal`: simulate, accumulate, detect, calibrate and evaluate.

pub mod calibrate;
pub mod config;
pub mod evaluate;
pub mod simulate;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use evcal::event_io::{accumulate, read_events, AccumMode, EventFormat};
use evcal::features::{order_grid, write_correspondences_csv, write_markers_csv};
use evcal::refine::CalibrationMode;
use evcal::simulator::ScenarioConfig;

pub use crate::calibrate::Status;
use crate::calibrate::markers_from_events;
use crate::config::{read_json, PipelineConfig};

#[derive(Parser)]
#[command(name = "evcal", version, about = "Collimator-based event camera calibration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scenario: event files, correspondences and ground truth.
    Simulate(SimulateArgs),
    /// Accumulate an event file into frames (CSV and PGM).
    Accumulate(PipelineArgs),
    /// Detect and order markers in each input event file.
    Detect(PipelineArgs),
    /// Run the full calibration and write a report.
    Calibrate(PipelineArgs),
    /// Compare reports against a ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario JSON (ground truth, noise model, seed, duration).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the event stream duration per view.
    #[arg(long)]
    duration_ms: Option<f64>,
    #[arg(long, default_value = "evcal-sim")]
    out: PathBuf,
    /// Event file format: csv or binary.
    #[arg(long, default_value = "csv")]
    format: EventFormat,
}

#[derive(Args)]
struct PipelineArgs {
    /// Pipeline JSON; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Event file, one per view. Repeat for more views.
    #[arg(long = "input")]
    inputs: Vec<PathBuf>,
    /// Pre-extracted correspondence CSV (`view,model_ix,u,v,X,Y`).
    #[arg(long)]
    correspondences: Option<PathBuf>,
    /// Event file format: csv or binary.
    #[arg(long)]
    format: Option<EventFormat>,
    /// Accumulation window in microseconds.
    #[arg(long)]
    window_us: Option<u64>,
    /// count or polarity_balance.
    #[arg(long)]
    accumulation: Option<AccumMode>,
    /// spherical or free6dof.
    #[arg(long)]
    mode: Option<CalibrationMode>,
    /// Huber threshold in pixels; `inf` selects the quadratic loss.
    #[arg(long)]
    huber_delta: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl PipelineArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::load(self.config.as_deref())?;
        if !self.inputs.is_empty() {
            cfg.inputs = self.inputs.clone();
        }
        if self.correspondences.is_some() {
            cfg.correspondences = self.correspondences.clone();
        }
        if let Some(f) = self.format {
            cfg.format = f;
        }
        if let Some(w) = self.window_us {
            cfg.window_us = w;
        }
        if let Some(a) = self.accumulation {
            cfg.accumulation = a;
        }
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(d) = self.huber_delta {
            cfg.lm.huber_delta = if d.is_infinite() && d > 0.0 { None } else { Some(d) };
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct EvaluateArgs {
    /// `ground_truth.json` written by `simulate`.
    #[arg(long)]
    ground_truth: PathBuf,
    /// Report files written by `calibrate`.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    /// Also write `evaluation.csv` here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run_simulate(args: &SimulateArgs) -> Result<()> {
    let mut cfg: ScenarioConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => ScenarioConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(d) = args.duration_ms {
        cfg.duration_ms = d;
    }
    simulate::run(&cfg, &args.out, args.format)
}

fn run_accumulate(cfg: &PipelineConfig) -> Result<()> {
    if cfg.inputs.is_empty() {
        bail!("accumulate needs at least one --input event file");
    }
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    for (i, path) in cfg.inputs.iter().enumerate() {
        let stream = read_events(path, cfg.format, cfg.sensor)?;
        let frames = accumulate(&stream, cfg.window_us, cfg.accumulation)?;
        for (k, f) in frames.iter().enumerate() {
            let stem = cfg.out.join(format!("view{i}_frame{k:04}"));
            f.write_csv(&stem.with_extension("csv"))?;
            f.write_pgm(&stem.with_extension("pgm"))?;
        }
        println!("{}: {} events, {} frames", path.display(), stream.len(), frames.len());
    }
    Ok(())
}

fn run_detect(cfg: &PipelineConfig) -> Result<()> {
    if cfg.inputs.is_empty() {
        bail!("detect needs at least one --input event file");
    }
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    let mut all_markers = Vec::new();
    let mut corrs = Vec::new();
    for (view, path) in cfg.inputs.iter().enumerate() {
        let markers = markers_from_events(path, cfg)?;
        all_markers.extend(markers.iter().map(|m| (view, *m)));
        let ordered = order_grid(&markers, &cfg.target, view)
            .with_context(|| format!("ordering markers of {}", path.display()))?;
        println!("{}: {} markers", path.display(), markers.len());
        corrs.extend(ordered);
    }
    write_markers_csv(&cfg.out.join("markers.csv"), &all_markers)?;
    write_correspondences_csv(&cfg.out.join("correspondences.csv"), &corrs)?;
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<Status> {
    match &cli.command {
        Command::Simulate(a) => run_simulate(a).map(|_| Status::Done),
        Command::Accumulate(a) => run_accumulate(&a.resolve()?).map(|_| Status::Done),
        Command::Detect(a) => run_detect(&a.resolve()?).map(|_| Status::Done),
        Command::Calibrate(a) => calibrate::run(&a.resolve()?),
        Command::Evaluate(a) => {
            print!("{}", evaluate::run(&a.ground_truth, &a.reports, a.out.as_deref())?);
            Ok(Status::Done)
        }
    }
}

/// Runs one command in-process. `args` includes the program name.
pub fn execute<I, T>(args: I) -> Result<Status>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    dispatch(&Cli::try_parse_from(args)?)
}

/// Entry point of the binary: 0 on success, 2 when the optimizer gave up
/// (the report is still written), 1 on any error including bad usage.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(&cli) {
        Ok(Status::Done) => ExitCode::SUCCESS,
        Ok(Status::NotConverged) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
