//! `trapscape` command-line front end.
//!
//! Exit codes: 0 success, 1 output I/O failure, 2 usage error, 3 configuration
//! error, 4 numerical failure. Failures print a JSON object on stderr and
//! leave the output directory untouched.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::json;

use config::{RangeSpec, RunConfig};
use output::{write_all, Artifact, Format, Outputs};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{0}")]
    Io(String),
}

impl From<trapscape::Error> for CliError {
    fn from(e: trapscape::Error) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Io(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Io(_) => "io",
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Numerical(_) => "numerical",
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "trapscape", version, about = "Surface-trap pseudopotential, crystal and nanofriction runs")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// TOML run configuration (or the JSON echoed in an artifact header).
    /// Without it the canonical defaults are used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Format of tabular artifacts. Reports are always JSON.
    #[arg(long, global = true, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pseudopotential on an (x, y) grid.
    PotentialGrid,
    /// RF nodes at the configured ratio, or node separation across a ratio sweep.
    Nodes {
        /// Ratio sweep as start:stop:step.
        #[arg(long, value_parser = RangeSpec::parse)]
        sweep: Option<RangeSpec>,
    },
    /// Ratio at which the nodes split horizontally.
    Critical,
    /// Equilibrium ion crystal in the configured wells.
    Crystal,
    /// Axial modes of two parallel strings across node separations.
    ModesSweep,
    /// Corrugation potential and parameter for two strings.
    Corrugation,
    /// Quasi-static sliding of one string past the other.
    Slide,
    /// DC electrode voltages meeting the configured field targets.
    DcSolve,
    /// Every figure data set in one run, one subdirectory each.
    Repro,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::PotentialGrid => "potential-grid",
            Command::Nodes { .. } => "nodes",
            Command::Critical => "critical",
            Command::Crystal => "crystal",
            Command::ModesSweep => "modes-sweep",
            Command::Corrugation => "corrugation",
            Command::Slide => "slide",
            Command::DcSolve => "dc-solve",
            Command::Repro => "repro",
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => RunConfig::load(p),
        None => {
            let cfg = RunConfig::default();
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

fn run_one(name: &str, cmd: &Command, cfg: &RunConfig, format: Format, prefix: &str) -> Result<Vec<Artifact>, CliError> {
    let mut out = Outputs::new(name, cfg, format, prefix);
    match cmd {
        Command::PotentialGrid => commands::potential_grid(cfg, &mut out)?,
        Command::Nodes { .. } => commands::nodes(cfg, &mut out)?,
        Command::Critical => commands::critical(cfg, &mut out)?,
        Command::Crystal => commands::crystal(cfg, &mut out)?,
        Command::ModesSweep => commands::modes_sweep(cfg, &mut out)?,
        Command::Corrugation => commands::corrugation(cfg, &mut out)?,
        Command::Slide => commands::slide(cfg, &mut out)?,
        Command::DcSolve => commands::dc_solve(cfg, &mut out)?,
        Command::Repro => unreachable!("handled by repro"),
    }
    Ok(out.artifacts)
}

/// Figure data sets: the double-well contour, node separation and critical
/// ratio, the two-string mode sweep, and the corrugation sweep at 120 V.
fn repro(base: &RunConfig, format: Format) -> Result<Vec<Artifact>, CliError> {
    let mut artifacts = Vec::new();

    let mut grid = base.clone();
    grid.drive.r = 0.9;
    artifacts.extend(run_one("potential-grid", &Command::PotentialGrid, &grid, format, "potential_grid")?);

    let mut sweep = base.clone();
    sweep.nodes.sweep = Some(RangeSpec {
        start: 0.8,
        stop: 1.0,
        step: 0.005,
    });
    artifacts.extend(run_one("nodes", &Command::Nodes { sweep: None }, &sweep, format, "nodes")?);
    artifacts.extend(run_one("critical", &Command::Critical, base, format, "critical")?);

    artifacts.extend(run_one("modes-sweep", &Command::ModesSweep, base, format, "modes_sweep")?);

    let mut corr = base.clone();
    corr.drive.v_rf = 120.0;
    corr.corrugation.eta_sweep_d_um.get_or_insert(RangeSpec {
        start: 22.0,
        stop: 55.0,
        step: 3.0,
    });
    artifacts.extend(run_one("corrugation", &Command::Corrugation, &corr, format, "corrugation")?);
    Ok(artifacts)
}

fn run(cli: &Cli) -> Result<Vec<PathBuf>, CliError> {
    let g = &cli.global;
    if let Some(n) = g.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot configure thread pool: {e}")))?;
    }
    let mut cfg = load_config(g.config.as_deref())?;
    // flags that override the file are folded in so the echoed config is
    // the one that ran
    if let Command::Nodes { sweep: Some(r) } = &cli.command {
        cfg.nodes.sweep = Some(*r);
    }
    let name = cli.command.name();
    info!("running {name}");
    let artifacts = match &cli.command {
        Command::Repro => repro(&cfg, g.format)?,
        cmd => run_one(name, cmd, &cfg, g.format, "")?,
    };
    write_all(&g.out, &artifacts)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TRAPSCAPE_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::Usage(e.render().to_string().trim().to_string());
            return report_error(&err);
        }
    };
    match run(&cli) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => report_error(&e),
    }
}

fn report_error(e: &CliError) -> ExitCode {
    let body = json!({
        "error": {
            "kind": e.kind(),
            "exit_code": e.exit_code(),
            "message": e.to_string(),
        }
    });
    eprintln!("{body}");
    ExitCode::from(e.exit_code())
}
