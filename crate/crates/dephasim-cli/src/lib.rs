//! Command-line front end for the dephasing pipeline: bath simulation,
//! filter functions, coherence prediction, spectrum measurement, and
//! prediction-versus-Monte-Carlo verification.
//!
//! Every command is a pure function of (config, seed): rerunning with the
//! same resolved config and seed produces byte-identical data files, for any
//! `--threads` value. Each run writes a `manifest.json` recording the
//! command, config digest, seed, versions, and output paths.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};

use dephasim::io::TableFormat;

pub mod commands;
pub mod config;
pub mod manifest;

use commands::{CommandReport, OutputCtx};
use manifest::RunManifest;

/// Command failures, separated by exit code: config problems exit 2,
/// numeric failures exit 3. Verification disagreement is not an error; it
/// is reported through the exit code 4 path in [`run`].
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numeric(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config error: {msg}"),
            CliError::Numeric(msg) => write!(f, "numeric failure: {msg}"),
        }
    }
}

impl std::error::Error for CliError {}

/// Map library errors onto exit codes: malformed or physically inconsistent
/// inputs are config errors; everything else (tolerance misses, too little
/// data for an estimate) is a numeric failure.
pub fn lib_err(e: dephasim::Error) -> CliError {
    match &e {
        dephasim::Error::InvalidArgument(_) | dephasim::Error::Precondition(_) => {
            CliError::Config(e.to_string())
        }
        _ => CliError::Numeric(e.to_string()),
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "dephasim",
    version,
    about = "Collisional-bath dephasing pipeline: simulate, characterize, predict, verify"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML config file; an `extends` key layers it over a base file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: hardware parallelism). Outputs are
    /// identical for any value.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Directory for output files and the run manifest.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    /// Output table format.
    #[arg(long, global = true, default_value = "csv", value_parser = parse_format)]
    pub format: TableFormat,
}

fn parse_format(s: &str) -> Result<TableFormat, String> {
    s.parse().map_err(|e: dephasim::Error| e.to_string())
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Monte-Carlo a collisional bath; write its detuning traces and
    /// spectrum.
    SimulateBath,
    /// Filter function of a pulse sequence on a frequency grid.
    Filter,
    /// Predict coherence curves from a spectrum and a control waveform.
    Predict,
    /// Run the drive-spectroscopy protocol against a bath source and invert
    /// the measured rates into a spectrum.
    MeasureSpectrum,
    /// Compare overlap-integral predictions against stochastic evolution on
    /// the same bath; exit 4 on unexpected disagreement.
    Verify,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SimulateBath => "simulate-bath",
            Command::Filter => "filter",
            Command::Predict => "predict",
            Command::MeasureSpectrum => "measure-spectrum",
            Command::Verify => "verify",
        }
    }
}

/// Execute a parsed invocation. Returns the process exit code on success
/// (0, or 4 when `verify` found unexpected disagreement).
pub fn run(cli: Cli) -> Result<i32, CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        // A pool may already exist when called library-style; the fixed
        // work partition makes results thread-count independent anyway.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let config_path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config <file> is required".into()))?;
    let mut table = config::load_resolved(config_path)?;
    let seed = config::effective_seed(&mut table, cli.seed)?;
    let digest = config::digest(&table);
    std::fs::create_dir_all(&cli.out_dir).map_err(|e| {
        CliError::Config(format!("cannot create out dir {}: {e}", cli.out_dir.display()))
    })?;
    let ctx = OutputCtx {
        out_dir: cli.out_dir.clone(),
        format: cli.format,
        config_dir: config_path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
            .to_path_buf(),
    };
    let started = Instant::now();
    let report: CommandReport = match cli.command {
        Command::SimulateBath => commands::cmd_simulate_bath(config::parse(table)?, &ctx)?,
        Command::Filter => commands::cmd_filter(config::parse(table)?, &ctx)?,
        Command::Predict => commands::cmd_predict(config::parse(table)?, &ctx)?,
        Command::MeasureSpectrum => commands::cmd_measure_spectrum(config::parse(table)?, &ctx)?,
        Command::Verify => commands::cmd_verify(config::parse(table)?, &ctx)?,
    };
    let mut manifest = RunManifest::new(cli.command.name(), digest, seed);
    for path in &report.outputs {
        manifest.record_output(&cli.out_dir, path);
    }
    manifest.wall_time_s = started.elapsed().as_secs_f64();
    let manifest_path = manifest.write(&cli.out_dir)?;
    println!("wrote {}", manifest_path.display());
    Ok(if report.check_failed { 4 } else { 0 })
}
