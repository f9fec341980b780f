//! Command-line front end. Every command is a pure function of the run
//! config, the flag overrides and the input files.
//!
//! Exit codes: 0 ok, 1 I/O failure, 2 config or schema error, 3 generation
//! failure, 4 no data.

pub mod cache;
mod commands;
pub mod config;
pub mod svg;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;
use thiserror::Error;

use crate::analysis::AnalysisError;
use crate::boostreg::BoostError;
use crate::calib::CalibError;
use crate::synth::SynthError;
use crate::trajdata::TrajError;

pub use config::RunConfig;

/// Environment variable read for the log filter.
pub const LOG_ENV: &str = "DRIVERCAL_LOG";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Traj(#[from] TrajError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Calib(#[from] CalibError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Boost(#[from] BoostError),
    #[error("no episodes in {0}")]
    NoData(String),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot serialize {path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("cannot write {path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Traj(TrajError::Io(_)) => 1,
            CliError::Traj(_) => 2,
            CliError::Synth(SynthError::InvalidSpec(_)) => 2,
            CliError::Synth(SynthError::Infeasible { .. }) => 3,
            CliError::Calib(e) | CliError::Analysis(AnalysisError::Calib(e)) => match e {
                CalibError::NoData => 4,
                CalibError::InvalidSpace(_) | CalibError::InvalidSettings(_) => 2,
            },
            CliError::Analysis(AnalysisError::NoFits) => 4,
            CliError::Analysis(_) => 2,
            CliError::Boost(BoostError::InvalidConfig(_)) => 2,
            CliError::Boost(BoostError::NoData) => 4,
            CliError::Boost(_) => 1,
            CliError::NoData(_) => 4,
            CliError::Io { .. } | CliError::Json { .. } | CliError::Csv { .. } => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, ValueEnum)]
pub enum Format {
    Csv,
    Json,
    Svg,
}

#[derive(Debug, Parser)]
#[command(name = "drivercal", version, about = "Calibrate and analyse car-following driver models")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory, overriding `output_dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Run seed, overriding `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for per-driver work (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Report formats to write. Repeat or comma-separate.
    #[arg(long, global = true, value_enum, value_delimiter = ',')]
    pub format: Vec<Format>,
    /// Ignore and do not write the fit cache.
    #[arg(long, global = true)]
    pub no_cache: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum FitMode {
    PerDriver,
    Shared,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum RolloutSource {
    IdmPerDriver,
    IdmShared,
    Boosted,
}

impl RolloutSource {
    pub fn as_str(self) -> &'static str {
        match self {
            RolloutSource::IdmPerDriver => "idm_per_driver",
            RolloutSource::IdmShared => "idm_shared",
            RolloutSource::Boosted => "boosted",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Analysis {
    Diversity,
    Params,
    Consistency,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse a trajectory CSV into car-following episodes.
    Ingest,
    /// Generate a synthetic driver population with ground-truth labels.
    Synth,
    /// Calibrate IDM parameters per driver and/or shared across drivers.
    Fit {
        #[arg(long, value_enum, default_value = "both")]
        mode: FitMode,
    },
    /// Write closed-loop rollouts for a seeded sample of episodes.
    Rollout {
        #[arg(long, value_enum)]
        source: RolloutSource,
    },
    /// Run the population analyses.
    Analyze {
        #[arg(long, value_enum, default_value = "all")]
        which: Analysis,
    },
}

/// Writes report files into the output directory, skipping formats that
/// were not requested.
pub(crate) struct Output {
    pub dir: PathBuf,
    formats: Vec<Format>,
}

impl Output {
    pub fn new(dir: PathBuf, formats: &[Format]) -> Result<Self, CliError> {
        let mut formats = if formats.is_empty() {
            vec![Format::Csv, Format::Json]
        } else {
            formats.to_vec()
        };
        formats.sort();
        formats.dedup();
        create_dir(&dir)?;
        Ok(Output { dir, formats })
    }

    pub fn wants(&self, f: Format) -> bool {
        self.formats.contains(&f)
    }

    pub fn subdir(&self, name: &str) -> Result<PathBuf, CliError> {
        let p = self.dir.join(name);
        create_dir(&p)?;
        Ok(p)
    }

    pub fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), CliError> {
        if self.wants(Format::Json) {
            write_json(&self.dir.join(name), value)?;
        }
        Ok(())
    }

    pub fn csv<R, I>(&self, name: &str, header: &[&str], rows: R) -> Result<(), CliError>
    where
        R: IntoIterator<Item = I>,
        I: IntoIterator<Item = String>,
    {
        if self.wants(Format::Csv) {
            write_csv(&self.dir.join(name), header, rows)?;
        }
        Ok(())
    }

    pub fn svg(&self, name: &str, body: &str) -> Result<(), CliError> {
        if self.wants(Format::Svg) {
            write_file(&self.dir.join(name), body.as_bytes())?;
        }
        Ok(())
    }
}

pub(crate) fn create_dir(p: &Path) -> Result<(), CliError> {
    fs::create_dir_all(p).map_err(|source| CliError::Io {
        path: p.to_path_buf(),
        source,
    })
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    fs::write(path, bytes).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    info!("wrote {}", path.display());
    Ok(())
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub(crate) fn write_csv<R, I>(path: &Path, header: &[&str], rows: R) -> Result<(), CliError>
where
    R: IntoIterator<Item = I>,
    I: IntoIterator<Item = String>,
{
    let err = |source| CliError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(err)?;
    for row in rows {
        w.write_record(row).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e.into_error(),
    })?;
    write_file(path, &bytes)
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or(LOG_ENV, "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match (&cli.config, cli.seed) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(seed)) => RunConfig::with_seed(seed),
        (None, None) => return Err(CliError::Config("pass --config or --seed; runs need an explicit seed".into())),
    };
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.set_output_dir(out.clone());
    }
    Ok(cfg)
}

/// Run with an already parsed command line.
pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    if cli.jobs == Some(0) {
        return Err(CliError::Config("--jobs must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| commands::dispatch(cli, &cfg))
}

/// Parse `args` (including the program name), run the command and return
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
