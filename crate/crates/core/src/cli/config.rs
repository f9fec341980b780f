//! TOML run configuration. Relative paths resolve against the directory
//! holding the config file.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::CliError;
use crate::analysis::{ConsistencyOptions, DiversityOptions};
use crate::boostreg::BoostConfig;
use crate::calib::{Pooling, SearchSpace};
use crate::idm::IdmOptions;
use crate::synth::PopulationSpec;
use crate::trajdata::{ColumnMapping, CsvOptions, UnitSystem, DEFAULT_MIN_LENGTH};

pub const DEFAULT_TRIALS: usize = 500;
pub const DEFAULT_REFIT_REPEATS: usize = 5;
pub const DEFAULT_ROLLOUT_EPISODES: usize = 5;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_trials")]
    pub n_trials: usize,
    /// Include every trial in fit result files.
    #[serde(default)]
    pub trial_log: bool,
    #[serde(default)]
    pub dataset: DatasetConfig,
    /// Population spec; `seed` defaults to the run seed.
    #[serde(default)]
    pub synth: Option<toml::Table>,
    #[serde(default)]
    pub space: SearchSpace,
    #[serde(default)]
    pub idm: IdmOptions,
    #[serde(default)]
    pub pooling: Pooling,
    #[serde(default)]
    pub diversity: DiversityOptions,
    #[serde(default)]
    pub params: ParamsConfig,
    #[serde(default)]
    pub consistency: ConsistencyOptions,
    #[serde(default)]
    pub boost: BoostConfig,
    #[serde(default)]
    pub rollout: RolloutConfig,
    #[serde(skip)]
    base_dir: PathBuf,
    #[serde(skip)]
    seed_overridden: bool,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_trials() -> usize {
    DEFAULT_TRIALS
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    /// Trajectory CSV read by `ingest`.
    pub csv: Option<PathBuf>,
    /// Episode file read by the other commands; defaults to
    /// `<output_dir>/episodes.json`.
    pub episodes: Option<PathBuf>,
    pub unit_system: UnitSystem,
    pub delimiter: char,
    pub min_length: usize,
    pub columns: ColumnMapping,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            name: "dataset".into(),
            csv: None,
            episodes: None,
            unit_system: UnitSystem::Feet,
            delimiter: ',',
            min_length: DEFAULT_MIN_LENGTH,
            columns: ColumnMapping::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParamsConfig {
    pub refit_repeats: usize,
}

impl Default for ParamsConfig {
    fn default() -> Self {
        ParamsConfig {
            refit_repeats: DEFAULT_REFIT_REPEATS,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutConfig {
    /// Episodes sampled for rollout output.
    pub episodes: usize,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            episodes: DEFAULT_ROLLOUT_EPISODES,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Configuration with every default, used when no file is given.
    pub fn with_seed(seed: u64) -> Self {
        Self::parse(&format!("seed = {seed}")).expect("default config is valid")
    }

    fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.n_trials == 0 {
            return bad("n_trials must be at least 1".into());
        }
        if self.params.refit_repeats < 2 {
            return bad("params.refit_repeats must be at least 2".into());
        }
        if !self.dataset.delimiter.is_ascii() {
            return bad("dataset.delimiter must be an ASCII character".into());
        }
        self.space.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.boost.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.consistency.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.seed_overridden = true;
    }

    pub fn set_output_dir(&mut self, dir: PathBuf) {
        // Flag paths are relative to the working directory.
        self.output_dir = std::env::current_dir().map(|c| c.join(&dir)).unwrap_or(dir);
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    pub fn episodes_path(&self) -> PathBuf {
        match &self.dataset.episodes {
            Some(p) => self.resolve(p),
            None => self.out_dir().join("episodes.json"),
        }
    }

    pub fn csv_path(&self) -> Result<PathBuf, CliError> {
        let p = self
            .dataset
            .csv
            .as_ref()
            .ok_or_else(|| CliError::Config("dataset.csv is required for ingest".into()))?;
        let p = self.resolve(p);
        if !p.is_file() {
            return Err(CliError::Config(format!("dataset csv {} does not exist", p.display())));
        }
        Ok(p)
    }

    pub fn csv_options(&self) -> CsvOptions {
        CsvOptions {
            delimiter: self.dataset.delimiter as u8,
            unit_system: self.dataset.unit_system,
        }
    }

    /// Population spec from the `[synth]` table. The run seed fills a
    /// missing `seed` and replaces it when given on the command line.
    pub fn population(&self) -> Result<PopulationSpec, CliError> {
        let mut table = self
            .synth
            .clone()
            .ok_or_else(|| CliError::Config("a [synth] table is required for synth".into()))?;
        if self.seed_overridden || !table.contains_key("seed") {
            let seed = i64::try_from(self.seed)
                .map_err(|_| CliError::Config("seed must fit in a signed 64-bit integer".into()))?;
            table.insert("seed".into(), toml::Value::Integer(seed));
        }
        table
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(format!("[synth]: {e}")))
    }
}
