//! Command implementations behind the `moe-ecology` binary.
//!
//! Every command writes its human-readable output to a caller-supplied
//! writer and returns a [`CliError`] whose [`CliError::exit_code`] the binary
//! passes to the OS.

pub mod report;
pub mod run;
pub mod sweep;

use moe_ecology::checkpoint::{self, Checkpoint, CheckpointError};
use moe_ecology::config::{ConfigError, DataSource, ExperimentConfig};
use moe_ecology::data::{self, DataError, LabeledBatch, Standardizer};
use moe_ecology::ecology::EcologyError;
use moe_ecology::metrics::MetricsError;
use moe_ecology::trainer::TrainError;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Name of the environment variable that overrides the output root.
pub const OUT_ENV: &str = "MOE_ECOLOGY_OUT";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("{source}\nbatch dump written to {}", dump.display())]
    NonFinite { dump: PathBuf, source: TrainError },
    #[error("{}: {source}", path.display())]
    Checkpoint {
        path: PathBuf,
        source: CheckpointError,
    },
    #[error("{}: {source}", path.display())]
    Metrics { path: PathBuf, source: MetricsError },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Ecology(#[from] EcologyError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Ecology(EcologyError::WindowTooShort(_)) => 2,
            CliError::NonFinite { .. } => 3,
            CliError::Checkpoint { .. } => 4,
            CliError::Metrics {
                source: MetricsError::SchemaMismatch { .. },
                ..
            } => 5,
            _ => 1,
        }
    }
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Write through a temporary file and rename, so readers never see a partial file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

/// Build the effective config from an optional TOML file and command-line
/// overrides. The output root is taken from `out`, then `env_out`, then the file.
pub fn resolve_config(
    path: Option<&Path>,
    sets: &[String],
    seed: Option<u64>,
    out: Option<&Path>,
    env_out: Option<&str>,
) -> Result<ExperimentConfig, CliError> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| ConfigError::Parse(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut overrides = sets.to_vec();
    if let Some(s) = seed {
        overrides.push(format!("train.seed={s}"));
    }
    let mut cfg = ExperimentConfig::from_toml_with_overrides(&text, &overrides)?;
    apply_output_root(&mut cfg, out, env_out);
    Ok(cfg)
}

pub fn apply_output_root(cfg: &mut ExperimentConfig, out: Option<&Path>, env_out: Option<&str>) {
    if let Some(o) = out {
        cfg.experiment.output_dir = o.display().to_string();
    } else if let Some(e) = env_out.filter(|e| !e.is_empty()) {
        cfg.experiment.output_dir = e.to_string();
    }
}

pub fn run_dir(cfg: &ExperimentConfig) -> PathBuf {
    Path::new(&cfg.experiment.output_dir).join(cfg.run_id())
}

/// Train and test splits for `cfg`. CSV data is z-scored with training statistics;
/// without a test file every fifth row is held out.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(LabeledBatch, LabeledBatch), CliError> {
    match cfg.data.source {
        DataSource::Synthetic => {
            let ds = data::generate(&cfg.dataset_spec())?;
            Ok((ds.train, ds.test))
        }
        DataSource::Csv => {
            let all = data::load_csv(Path::new(&cfg.data.csv_path), cfg.data.n_classes)?;
            let (mut train, mut test) = if cfg.data.csv_test_path.is_empty() {
                let (tr, te): (Vec<usize>, Vec<usize>) = (0..all.len()).partition(|i| i % 5 != 4);
                (all.select(&tr), all.select(&te))
            } else {
                let test = data::load_csv(Path::new(&cfg.data.csv_test_path), cfg.data.n_classes)?;
                (all, test)
            };
            for (name, b) in [("training", &train), ("test", &test)] {
                if b.n_features != cfg.data.n_features {
                    return Err(ConfigError::Invalid(format!(
                        "{name} CSV has {} feature columns, data.n_features is {}",
                        b.n_features, cfg.data.n_features
                    ))
                    .into());
                }
            }
            let z = Standardizer::fit(&train);
            z.apply(&mut train.features);
            z.apply(&mut test.features);
            Ok((train, test))
        }
    }
}

/// Load a checkpoint file and parse the config embedded in it.
pub fn open_checkpoint(path: &Path) -> Result<(Checkpoint, ExperimentConfig), CliError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let ckpt = checkpoint::load_checkpoint(&bytes).map_err(|source| CliError::Checkpoint {
        path: path.to_path_buf(),
        source,
    })?;
    let cfg = ExperimentConfig::from_toml(&ckpt.config).map_err(|e| CliError::Checkpoint {
        path: path.to_path_buf(),
        source: CheckpointError::Corrupt(format!("embedded config: {e}")),
    })?;
    Ok((ckpt, cfg))
}

pub(crate) fn pct(v: f64) -> String {
    format!("{:.1}%", 100.0 * v)
}

pub(crate) fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.digits$}"))
}
