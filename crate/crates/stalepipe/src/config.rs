//! Run configuration: everything a `run` needs, serializable so a run can be
//! repeated from its `run.json` alone.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stalepipe_core::graph::EventStream;
use stalepipe_core::model::LrSchedule;
use stalepipe_core::pipeline::StageProfile;
use stalepipe_core::synth::{generate, SynthConfig};
use stalepipe_core::trainer::TrainConfig;

use crate::formats::{self, FormatError};

/// Environment variable that overrides the configured output directory.
pub const OUT_DIR_ENV: &str = "STALEPIPE_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "stalepipe-out";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    /// Built-in synthetic graph: `toy` or `wiki`.
    Fixture(String),
    /// A directory written by `ingest`, or an event CSV.
    Path(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProfileSource {
    /// A bundled breakdown such as `tgn/reddit`.
    Fixture { name: String },
    /// A profile JSON file.
    File { path: PathBuf },
    /// Measure the training stages on the run's dataset.
    Measured { iterations: usize, warmup: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlanSource {
    Synchronous,
    /// Constant bound `k >= 1`.
    Fixed { k: usize },
    /// Minimal bound below `k_max` for the configured profile.
    Solved { k_max: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    /// Missing fields take their defaults. The lag is derived from the plan
    /// and the seed from `seed`.
    #[serde(default, deserialize_with = "train_with_defaults")]
    pub train: TrainConfig,
    pub profile: ProfileSource,
    pub plan: PlanSource,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub seed: u64,
    /// Run the stages on the live executor and record a trace.
    #[serde(default)]
    pub live: bool,
    /// Iterations in flight when live; defaults to one more than the bound.
    #[serde(default)]
    pub workers: Option<usize>,
}

/// Overlays the given fields on `TrainConfig::default()`.
fn train_with_defaults<'de, D: serde::Deserializer<'de>>(d: D) -> Result<TrainConfig, D::Error> {
    let given = serde_json::Value::deserialize(d)?;
    let mut base = serde_json::to_value(TrainConfig::default()).map_err(serde::de::Error::custom)?;
    match (&mut base, given) {
        (serde_json::Value::Object(b), serde_json::Value::Object(g)) => {
            for (k, v) in g {
                if !b.contains_key(&k) {
                    return Err(serde::de::Error::unknown_field(&k, &[]));
                }
                b.insert(k, v);
            }
        }
        (_, other) => return Err(serde::de::Error::custom(format!("train must be an object, got {other}"))),
    }
    serde_json::from_value(base).map_err(serde::de::Error::custom)
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("fixed plan needs k >= 1")]
    ZeroK,
    #[error("solved plan needs k_max >= 2")]
    SmallKMax,
    #[error("profile warmup ({warmup}) must be smaller than its iterations ({iterations})")]
    Warmup { warmup: usize, iterations: usize },
    #[error("workers must be at least 1")]
    NoWorkers,
    #[error("unknown dataset fixture {0:?} (expected toy or wiki)")]
    UnknownDataset(String),
    #[error("unknown profile fixture {0:?}")]
    UnknownProfile(String),
    #[error(transparent)]
    Train(#[from] stalepipe_core::trainer::TrainError),
}

impl RunConfig {
    /// A small live run on the toy graph.
    pub fn toy() -> Self {
        RunConfig {
            dataset: DatasetSource::Fixture("toy".into()),
            train: toy_train_config(),
            profile: ProfileSource::Fixture { name: "tgn/reddit".into() },
            plan: PlanSource::Synchronous,
            output_dir: None,
            seed: 1,
            live: false,
            workers: None,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        match self.plan {
            PlanSource::Fixed { k: 0 } => return Err(ConfigError::ZeroK),
            PlanSource::Solved { k_max } if k_max < 2 => return Err(ConfigError::SmallKMax),
            _ => {}
        }
        match &self.profile {
            ProfileSource::Measured { iterations, warmup } if warmup >= iterations => {
                return Err(ConfigError::Warmup { warmup: *warmup, iterations: *iterations })
            }
            ProfileSource::Fixture { name } if stalepipe_core::fixtures::breakdown(name).is_none() => {
                return Err(ConfigError::UnknownProfile(name.clone()))
            }
            _ => {}
        }
        if let DatasetSource::Fixture(name) = &self.dataset {
            synth_fixture(name, self.seed)?;
        }
        if self.workers == Some(0) {
            return Err(ConfigError::NoWorkers);
        }
        self.train.validate()?;
        Ok(())
    }

    /// Training config with the run's seed and the given lag.
    pub fn train_config(&self, lag: usize) -> TrainConfig {
        TrainConfig { seed: self.seed, lag, ..self.train.clone() }
    }

    /// Flag, then environment, then config file, then the default.
    pub fn resolve_output_dir(&self, flag: Option<&Path>) -> PathBuf {
        resolve_output_dir(flag, self.output_dir.as_deref())
    }
}

pub fn resolve_output_dir(flag: Option<&Path>, configured: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(p);
    }
    configured.map_or_else(|| PathBuf::from(DEFAULT_OUT_DIR), Path::to_path_buf)
}

/// Training settings used for the toy graph. The learning rate is far above
/// the general default because the toy model is tiny and sees few steps.
pub fn toy_train_config() -> TrainConfig {
    TrainConfig { schedule: LrSchedule::Constant { lr: 0.2 }, epochs: 3, batch_size: 600, mem_dim: 16, seed: 1, ..Default::default() }
}

pub fn synth_fixture(name: &str, seed: u64) -> Result<SynthConfig, ConfigError> {
    match name.to_ascii_lowercase().as_str() {
        "toy" => Ok(SynthConfig::toy(seed)),
        "wiki" => Ok(SynthConfig::wiki_shaped(seed)),
        _ => Err(ConfigError::UnknownDataset(name.into())),
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("{0}")]
    Graph(#[from] stalepipe_core::GraphError),
}

/// Loads the events of a dataset source. Synthetic fixtures are generated
/// from `seed`.
pub fn load_dataset(source: &DatasetSource, seed: u64) -> Result<EventStream, LoadError> {
    match source {
        DatasetSource::Fixture(name) => Ok(generate(&synth_fixture(name, seed)?)?),
        DatasetSource::Path(p) if p.is_dir() => Ok(formats::read_bundle(p)?.1),
        DatasetSource::Path(p) => Ok(formats::read_events_csv(p, stalepipe_core::graph::TimeOrder::Strict, None)?),
    }
}

pub fn fixture_profile(name: &str) -> Result<StageProfile, ConfigError> {
    stalepipe_core::fixtures::breakdown(name).map(|b| b.profile()).ok_or_else(|| ConfigError::UnknownProfile(name.into()))
}
