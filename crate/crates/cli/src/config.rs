use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use timelapse_core::baselines::UnetConfig;
use timelapse_core::datapipe::SyntheticSpec;
use timelapse_core::evaluation::EvalConfig;
use timelapse_core::training::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;
pub const DATA_ROOT_ENV: &str = "TIMELAPSE_DATA_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Dataset directory written by `gen-data`; the environment variable wins when this is unset.
    pub data_root: Option<PathBuf>,
    /// Parent of timestamped run directories.
    pub runs_root: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths { data_root: None, runs_root: PathBuf::from("runs") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    pub n_videos: usize,
    pub spec: SyntheticSpec,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        SyntheticSection { n_videos: 64, spec: SyntheticSpec::default() }
    }
}

/// Everything a command needs, read from one TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// When set, replaces every per-module seed.
    pub seed: Option<u64>,
    pub paths: Paths,
    pub synthetic: SyntheticSection,
    pub train: TrainConfig,
    pub unet: UnetConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            seed: None,
            paths: Paths::default(),
            synthetic: SyntheticSection::default(),
            train: TrainConfig::default(),
            unet: UnetConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str::<RunConfig>(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        if cfg.schema_version != SCHEMA_VERSION {
            bail!("config schema_version {} is not supported (expected {})", cfg.schema_version, SCHEMA_VERSION);
        }
        Ok(cfg)
    }

    /// Applies the master seed, if any, to every module.
    pub fn resolve(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed.or(self.seed) {
            self.seed = Some(s);
            self.synthetic.spec.seed = s;
            self.train.seed = s;
            self.unet.seed = s;
            self.eval.seed = s;
        }
        self.unet.reference_arch = self.train.arch.clone();
        self.unet.weights = self.train.weights.clone();
        self.unet.features = self.train.features.clone();
        self
    }

    pub fn data_root(&self, flag: Option<&Path>) -> anyhow::Result<PathBuf> {
        if let Some(p) = flag {
            return Ok(p.to_path_buf());
        }
        if let Some(p) = &self.paths.data_root {
            return Ok(p.clone());
        }
        match std::env::var_os(DATA_ROOT_ENV) {
            Some(v) => Ok(PathBuf::from(v)),
            None => bail!("no data root: pass --data, set paths.data_root, or set {}", DATA_ROOT_ENV),
        }
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}
