//! Generator, posterior encoder, critic and the fixed feature extractor.

pub mod features;
pub mod layers;
mod models;

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use features::{unit_normalize_channels, FeatureConfig, FeatureExtractor, FeatureMode, MIN_FEATURE_INPUT};
pub use layers::{param_count, Bound, ParamMap};
pub use models::{Critic, Generator, PosteriorEncoder, LOGVAR_MAX, LOGVAR_MIN};

use crate::autodiff::Graph;
use crate::checkpoint::Container;
use crate::domain::{ChangeMap, Frame, FrameShape};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

pub const DEFAULT_LATENT_DIM: usize = 32;
pub const MODEL_FORMAT: &str = "timelapse-model/v1";

/// Network sizes. The generator and posterior share `widths`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub latent_dim: usize,
    pub widths: [usize; 3],
    pub critic_widths: [usize; 3],
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture { latent_dim: DEFAULT_LATENT_DIM, widths: [32, 64, 128], critic_widths: [32, 64, 128] }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 1 {
            return Err(Error::config("latent_dim must be at least 1"));
        }
        if self.widths.iter().chain(&self.critic_widths).any(|&w| w == 0) {
            return Err(Error::config("channel widths must be positive"));
        }
        Ok(())
    }

    pub fn generator(&self) -> Generator {
        Generator::new(self)
    }

    pub fn posterior(&self) -> PosteriorEncoder {
        PosteriorEncoder::new(self)
    }

    pub fn critic(&self) -> Critic {
        Critic::new(self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentCode(Vec<f32>);

impl LatentCode {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("latent code must have at least one dimension"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("latent code contains a non-finite value"));
        }
        Ok(LatentCode(values))
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![1, self.0.len()], self.0.clone()).expect("length matches")
    }
}

/// Diagonal Gaussian `N(mu, exp(logvar))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    mu: Vec<f32>,
    logvar: Vec<f32>,
}

impl GaussianParams {
    pub fn new(mu: Vec<f32>, logvar: Vec<f32>) -> Result<Self> {
        if mu.len() != logvar.len() || mu.is_empty() {
            return Err(Error::shape(format!("mu and logvar of equal nonzero length ({})", mu.len()), logvar.len().to_string()));
        }
        if mu.iter().chain(&logvar).any(|v| !v.is_finite()) {
            return Err(Error::invalid("gaussian parameters contain a non-finite value"));
        }
        if logvar.iter().any(|&v| (v as f64) < LOGVAR_MIN || (v as f64) > LOGVAR_MAX) {
            return Err(Error::invalid(format!("logvar outside [{}, {}]", LOGVAR_MIN, LOGVAR_MAX)));
        }
        Ok(GaussianParams { mu, logvar })
    }

    pub fn standard(dim: usize) -> Result<Self> {
        Self::new(vec![0.0; dim], vec![0.0; dim])
    }

    pub fn mu(&self) -> &[f32] {
        &self.mu
    }

    pub fn logvar(&self) -> &[f32] {
        &self.logvar
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// The three trainable parameter collections.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub arch: Architecture,
    pub theta: ParamMap<f32>,
    pub phi: ParamMap<f32>,
    pub psi: ParamMap<f32>,
    pub seed: u64,
}

impl ModelParams {
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        Ok(ModelParams {
            arch: arch.clone(),
            theta: arch.generator().init(&mut rng::stream(rng::derive_seed(seed, 1))),
            phi: arch.posterior().init(&mut rng::stream(rng::derive_seed(seed, 2))),
            psi: arch.critic().init(&mut rng::stream(rng::derive_seed(seed, 3))),
            seed,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    pub fn all_finite(&self) -> bool {
        [&self.theta, &self.phi, &self.psi].iter().all(|m| m.values().all(|t| t.all_finite()))
    }

    pub(crate) fn to_container(&self, format: &str, train_config: serde_json::Value, extra: serde_json::Value) -> Container {
        let mut tensors = ParamMap::new();
        for (prefix, map) in [("theta", &self.theta), ("phi", &self.phi), ("psi", &self.psi)] {
            for (k, v) in map {
                tensors.insert(format!("{}/{}", prefix, k), v.clone());
            }
        }
        let meta = serde_json::json!({
            "arch": self.arch,
            "latent_dim": self.arch.latent_dim,
            "seed": self.seed,
            "train_config": train_config,
            "extra": extra,
        });
        Container { format: format.to_string(), meta, tensors }
    }

    /// Splits a container back into params plus the stored train config and extra metadata.
    pub(crate) fn from_container(c: &Container, path: &Path) -> Result<(Self, serde_json::Value, serde_json::Value)> {
        let arch: Architecture = serde_json::from_value(c.meta["arch"].clone()).map_err(|e| Error::format(path, e.to_string()))?;
        let seed = c.meta["seed"].as_u64().ok_or_else(|| Error::format(path, "missing seed"))?;
        let mut maps = [ParamMap::new(), ParamMap::new(), ParamMap::new()];
        for (k, v) in &c.tensors {
            let (prefix, name) = match k.split_once('/') {
                Some(pair) => pair,
                None => continue,
            };
            let slot = match prefix {
                "theta" => 0,
                "phi" => 1,
                "psi" => 2,
                _ => continue,
            };
            maps[slot].insert(name.to_string(), v.clone());
        }
        let [theta, phi, psi] = maps;
        let params = ModelParams { arch, theta, phi, psi, seed };
        let fresh = ModelParams::init(&params.arch, 0)?;
        for (have, want, label) in [(&params.theta, &fresh.theta, "theta"), (&params.phi, &fresh.phi, "phi"), (&params.psi, &fresh.psi, "psi")] {
            if have.len() != want.len() || want.iter().any(|(k, t)| have.get(k).map(|h| h.shape()) != Some(t.shape())) {
                return Err(Error::format(path, format!("{} arrays do not match the stored architecture", label)));
            }
        }
        Ok((params, c.meta["train_config"].clone(), c.meta["extra"].clone()))
    }

    /// Writes a checkpoint holding the parameters and the given training config.
    pub fn save(&self, path: &Path, train_config: &impl Serialize) -> Result<()> {
        self.to_container(MODEL_FORMAT, serde_json::to_value(train_config)?, serde_json::Value::Null).write(path)
    }

    /// Like [`ModelParams::save`], plus caller metadata returned by [`ModelParams::load_with_extra`].
    pub fn save_with_extra(&self, path: &Path, train_config: &impl Serialize, extra: serde_json::Value) -> Result<()> {
        self.to_container(MODEL_FORMAT, serde_json::to_value(train_config)?, extra).write(path)
    }

    /// Loads parameters and the stored training config (as raw JSON).
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (p, cfg, _) = Self::load_with_extra(path)?;
        Ok((p, cfg))
    }

    pub fn load_with_extra(path: &Path) -> Result<(Self, serde_json::Value, serde_json::Value)> {
        let c = Container::read(path, MODEL_FORMAT)?;
        Self::from_container(&c, path)
    }
}

fn check_latent(z: &LatentCode, params: &ModelParams) -> Result<()> {
    if z.dim() != params.latent_dim() {
        return Err(Error::shape(format!("latent of length {}", params.latent_dim()), z.dim().to_string()));
    }
    Ok(())
}

fn check_same(a: FrameShape, b: FrameShape) -> Result<()> {
    if a != b {
        return Err(Error::shape(a.to_string(), b.to_string()));
    }
    Ok(())
}

/// One generator application: `g(z, x_prev, x_final)`.
pub fn generate_delta(z: &LatentCode, x_prev: &Frame, x_final: &Frame, params: &ModelParams) -> Result<ChangeMap> {
    check_latent(z, params)?;
    check_same(x_prev.shape(), x_final.shape())?;
    let g = Graph::<f32>::inference();
    let p = Bound::new(&g, &params.theta, false);
    let out = params.arch.generator().forward(
        &p,
        g.constant(z.to_tensor()),
        g.constant(x_prev.to_tensor()),
        g.constant(x_final.to_tensor()),
    )?;
    ChangeMap::from_tensor(&out.value(), 0)
}

pub fn encode_posterior(delta: &ChangeMap, x_prev: &Frame, x_final: &Frame, params: &ModelParams) -> Result<GaussianParams> {
    check_same(x_prev.shape(), x_final.shape())?;
    check_same(x_prev.shape(), delta.shape())?;
    let g = Graph::<f32>::inference();
    let p = Bound::new(&g, &params.phi, false);
    let (mu, logvar) = params.arch.posterior().forward(
        &p,
        g.constant(delta.to_tensor()),
        g.constant(x_prev.to_tensor()),
        g.constant(x_final.to_tensor()),
    )?;
    GaussianParams::new(mu.value().data().to_vec(), logvar.value().data().to_vec())
}

/// `z = mu + exp(logvar / 2) * n` with `n ~ N(0, I)` drawn from `rng`.
pub fn reparameterize(g: &GaussianParams, rng: &mut Stream) -> LatentCode {
    let z = g
        .mu
        .iter()
        .zip(&g.logvar)
        .map(|(&m, &lv)| {
            let n: f64 = rng.sample(StandardNormal);
            (m as f64 + (0.5 * lv as f64).exp() * n) as f32
        })
        .collect();
    LatentCode(z)
}

pub fn sample_prior(latent_dim: usize, rng: &mut Stream) -> Result<LatentCode> {
    if latent_dim < 1 {
        return Err(Error::invalid("latent_dim must be at least 1"));
    }
    Ok(LatentCode((0..latent_dim).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect()))
}

pub fn critic_score(x_t: &Frame, x_prev: &Frame, x_final: &Frame, params: &ModelParams) -> Result<f64> {
    check_same(x_t.shape(), x_prev.shape())?;
    check_same(x_t.shape(), x_final.shape())?;
    let g = Graph::<f32>::inference();
    let p = Bound::new(&g, &params.psi, false);
    let s = params.arch.critic().forward(
        &p,
        g.constant(x_t.to_tensor()),
        g.constant(x_prev.to_tensor()),
        g.constant(x_final.to_tensor()),
    )?;
    Ok(s.item())
}

pub fn extract_features(x: &Frame, v: &FeatureExtractor) -> Result<Vec<Tensor<f32>>> {
    v.extract(x)
}
