//! Fixed convolutional feature stack `V(·)` for the perceptual distance.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::layers::{cast_params, Bound, Conv, ParamMap};
use crate::autodiff::{Graph, Var};
use crate::checkpoint::Container;
use crate::domain::Frame;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Real, Tensor};

/// Smallest frame side the three-depth stack accepts.
pub const MIN_FEATURE_INPUT: usize = 4;

const NORM_EPS_SQ: f64 = 1e-20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMode {
    Pretrained,
    SeededRandom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub mode: FeatureMode,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig { mode: FeatureMode::SeededRandom, seed: 0x5EED_FEA7, weights: None }
    }
}

/// Three conv+ReLU stages; features at every stage are unit-normalized per location.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    mode: FeatureMode,
    layers: [Conv; 3],
    params: ParamMap<f64>,
}

pub const FEATURE_FORMAT: &str = "timelapse-features/v1";

impl FeatureExtractor {
    fn layers() -> [Conv; 3] {
        [Conv::k3("feat.conv1", 3, 16, 1), Conv::k3("feat.conv2", 16, 32, 2), Conv::k3("feat.conv3", 32, 64, 2)]
    }

    pub fn seeded(seed: u64) -> Self {
        let layers = Self::layers();
        let mut rng = rng::stream(seed);
        let mut params = ParamMap::new();
        for l in &layers {
            l.init(&mut params, 1.0, &mut rng);
        }
        FeatureExtractor { mode: FeatureMode::SeededRandom, layers, params }
    }

    /// Loads externally supplied weights for the same three-stage layout.
    pub fn pretrained(path: &Path) -> Result<Self> {
        let container = Container::read(path, FEATURE_FORMAT)?;
        let layers = Self::layers();
        let mut expected = ParamMap::<f64>::new();
        for l in &layers {
            l.init(&mut expected, 1.0, &mut rng::stream(0));
        }
        for (name, t) in &expected {
            match container.tensors.get(name) {
                Some(found) if found.shape() == t.shape() => {}
                Some(found) => return Err(Error::format(path, format!("{} has shape {:?}, expected {:?}", name, found.shape(), t.shape()))),
                None => return Err(Error::format(path, format!("missing {}", name))),
            }
        }
        Ok(FeatureExtractor { mode: FeatureMode::Pretrained, layers, params: cast_params(&container.tensors) })
    }

    pub fn from_config(cfg: &FeatureConfig) -> Result<Self> {
        match cfg.mode {
            FeatureMode::SeededRandom => Ok(Self::seeded(cfg.seed)),
            FeatureMode::Pretrained => {
                let path = cfg.weights.as_ref().ok_or_else(|| Error::config("pretrained features need a weights path"))?;
                Self::pretrained(path)
            }
        }
    }

    pub fn mode(&self) -> FeatureMode {
        self.mode
    }

    /// Weights keyed `feat.conv{1,2,3}.{w,b}`; stage 1 has stride 1, stages 2 and 3 stride 2.
    pub fn params(&self) -> &ParamMap<f64> {
        &self.params
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        Container { format: FEATURE_FORMAT.into(), meta: serde_json::json!({}), tensors: cast_params(&self.params) }.write(path)
    }

    /// Normalized feature maps at each depth for `[N, 3, H, W]` inputs in `[0, 1]`.
    pub fn forward<'g, T: Real>(&self, graph: &'g Graph<T>, x: Var<'g, T>) -> Result<Vec<Var<'g, T>>> {
        let s = x.shape();
        if s.len() != 4 || s[2] < MIN_FEATURE_INPUT || s[3] < MIN_FEATURE_INPUT {
            return Err(Error::shape(
                format!("frames at least {0}x{0}", MIN_FEATURE_INPUT),
                format!("{:?}", s),
            ));
        }
        // weights are constants: V never trains
        let bound = Bound::new(graph, &cast_params::<f64, T>(&self.params), false);
        let mut h = x.scale(2.0).offset(-1.0);
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            h = l.forward(&bound, h)?.relu();
            out.push(unit_normalize_channels(h)?);
        }
        Ok(out)
    }

    /// Feature maps of a single frame, each `[1, C, h, w]`.
    pub fn extract(&self, frame: &Frame) -> Result<Vec<Tensor<f32>>> {
        let graph = Graph::<f64>::inference();
        let feats = self.forward(&graph, graph.constant(frame.to_tensor()))?;
        Ok(feats.iter().map(|f| f.value().cast()).collect())
    }
}

/// Divides each location's channel vector by its L2 norm (zero vectors stay zero).
pub fn unit_normalize_channels<'g, T: Real>(x: Var<'g, T>) -> Result<Var<'g, T>> {
    let s = x.shape();
    let norm = x.square().sum_to(&[s[0], 1, s[2], s[3]])?.offset(NORM_EPS_SQ).sqrt().broadcast_to(&s)?;
    Ok(x.div(norm))
}
