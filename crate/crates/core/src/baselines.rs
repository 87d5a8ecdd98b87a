//! Reference methods: linear interpolation from the blank canvas, and a
//! deterministic encoder-decoder emitting a whole video at once.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::Container;
use crate::domain::{Frame, FrameShape, Medium, PaintingVideo};
use crate::error::{Error, Result};
use crate::losses::{l1_term, perceptual_term, LossWeights};
use crate::networks::layers::{Conv, LEAKY_SLOPE};
use crate::networks::{param_count, Architecture, Bound, FeatureConfig, FeatureExtractor, ModelParams, ParamMap};
use crate::rng;
use crate::tensor::Tensor;
use crate::training::{steps::stack_frames, Adam, AdamConfig, MetricsLog, TrainData};

pub const UNET_FORMAT: &str = "timelapse-unet/v1";
pub const UNET_FRAMES: usize = 40;

/// Frame `t` is `blank + (t / steps)·(x_final − blank)`.
pub fn interp_video(x_final: &Frame, steps: usize) -> Result<PaintingVideo> {
    if steps < 1 {
        return Err(Error::invalid("interpolation needs at least one step"));
    }
    let frames = (0..=steps)
        .map(|t| {
            let a = t as f64 / steps as f64;
            let px = x_final.pixels().iter().map(|&c| (1.0 + a * (c as f64 - 1.0)) as f32).collect();
            Frame::new(x_final.height(), x_final.width(), px)
        })
        .collect::<Result<Vec<_>>>()?;
    PaintingVideo::new("interp", Medium::Synthetic, None, frames)
}

/// Encoder-decoder with skips mapping a painting to `frames` RGB frames stacked on channels.
#[derive(Clone, Debug)]
struct Unet {
    enc: [Conv; 4],
    dec: [Conv; 3],
    head: Conv,
}

impl Unet {
    fn new(widths: [usize; 3], frames: usize) -> Self {
        let [c1, c2, c3] = widths;
        Unet {
            enc: [
                Conv::k3("unet.enc1", 3, c1, 1),
                Conv::k3("unet.enc2", c1, c2, 2),
                Conv::k3("unet.enc3", c2, c3, 2),
                Conv::k3("unet.enc4", c3, c3, 2),
            ],
            dec: [Conv::k3("unet.dec3", 2 * c3, c3, 1), Conv::k3("unet.dec2", c3 + c2, c2, 1), Conv::k3("unet.dec1", c2 + c1, c1, 1)],
            head: Conv::k3("unet.head", c1, 3 * frames, 1),
        }
    }

    fn init(&self, r: &mut impl Rng) -> ParamMap<f32> {
        let mut p = ParamMap::new();
        for c in self.enc.iter().chain(&self.dec) {
            c.init(&mut p, 1.0, r);
        }
        self.head.init(&mut p, 0.1, r);
        p
    }

    /// `[N, 3, H, W]` paintings → `[N, 3·frames, H, W]` in `(0, 1)`.
    fn forward<'g>(&self, p: &Bound<'g, f32>, x_final: Var<'g, f32>) -> Result<Var<'g, f32>> {
        let mut h = x_final.scale(2.0).offset(-1.0);
        let mut skips = Vec::with_capacity(4);
        for c in &self.enc {
            h = c.forward(p, h)?.leaky_relu(LEAKY_SLOPE);
            skips.push(h);
        }
        for (c, skip) in self.dec.iter().zip([skips[2], skips[1], skips[0]]) {
            let s = skip.shape();
            let up = h.upsample(s[2], s[3])?;
            h = c.forward(p, Var::concat_channels(&[up, skip])?)?.leaky_relu(LEAKY_SLOPE);
        }
        Ok(self.head.forward(p, h)?.tanh().offset(1.0).scale(0.5))
    }
}

fn unet_param_count(widths: [usize; 3], frames: usize) -> usize {
    let convs = Unet::new(widths, frames);
    convs.enc.iter().chain(&convs.dec).chain([&convs.head]).map(|c| c.cout * c.cin * c.geo.kernel * c.geo.kernel + c.cout).sum()
}

/// Widths whose parameter count is closest to `target`, or an error if none is within ±20%.
pub fn unet_widths_for(target: usize, frames: usize) -> Result<[usize; 3]> {
    let families: [fn(usize) -> [usize; 3]; 3] = [|b| [b, 2 * b, 2 * b], |b| [b, 2 * b, 4 * b], |b| [b, b, 2 * b]];
    let mut best: Option<([usize; 3], usize)> = None;
    for f in families {
        for b in 1..=256 {
            let w = f(b);
            let n = unet_param_count(w, frames);
            let gap = n.abs_diff(target);
            if best.is_none_or(|(_, g)| gap < g) {
                best = Some((w, gap));
            }
            if n > 2 * target {
                break;
            }
        }
    }
    let (w, gap) = best.expect("searched at least one width");
    if gap as f64 > 0.2 * target as f64 {
        return Err(Error::config(format!("no encoder-decoder width within 20% of {} parameters", target)));
    }
    Ok(w)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnetConfig {
    /// Main model whose generator+posterior size the baseline matches.
    pub reference_arch: Architecture,
    pub weights: LossWeights,
    pub features: FeatureConfig,
    pub batch_size: usize,
    pub steps: u64,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for UnetConfig {
    fn default() -> Self {
        UnetConfig {
            reference_arch: Architecture::default(),
            weights: LossWeights::default(),
            features: FeatureConfig::default(),
            batch_size: 4,
            steps: 2000,
            learning_rate: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnetBaselineParams {
    pub widths: [usize; 3],
    pub frames: usize,
    pub trained_shape: Option<FrameShape>,
    pub params: ParamMap<f32>,
}

impl UnetBaselineParams {
    /// Fresh parameters sized to match the generator and posterior of `reference`.
    pub fn init(reference: &Architecture, seed: u64) -> Result<Self> {
        let main = ModelParams::init(reference, 0)?;
        let target = param_count(&main.theta) + param_count(&main.phi);
        let widths = unet_widths_for(target, UNET_FRAMES)?;
        let params = Unet::new(widths, UNET_FRAMES).init(&mut rng::stream(rng::derive_seed(seed, 5)));
        Ok(UnetBaselineParams { widths, frames: UNET_FRAMES, trained_shape: None, params })
    }

    pub fn param_count(&self) -> usize {
        param_count(&self.params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({ "widths": self.widths, "frames": self.frames, "trained_shape": self.trained_shape });
        Container { format: UNET_FORMAT.into(), meta, tensors: self.params.clone() }.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path, UNET_FORMAT)?;
        let bad = |e: serde_json::Error| Error::format(path, e.to_string());
        let widths: [usize; 3] = serde_json::from_value(c.meta["widths"].clone()).map_err(bad)?;
        let frames: usize = serde_json::from_value(c.meta["frames"].clone()).map_err(bad)?;
        let trained_shape = serde_json::from_value(c.meta["trained_shape"].clone()).map_err(bad)?;
        let fresh = Unet::new(widths, frames).init(&mut rng::stream(0));
        if fresh.len() != c.tensors.len() || fresh.iter().any(|(k, t)| c.tensors.get(k).map(|x| x.shape()) != Some(t.shape())) {
            return Err(Error::format(path, "arrays do not match the stored widths"));
        }
        Ok(UnetBaselineParams { widths, frames, trained_shape, params: c.tensors })
    }
}

/// Summed per-frame image similarity between `[N, 3F, H, W]` predictions and targets.
fn video_similarity<'g>(v: &FeatureExtractor, w: &LossWeights, pred: Var<'g, f32>, target: Var<'g, f32>, frames: usize) -> Result<Var<'g, f32>> {
    let s = pred.shape();
    let per_frame = [s[0] * frames, 3, s[2], s[3]];
    let (p, t) = (pred.reshape(&per_frame)?, target.reshape(&per_frame)?);
    let l1 = l1_term(t, p)?.scale(w.l1_coefficient() * frames as f64);
    let perc = perceptual_term(v, p, t)?.scale(w.perceptual_coefficient() * frames as f64);
    Ok(l1.add(perc))
}

/// Fits the baseline on the τ-length reference sequences of `data`, whose length must equal the output length.
pub fn unet_train(data: &TrainData, cfg: &UnetConfig, log: &mut MetricsLog) -> Result<UnetBaselineParams> {
    cfg.weights.validate()?;
    AdamConfig::new(cfg.learning_rate, 0.9, 0.999).validate()?;
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    let mut model = UnetBaselineParams::init(&cfg.reference_arch, cfg.seed)?;
    let frames = model.frames;
    if let Some((_, idx)) = data.references.iter().find(|(_, idx)| idx.len() != frames) {
        return Err(Error::invalid(format!("reference sequences must have {} frames, found {}", frames, idx.len())));
    }
    let (h, w) = data.frame_shape();
    model.trained_shape = Some(FrameShape { height: h, width: w });
    let features = FeatureExtractor::from_config(&cfg.features)?;
    let net = Unet::new(model.widths, frames);
    let mut opt = Adam::new(AdamConfig::new(cfg.learning_rate, 0.9, 0.999), &model.params);
    let mut r = rng::stream(rng::derive_seed(cfg.seed, 6));
    for step in 0..cfg.steps {
        let mut finals = Vec::with_capacity(cfg.batch_size);
        let mut targets = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let (vi, idx) = &data.references[r.random_range(0..data.references.len())];
            let v = &data.videos[*vi];
            finals.push(v.final_frame().to_tensor());
            let parts: Vec<Tensor<f32>> = idx.iter().map(|&i| v.frame(i).to_tensor()).collect();
            targets.push(Tensor::concat_channels(&parts.iter().collect::<Vec<_>>())?);
        }
        let g = Graph::<f32>::new();
        let p = Bound::new(&g, &model.params, true);
        let pred = net.forward(&p, g.constant(Tensor::stack_batch(&finals)?))?;
        let loss = video_similarity(&features, &cfg.weights, pred, g.constant(Tensor::stack_batch(&targets)?), frames)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Diverged { stage: "unet".into(), step, reason: format!("loss is {}", value), snapshot: None });
        }
        log.record(step, "unet.total", value)?;
        let grads: Vec<Tensor<f32>> = g.grad(loss, &p.vars(), false)?.iter().map(|v| (*v.value()).clone()).collect();
        opt.update(&mut model.params, &grads)?;
    }
    log.flush()?;
    Ok(model)
}

/// The predicted frames with the blank canvas prepended: `frames + 1` frames.
pub fn unet_predict(x_final: &Frame, model: &UnetBaselineParams) -> Result<PaintingVideo> {
    if let Some(s) = model.trained_shape {
        if s != x_final.shape() {
            return Err(Error::shape(format!("painting at trained resolution {}", s), x_final.shape().to_string()));
        }
    }
    let g = Graph::<f32>::inference();
    let p = Bound::new(&g, &model.params, false);
    let out = Unet::new(model.widths, model.frames).forward(&p, g.constant(stack_frames(&[x_final])?))?;
    let out = out.value();
    let mut frames = vec![Frame::blank(x_final.height(), x_final.width())];
    for t in 0..model.frames {
        frames.push(Frame::from_tensor(&out.slice_channels(3 * t, 3)?, 0)?);
    }
    PaintingVideo::new("unet", Medium::Synthetic, None, frames)
}
