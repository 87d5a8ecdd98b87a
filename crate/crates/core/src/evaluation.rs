//! Comparing synthesized videos against real ones: closest-sample L1 and
//! order-free change-shape overlap.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::baselines::{interp_video, unet_predict, UnetBaselineParams};
use crate::datapipe::{crop_offsets, extract_sequences, ExtractionConfig};
use crate::domain::{frame_delta, ChangeMap, Frame, FrameShape, PaintingVideo, CHANNELS};
use crate::error::{Error, Result};
use crate::inference::{synthesize_many, SynthesisRequest};
use crate::networks::ModelParams;
use crate::rng;

pub const DEFAULT_CHANGE_THRESHOLD: f64 = 0.05;

/// Pixels where some channel changed by more than the threshold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChangeShape {
    height: usize,
    width: usize,
    mask: Vec<bool>,
}

impl ChangeShape {
    pub fn from_mask(height: usize, width: usize, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != height * width {
            return Err(Error::shape(format!("{} mask values", height * width), mask.len().to_string()));
        }
        Ok(ChangeShape { height, width, mask })
    }

    pub fn shape(&self) -> FrameShape {
        FrameShape { height: self.height, width: self.width }
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// A change map with full-intensity change on every marked pixel.
    pub fn to_change_map(&self) -> ChangeMap {
        let values = self.mask.iter().flat_map(|&m| [if m { 1.0 } else { 0.0 }; CHANNELS]).collect();
        ChangeMap::new(self.height, self.width, values).expect("mask-sized values in range")
    }
}

pub fn change_shape(delta: &ChangeMap, threshold: f64) -> ChangeShape {
    let mask = delta.values().chunks_exact(CHANNELS).map(|px| px.iter().any(|&v| v.abs() as f64 > threshold)).collect();
    ChangeShape { height: delta.height(), width: delta.width(), mask }
}

/// Intersection over union; 1 when both are empty.
pub fn iou(a: &ChangeShape, b: &ChangeShape) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(a.shape().to_string(), b.shape().to_string()));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.mask.iter().zip(&b.mask) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

fn check_aligned(a: &PaintingVideo, b: &PaintingVideo) -> Result<()> {
    if a.len() != b.len() || a.shape() != b.shape() {
        return Err(Error::shape(format!("{} frames of {}", a.len(), a.shape()), format!("{} frames of {}", b.len(), b.shape())));
    }
    Ok(())
}

/// Mean absolute difference over every frame and pixel.
pub fn video_l1(a: &PaintingVideo, b: &PaintingVideo) -> Result<f64> {
    check_aligned(a, b)?;
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for (fa, fb) in a.frames().iter().zip(b.frames()) {
        sum += fa.pixels().iter().zip(fb.pixels()).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum::<f64>();
        n += fa.pixels().len();
    }
    Ok(sum / n as f64)
}

/// Smallest [`video_l1`] over samples `0..k` drawn from `sampler`.
pub fn best_of_k_l1(real: &PaintingVideo, mut sampler: impl FnMut(usize) -> Result<PaintingVideo>, k: usize) -> Result<f64> {
    if k < 1 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let mut best = f64::INFINITY;
    for i in 0..k {
        best = best.min(video_l1(real, &sampler(i)?)?);
    }
    Ok(best)
}

fn change_shapes(v: &PaintingVideo, threshold: f64) -> Result<Vec<ChangeShape>> {
    v.frames().windows(2).map(|w| Ok(change_shape(&frame_delta(&w[1], &w[0])?, threshold))).collect()
}

/// For each real step, the best IOU against any synthesized step; averaged over real steps.
pub fn change_iou_score(real: &PaintingVideo, synth: &PaintingVideo, threshold: f64) -> Result<f64> {
    check_aligned(real, synth)?;
    if real.len() < 2 {
        return Err(Error::invalid("videos need at least two frames to have changes"));
    }
    let (rs, ss) = (change_shapes(real, threshold)?, change_shapes(synth, threshold)?);
    let mut total = 0.0;
    for r in &rs {
        let mut best = 0.0f64;
        for s in &ss {
            best = best.max(iou(r, s)?);
        }
        total += best;
    }
    Ok(total / rs.len() as f64)
}

/// A way of turning a finished painting into a video from the blank canvas.
pub trait Method {
    fn name(&self) -> &str;
    /// Samples `0..k`; sample `i` must not depend on `k`. Deterministic methods may return a single video.
    fn samples(&self, x_final: &Frame, steps: usize, k: usize, seed: u64) -> Result<Vec<PaintingVideo>>;
}

pub struct Ours<'a> {
    pub params: &'a ModelParams,
    pub trained_shape: Option<FrameShape>,
}

impl Method for Ours<'_> {
    fn name(&self) -> &str {
        "ours"
    }

    fn samples(&self, x_final: &Frame, steps: usize, k: usize, seed: u64) -> Result<Vec<PaintingVideo>> {
        let req = SynthesisRequest { steps, n_samples: k, trained_shape: self.trained_shape, ..SynthesisRequest::new(x_final.clone(), self.params, seed) };
        synthesize_many(&req)
    }
}

pub struct Interp;

impl Method for Interp {
    fn name(&self) -> &str {
        "interp"
    }

    fn samples(&self, x_final: &Frame, steps: usize, _k: usize, _seed: u64) -> Result<Vec<PaintingVideo>> {
        Ok(vec![interp_video(x_final, steps)?])
    }
}

pub struct Unet<'a>(pub &'a UnetBaselineParams);

impl Method for Unet<'_> {
    fn name(&self) -> &str {
        "unet"
    }

    fn samples(&self, x_final: &Frame, steps: usize, _k: usize, _seed: u64) -> Result<Vec<PaintingVideo>> {
        if steps != self.0.frames {
            return Err(Error::invalid(format!("the encoder-decoder always emits {} steps, asked for {}", self.0.frames, steps)));
        }
        Ok(vec![unet_predict(x_final, self.0)?])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Extraction rules for the single test sequence; its length sets the step count.
    pub extraction: ExtractionConfig,
    pub k: usize,
    pub crops_per_video: usize,
    pub crop: usize,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            extraction: ExtractionConfig { sequence_length: 40, ..ExtractionConfig::default() },
            k: 2000,
            crops_per_video: 5,
            crop: crate::datapipe::DEFAULT_CROP,
            threshold: DEFAULT_CHANGE_THRESHOLD,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub video: String,
    pub crop_y: usize,
    pub crop_x: usize,
    pub method: String,
    pub l1: f64,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub l1_mean: f64,
    pub l1_std: f64,
    pub iou_mean: f64,
    pub iou_std: f64,
    pub cells: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedVideo {
    pub video: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub k: usize,
    pub crops: usize,
    pub seed: u64,
    pub rows: Vec<MethodRow>,
    pub skipped: Vec<SkippedVideo>,
    pub cells: Vec<CellResult>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64;
    (m, var.sqrt())
}

impl MetricsReport {
    pub fn row(&self, method: &str) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// Human-readable table with `mean (std)` cells.
    pub fn render_table(&self) -> String {
        let mut s = format!("best of k={} over {} crops (seed {})\n", self.k, self.crops, self.seed);
        let _ = writeln!(s, "{:<10} {:>14} {:>14}", "method", "L1", "change IOU");
        for r in &self.rows {
            let _ = writeln!(s, "{:<10} {:>14} {:>14}", r.method, format!("{:.2} ({:.2})", r.l1_mean, r.l1_std), format!("{:.2} ({:.2})", r.iou_mean, r.iou_std));
        }
        for v in &self.skipped {
            let _ = writeln!(s, "skipped {}: {}", v.video, v.reason);
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,l1_mean,l1_std,iou_mean,iou_std,cells,k,seed\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{},{},{},{}", r.method, r.l1_mean, r.l1_std, r.iou_mean, r.iou_std, r.cells, self.k, self.seed);
        }
        s
    }
}

/// Distinct crop origins for one video, at most `n`, chosen with `seed`.
fn pick_crops(shape: FrameShape, crop: usize, n: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    crop_offsets(shape.height, shape.width, crop)?;
    let all: Vec<(usize, usize)> = (0..=shape.height - crop).flat_map(|y| (0..=shape.width - crop).map(move |x| (y, x))).collect();
    let mut r = rng::stream(seed);
    let mut idx: Vec<usize> = rand::seq::index::sample(&mut r, all.len(), n.min(all.len())).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| all[i]).collect())
}

/// The real clip for one test video: blank canvas followed by one extracted sequence.
fn real_clip(video: &PaintingVideo, cfg: &EvalConfig) -> Result<Option<PaintingVideo>> {
    let seqs = extract_sequences(video, &cfg.extraction, Some(1), rng::derive_seed_str(cfg.seed, "sequence"))?;
    let Some(seq) = seqs.first() else { return Ok(None) };
    let mut frames = vec![Frame::blank(video.shape().height, video.shape().width)];
    frames.extend(seq.indices.iter().map(|&i| video.frame(i).clone()));
    Ok(Some(PaintingVideo::new(video.id(), video.medium(), video.frame_period(), frames)?))
}

/// Best-of-k L1 and change IOU for every (video, crop, method) cell, aggregated per method.
pub fn evaluate_methods(test_videos: &[PaintingVideo], methods: &[&dyn Method], cfg: &EvalConfig) -> Result<MetricsReport> {
    cfg.extraction.validate()?;
    if cfg.k < 1 || cfg.crops_per_video < 1 || methods.is_empty() {
        return Err(Error::invalid("k, crops_per_video and the method list must be nonempty"));
    }
    let steps = cfg.extraction.sequence_length;
    let mut cells = Vec::new();
    let mut skipped = Vec::new();
    let mut crops = 0;
    for video in test_videos {
        let Some(clip) = real_clip(video, cfg)? else {
            skipped.push(SkippedVideo { video: video.id().into(), reason: format!("no valid {}-frame sequence", steps) });
            continue;
        };
        let video_seed = rng::derive_seed_str(cfg.seed, video.id());
        for (ci, (y, x)) in pick_crops(video.shape(), cfg.crop, cfg.crops_per_video, video_seed)?.into_iter().enumerate() {
            crops += 1;
            let real = clip.crop(y, x, cfg.crop, cfg.crop)?;
            let x_final = video.final_frame().crop(y, x, cfg.crop, cfg.crop)?;
            for m in methods {
                let samples = m.samples(&x_final, steps, cfg.k, rng::derive_seed(video_seed, ci as u64))?;
                let l1 = best_of_k_l1(&real, |i| Ok(samples[i].clone()), samples.len().min(cfg.k))?;
                let mut best_iou = 0.0f64;
                for s in samples.iter().take(cfg.k) {
                    best_iou = best_iou.max(change_iou_score(&real, s, cfg.threshold)?);
                }
                cells.push(CellResult { video: video.id().into(), crop_y: y, crop_x: x, method: m.name().into(), l1, iou: best_iou });
            }
        }
    }
    let rows = methods
        .iter()
        .map(|m| {
            let mine: Vec<&CellResult> = cells.iter().filter(|c| c.method == m.name()).collect();
            let (l1_mean, l1_std) = mean_std(&mine.iter().map(|c| c.l1).collect::<Vec<_>>());
            let (iou_mean, iou_std) = mean_std(&mine.iter().map(|c| c.iou).collect::<Vec<_>>());
            MethodRow { method: m.name().into(), l1_mean, l1_std, iou_mean, iou_std, cells: mine.len() }
        })
        .collect();
    Ok(MetricsReport { k: cfg.k, crops, seed: cfg.seed, rows, skipped, cells })
}
