//! Frames, change maps and videos: the value types every other module works on.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const CHANNELS: usize = 3;

/// One canvas state: `H×W×3` RGB intensities in `[0, 1]`, stored row-major HWC.
#[derive(Clone, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl fmt::Debug for Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Frame({}x{})", self.height, self.width)
    }
}

fn check_len(height: usize, width: usize, len: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::invalid(format!("frame dimensions must be positive, got {}x{}", height, width)));
    }
    if len != height * width * CHANNELS {
        return Err(Error::shape(
            format!("{}x{}x{} = {} values", height, width, CHANNELS, height * width * CHANNELS),
            format!("{} values", len),
        ));
    }
    Ok(())
}

impl Frame {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        check_len(height, width, pixels.len())?;
        if let Some((i, v)) = pixels.iter().enumerate().find(|(_, v)| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(Error::invalid(format!("pixel value {} at offset {} outside [0, 1]", v, i)));
        }
        Ok(Frame { height, width, pixels })
    }

    /// The all-white canvas every synthesized video starts from.
    pub fn blank(height: usize, width: usize) -> Self {
        Self::filled(height, width, 1.0)
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        assert!(height > 0 && width > 0 && (0.0..=1.0).contains(&value));
        Frame { height, width, pixels: vec![value; height * width * CHANNELS] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> FrameShape {
        FrameShape { height: self.height, width: self.width }
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * CHANNELS + c]
    }

    pub fn is_blank(&self) -> bool {
        self.pixels.iter().all(|&v| v == 1.0)
    }

    /// Exact 8-bit conversion: `v / 255`.
    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        check_len(height, width, bytes.len())?;
        Ok(Frame { height, width, pixels: bytes.iter().map(|&b| b as f32 / 255.0).collect() })
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect()
    }

    /// `[1, 3, H, W]` tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        hwc_to_chw(self.height, self.width, &self.pixels)
    }

    /// Reads item `index` of an `[N, 3, H, W]` tensor, clamping into `[0, 1]`.
    pub fn from_tensor<T: Real>(t: &Tensor<T>, index: usize) -> Result<Self> {
        let pixels = chw_to_hwc(t, index)?;
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite value in frame tensor"));
        }
        let (h, w) = (t.dim(2), t.dim(3));
        Ok(Frame { height: h, width: w, pixels: pixels.into_iter().map(|v| v.clamp(0.0, 1.0)).collect() })
    }

    /// Sub-image with top-left corner `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, height: usize, width: usize) -> Result<Self> {
        if y + height > self.height || x + width > self.width || height == 0 || width == 0 {
            return Err(Error::shape(
                format!("crop inside {}x{}", self.height, self.width),
                format!("{}x{} at ({}, {})", height, width, y, x),
            ));
        }
        let mut pixels = Vec::with_capacity(height * width * CHANNELS);
        for row in y..y + height {
            let start = (row * self.width + x) * CHANNELS;
            pixels.extend_from_slice(&self.pixels[start..start + width * CHANNELS]);
        }
        Ok(Frame { height, width, pixels })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameShape {
    pub height: usize,
    pub width: usize,
}

impl fmt::Display for FrameShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, CHANNELS)
    }
}

/// Signed per-pixel change between consecutive frames, values in `[-1, 1]`.
#[derive(Clone, PartialEq)]
pub struct ChangeMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl fmt::Debug for ChangeMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ChangeMap({}x{})", self.height, self.width)
    }
}

impl ChangeMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        check_len(height, width, values.len())?;
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !(v.is_finite() && (-1.0..=1.0).contains(*v))) {
            return Err(Error::invalid(format!("change value {} at offset {} outside [-1, 1]", v, i)));
        }
        Ok(ChangeMap { height, width, values })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        ChangeMap { height, width, values: vec![0.0; height * width * CHANNELS] }
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        assert!((-1.0..=1.0).contains(&value));
        ChangeMap { height, width, values: vec![value; height * width * CHANNELS] }
    }

    pub fn shape(&self) -> FrameShape {
        FrameShape { height: self.height, width: self.width }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        hwc_to_chw(self.height, self.width, &self.values)
    }

    /// Reads item `index` of an `[N, 3, H, W]` tensor, clamping into `[-1, 1]`.
    pub fn from_tensor<T: Real>(t: &Tensor<T>, index: usize) -> Result<Self> {
        let values = chw_to_hwc(t, index)?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite value in change tensor"));
        }
        Ok(ChangeMap {
            height: t.dim(2),
            width: t.dim(3),
            values: values.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
        })
    }
}

fn hwc_to_chw<T: Real>(h: usize, w: usize, src: &[f32]) -> Tensor<T> {
    let plane = h * w;
    let mut out = vec![T::zero(); plane * CHANNELS];
    for (p, px) in src.chunks_exact(CHANNELS).enumerate() {
        for c in 0..CHANNELS {
            out[c * plane + p] = T::lit(px[c] as f64);
        }
    }
    Tensor::new(vec![1, CHANNELS, h, w], out).expect("length matches by construction")
}

fn chw_to_hwc<T: Real>(t: &Tensor<T>, index: usize) -> Result<Vec<f32>> {
    let s = t.shape();
    if s.len() != 4 || s[1] != CHANNELS || index >= s[0] {
        return Err(Error::shape(format!("[>{}, 3, H, W]", index), format!("{:?}", s)));
    }
    let plane = s[2] * s[3];
    let base = index * CHANNELS * plane;
    let data = t.data();
    let mut out = Vec::with_capacity(plane * CHANNELS);
    for p in 0..plane {
        for c in 0..CHANNELS {
            out.push(data[base + c * plane + p].as_f64() as f32);
        }
    }
    Ok(out)
}

/// `clamp(prev + delta, 0, 1)`.
pub fn apply_delta(prev: &Frame, delta: &ChangeMap) -> Result<Frame> {
    if prev.shape() != delta.shape() {
        return Err(Error::shape(format!("delta of shape {}", prev.shape()), format!("{}", delta.shape())));
    }
    let pixels = prev.pixels.iter().zip(&delta.values).map(|(&p, &d)| (p + d).clamp(0.0, 1.0)).collect();
    Ok(Frame { height: prev.height, width: prev.width, pixels })
}

/// `curr - prev`; the change that [`apply_delta`] turns `prev` into `curr` with.
pub fn frame_delta(curr: &Frame, prev: &Frame) -> Result<ChangeMap> {
    if curr.shape() != prev.shape() {
        return Err(Error::shape(format!("frame of shape {}", curr.shape()), format!("{}", prev.shape())));
    }
    let values = curr.pixels.iter().zip(&prev.pixels).map(|(&c, &p)| c - p).collect();
    Ok(ChangeMap { height: curr.height, width: curr.width, values })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Medium {
    Digital,
    Watercolor,
    Synthetic,
}

impl fmt::Display for Medium {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Medium::Digital => "digital",
            Medium::Watercolor => "watercolor",
            Medium::Synthetic => "synthetic",
        })
    }
}

/// An ordered list of same-shaped frames; the last one is the finished painting.
#[derive(Clone, Debug, PartialEq)]
pub struct PaintingVideo {
    id: String,
    medium: Medium,
    frame_period: Option<f64>,
    frames: Vec<Frame>,
}

impl PaintingVideo {
    pub fn new(id: impl Into<String>, medium: Medium, frame_period: Option<f64>, frames: Vec<Frame>) -> Result<Self> {
        let first = frames.first().ok_or_else(|| Error::invalid("a video needs at least one frame"))?;
        let shape = first.shape();
        if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| f.shape() != shape) {
            return Err(Error::shape(format!("frame {} of shape {}", i, shape), format!("{}", f.shape())));
        }
        if let Some(p) = frame_period {
            if !(p.is_finite() && p > 0.0) {
                return Err(Error::invalid(format!("frame period must be positive, got {}", p)));
            }
        }
        Ok(PaintingVideo { id: id.into(), medium, frame_period, frames })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn medium(&self) -> Medium {
        self.medium
    }

    pub fn frame_period(&self) -> Option<f64> {
        self.frame_period
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn frame(&self, index: usize) -> &Frame {
        &self.frames[index]
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn shape(&self) -> FrameShape {
        self.frames[0].shape()
    }

    /// The completed painting.
    pub fn final_frame(&self) -> &Frame {
        self.frames.last().expect("non-empty by construction")
    }

    pub fn into_frames(self) -> Vec<Frame> {
        self.frames
    }

    /// Same video restricted to `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let frames = indices
            .iter()
            .map(|&i| self.frames.get(i).cloned().ok_or_else(|| Error::invalid(format!("frame index {} out of range", i))))
            .collect::<Result<Vec<_>>>()?;
        PaintingVideo::new(self.id.clone(), self.medium, self.frame_period, frames)
    }

    pub fn crop(&self, y: usize, x: usize, height: usize, width: usize) -> Result<Self> {
        let frames = self.frames.iter().map(|f| f.crop(y, x, height, width)).collect::<Result<Vec<_>>>()?;
        PaintingVideo::new(self.id.clone(), self.medium, self.frame_period, frames)
    }
}
