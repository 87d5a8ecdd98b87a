//! Procedural painting videos: a Voronoi partition of the canvas whose
//! regions are painted one at a time, flat base color first, then detail
//! strokes from wide to thin.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Frame, Medium, PaintingVideo};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    /// Inclusive range of region counts per video.
    pub regions: [usize; 2],
    /// Inclusive range of base-fill frames per region.
    pub base_steps: [usize; 2],
    /// Detail stroke widths in painting order (coarse to fine).
    pub stroke_widths: Vec<usize>,
    pub strokes_per_width: usize,
    pub seed: u64,
    pub id_prefix: String,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            height: 50,
            width: 50,
            regions: [6, 10],
            base_steps: [8, 12],
            stroke_widths: vec![5, 3, 2, 1],
            strokes_per_width: 4,
            seed: 0,
            id_prefix: "syn".into(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 4 || self.width < 4 {
            return Err(Error::config("synthetic canvas must be at least 4x4"));
        }
        if self.regions[0] < 1 || self.regions[0] > self.regions[1] || self.regions[1] > self.height * self.width {
            return Err(Error::config(format!("bad region range {:?}", self.regions)));
        }
        if self.base_steps[0] < 1 || self.base_steps[0] > self.base_steps[1] {
            return Err(Error::config(format!("bad base step range {:?}", self.base_steps)));
        }
        if self.stroke_widths.contains(&0) {
            return Err(Error::config("stroke widths must be positive"));
        }
        Ok(())
    }
}

/// A generated video with its ground truth.
#[derive(Clone, Debug)]
pub struct SyntheticVideo {
    pub video: PaintingVideo,
    /// Region id of every pixel, row-major.
    pub region_map: Vec<usize>,
    pub region_count: usize,
    /// Region ids in the order they were painted.
    pub fill_order: Vec<usize>,
    /// Frame index at which each region's base fill began.
    pub fill_start: Vec<usize>,
}

impl SyntheticVideo {
    pub fn region_pixels(&self, region: usize) -> Vec<usize> {
        self.region_map.iter().enumerate().filter(|(_, &r)| r == region).map(|(i, _)| i).collect()
    }
}

fn quantize(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

fn random_color(r: &mut Stream) -> [f32; 3] {
    [0, 1, 2].map(|_| quantize(r.random_range(0.05..0.85)))
}

/// Offsets every channel by 0.12 to 0.25 in direction `dir`, flipping where that would leave `[0, 0.9]`.
fn shade(base: [f32; 3], r: &mut Stream, dir: f64) -> [f32; 3] {
    base.map(|c| {
        let d = dir * r.random_range(0.12..0.25);
        let v = c as f64 + d;
        quantize(if (0.0..=0.9).contains(&v) { v } else { c as f64 - d })
    })
}

fn voronoi(h: usize, w: usize, k: usize, r: &mut Stream) -> Vec<usize> {
    let sites = rand::seq::index::sample(r, h * w, k).into_vec();
    // anisotropic metric per video for less uniform cells
    let sx: f64 = r.random_range(0.6..1.6);
    (0..h * w)
        .map(|p| {
            let (py, px) = ((p / w) as f64, (p % w) as f64);
            let mut best = (f64::INFINITY, 0);
            for (id, &s) in sites.iter().enumerate() {
                let (sy, sxp) = ((s / w) as f64, (s % w) as f64);
                let d = (py - sy).powi(2) + sx * (px - sxp).powi(2);
                if d < best.0 {
                    best = (d, id);
                }
            }
            best.1
        })
        .collect()
}

fn paint(canvas: &mut [f32], pixels: &[usize], color: [f32; 3]) -> usize {
    let mut changed = 0;
    for &p in pixels {
        let px = &mut canvas[p * 3..p * 3 + 3];
        if px != color {
            px.copy_from_slice(&color);
            changed += 1;
        }
    }
    changed
}

/// Pixels of `mask_region` covered by a thick segment.
fn stroke_pixels(spec: &SyntheticSpec, region_map: &[usize], region: usize, start: usize, width: usize, r: &mut Stream) -> Vec<usize> {
    let (h, w) = (spec.height, spec.width);
    let angle: f64 = r.random_range(0.0..std::f64::consts::TAU);
    let len = r.random_range(0.3..0.7) * h.min(w) as f64;
    let (y0, x0) = ((start / w) as f64, (start % w) as f64);
    let (y1, x1) = (y0 + len * angle.sin(), x0 + len * angle.cos());
    let rad = width as f64 / 2.0;
    let mut out = Vec::new();
    for p in 0..h * w {
        if region_map[p] != region {
            continue;
        }
        let (py, px) = ((p / w) as f64, (p % w) as f64);
        let (dy, dx) = (y1 - y0, x1 - x0);
        let t = (((py - y0) * dy + (px - x0) * dx) / (dy * dy + dx * dx)).clamp(0.0, 1.0);
        let (cy, cx) = (y0 + t * dy, x0 + t * dx);
        if (py - cy).powi(2) + (px - cx).powi(2) <= rad * rad + 0.25 {
            out.push(p);
        }
    }
    out
}

fn generate_one(spec: &SyntheticSpec, index: usize) -> Result<SyntheticVideo> {
    let mut r = rng::stream(rng::derive_seed(spec.seed, index as u64));
    let (h, w) = (spec.height, spec.width);
    let area = h * w;
    let k = r.random_range(spec.regions[0]..=spec.regions[1]);
    let region_map = voronoi(h, w, k, &mut r);
    let mut fill_order: Vec<usize> = (0..k).collect();
    fill_order.shuffle(&mut r);

    let mut canvas = vec![1.0f32; area * 3];
    let mut frames = vec![Frame::blank(h, w)];
    let mut fill_start = vec![0; k];
    // base chunks stay under 15% of the canvas and above ~1.2% when the region allows
    let max_chunk = ((0.15 * area as f64).floor() as usize).max(1);
    let min_chunk = ((0.012 * area as f64).ceil() as usize).max(1);

    for &region in &fill_order {
        let base = random_color(&mut r);
        let mut pixels: Vec<usize> = (0..area).filter(|&p| region_map[p] == region).collect();
        let theta: f64 = r.random_range(0.0..std::f64::consts::TAU);
        let key = |p: usize| (p / w) as f64 * theta.sin() + (p % w) as f64 * theta.cos();
        pixels.sort_by(|&a, &b| key(a).total_cmp(&key(b)).then(a.cmp(&b)));

        let wanted = r.random_range(spec.base_steps[0]..=spec.base_steps[1]);
        let most = (pixels.len() / min_chunk).max(1);
        let least = pixels.len().div_ceil(max_chunk);
        let steps = wanted.min(most).max(least).max(1);
        fill_start[region] = frames.len();
        for s in 0..steps {
            let (a, b) = (s * pixels.len() / steps, (s + 1) * pixels.len() / steps);
            if paint(&mut canvas, &pixels[a..b], base) > 0 {
                frames.push(Frame::new(h, w, canvas.clone())?);
            }
        }

        let shades = [shade(base, &mut r, 1.0), shade(base, &mut r, -1.0)];
        let mut stroke = 0;
        for &width in &spec.stroke_widths {
            for _ in 0..spec.strokes_per_width {
                // alternate shades so consecutive strokes contrast; retry strokes that barely land
                let color = shades[stroke % 2];
                for _ in 0..6 {
                    let start = pixels[r.random_range(0..pixels.len())];
                    let covered = stroke_pixels(spec, &region_map, region, start, width, &mut r);
                    let fresh = covered.iter().filter(|&&p| canvas[p * 3..p * 3 + 3] != color).count();
                    if fresh >= min_chunk.min(pixels.len()) {
                        paint(&mut canvas, &covered, color);
                        frames.push(Frame::new(h, w, canvas.clone())?);
                        stroke += 1;
                        break;
                    }
                }
            }
        }
    }
    let id = format!("{}_{:04}", spec.id_prefix, index);
    Ok(SyntheticVideo {
        video: PaintingVideo::new(id, Medium::Synthetic, None, frames)?,
        region_map,
        region_count: k,
        fill_order,
        fill_start,
    })
}

/// `n_videos` independent videos; video `i` depends only on `(spec, i)`.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec, n_videos: usize) -> Vec<SyntheticVideo> {
    spec.validate().expect("valid synthetic spec");
    (0..n_videos).map(|i| generate_one(spec, i).expect("generated frames are valid")).collect()
}
