//! On-disk video layout: a directory of `frame_%05d.png` files plus `meta.json`.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::domain::{Frame, Medium, PaintingVideo};
use crate::error::{Error, Result};

pub const META_FILE: &str = "meta.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoMeta {
    pub id: String,
    pub medium: Medium,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_period: Option<f64>,
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{:05}.png", index)
}

fn parse_frame_index(name: &str) -> Option<usize> {
    let digits = name.strip_prefix("frame_")?.strip_suffix(".png")?;
    if digits.len() < 5 || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

pub fn write_frame_png(frame: &Frame, path: &Path) -> Result<()> {
    let img: RgbImage = ImageBuffer::from_raw(frame.width() as u32, frame.height() as u32, frame.to_rgb8())
        .expect("buffer length matches dimensions");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

pub fn read_frame_png(path: &Path) -> Result<Frame> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    let rgb = img.to_rgb8();
    Frame::from_rgb8(rgb.height() as usize, rgb.width() as usize, rgb.as_raw())
}

/// Writes frames and metadata into `dir`, creating it if needed.
pub fn write_video_dir(video: &PaintingVideo, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, frame) in video.frames().iter().enumerate() {
        write_frame_png(frame, &dir.join(frame_file_name(i)))?;
    }
    let meta = VideoMeta { id: video.id().to_string(), medium: video.medium(), frame_period: video.frame_period() };
    write_json(&dir.join(META_FILE), &meta)
}

/// Loads a video directory; frames must be numbered contiguously from 0.
pub fn read_video_dir(dir: &Path) -> Result<PaintingVideo> {
    let meta: VideoMeta = read_json(&dir.join(META_FILE))?;
    let mut indices = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if let Some(i) = entry.file_name().to_str().and_then(parse_frame_index) {
            indices.push(i);
        }
    }
    indices.sort_unstable();
    if indices.is_empty() {
        return Err(Error::BadFrame { path: dir.to_path_buf(), index: 0, reason: "no frame files".into() });
    }
    let mut frames = Vec::with_capacity(indices.len());
    for (expected, &found) in indices.iter().enumerate() {
        if found != expected {
            return Err(Error::BadFrame {
                path: dir.to_path_buf(),
                index: expected,
                reason: format!("missing {}", frame_file_name(expected)),
            });
        }
        let path = dir.join(frame_file_name(found));
        let frame = read_frame_png(&path)
            .map_err(|e| Error::BadFrame { path: dir.to_path_buf(), index: found, reason: e.to_string() })?;
        if let Some(first) = frames.first().map(Frame::shape) {
            if frame.shape() != first {
                return Err(Error::BadFrame {
                    path: dir.to_path_buf(),
                    index: found,
                    reason: format!("shape {} differs from {}", frame.shape(), first),
                });
            }
        }
        frames.push(frame);
    }
    PaintingVideo::new(meta.id, meta.medium, meta.frame_period, frames)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Tiles frames into one image: one row per entry of `rows`, a 1-pixel gap between tiles.
pub fn write_contact_sheet(rows: &[Vec<&Frame>], path: &Path) -> Result<()> {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let Some(first) = rows.iter().flatten().next() else {
        return Err(Error::invalid("contact sheet needs at least one frame"));
    };
    let (fh, fw) = (first.height() as u32, first.width() as u32);
    let width = cols as u32 * (fw + 1);
    let height = rows.len() as u32 * (fh + 1);
    let mut img: RgbImage = ImageBuffer::from_pixel(width.max(1), height.max(1), Rgb([64, 64, 64]));
    for (r, row) in rows.iter().enumerate() {
        for (c, frame) in row.iter().enumerate() {
            let bytes = frame.to_rgb8();
            for y in 0..frame.height() {
                for x in 0..frame.width() {
                    let o = (y * frame.width() + x) * 3;
                    img.put_pixel(
                        c as u32 * (fw + 1) + x as u32,
                        r as u32 * (fh + 1) + y as u32,
                        Rgb([bytes[o], bytes[o + 1], bytes[o + 2]]),
                    );
                }
            }
        }
    }
    img.save_with_format(path, image::ImageFormat::Png).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

pub fn ensure_dir(path: &Path) -> Result<PathBuf> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}
