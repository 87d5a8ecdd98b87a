use crate::domain::Frame;
use crate::error::{Error, Result};

pub const DEFAULT_CROP: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CropOffset {
    pub y: usize,
    pub x: usize,
}

/// Evenly spread start positions of `ceil(len / crop)` windows covering `0..len`.
fn axis_offsets(len: usize, crop: usize) -> Vec<usize> {
    let n = len.div_ceil(crop);
    if n <= 1 {
        return vec![0];
    }
    let span = (len - crop) as f64;
    (0..n).map(|i| (i as f64 * span / (n - 1) as f64).round() as usize).collect()
}

/// Row-major grid of crop origins for a `height × width` frame.
pub fn crop_offsets(height: usize, width: usize, crop: usize) -> Result<Vec<CropOffset>> {
    if crop == 0 || height < crop || width < crop {
        return Err(Error::shape(format!("frame at least {0}x{0}", crop), format!("{}x{}", height, width)));
    }
    let rows = axis_offsets(height, crop);
    let cols = axis_offsets(width, crop);
    Ok(rows.iter().flat_map(|&y| cols.iter().map(move |&x| CropOffset { y, x })).collect())
}

pub fn extract_crops(frame: &Frame, crop: usize) -> Result<Vec<(CropOffset, Frame)>> {
    crop_offsets(frame.height(), frame.width(), crop)?
        .into_iter()
        .map(|o| Ok((o, frame.crop(o.y, o.x, crop, crop)?)))
        .collect()
}
