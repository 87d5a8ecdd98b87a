use crate::domain::{Frame, PaintingVideo};
use crate::error::Result;

/// Decides which frames of a video to keep.
pub trait FrameFilter {
    fn keep_mask(&self, frames: &[Frame]) -> Vec<bool>;
}

pub struct KeepAll;

impl FrameFilter for KeepAll {
    fn keep_mask(&self, frames: &[Frame]) -> Vec<bool> {
        vec![true; frames.len()]
    }
}

/// Adapts a per-frame predicate.
pub struct PerFrame<F>(pub F);

impl<F: Fn(&Frame) -> bool> FrameFilter for PerFrame<F> {
    fn keep_mask(&self, frames: &[Frame]) -> Vec<bool> {
        frames.iter().map(|f| (self.0)(f)).collect()
    }
}

/// Drops frames that differ strongly from both the last kept frame and a
/// frame shortly after, when those two agree with each other: a hand or
/// brush passing over the canvas and leaving again.
#[derive(Clone, Debug)]
pub struct TransientOccluderFilter {
    /// Fraction of pixels that must change for a difference to count as large.
    pub area_fraction: f64,
    /// Per-channel intensity change that marks a pixel as changed.
    pub magnitude: f32,
    /// How many frames ahead the canvas must return.
    pub revert_window: usize,
}

impl Default for TransientOccluderFilter {
    fn default() -> Self {
        TransientOccluderFilter { area_fraction: 0.2, magnitude: 0.25, revert_window: 2 }
    }
}

impl TransientOccluderFilter {
    fn large_change(&self, a: &Frame, b: &Frame) -> bool {
        let changed = a
            .pixels()
            .chunks_exact(3)
            .zip(b.pixels().chunks_exact(3))
            .filter(|(p, q)| p.iter().zip(q.iter()).any(|(x, y)| (x - y).abs() > self.magnitude))
            .count();
        changed as f64 >= self.area_fraction * (a.height() * a.width()) as f64
    }
}

impl FrameFilter for TransientOccluderFilter {
    fn keep_mask(&self, frames: &[Frame]) -> Vec<bool> {
        let mut keep = vec![true; frames.len()];
        let mut anchor = 0;
        for i in 1..frames.len() {
            let (cur, before) = (&frames[i], &frames[anchor]);
            let transient = self.large_change(cur, before)
                && (i + 1..=(i + self.revert_window).min(frames.len() - 1))
                    .any(|j| self.large_change(cur, &frames[j]) && !self.large_change(before, &frames[j]));
            if transient {
                keep[i] = false;
            } else {
                anchor = i;
            }
        }
        keep
    }
}

#[derive(Clone, Debug)]
pub struct FilteredVideo {
    /// `None` when every frame was dropped.
    pub video: Option<PaintingVideo>,
    /// Original indices of the surviving frames.
    pub kept: Vec<usize>,
}

pub fn filter_artifact_frames(video: &PaintingVideo, filter: &dyn FrameFilter) -> Result<FilteredVideo> {
    let mask = filter.keep_mask(video.frames());
    let kept: Vec<usize> = mask.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i).collect();
    let video = if kept.is_empty() { None } else { Some(video.select(&kept)?) };
    Ok(FilteredVideo { video, kept })
}
