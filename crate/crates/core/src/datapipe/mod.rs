//! Dataset preparation: ingesting videos, dropping occluded frames,
//! extracting frame-index sequences and crops, splitting, and synthetic data.

mod crops;
mod filter;
mod sequences;
mod split;
pub mod synthetic;

use std::path::Path;

pub use crops::{crop_offsets, extract_crops, CropOffset, DEFAULT_CROP};
pub use filter::{filter_artifact_frames, FilteredVideo, FrameFilter, KeepAll, PerFrame, TransientOccluderFilter};
pub use sequences::{count_sequences, extract_sequences, pair_changed, read_index_file, write_index_file, ExtractionConfig, IndexSequence};
pub use split::{split_dataset, DatasetSplit};
pub use synthetic::{generate_synthetic_dataset, SyntheticSpec, SyntheticVideo};

use crate::domain::PaintingVideo;
use crate::error::Result;

/// Loads a video directory (`frame_%05d.png` files plus `meta.json`).
pub fn ingest_video(path: &Path) -> Result<PaintingVideo> {
    crate::io::read_video_dir(path)
}
