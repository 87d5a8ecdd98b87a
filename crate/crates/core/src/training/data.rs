use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datapipe::{extract_sequences, ExtractionConfig, IndexSequence};
use crate::domain::{frame_delta, ChangeMap, Frame, PaintingVideo};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

/// One training transition `x_prev → x_prev + delta` of a painting `x_final`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSample {
    pub x_prev: Frame,
    pub delta: ChangeMap,
    pub x_final: Frame,
}

impl PairSample {
    pub fn new(prev: &Frame, curr: &Frame, x_final: &Frame) -> Result<Self> {
        Ok(PairSample { x_prev: prev.clone(), delta: frame_delta(curr, prev)?, x_final: x_final.clone() })
    }
}

/// Frame the starter pair of a blank-start video leads to: the first sampled frame after the blank.
pub fn starter_target(video: &PaintingVideo, gamma: usize) -> Option<&Frame> {
    if !video.frame(0).is_blank() || video.len() < 2 {
        return None;
    }
    Some(video.frame(gamma.clamp(1, video.len() - 1)))
}

pub fn starter_pair(video: &PaintingVideo, gamma: usize) -> Option<PairSample> {
    let target = starter_target(video, gamma)?;
    let blank = Frame::blank(target.height(), target.width());
    PairSample::new(&blank, target, video.final_frame()).ok()
}

/// Every consecutive pair of every sequence, plus one starter pair per
/// distinct blank-start video among them, shuffled by `rng`.
pub fn make_pairwise_batch(
    sequences: &[IndexSequence],
    videos: &HashMap<String, PaintingVideo>,
    gamma: usize,
    rng: &mut Stream,
) -> Result<Vec<PairSample>> {
    let mut out = Vec::new();
    let mut starters = BTreeSet::new();
    for s in sequences {
        let v = videos.get(&s.video_id).ok_or_else(|| Error::invalid(format!("unknown video {}", s.video_id)))?;
        for w in s.indices.windows(2) {
            out.push(PairSample::new(v.frame(w[0]), v.frame(w[1]), v.final_frame())?);
        }
        if starters.insert(s.video_id.clone()) {
            out.extend(starter_pair(v, gamma));
        }
    }
    use rand::seq::SliceRandom;
    out.shuffle(rng);
    Ok(out)
}

/// Which sequences the trainer draws from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub extraction: ExtractionConfig,
    /// Cap on sampled short sequences per video and length.
    pub sequences_per_video: usize,
    /// Cap on sampled long reference sequences per video.
    pub references_per_video: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { extraction: ExtractionConfig::default(), sequences_per_video: 200, references_per_video: 4 }
    }
}

/// Training videos with their pre-extracted index sequences.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub videos: Vec<PaintingVideo>,
    /// `(video index, frame indices)` keyed by sequence length.
    pub sequences: BTreeMap<usize, Vec<(usize, Vec<usize>)>>,
    /// Long real sequences supplying real transitions for the critic.
    pub references: Vec<(usize, Vec<usize>)>,
    pub gamma: usize,
}

impl TrainData {
    pub fn build(videos: Vec<PaintingVideo>, cfg: &DataConfig, lengths: &[usize], reference_length: usize, seed: u64) -> Result<Self> {
        if videos.is_empty() {
            return Err(Error::invalid("no training videos"));
        }
        let shape = videos[0].shape();
        if let Some(v) = videos.iter().find(|v| v.shape() != shape) {
            return Err(Error::shape(shape.to_string(), format!("{} in {}", v.shape(), v.id())));
        }
        let mut sequences = BTreeMap::new();
        for &len in lengths {
            let ex = ExtractionConfig { sequence_length: len, ..cfg.extraction.clone() };
            let mut all = Vec::new();
            for (vi, v) in videos.iter().enumerate() {
                for s in extract_sequences(v, &ex, Some(cfg.sequences_per_video), rng::derive_seed(seed, len as u64))? {
                    all.push((vi, s.indices));
                }
            }
            if all.is_empty() {
                return Err(Error::invalid(format!("no valid sequences of length {} in the training videos", len)));
            }
            sequences.insert(len, all);
        }
        let mut references = Vec::new();
        let ex = ExtractionConfig { sequence_length: reference_length.max(2), ..cfg.extraction.clone() };
        for (vi, v) in videos.iter().enumerate() {
            for s in extract_sequences(v, &ex, Some(cfg.references_per_video), rng::derive_seed(seed, 0x5EF))? {
                references.push((vi, s.indices));
            }
        }
        if references.is_empty() {
            // fall back to the longest short sequences
            let longest = *sequences.keys().last().expect("at least one length");
            references = sequences[&longest].clone();
        }
        Ok(TrainData { videos, sequences, references, gamma: cfg.extraction.gamma })
    }

    pub fn frame_shape(&self) -> (usize, usize) {
        let s = self.videos[0].shape();
        (s.height, s.width)
    }

    /// `n` transitions drawn uniformly over sequences; each is replaced by a
    /// starter pair with probability `starter_prob` when its video starts blank.
    pub fn sample_pairs(&self, n: usize, starter_prob: f64, rng: &mut Stream) -> Result<Vec<PairSample>> {
        let pool: Vec<&(usize, Vec<usize>)> = self.sequences.values().flatten().collect();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let (vi, idx) = pool[rng.random_range(0..pool.len())];
            let v = &self.videos[*vi];
            let starter = rng.random::<f64>() < starter_prob;
            let k = rng.random_range(0..idx.len() - 1);
            match starter.then(|| starter_pair(v, self.gamma)).flatten() {
                Some(p) => out.push(p),
                None => out.push(PairSample::new(v.frame(idx[k]), v.frame(idx[k + 1]), v.final_frame())?),
            }
        }
        Ok(out)
    }

    /// `n` sequences of length `len`: `(frames, x_final)`.
    pub fn sample_sequences(&self, len: usize, n: usize, rng: &mut Stream) -> Result<Vec<(Vec<Frame>, Frame)>> {
        let pool = self.sequences.get(&len).ok_or_else(|| Error::invalid(format!("no sequences of length {}", len)))?;
        Ok((0..n)
            .map(|_| {
                let (vi, idx) = &pool[rng.random_range(0..pool.len())];
                let v = &self.videos[*vi];
                (idx.iter().map(|&i| v.frame(i).clone()).collect(), v.final_frame().clone())
            })
            .collect())
    }

    /// `n` finished paintings to roll out toward.
    pub fn sample_paintings(&self, n: usize, rng: &mut Stream) -> Vec<Frame> {
        (0..n)
            .map(|_| {
                let (vi, _) = &self.references[rng.random_range(0..self.references.len())];
                self.videos[*vi].final_frame().clone()
            })
            .collect()
    }

    /// `n` real `(x_t, x_prev, x_final)` triples from reference sequences,
    /// including the blank-to-first-frame step of blank-start videos.
    pub fn sample_real_triples(&self, n: usize, rng: &mut Stream) -> (Tensor<f32>, Tensor<f32>, Tensor<f32>) {
        let mut xt = Vec::with_capacity(n);
        let mut xp = Vec::with_capacity(n);
        let mut xf = Vec::with_capacity(n);
        for _ in 0..n {
            let (vi, idx) = &self.references[rng.random_range(0..self.references.len())];
            let v = &self.videos[*vi];
            let blank_start = v.frame(0).is_blank();
            let choices = idx.len() - 1 + usize::from(blank_start && idx[0] != 0);
            let k = rng.random_range(0..choices);
            let (prev, cur) = if k == idx.len() - 1 {
                (Frame::blank(v.shape().height, v.shape().width), v.frame(idx[0]).clone())
            } else {
                (v.frame(idx[k]).clone(), v.frame(idx[k + 1]).clone())
            };
            xt.push(cur.to_tensor());
            xp.push(prev.to_tensor());
            xf.push(v.final_frame().to_tensor());
        }
        let stack = |v: Vec<Tensor<f32>>| Tensor::stack_batch(&v).expect("same shapes");
        (stack(xt), stack(xp), stack(xf))
    }
}
