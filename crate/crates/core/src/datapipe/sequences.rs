use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Frame, PaintingVideo};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractionConfig {
    /// Nominal sampling period in frames.
    pub gamma: usize,
    /// Allowed deviation from `gamma` per gap.
    pub epsilon: usize,
    pub min_change_fraction: f64,
    pub pixel_change_threshold: f64,
    pub sequence_length: usize,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig { gamma: 5, epsilon: 2, min_change_fraction: 0.01, pixel_change_threshold: 0.05, sequence_length: 3 }
    }
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma == 0 || self.epsilon >= self.gamma {
            return Err(Error::config(format!("need gamma > epsilon >= 0, got gamma={} epsilon={}", self.gamma, self.epsilon)));
        }
        if !(self.min_change_fraction > 0.0 && self.min_change_fraction <= 1.0) {
            return Err(Error::config(format!("min_change_fraction must be in (0, 1], got {}", self.min_change_fraction)));
        }
        if !(self.pixel_change_threshold > 0.0 && self.pixel_change_threshold < 1.0) {
            return Err(Error::config(format!("pixel_change_threshold must be in (0, 1), got {}", self.pixel_change_threshold)));
        }
        if self.sequence_length < 2 {
            return Err(Error::config("sequence_length must be at least 2"));
        }
        Ok(())
    }

    pub fn gaps(&self) -> std::ops::RangeInclusive<usize> {
        (self.gamma - self.epsilon)..=(self.gamma + self.epsilon)
    }
}

/// Strictly increasing frame indices into one video.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct IndexSequence {
    pub video_id: String,
    pub indices: Vec<usize>,
}

impl fmt::Display for IndexSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let idx: Vec<String> = self.indices.iter().map(|i| i.to_string()).collect();
        write!(f, "{}\t{}", self.video_id, idx.join(","))
    }
}

impl IndexSequence {
    pub fn parse_line(line: &str) -> Result<Self> {
        let (id, rest) = line.split_once('\t').ok_or_else(|| Error::invalid(format!("index line without tab: {:?}", line)))?;
        let indices = rest
            .split(',')
            .map(|s| s.trim().parse::<usize>().map_err(|e| Error::invalid(format!("bad index {:?}: {}", s, e))))
            .collect::<Result<Vec<_>>>()?;
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(format!("indices not strictly increasing in {:?}", line)));
        }
        Ok(IndexSequence { video_id: id.to_string(), indices })
    }

    /// Re-checks every invariant against the raw video.
    pub fn is_valid_for(&self, video: &PaintingVideo, cfg: &ExtractionConfig) -> bool {
        self.video_id == video.id()
            && self.indices.len() == cfg.sequence_length
            && self.indices.last().is_some_and(|&l| l < video.len())
            && self.indices.windows(2).all(|w| {
                w[1] > w[0] && cfg.gaps().contains(&(w[1] - w[0])) && pair_changed(video.frame(w[0]), video.frame(w[1]), cfg)
            })
    }
}

pub fn write_index_file(path: &Path, seqs: &[IndexSequence]) -> Result<()> {
    let mut text = String::new();
    for s in seqs {
        text.push_str(&s.to_string());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_index_file(path: &Path) -> Result<Vec<IndexSequence>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(IndexSequence::parse_line).collect()
}

/// True when at least `min_change_fraction` of pixels differ by more than the
/// threshold in at least one channel.
pub fn pair_changed(a: &Frame, b: &Frame, cfg: &ExtractionConfig) -> bool {
    let thr = cfg.pixel_change_threshold as f32;
    let changed = a
        .pixels()
        .chunks_exact(3)
        .zip(b.pixels().chunks_exact(3))
        .filter(|(p, q)| p.iter().zip(q.iter()).any(|(x, y)| (x - y).abs() > thr))
        .count();
    let total = a.height() * a.width();
    changed as f64 >= cfg.min_change_fraction * total as f64
}

/// `counts[k][i]` = number of valid sequences of `k + 1` frames starting at frame `i`.
struct Table {
    counts: Vec<Vec<u128>>,
    links: Vec<Vec<usize>>,
}

fn build_table(video: &PaintingVideo, cfg: &ExtractionConfig) -> Result<Table> {
    let t = video.len();
    let links: Vec<Vec<usize>> = (0..t)
        .map(|i| cfg.gaps().map(|g| i + g).filter(|&j| j < t && pair_changed(video.frame(i), video.frame(j), cfg)).collect())
        .collect();
    let mut counts = vec![vec![1u128; t]];
    for k in 1..cfg.sequence_length {
        let prev = &counts[k - 1];
        let mut row = vec![0u128; t];
        // filled right to left so every successor is final
        for i in (0..t).rev() {
            let mut acc = 0u128;
            for &j in &links[i] {
                acc = acc.checked_add(prev[j]).ok_or_else(|| Error::config("sequence count exceeds u128; lower sequence_length or epsilon"))?;
            }
            row[i] = acc;
        }
        counts.push(row);
    }
    Ok(Table { counts, links })
}

/// Number of valid sequences in `video` under `cfg`.
pub fn count_sequences(video: &PaintingVideo, cfg: &ExtractionConfig) -> Result<u128> {
    cfg.validate()?;
    let table = build_table(video, cfg)?;
    let last = &table.counts[cfg.sequence_length - 1];
    last.iter().try_fold(0u128, |a, &b| a.checked_add(b)).ok_or_else(|| Error::config("sequence count exceeds u128"))
}

/// The `rank`-th sequence in lexicographic order.
fn unrank(table: &Table, len: usize, mut rank: u128) -> Vec<usize> {
    let mut out = Vec::with_capacity(len);
    let top = &table.counts[len - 1];
    let mut cur = None;
    for (i, &c) in top.iter().enumerate() {
        if rank < c {
            cur = Some(i);
            break;
        }
        rank -= c;
    }
    let mut i = cur.expect("rank within total");
    out.push(i);
    for k in (0..len - 1).rev() {
        let mut next = None;
        for &j in &table.links[i] {
            let c = table.counts[k][j];
            if rank < c {
                next = Some(j);
                break;
            }
            rank -= c;
        }
        i = next.expect("rank within subtree");
        out.push(i);
    }
    out
}

/// All valid sequences in lexicographic order, or `count_limit` of them
/// drawn uniformly without replacement (seeded) when there are more.
pub fn extract_sequences(video: &PaintingVideo, cfg: &ExtractionConfig, count_limit: Option<usize>, seed: u64) -> Result<Vec<IndexSequence>> {
    cfg.validate()?;
    let table = build_table(video, cfg)?;
    let len = cfg.sequence_length;
    let total = table.counts[len - 1].iter().try_fold(0u128, |a, &b| a.checked_add(b)).ok_or_else(|| Error::config("sequence count exceeds u128"))?;
    let ranks: Vec<u128> = match count_limit {
        Some(limit) if (limit as u128) < total => {
            let mut r = rng::stream(rng::derive_seed_str(seed, video.id()));
            let mut picked = BTreeSet::new();
            if total <= usize::MAX as u128 {
                for i in rand::seq::index::sample(&mut r, total as usize, limit) {
                    picked.insert(i as u128);
                }
            } else {
                while picked.len() < limit {
                    picked.insert(r.random_range(0..total));
                }
            }
            picked.into_iter().collect()
        }
        _ => (0..total).collect(),
    };
    Ok(ranks.into_iter().map(|rank| IndexSequence { video_id: video.id().to_string(), indices: unrank(&table, len, rank) }).collect())
}
