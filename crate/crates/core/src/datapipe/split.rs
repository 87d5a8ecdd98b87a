use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Per-video 70:15:15 partition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Seeded shuffle of the sorted ids; validation and test each get
/// `round(0.15 n)` and train gets the remainder.
pub fn split_dataset(ids: &[String], seed: u64) -> Result<DatasetSplit> {
    let mut ids: Vec<String> = ids.to_vec();
    ids.sort();
    ids.dedup();
    if ids.len() < 3 {
        return Err(Error::invalid(format!("need at least 3 distinct video ids to split, got {}", ids.len())));
    }
    ids.shuffle(&mut rng::stream(seed));
    let n = ids.len();
    let held = (0.15 * n as f64).round() as usize;
    let test = ids.split_off(n - held);
    let val = ids.split_off(n - 2 * held);
    Ok(DatasetSplit { train: ids, val, test })
}
