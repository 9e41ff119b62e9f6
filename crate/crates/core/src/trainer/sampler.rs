//! Single-dataset minibatches drawn from per-dataset epoch shuffles.
//!
//! Each batch picks one training dataset with probability proportional to
//! its scene count (one draw of the `PICK` stream keyed by the batch
//! counter), then takes the next `batch_size` scenes of that dataset's
//! current epoch order. Orders are shuffles from the `EPOCH` stream keyed by
//! dataset and epoch, so the sampler state is just a cursor per dataset.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{tag, SplitMix64};
use crate::synthdata::SceneDataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochCursor {
    pub epoch: u64,
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerState {
    pub seed: u64,
    /// Separates the streams of independent training phases.
    pub stream: u64,
    pub batches: u64,
    pub cursors: Vec<EpochCursor>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    /// Index into the training dataset list.
    pub dataset: usize,
    pub dataset_id: usize,
    pub scenes: Vec<usize>,
}

pub fn epoch_order(seed: u64, stream: u64, dataset: usize, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = SplitMix64::derived(seed, &[tag::EPOCH, stream, dataset as u64, epoch]);
    order.shuffle(&mut rng);
    order
}

/// Index drawn with probability proportional to `sizes`.
pub fn pick_proportional(sizes: &[usize], rng: &mut SplitMix64) -> usize {
    let total: u64 = sizes.iter().map(|&s| s as u64).sum();
    let mut u = rng.next() % total;
    for (i, &s) in sizes.iter().enumerate() {
        if u < s as u64 {
            return i;
        }
        u -= s as u64;
    }
    unreachable!("u < total")
}

impl SamplerState {
    pub fn new(seed: u64, stream: u64, num_datasets: usize) -> Self {
        Self {
            seed,
            stream,
            batches: 0,
            cursors: vec![EpochCursor { epoch: 0, position: 0 }; num_datasets],
        }
    }

    pub fn next_batch(&mut self, sizes: &[usize], batch_size: usize) -> Result<Batch> {
        if sizes.is_empty() || sizes.iter().all(|&s| s == 0) {
            return Err(Error::Empty("training datasets"));
        }
        if sizes.len() != self.cursors.len() {
            return Err(Error::LengthMismatch {
                expected: self.cursors.len(),
                actual: sizes.len(),
            });
        }
        let mut rng = SplitMix64::derived(self.seed, &[tag::PICK, self.stream, self.batches]);
        let d = pick_proportional(sizes, &mut rng);
        let n = sizes[d];
        let cur = &mut self.cursors[d];
        let mut order = epoch_order(self.seed, self.stream, d, cur.epoch, n);
        let mut scenes = Vec::with_capacity(batch_size);
        while scenes.len() < batch_size {
            if cur.position == n {
                cur.epoch += 1;
                cur.position = 0;
                order = epoch_order(self.seed, self.stream, d, cur.epoch, n);
            }
            scenes.push(order[cur.position]);
            cur.position += 1;
        }
        self.batches += 1;
        Ok(Batch {
            dataset: d,
            dataset_id: d,
            scenes,
        })
    }
}

/// Draw the next batch from `datasets`.
pub fn sample_batch(datasets: &[SceneDataset], batch_size: usize, state: &mut SamplerState) -> Result<Batch> {
    let sizes: Vec<usize> = datasets.iter().map(SceneDataset::len).collect();
    let mut b = state.next_batch(&sizes, batch_size)?;
    b.dataset_id = datasets[b.dataset].dataset_id;
    Ok(b)
}
