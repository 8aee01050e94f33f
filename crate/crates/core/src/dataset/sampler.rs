//! In-memory corpus and per-epoch batch ordering.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::manifest::{CorpusManifest, ImageRecord};
use crate::dataset::volume::{Image, Mask};
use crate::error::{Error, Result};

/// Manifest plus every image (and mask, where present) decoded once.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub images: Vec<Image>,
    pub masks: Vec<Option<Mask>>,
}

impl Corpus {
    pub fn load(manifest: CorpusManifest) -> Result<Self> {
        let mut images = Vec::with_capacity(manifest.records.len());
        let mut masks = Vec::with_capacity(manifest.records.len());
        for r in &manifest.records {
            images.push(manifest.load_image(r)?);
            masks.push(match r.mask {
                Some(_) => Some(manifest.load_mask(r)?),
                None => None,
            });
        }
        Ok(Self { manifest, images, masks })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn record(&self, i: usize) -> &ImageRecord {
        &self.manifest.records[i]
    }

    /// Indices of records matching the predicate, in manifest order.
    pub fn select(&self, f: impl Fn(&ImageRecord) -> bool) -> Vec<usize> {
        self.manifest.records.iter().enumerate().filter(|(_, r)| f(r)).map(|(i, _)| i).collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Every record once per epoch, shuffled.
    #[default]
    Uniform,
    /// Each task contributes equally: tasks are padded by resampling to the
    /// size of the largest one.
    BalancedByTask,
}

/// Batches for one epoch over `indices`. The last batch keeps the
/// remainder unless it would be smaller than `min_batch`, in which case it
/// is dropped.
pub fn epoch_batches(
    corpus: &Corpus,
    indices: &[usize],
    batch_size: usize,
    min_batch: usize,
    sampling: Sampling,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = match sampling {
        Sampling::Uniform => indices.to_vec(),
        Sampling::BalancedByTask => {
            let t = corpus.manifest.num_tasks();
            let mut by_task: Vec<Vec<usize>> = vec![Vec::new(); t];
            for &i in indices {
                by_task[corpus.record(i).task_id as usize - 1].push(i);
            }
            let largest = by_task.iter().map(Vec::len).max().unwrap_or(0);
            let mut out = Vec::with_capacity(largest * t);
            for mut members in by_task.into_iter().filter(|m| !m.is_empty()) {
                members.shuffle(&mut rng);
                out.extend((0..largest).map(|k| members[k % members.len()]));
            }
            out
        }
    };
    order.shuffle(&mut rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.last().is_some_and(|b| b.len() < min_batch) {
        batches.pop();
    }
    Ok(batches)
}
