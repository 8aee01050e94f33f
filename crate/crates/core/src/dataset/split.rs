//! Train/val/test partitioning and annotation subsampling, per task.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::manifest::{CorpusManifest, Split};
use crate::error::{Error, Result};

/// `(train, val, test)` for a task with `n` images: test = floor(0.2 n),
/// val = floor(0.1 n), the rest train.
pub fn split_counts(n: usize) -> Result<(usize, usize, usize)> {
    if n < 3 {
        return Err(Error::InvalidArgument(format!("a task needs at least 3 images to be split, got {n}")));
    }
    let test = n * 2 / 10;
    let val = n / 10;
    Ok((n - val - test, val, test))
}

/// `max(1, round_half_up(s * train))`, capped at `train`.
pub fn annotation_count(train: usize, ratio: f64) -> Result<usize> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!("annotation ratio must be in (0, 1], got {ratio}")));
    }
    if train == 0 {
        return Err(Error::InvalidArgument("no training images to annotate".into()));
    }
    // the small slack keeps exact halves such as 0.1 * 5 from rounding down
    let k = (ratio * train as f64 + 0.5 + 1e-9).floor() as usize;
    Ok(k.clamp(1, train))
}

fn task_rng(seed: u64, task_id: u32, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(salt << 32 | task_id as u64);
    rng
}

/// Tags every record with a split by a seeded shuffle within each task.
/// The manifest must be untagged.
pub fn split_corpus(manifest: &CorpusManifest, seed: u64) -> Result<CorpusManifest> {
    if let Some(r) = manifest.records.iter().find(|r| r.split.is_some()) {
        return Err(Error::InvalidArgument(format!("record {} already has a split", r.id)));
    }
    let mut out = manifest.clone();
    for task in &manifest.tasks {
        let mut idx: Vec<usize> = (0..out.records.len()).filter(|&i| out.records[i].task_id == task.id).collect();
        if idx.is_empty() {
            continue;
        }
        let (train, val, _) = split_counts(idx.len())
            .map_err(|e| Error::InvalidArgument(format!("task {}: {e}", task.id)))?;
        idx.shuffle(&mut task_rng(seed, task.id, 1));
        for (rank, &i) in idx.iter().enumerate() {
            let r = &mut out.records[i];
            r.split = Some(if rank < train {
                Split::Train
            } else if rank < train + val {
                Split::Val
            } else {
                Split::Test
            });
            r.labeled = false;
        }
    }
    Ok(out)
}

/// Flags `annotation_count(|train|, ratio)` train records of every task as
/// labeled, chosen by a seeded shuffle.
pub fn subsample_annotations(manifest: &CorpusManifest, ratio: f64, seed: u64) -> Result<CorpusManifest> {
    let mut out = manifest.clone();
    for r in &mut out.records {
        r.labeled = false;
    }
    for task in &manifest.tasks {
        let all: Vec<usize> = (0..out.records.len()).filter(|&i| out.records[i].task_id == task.id).collect();
        if all.is_empty() {
            continue;
        }
        if all.iter().any(|&i| out.records[i].split.is_none()) {
            return Err(Error::InvalidArgument(format!("task {} has records without a split", task.id)));
        }
        let mut train: Vec<usize> = all.into_iter().filter(|&i| out.records[i].split == Some(Split::Train)).collect();
        let k = annotation_count(train.len(), ratio).map_err(|e| Error::InvalidArgument(format!("task {}: {e}", task.id)))?;
        train.shuffle(&mut task_rng(seed, task.id, 2));
        for &i in &train[..k] {
            out.records[i].labeled = true;
        }
    }
    Ok(out)
}
