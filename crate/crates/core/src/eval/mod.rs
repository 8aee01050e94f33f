//! Dice evaluation, linear probing and feature export.

pub mod probe;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::augment::{resize, resize_mask};
use crate::dataset::{Corpus, Mask, Split};
use crate::error::{Error, Result};
use crate::model::{grayscale_batch, ModelState, Network};
use crate::nn::{FeatureMap, Matrix};

pub use probe::{
    export_features, extract_features, fit_logistic, linear_probe, probe_features, probe_records, LogisticModel, ProbeLevel,
    ProbeReport,
};

const EVAL_BATCH: usize = 16;

/// `2|P ∩ G| / (|P| + |G|)` for class `c`; 1 when both are empty.
pub fn dice(pred: &Mask, gt: &Mask, class: u8) -> Result<f64> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(Error::Shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data.iter().zip(&gt.data) {
        let (ia, ib) = (a == class, b == class);
        p += ia as usize;
        g += ib as usize;
        both += (ia && ib) as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + g) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub task_id: u32,
    pub split: Split,
    pub ratio: Option<f64>,
    /// Non-background classes 1..=C.
    pub per_class: BTreeMap<u8, f64>,
    pub average: f64,
    pub n_images: usize,
}

impl DiceReport {
    /// Per-image Dice for each class, averaged over images, then over classes.
    pub fn from_pairs(task_id: u32, split: Split, num_classes: u8, pairs: &[(Mask, &Mask)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidArgument(format!("task {task_id} has no {} images", split.name())));
        }
        let mut per_class = BTreeMap::new();
        for c in 1..=num_classes {
            let mut sum = 0.0;
            for (pred, gt) in pairs {
                sum += dice(pred, gt, c)?;
            }
            per_class.insert(c, sum / pairs.len() as f64);
        }
        let average = per_class.values().sum::<f64>() / per_class.len().max(1) as f64;
        Ok(Self { task_id, split, ratio: None, per_class, average, n_images: pairs.len() })
    }

    pub fn csv_header(&self) -> String {
        let mut h = String::from("task_id,split,ratio,n_images");
        for c in self.per_class.keys() {
            h += &format!(",dice_class_{c}");
        }
        h + ",dice_avg"
    }

    pub fn csv_row(&self) -> String {
        let mut r = format!(
            "{},{},{},{}",
            self.task_id,
            self.split.name(),
            self.ratio.map(|s| s.to_string()).unwrap_or_default(),
            self.n_images
        );
        for v in self.per_class.values() {
            r += &format!(",{v:.6}");
        }
        r + &format!(",{:.6}", self.average)
    }
}

impl fmt::Display for DiceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ratio = self.ratio.map(|s| format!(", s = {:.0}%", 100.0 * s)).unwrap_or_default();
        writeln!(f, "Task {} ({} split, {} images{ratio})", self.task_id, self.split.name(), self.n_images)?;
        writeln!(f, "{:<10} {:>8}", "class", "Dice (%)")?;
        for (c, v) in &self.per_class {
            writeln!(f, "{:<10} {:>8.2}", c, 100.0 * v)?;
        }
        write!(f, "{:<10} {:>8.2}", "average", 100.0 * self.average)
    }
}

/// Per-pixel argmax over output channels.
pub fn argmax_masks(logits: &FeatureMap<f32>) -> Vec<Mask> {
    let plane = logits.plane();
    (0..logits.batch)
        .map(|b| {
            let mut best = vec![(f32::NEG_INFINITY, 0u8); plane];
            for c in 0..logits.channels {
                for (slot, &v) in best.iter_mut().zip(logits.sample_plane(c, b)) {
                    if v > slot.0 {
                        *slot = (v, c as u8);
                    }
                }
            }
            Mask::new(logits.height, logits.width, best.into_iter().map(|(_, c)| c).collect()).expect("plane")
        })
        .collect()
}

/// Evaluation-mode model input for a set of records, resized to the model.
pub(crate) fn input_batch(net: &Network, corpus: &Corpus, idx: &[usize]) -> FeatureMap<f32> {
    let s = net.config.input_size;
    let imgs: Vec<_> = idx.iter().map(|&i| resize(&corpus.images[i], s)).collect();
    let planes: Vec<&[f32]> = imgs.iter().map(|m| m.data.as_slice()).collect();
    grayscale_batch(&planes, net.config.in_channels, s)
}

/// Predicted label maps for the given records.
pub fn predict_masks(state: &ModelState<f32>, corpus: &Corpus, idx: &[usize]) -> Result<Vec<Mask>> {
    let net = state.network()?;
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(EVAL_BATCH) {
        let x = input_batch(&net, corpus, chunk);
        out.extend(argmax_masks(&net.predict(&state.params, &x)?));
    }
    Ok(out)
}

/// Dice of the model on `idx` (records of one task that carry masks).
pub fn evaluate_records(state: &ModelState<f32>, corpus: &Corpus, task_id: u32, split: Split, idx: &[usize]) -> Result<DiceReport> {
    let task = corpus
        .manifest
        .task(task_id)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown task {task_id}")))?;
    if state.config.out_channels != task.num_classes as usize + 1 {
        return Err(Error::Config(format!(
            "model has {} output channels, task {task_id} needs {}",
            state.config.out_channels,
            task.num_classes + 1
        )));
    }
    let s = state.config.input_size;
    let mut gts = Vec::with_capacity(idx.len());
    for &i in idx {
        let m = corpus.masks[i]
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("record {} has no mask", corpus.record(i).id)))?;
        gts.push(resize_mask(m, s));
    }
    let preds = predict_masks(state, corpus, idx)?;
    let pairs: Vec<(Mask, &Mask)> = preds.into_iter().zip(&gts).collect();
    DiceReport::from_pairs(task_id, split, task.num_classes as u8, &pairs)
}

/// Dice on every record of `task_id` in `split`.
pub fn evaluate(state: &ModelState<f32>, corpus: &Corpus, task_id: u32, split: Split) -> Result<DiceReport> {
    let idx = corpus.select(|r| r.task_id == task_id && r.split == Some(split));
    evaluate_records(state, corpus, task_id, split, &idx)
}

/// Row-major `V_all` for the given records (evaluation mode).
pub(crate) fn features_of(state: &ModelState<f32>, corpus: &Corpus, idx: &[usize]) -> Result<Matrix<f32>> {
    let net = state.network()?;
    let d = net.config.fused_dim();
    let mut data = Vec::with_capacity(idx.len() * d);
    for chunk in idx.chunks(EVAL_BATCH) {
        let x = input_batch(&net, corpus, chunk);
        data.extend(net.features(&state.params, &x)?.data);
    }
    Ok(Matrix::from_vec(idx.len(), d, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(n: usize, on: &[usize]) -> Mask {
        let mut d = vec![0u8; n];
        for &i in on {
            d[i] = 1;
        }
        Mask::new(1, n, d).unwrap()
    }

    #[test]
    fn dice_examples() {
        let a = mask(10, &[0, 1, 2, 3]);
        assert_eq!(dice(&a, &a, 1).unwrap(), 1.0);
        assert_eq!(dice(&a, &mask(10, &[4, 5, 6, 7]), 1).unwrap(), 0.0);
        assert_eq!(dice(&a, &mask(10, &[2, 3, 4, 5]), 1).unwrap(), 0.5);
        assert_eq!(dice(&mask(10, &[]), &mask(10, &[]), 1).unwrap(), 1.0);
        assert!(dice(&a, &mask(9, &[]), 1).is_err());
    }

    #[test]
    fn report_averages_classes() {
        // class 1 perfect on both images, class 2 half / zero
        let gt = Mask::new(1, 4, vec![1, 1, 2, 2]).unwrap();
        let p1 = Mask::new(1, 4, vec![1, 1, 2, 0]).unwrap();
        let p2 = Mask::new(1, 4, vec![1, 1, 0, 0]).unwrap();
        let r = DiceReport::from_pairs(1, Split::Test, 2, &[(p1, &gt), (p2, &gt)]).unwrap();
        assert!((r.per_class[&1] - 1.0).abs() < 1e-12);
        assert!((r.per_class[&2] - (2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert!((r.average - (1.0 + 1.0 / 3.0) / 2.0).abs() < 1e-12);
        assert!(DiceReport::from_pairs(1, Split::Test, 2, &[]).is_err());
        assert_eq!(r.csv_header().split(',').count(), r.csv_row().split(',').count());
    }

    #[test]
    fn argmax_picks_largest_channel() {
        let fm = FeatureMap::from_vec(2, 1, 1, 3, vec![0.1f32, 0.9, 0.5, 0.2, 0.1, 0.6]).unwrap();
        assert_eq!(argmax_masks(&fm)[0].data, vec![1, 0, 1]);
    }
}
