//! Linear probe on frozen fused features, and feature export.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Corpus, Split};
use crate::error::{Error, Result};
use crate::eval::features_of;
use crate::model::ModelState;
use crate::nn::Matrix;

pub const MIN_PER_CLASS: usize = 10;
const PROBE_ITERS: usize = 500;
const PROBE_LR: f64 = 0.05;
const PROBE_L2: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeLevel {
    Task,
    Group,
}

impl std::str::FromStr for ProbeLevel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "task" => Ok(Self::Task),
            "group" => Ok(Self::Group),
            _ => Err(Error::InvalidArgument(format!("probe level must be task or group, got {s}"))),
        }
    }
}

impl ProbeLevel {
    pub fn name(self) -> &'static str {
        match self {
            Self::Task => "task",
            Self::Group => "group",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub level: ProbeLevel,
    pub accuracy: f64,
    pub chance: f64,
    pub n_samples: usize,
    pub n_train: usize,
    pub n_test: usize,
}

impl ProbeReport {
    pub const CSV_HEADER: &'static str = "level,accuracy,chance,n_samples,n_train,n_test";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{},{},{}",
            self.level.name(),
            self.accuracy,
            self.chance,
            self.n_samples,
            self.n_train,
            self.n_test
        )
    }
}

/// Multinomial logistic regression on standardized inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// `d x k`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub classes: usize,
}

impl LogisticModel {
    fn logits(&self, row: &[f64]) -> Vec<f64> {
        let k = self.classes;
        let mut out = self.bias.clone();
        for (j, &x) in row.iter().enumerate() {
            let z = (x - self.mean[j]) * self.scale[j];
            if z != 0.0 {
                for (o, w) in out.iter_mut().zip(&self.weights[j * k..(j + 1) * k]) {
                    *o += z * w;
                }
            }
        }
        out
    }

    pub fn predict(&self, row: &[f64]) -> usize {
        let l = self.logits(row);
        (0..self.classes).fold(0, |b, c| if l[c] > l[b] { c } else { b })
    }

    pub fn accuracy(&self, x: &[Vec<f64>], y: &[usize]) -> f64 {
        if x.is_empty() {
            return 0.0;
        }
        x.iter().zip(y).filter(|(r, &t)| self.predict(r) == t).count() as f64 / x.len() as f64
    }
}

/// Full-batch Adam on the mean cross-entropy plus a small L2 penalty.
pub fn fit_logistic(x: &[Vec<f64>], y: &[usize], classes: usize) -> Result<LogisticModel> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::InvalidArgument(format!("{} samples, {} labels", x.len(), y.len())));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= classes) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {classes} classes")));
    }
    let d = x[0].len();
    let n = x.len() as f64;
    let mut mean = vec![0.0; d];
    for r in x {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut scale = vec![0.0; d];
    for r in x {
        for ((s, v), m) in scale.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    for s in &mut scale {
        *s = if *s > 1e-12 { 1.0 / s.sqrt() } else { 0.0 };
    }
    let k = classes;
    let mut model = LogisticModel { mean, scale, weights: vec![0.0; d * k], bias: vec![0.0; k], classes };
    let z: Vec<Vec<f64>> =
        x.iter().map(|r| r.iter().enumerate().map(|(j, v)| (v - model.mean[j]) * model.scale[j]).collect()).collect();
    let np = d * k + k;
    let (mut m, mut v) = (vec![0.0; np], vec![0.0; np]);
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    for t in 1..=PROBE_ITERS {
        let mut g = vec![0.0; np];
        for (row, &label) in z.iter().zip(y) {
            let mut l = model.bias.clone();
            for (j, &zj) in row.iter().enumerate() {
                for (o, w) in l.iter_mut().zip(&model.weights[j * k..(j + 1) * k]) {
                    *o += zj * w;
                }
            }
            let mx = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = l.iter().map(|a| (a - mx).exp()).sum();
            let p: Vec<f64> = l.iter().enumerate().map(|(c, a)| (a - mx).exp() / sum - f64::from(u8::from(c == label))).collect();
            for (j, &zj) in row.iter().enumerate() {
                for (gw, pc) in g[j * k..(j + 1) * k].iter_mut().zip(&p) {
                    *gw += zj * pc / n;
                }
            }
            for (gb, pc) in g[d * k..].iter_mut().zip(&p) {
                *gb += pc / n;
            }
        }
        for (gw, w) in g[..d * k].iter_mut().zip(&model.weights) {
            *gw += PROBE_L2 * w;
        }
        let c1 = 1.0 - b1.powi(t as i32);
        let c2 = 1.0 - b2.powi(t as i32);
        for i in 0..np {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let step = PROBE_LR * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            if i < d * k {
                model.weights[i] -= step;
            } else {
                model.bias[i - d * k] -= step;
            }
        }
    }
    Ok(model)
}

/// Seeded 80/20 split of `features` (one row per sample), probe fit on the
/// 80% part, accuracy on the rest.
pub fn probe_features(features: &[Vec<f64>], labels: &[usize], classes: usize, level: ProbeLevel, seed: u64) -> Result<ProbeReport> {
    for c in 0..classes {
        let count = labels.iter().filter(|&&l| l == c).count();
        if count < MIN_PER_CLASS {
            return Err(Error::InvalidArgument(format!(
                "{} class {} has {count} samples (need {MIN_PER_CLASS})",
                level.name(),
                c + 1
            )));
        }
    }
    let mut order: Vec<usize> = (0..features.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = features.len() * 4 / 5;
    let pick = |ids: &[usize]| -> (Vec<Vec<f64>>, Vec<usize>) {
        (ids.iter().map(|&i| features[i].clone()).collect(), ids.iter().map(|&i| labels[i]).collect())
    };
    let (xtr, ytr) = pick(&order[..n_train]);
    let (xte, yte) = pick(&order[n_train..]);
    let model = fit_logistic(&xtr, &ytr, classes)?;
    Ok(ProbeReport {
        level,
        accuracy: model.accuracy(&xte, &yte),
        chance: 1.0 / classes as f64,
        n_samples: features.len(),
        n_train,
        n_test: xte.len(),
    })
}

/// Records used for probing: the training split, or every record when the
/// corpus carries no split tags.
pub fn probe_records(corpus: &Corpus) -> Vec<usize> {
    let tagged = corpus.select(|r| r.split == Some(Split::Train));
    if tagged.is_empty() {
        (0..corpus.len()).collect()
    } else {
        tagged
    }
}

pub fn extract_features(state: &ModelState<f32>, corpus: &Corpus, idx: &[usize]) -> Result<Vec<Vec<f64>>> {
    let m: Matrix<f32> = features_of(state, corpus, idx)?;
    Ok((0..m.rows).map(|r| m.row(r).iter().map(|&v| v as f64).collect()).collect())
}

/// Frozen-feature probe at the task or group level.
pub fn linear_probe(state: &ModelState<f32>, corpus: &Corpus, level: ProbeLevel, seed: u64) -> Result<ProbeReport> {
    let idx = probe_records(corpus);
    let (labels, classes): (Vec<usize>, usize) = match level {
        ProbeLevel::Task => (idx.iter().map(|&i| corpus.record(i).task_id as usize - 1).collect(), corpus.manifest.num_tasks()),
        ProbeLevel::Group => (idx.iter().map(|&i| corpus.record(i).group_id as usize - 1).collect(), corpus.manifest.num_groups()),
    };
    let features = extract_features(state, corpus, &idx)?;
    probe_features(&features, &labels, classes, level, seed)
}

/// CSV of `id, task_id, group_id, v_0 .. v_{d-1}` for every record.
pub fn export_features(state: &ModelState<f32>, corpus: &Corpus, out: impl AsRef<Path>) -> Result<usize> {
    let out = out.as_ref();
    let idx: Vec<usize> = (0..corpus.len()).collect();
    let features = extract_features(state, corpus, &idx)?;
    let d = state.config.fused_dim();
    let mut text = String::from("id,task_id,group_id");
    for j in 0..d {
        text += &format!(",v{j}");
    }
    text.push('\n');
    for (i, row) in idx.iter().zip(&features) {
        let r = corpus.record(*i);
        text += &format!("{},{},{}", r.id, r.task_id, r.group_id);
        for v in row {
            text += &format!(",{v:e}");
        }
        text.push('\n');
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(out).map_err(|e| Error::io(out, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(out, e))?;
    Ok(features.len())
}
