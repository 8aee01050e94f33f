//! Hierarchical pre-training loop.

use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{contrastive_pair, AugmentSpec};
use crate::dataset::{epoch_batches, Corpus, Image, Sampling};
use crate::error::{Error, Result};
use crate::losses::{LossSpec, LossTerm, LossTerms};
use crate::model::{grayscale_batch, load_state, save_state, Checkpoint, ModelState, Network};
use crate::train::objective::{pretext_step, PretextBatch};
use crate::train::optim::{pretrain_lr, Adam, PretrainSchedule};
use crate::train::parallel_map;

pub const PHASE: &str = "pretrain";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: PretrainSchedule,
    pub sampling: Sampling,
    /// Save `pretrain-{epoch}.ckpt` every this many epochs (0: final only).
    pub checkpoint_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batch_size: 30,
            schedule: PretrainSchedule::default(),
            sampling: Sampling::Uniform,
            checkpoint_every: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("pre-training batch size {} must be >= 2", self.batch_size)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("pre-training needs at least one epoch".into()));
        }
        Ok(())
    }
}

/// Epoch means of the enabled loss terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub terms: LossTerms,
    pub total: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,lr,L_img,L_task,L_group,L_rec,L_total";

    /// Disabled terms are left blank.
    pub fn csv_row(&self) -> String {
        let cell = |t: LossTerm| self.terms.get(t).map(|v| format!("{v:.9e}")).unwrap_or_default();
        format!(
            "{},{:e},{},{},{},{},{:.9e}",
            self.epoch,
            self.lr,
            cell(LossTerm::Image),
            cell(LossTerm::Task),
            cell(LossTerm::Group),
            cell(LossTerm::Reconstruction),
            self.total
        )
    }
}

/// Everything needed to continue a run: parameters, optimizer moments, the
/// last completed epoch and its loss history.
#[derive(Debug, Clone)]
pub struct Pretrainer {
    pub state: ModelState<f32>,
    pub adam: Adam<f32>,
    pub epoch: usize,
    pub log: Vec<EpochLog>,
    pub config: PretrainConfig,
    pub loss: LossSpec,
    pub augment: AugmentSpec,
    pub seed: u64,
    pub workers: usize,
    net: Network,
}

#[derive(Debug, Serialize, Deserialize)]
struct ResumeInfo {
    log: Vec<EpochLog>,
    config: PretrainConfig,
    loss: LossSpec,
    augment: AugmentSpec,
}

impl Pretrainer {
    pub fn new(
        state: ModelState<f32>,
        config: PretrainConfig,
        loss: LossSpec,
        augment: AugmentSpec,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        loss.validate()?;
        augment.validate()?;
        if augment.output_size != state.config.input_size {
            return Err(Error::Config(format!(
                "augmentation output {} differs from model input {}",
                augment.output_size, state.config.input_size
            )));
        }
        let net = state.network()?;
        let adam = Adam::new(&state.params);
        Ok(Self { state, adam, epoch: 0, log: Vec::new(), config, loss, augment, seed, workers: 1, net })
    }

    /// Continues from a checkpoint written by [`Pretrainer::checkpoint`]. The
    /// epoch budget may be raised; everything else comes from the file.
    pub fn resume(path: impl AsRef<Path>, epochs: Option<usize>) -> Result<Self> {
        let ckpt: Checkpoint<f32> = load_state(path.as_ref())?;
        if ckpt.meta.phase != PHASE {
            return Err(Error::Config(format!(
                "{} is a {} checkpoint, not a pre-training one",
                path.as_ref().display(),
                ckpt.meta.phase
            )));
        }
        let info: ResumeInfo = serde_json::from_value(ckpt.meta.extra.clone())
            .map_err(|e| Error::Format(format!("resume information: {e}")))?;
        let mut config = info.config;
        if let Some(e) = epochs {
            config.epochs = e;
        }
        let adam = Adam::from_aux(&ckpt.state.params, &ckpt.aux)?;
        let mut t = Self::new(ckpt.state, config, info.loss, info.augment, ckpt.meta.seed)?;
        t.adam = adam;
        t.epoch = ckpt.meta.epoch;
        t.log = info.log;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint<f32>> {
        let mut ckpt = Checkpoint::new(self.state.clone(), self.seed, self.epoch, PHASE);
        ckpt.meta.step = self.adam.step;
        ckpt.meta.extra = serde_json::to_value(ResumeInfo {
            log: self.log.clone(),
            config: self.config.clone(),
            loss: self.loss.clone(),
            augment: self.augment.clone(),
        })
        .map_err(|e| Error::Format(e.to_string()))?;
        ckpt.aux = self.adam.to_aux();
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_state(path, &self.checkpoint()?)
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// Builds the `2N` view batch for the given records. Augmentation draws
    /// are fixed before any worker starts, so the result does not depend on
    /// the worker count.
    fn views(&self, corpus: &Corpus, batch: &[usize], draws: &[u64]) -> Result<PretextBatch<f32>> {
        let jobs: Vec<(&Image, u64)> = batch.iter().zip(draws).map(|(&i, &d)| (&corpus.images[i], d)).collect();
        let pairs = parallel_map(&jobs, self.workers, |&(img, d)| contrastive_pair(img, &self.augment, d));
        let mut flat: Vec<Image> = Vec::with_capacity(2 * batch.len());
        for p in pairs {
            let (a, b) = p?;
            flat.push(a);
            flat.push(b);
        }
        let planes: Vec<&[f32]> = flat.iter().map(|v| v.data.as_slice()).collect();
        let views = grayscale_batch(&planes, self.state.config.in_channels, self.augment.output_size);
        let mut tasks = Vec::with_capacity(flat.len());
        let mut groups = Vec::with_capacity(flat.len());
        for &i in batch {
            let r = corpus.record(i);
            for _ in 0..2 {
                tasks.push(r.task_id as usize - 1);
                groups.push(r.group_id as usize - 1);
            }
        }
        Ok(PretextBatch { views, tasks, groups })
    }

    /// One pass over `indices`. Batch order and augmentation depend only on
    /// `(seed, epoch)`, so a resumed run replays exactly.
    pub fn run_epoch(&mut self, corpus: &Corpus, indices: &[usize]) -> Result<&EpochLog> {
        if indices.len() < 2 {
            return Err(Error::InvalidArgument(format!("pre-training needs >= 2 images, got {}", indices.len())));
        }
        if corpus.manifest.num_tasks() != self.state.config.num_tasks
            || corpus.manifest.num_groups() != self.state.config.num_groups
        {
            return Err(Error::Config(format!(
                "model has {} task / {} group outputs, corpus has {} / {}",
                self.state.config.num_tasks,
                self.state.config.num_groups,
                corpus.manifest.num_tasks(),
                corpus.manifest.num_groups()
            )));
        }
        let epoch = self.epoch + 1;
        let lr = pretrain_lr(epoch, self.config.epochs, self.config.batch_size, &self.config.schedule);
        let batches = epoch_batches(corpus, indices, self.config.batch_size, 2, self.config.sampling, self.seed, epoch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(1 << 32 | epoch as u64);
        let mut sums = [0.0f64; 4];
        let mut total = 0.0;
        for batch in &batches {
            let draws: Vec<u64> = batch.iter().map(|_| rng.next_u64()).collect();
            let pb = self.views(corpus, batch, &draws)?;
            let eval = pretext_step(&self.net, &self.state.params, &pb, &self.loss, true)?;
            let grads = eval.grads.as_ref().expect("requested");
            self.adam.update(&mut self.state.params, grads, lr, |_| true).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("{m}; loss terms {:?}", eval.terms)),
                other => other,
            })?;
            self.net.encoder.update_running_stats(&mut self.state.params, &eval.encoder_cache);
            for (s, t) in sums.iter_mut().zip(LossTerm::ALL) {
                *s += eval.terms.get(t).unwrap_or(0.0);
            }
            total += eval.total;
        }
        let n = batches.len() as f64;
        let mut terms = LossTerms::default();
        for (s, t) in sums.iter().zip(LossTerm::ALL) {
            if self.loss.enabled(t) {
                terms.set(t, Some(s / n));
            }
        }
        self.epoch = epoch;
        self.log.push(EpochLog { epoch, lr, steps: batches.len(), terms, total: total / n });
        Ok(self.log.last().expect("just pushed"))
    }
}

pub fn checkpoint_name(phase: &str, epoch: usize) -> String {
    format!("{phase}-{epoch}.ckpt")
}
