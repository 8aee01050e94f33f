//! Segmentation fine-tuning with a poly schedule and best-on-validation
//! model selection.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{seg_augment, AugmentSpec};
use crate::dataset::{Corpus, Image, Mask, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate_records, DiceReport};
use crate::model::{grayscale_batch, Checkpoint, ModelConfig, ModelState, Network, OUTPUT_LAYER};
use crate::train::objective::segmentation_step;
use crate::train::optim::{poly_lr, Adam};
use crate::train::parallel_map;

pub const PHASE: &str = "finetune";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    /// Optimizer steps; the poly schedule decays to zero over this budget.
    pub steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Validation Dice every this many steps (and after the last one).
    pub eval_every: usize,
    /// Train only the output convolution.
    pub freeze_backbone: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { steps: 10_000, batch_size: 30, base_lr: 5e-4, eval_every: 500, freeze_backbone: false }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("fine-tuning steps, batch size and eval interval must be positive".into()));
        }
        Ok(())
    }
}

/// One row per validation point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLog {
    pub step: usize,
    pub lr: f64,
    /// Mean cross-entropy since the previous row.
    pub ce: f64,
    pub val_dice: BTreeMap<u8, f64>,
    pub val_avg: f64,
}

impl FinetuneLog {
    pub fn csv_header(num_classes: u8) -> String {
        let mut h = String::from("epoch,lr,CE");
        for c in 1..=num_classes {
            h += &format!(",val_dice_{c}");
        }
        h + ",val_dice_avg"
    }

    pub fn csv_row(&self) -> String {
        let mut r = format!("{},{:e},{:.9e}", self.step, self.lr, self.ce);
        for v in self.val_dice.values() {
            r += &format!(",{v:.6}");
        }
        r + &format!(",{:.6}", self.val_avg)
    }
}

/// Model for fine-tuning `num_classes` foreground classes: the pre-trained
/// weights with a fresh output layer, or a fresh model when `pretrained` is
/// `None`.
pub fn segmentation_model(
    pretrained: Option<&ModelState<f32>>,
    config: &ModelConfig,
    num_classes: usize,
    seed: u64,
) -> Result<ModelState<f32>> {
    match pretrained {
        Some(p) => p.with_output_channels(num_classes + 1, seed),
        None => ModelState::init(&config.clone().with_out_channels(num_classes + 1), seed),
    }
}

pub struct Finetuner {
    pub state: ModelState<f32>,
    pub adam: Adam<f32>,
    pub step: usize,
    pub config: FinetuneConfig,
    pub augment: AugmentSpec,
    pub seed: u64,
    pub workers: usize,
    pub task_id: u32,
    pub log: Vec<FinetuneLog>,
    pub best: Option<(usize, DiceReport, ModelState<f32>)>,
    net: Network,
    labeled: Vec<usize>,
    val: Vec<usize>,
    stream: Vec<usize>,
}

impl Finetuner {
    /// `labeled`: training records with masks; `val`: validation records.
    pub fn new(
        state: ModelState<f32>,
        corpus: &Corpus,
        task_id: u32,
        config: FinetuneConfig,
        augment: AugmentSpec,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        augment.validate()?;
        let task = corpus
            .manifest
            .task(task_id)
            .ok_or_else(|| Error::InvalidArgument(format!("task {task_id} is not in the manifest")))?;
        if state.config.out_channels != task.num_classes as usize + 1 {
            return Err(Error::Config(format!(
                "model has {} outputs, task {task_id} needs {}",
                state.config.out_channels,
                task.num_classes + 1
            )));
        }
        if augment.output_size != state.config.input_size {
            return Err(Error::Config(format!(
                "augmentation output {} differs from model input {}",
                augment.output_size, state.config.input_size
            )));
        }
        let labeled = corpus.select(|r| r.task_id == task_id && r.labeled);
        if labeled.is_empty() {
            return Err(Error::InvalidArgument(format!("task {task_id} has no labeled training records")));
        }
        if let Some(&i) = labeled.iter().find(|&&i| corpus.masks[i].is_none()) {
            return Err(Error::InvalidArgument(format!("labeled record {} has no mask", corpus.record(i).id)));
        }
        let val = corpus.select(|r| r.task_id == task_id && r.split == Some(Split::Val) && r.mask.is_some());
        let net = state.network()?;
        let adam = Adam::new(&state.params);
        let mut t = Self {
            state,
            adam,
            step: 0,
            config,
            augment,
            seed,
            workers: 1,
            task_id,
            log: Vec::new(),
            best: None,
            net,
            labeled,
            val,
            stream: Vec::new(),
        };
        t.stream = t.index_stream();
        Ok(t)
    }

    /// Concatenated seeded permutations of the labeled set, long enough for
    /// the whole budget.
    fn index_stream(&self) -> Vec<usize> {
        let need = self.config.steps * self.config.batch_size;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(2);
        let mut out = Vec::with_capacity(need + self.labeled.len());
        while out.len() < need {
            let mut perm = self.labeled.clone();
            perm.shuffle(&mut rng);
            out.extend(perm);
        }
        out
    }

    pub fn labeled(&self) -> &[usize] {
        &self.labeled
    }

    fn head_only(name: &str) -> bool {
        name.starts_with(OUTPUT_LAYER) && name[OUTPUT_LAYER.len()..].starts_with('.')
    }

    /// One optimizer step; returns the batch cross-entropy.
    pub fn train_step(&mut self, corpus: &Corpus) -> Result<f64> {
        if self.step >= self.config.steps {
            return Err(Error::InvalidArgument("fine-tuning budget exhausted".into()));
        }
        let b = self.config.batch_size;
        let idx = &self.stream[self.step * b..(self.step + 1) * b];
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(3 << 32 | self.step as u64);
        let jobs: Vec<(&Image, &Mask, u64)> = idx
            .iter()
            .map(|&i| (&corpus.images[i], corpus.masks[i].as_ref().expect("checked in new"), rng.next_u64()))
            .collect();
        let aug = parallel_map(&jobs, self.workers, |&(img, m, d)| seg_augment(img, m, &self.augment, d));
        let mut imgs = Vec::with_capacity(b);
        let mut masks = Vec::with_capacity(b * self.augment.output_size * self.augment.output_size);
        for a in aug {
            let (img, m) = a?;
            masks.extend_from_slice(&m.data);
            imgs.push(img);
        }
        let planes: Vec<&[f32]> = imgs.iter().map(|m| m.data.as_slice()).collect();
        let x = grayscale_batch(&planes, self.state.config.in_channels, self.augment.output_size);
        let eval = segmentation_step(&self.net, &self.state.params, &x, &masks, true)?;
        let lr = poly_lr(self.step, self.config.steps, self.config.base_lr)?;
        let grads = eval.grads.as_ref().expect("requested");
        let frozen = self.config.freeze_backbone;
        self.adam.update(&mut self.state.params, grads, lr, |n| !frozen || Self::head_only(n))?;
        if !frozen {
            self.net.encoder.update_running_stats(&mut self.state.params, &eval.encoder_cache);
        }
        self.step += 1;
        Ok(eval.loss)
    }

    pub fn validate_now(&self, corpus: &Corpus) -> Result<Option<DiceReport>> {
        if self.val.is_empty() {
            return Ok(None);
        }
        evaluate_records(&self.state, corpus, self.task_id, Split::Val, &self.val).map(Some)
    }

    /// Runs the remaining budget, validating every `eval_every` steps and
    /// after the final step; `on_row` sees each log row as it is produced.
    pub fn run(&mut self, corpus: &Corpus, mut on_row: impl FnMut(&FinetuneLog)) -> Result<()> {
        let mut ce_sum = 0.0;
        let mut ce_n = 0usize;
        while self.step < self.config.steps {
            let lr = poly_lr(self.step, self.config.steps, self.config.base_lr)?;
            ce_sum += self.train_step(corpus)?;
            ce_n += 1;
            if self.step.is_multiple_of(self.config.eval_every) || self.step == self.config.steps {
                let report = self.validate_now(corpus)?;
                let (val_dice, val_avg) = report
                    .as_ref()
                    .map(|r| (r.per_class.clone(), r.average))
                    .unwrap_or((BTreeMap::new(), f64::NAN));
                let row = FinetuneLog { step: self.step, lr, ce: ce_sum / ce_n as f64, val_dice, val_avg };
                on_row(&row);
                self.log.push(row);
                ce_sum = 0.0;
                ce_n = 0;
                let improves = match (&report, &self.best) {
                    (Some(r), Some((_, b, _))) => r.average > b.average,
                    (Some(_), None) => true,
                    (None, _) => true,
                };
                if improves {
                    let r = report.unwrap_or_else(|| DiceReport {
                        task_id: self.task_id,
                        split: Split::Val,
                        ratio: None,
                        per_class: BTreeMap::new(),
                        average: f64::NAN,
                        n_images: 0,
                    });
                    self.best = Some((self.step, r, self.state.clone()));
                }
            }
        }
        Ok(())
    }

    /// Best-on-validation weights (the final weights when there is no
    /// validation split).
    pub fn best_state(&self) -> &ModelState<f32> {
        self.best.as_ref().map(|(_, _, s)| s).unwrap_or(&self.state)
    }

    /// The current weights as a `finetune` checkpoint tagged with the task.
    pub fn checkpoint(&self) -> Checkpoint<f32> {
        self.tagged(self.state.clone(), self.step, None)
    }

    /// The best-on-validation weights, tagged with the task and the step and
    /// validation Dice at which they were selected.
    pub fn best_checkpoint(&self) -> Checkpoint<f32> {
        match &self.best {
            Some((step, report, state)) => self.tagged(state.clone(), *step, Some(report.average)),
            None => self.checkpoint(),
        }
    }

    fn tagged(&self, state: ModelState<f32>, step: usize, val_dice: Option<f64>) -> Checkpoint<f32> {
        let mut ckpt = Checkpoint::new(state, self.seed, step, PHASE);
        ckpt.meta.step = step as u64;
        ckpt.meta.extra = serde_json::json!({
            "task_id": self.task_id,
            "labeled": self.labeled.len(),
            "val_dice": val_dice.filter(|v| v.is_finite()),
        });
        ckpt
    }
}

/// Task a fine-tuned checkpoint was trained for, if recorded.
pub fn checkpoint_task(ckpt: &Checkpoint<f32>) -> Option<u32> {
    ckpt.meta.extra.get("task_id")?.as_u64().map(|v| v as u32)
}
