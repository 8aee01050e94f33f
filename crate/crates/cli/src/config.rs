//! Experiment configuration: a TOML file with `[data]`, `[augment]`,
//! `[model]`, `[loss]`, `[train]` and `[eval]` sections layered over the
//! defaults of a named profile.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use hssl::augment::AugmentSpec;
use hssl::dataset::{Sampling, Split, SynthSpec};
use hssl::eval::ProbeLevel;
use hssl::losses::LossSpec;
use hssl::model::ModelConfig;
use hssl::train::{FinetuneConfig, PretrainConfig, PretrainSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// 192 x 192 inputs, full width, the original schedule.
    Paper,
    /// 96 x 96 inputs, quarter width, short CPU schedule.
    Desk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub seed: u64,
    pub deterministic: bool,
    pub workers: usize,
    pub out_dir: PathBuf,
    pub data: DataSection,
    pub augment: AugmentSpec,
    pub model: ModelSection,
    pub loss: LossSpec,
    pub train: TrainSection,
    pub eval: EvalSection,
}

/// Corpus location and the synthetic generator's parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Directory holding `manifest.jsonl`.
    pub root: PathBuf,
    pub num_tasks: usize,
    pub num_groups: usize,
    pub images_per_task: usize,
    pub image_size: usize,
    pub texture_amplitude: f64,
    pub foreground_offset: f64,
    pub noise_sigma: f64,
    /// Extra unlabelled objects per image.
    pub distractors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub input_size: usize,
    pub width_mult: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub reference_batch: usize,
    pub warmup: bool,
    pub warmup_epochs: usize,
    pub linear_decay: bool,
    pub sampling: Sampling,
    pub checkpoint_every: usize,
    pub finetune_steps: usize,
    pub finetune_batch_size: usize,
    pub finetune_lr: f64,
    pub eval_every: usize,
    pub freeze_backbone: bool,
    pub task: u32,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub split: Split,
    pub level: ProbeLevel,
    pub gradcheck_probes: usize,
}

impl ExperimentConfig {
    pub fn profile(profile: Profile) -> Self {
        let synth = SynthSpec::desk(0);
        let (size, width, epochs, steps, ft_batch) = match profile {
            Profile::Paper => (192, 1.0, 1000, 10_000, 30),
            Profile::Desk => (96, 0.25, 40, 2000, 8),
        };
        let pre = PretrainConfig::default();
        let ft = FinetuneConfig::default();
        Self {
            profile,
            seed: 0,
            deterministic: true,
            workers: 1,
            out_dir: PathBuf::from("runs"),
            data: DataSection {
                root: PathBuf::from("corpus"),
                num_tasks: 4,
                num_groups: 2,
                images_per_task: synth.images_per_task,
                image_size: size,
                texture_amplitude: synth.texture_amplitude,
                foreground_offset: synth.foreground_offset,
                noise_sigma: synth.noise_sigma,
                distractors: synth.distractors,
            },
            augment: AugmentSpec::default().with_output_size(size),
            model: ModelSection { input_size: size, width_mult: width },
            loss: LossSpec::default(),
            train: TrainSection {
                epochs,
                batch_size: pre.batch_size,
                base_lr: pre.schedule.base_lr,
                reference_batch: pre.schedule.reference_batch,
                warmup: pre.schedule.warmup,
                warmup_epochs: pre.schedule.warmup_epochs,
                linear_decay: pre.schedule.linear_decay,
                sampling: pre.sampling,
                checkpoint_every: pre.checkpoint_every,
                finetune_steps: steps,
                finetune_batch_size: ft_batch,
                finetune_lr: ft.base_lr,
                eval_every: ft.eval_every.min(steps),
                freeze_backbone: false,
                task: 1,
                ratio: 0.05,
            },
            eval: EvalSection { split: Split::Test, level: ProbeLevel::Task, gradcheck_probes: 200 },
        }
    }

    /// Parses `text`, filling every missing key from the profile it names
    /// (`desk` when absent).
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().context("config is not valid TOML")?;
        let profile = match user.get("profile") {
            None => Profile::Desk,
            Some(v) => v.clone().try_into().context("profile must be \"paper\" or \"desk\"")?,
        };
        let mut merged = toml::Table::try_from(Self::profile(profile)).context("serializing defaults")?;
        merge(&mut merged, user);
        let cfg: Self = merged.try_into().context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in config {}", path.display()))
    }

    /// The fully resolved configuration, every default spelled out.
    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.input_size != self.augment.output_size {
            bail!(
                "model input size {} differs from augmentation output size {}",
                self.model.input_size,
                self.augment.output_size
            );
        }
        if self.workers == 0 {
            bail!("workers must be at least 1");
        }
        self.augment.validate()?;
        self.loss.validate()?;
        self.pretrain_config().validate()?;
        self.finetune_config().validate()?;
        Ok(())
    }

    pub fn synth_spec(&self) -> Result<SynthSpec> {
        let d = &self.data;
        let mut spec = SynthSpec::new(d.num_tasks, d.num_groups, d.images_per_task, d.image_size, self.seed)?;
        spec.texture_amplitude = d.texture_amplitude;
        spec.foreground_offset = d.foreground_offset;
        spec.noise_sigma = d.noise_sigma;
        spec.distractors = d.distractors;
        spec.validate()?;
        Ok(spec)
    }

    pub fn model_config(&self, num_tasks: usize, num_groups: usize) -> ModelConfig {
        ModelConfig::scaled(self.model.input_size, self.model.width_mult, num_tasks, num_groups)
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let t = &self.train;
        PretrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            schedule: PretrainSchedule {
                base_lr: t.base_lr,
                reference_batch: t.reference_batch,
                warmup: t.warmup,
                warmup_epochs: t.warmup_epochs,
                linear_decay: t.linear_decay,
            },
            sampling: t.sampling,
            checkpoint_every: t.checkpoint_every,
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        let t = &self.train;
        FinetuneConfig {
            steps: t.finetune_steps,
            batch_size: t.finetune_batch_size,
            base_lr: t.finetune_lr,
            eval_every: t.eval_every,
            freeze_backbone: t.freeze_backbone,
        }
    }
}

/// Recursively overlays `user` onto `base`.
fn merge(base: &mut toml::Table, user: toml::Table) {
    for (key, value) in user {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => merge(b, u),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_desk_profile() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg, ExperimentConfig::profile(Profile::Desk));
        assert_eq!(cfg.model.input_size, 96);
        assert_eq!(cfg.model.width_mult, 0.25);
    }

    #[test]
    fn paper_profile_defaults() {
        let cfg = ExperimentConfig::from_toml("profile = \"paper\"").unwrap();
        assert_eq!(cfg.model.input_size, 192);
        assert_eq!(cfg.model.width_mult, 1.0);
        assert_eq!(cfg.train.batch_size, 30);
        assert_eq!(cfg.train.base_lr, 3e-4);
        assert_eq!(cfg.train.finetune_lr, 5e-4);
        assert_eq!(cfg.train.epochs, 1000);
        assert_eq!(cfg.loss, LossSpec::default());
    }

    #[test]
    fn partial_sections_override_single_keys() {
        let cfg = ExperimentConfig::from_toml("seed = 7\n[loss]\nuse_task = false\n[train]\nepochs = 3\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert!(!cfg.loss.use_task && cfg.loss.use_group);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, 30);
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = ExperimentConfig::from_toml("[train]\nratio = 0.1\n").unwrap();
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_unknown_keys_and_inconsistent_sizes() {
        assert!(ExperimentConfig::from_toml("[model]\ndepth = 3\n").is_err());
        assert!(ExperimentConfig::from_toml("[model]\ninput_size = 64\n").is_err());
        assert!(ExperimentConfig::from_toml("profile = \"huge\"").is_err());
    }
}
