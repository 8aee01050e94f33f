use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};

use hssl::dataset::{generate_synthetic, split_corpus, subsample_annotations, Corpus, CorpusManifest, Split};
use hssl::error::Error as CoreError;
use hssl::eval::{evaluate, export_features, linear_probe, ProbeReport};
use hssl::losses::LossTerm;
use hssl::model::{load_state, save_state, Checkpoint, ModelState};
use hssl::train::{
    checkpoint_name, checkpoint_task, segmentation_model, EpochLog, FinetuneLog, Finetuner, PretextCheck, Pretrainer,
};

use crate::config::ExperimentConfig;
use crate::{Cli, Command, GlobalArgs, LossFlags};

/// A check ran to completion and did not pass.
#[derive(Debug)]
pub struct CheckFailed(pub String);

impl fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

/// 1 for failed checks and diverged training, 2 for bad input or usage.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<CheckFailed>() {
            return 1;
        }
        if let Some(CoreError::NonFinite(_)) = cause.downcast_ref::<CoreError>() {
            return 1;
        }
    }
    2
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve(&cli.global)?;
    match cli.command {
        Command::Synth { root, images_per_task, size, tasks, groups } => {
            if let Some(r) = root {
                cfg.data.root = r;
            }
            set(&mut cfg.data.images_per_task, images_per_task);
            set(&mut cfg.data.image_size, size);
            set(&mut cfg.data.num_tasks, tasks);
            set(&mut cfg.data.num_groups, groups);
            synth(&cfg)
        }
        Command::Pretrain { epochs, resume, loss } => {
            set(&mut cfg.train.epochs, epochs);
            apply_loss_flags(&mut cfg, loss);
            cfg.validate()?;
            pretrain(&cfg, resume.as_deref())
        }
        Command::Finetune { task, ratio, from, scratch: _, steps } => {
            set(&mut cfg.train.task, task);
            set(&mut cfg.train.ratio, ratio);
            set(&mut cfg.train.finetune_steps, steps);
            if steps.is_some() {
                cfg.train.eval_every = cfg.train.eval_every.min(cfg.train.finetune_steps);
            }
            cfg.validate()?;
            finetune(&cfg, from.as_deref())
        }
        Command::Eval { checkpoint, task, split } => {
            set(&mut cfg.eval.split, split);
            let path = checkpoint.unwrap_or_else(|| cfg.out_dir.join("best.ckpt"));
            eval(&cfg, &path, task)
        }
        Command::Probe { checkpoint, level } => {
            set(&mut cfg.eval.level, level);
            probe(&cfg, checkpoint.as_deref())
        }
        Command::Export { checkpoint, output } => {
            let out = output.unwrap_or_else(|| cfg.out_dir.join("features.csv"));
            export(&cfg, checkpoint.as_deref(), &out)
        }
        Command::Gradcheck { probes, loss } => {
            set(&mut cfg.eval.gradcheck_probes, probes);
            apply_loss_flags(&mut cfg, loss);
            cfg.loss.validate()?;
            gradcheck(&cfg)
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn resolve(g: &GlobalArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::from_toml("")?,
    };
    set(&mut cfg.seed, g.seed);
    set(&mut cfg.workers, g.workers);
    set(&mut cfg.out_dir, g.out_dir.clone());
    if g.deterministic {
        cfg.deterministic = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn apply_loss_flags(cfg: &mut ExperimentConfig, f: LossFlags) {
    for (term, off) in [
        (LossTerm::Image, f.no_img),
        (LossTerm::Task, f.no_task),
        (LossTerm::Group, f.no_group),
        (LossTerm::Reconstruction, f.no_rec),
    ] {
        if off {
            cfg.loss.set_enabled(term, false);
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Writes the resolved configuration as `<dir>/<command>.config.toml`.
fn echo_config(cfg: &ExperimentConfig, dir: &Path, command: &str) -> Result<()> {
    create_dir(dir)?;
    let path = dir.join(format!("{command}.config.toml"));
    fs::write(&path, cfg.to_toml()?).with_context(|| format!("writing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// The corpus under `data.root`, split with the run seed if its manifest
/// carries no split tags.
fn load_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    let path = cfg.data.root.join("manifest.jsonl");
    let mut manifest = CorpusManifest::load(&path)?;
    if manifest.records.iter().any(|r| r.split.is_none()) {
        manifest = split_corpus(&manifest, cfg.seed)?;
    }
    Ok(Corpus::load(manifest)?)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint<f32>> {
    Ok(load_state::<f32>(path)?)
}

fn synth(cfg: &ExperimentConfig) -> Result<()> {
    let spec = cfg.synth_spec()?;
    let t = Instant::now();
    let manifest = generate_synthetic(&spec, &cfg.data.root)?;
    let manifest = split_corpus(&manifest, cfg.seed)?;
    let path = cfg.data.root.join("manifest.jsonl");
    manifest.write(&path)?;
    echo_config(cfg, &cfg.data.root, "synth")?;
    eprintln!(
        "{} images over {} tasks / {} groups in {:.1?}",
        manifest.records.len(),
        manifest.num_tasks(),
        manifest.num_groups(),
        t.elapsed()
    );
    println!("{}", path.display());
    Ok(())
}

fn pretrain(cfg: &ExperimentConfig, resume: Option<&Path>) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let (t, g) = (corpus.manifest.num_tasks(), corpus.manifest.num_groups());
    let mut trainer = match resume {
        Some(path) => {
            let tr = Pretrainer::resume(path, Some(cfg.train.epochs))?;
            eprintln!("resuming {} at epoch {}", path.display(), tr.epoch);
            tr
        }
        None => Pretrainer::new(
            ModelState::init(&cfg.model_config(t, g), cfg.seed)?,
            cfg.pretrain_config(),
            cfg.loss.clone(),
            cfg.augment.clone(),
            cfg.seed,
        )?,
    };
    trainer.workers = cfg.workers;
    let out = &cfg.out_dir;
    echo_config(cfg, out, "pretrain")?;
    let indices = corpus.select(|r| r.split == Some(Split::Train));
    eprintln!(
        "pre-training on {} images, {} parameters, epochs {}..={}",
        indices.len(),
        trainer.state.num_parameters(),
        trainer.epoch + 1,
        trainer.config.epochs
    );
    let log_path = out.join("pretrain_log.csv");
    let write_log = |tr: &Pretrainer| -> Result<()> {
        let mut text = String::from(EpochLog::CSV_HEADER);
        text.push('\n');
        for row in &tr.log {
            text += &row.csv_row();
            text.push('\n');
        }
        write_text(&log_path, &text)
    };
    let mut last_good = trainer.checkpoint()?;
    while !trainer.is_done() {
        let t0 = Instant::now();
        match trainer.run_epoch(&corpus, &indices) {
            Ok(row) => eprintln!("{}  ({:.1?})", row.csv_row(), t0.elapsed()),
            Err(e) => {
                let path = out.join(checkpoint_name("pretrain", last_good.meta.epoch));
                save_state(&path, &last_good)?;
                return Err(e).context(format!("training aborted; last good checkpoint is {}", path.display()));
            }
        }
        write_log(&trainer)?;
        last_good = trainer.checkpoint()?;
        let every = trainer.config.checkpoint_every;
        if every > 0 && trainer.epoch % every == 0 && !trainer.is_done() {
            save_state(out.join(checkpoint_name("pretrain", trainer.epoch)), &last_good)?;
        }
    }
    write_log(&trainer)?;
    let path = out.join(checkpoint_name("pretrain", trainer.epoch));
    save_state(&path, &last_good)?;
    println!("{}", path.display());
    Ok(())
}

fn finetune(cfg: &ExperimentConfig, from: Option<&Path>) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let task_id = cfg.train.task;
    let Some(task) = corpus.manifest.task(task_id).cloned() else {
        bail!(CoreError::InvalidArgument(format!("task {task_id} is not in the manifest")));
    };
    let manifest = subsample_annotations(&corpus.manifest, cfg.train.ratio, cfg.seed)?;
    let corpus = Corpus { manifest, ..corpus };
    let classes = task.num_classes as usize;
    let state = match from {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            segmentation_model(Some(&ckpt.state), &ckpt.state.config, classes, cfg.seed)?
        }
        None => {
            let (t, g) = (corpus.manifest.num_tasks(), corpus.manifest.num_groups());
            segmentation_model(None, &cfg.model_config(t, g), classes, cfg.seed)?
        }
    };
    let mut ft = Finetuner::new(state, &corpus, task_id, cfg.finetune_config(), cfg.augment.clone(), cfg.seed)?;
    ft.workers = cfg.workers;
    let out = &cfg.out_dir;
    echo_config(cfg, out, "finetune")?;
    eprintln!(
        "fine-tuning task {task_id} ({}) on {} labeled images, {} steps, {}",
        task.name,
        ft.labeled().len(),
        ft.config.steps,
        if from.is_some() { "pre-trained" } else { "from scratch" }
    );
    let log_path = out.join("finetune_log.csv");
    let mut log = fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    writeln!(log, "{}", FinetuneLog::csv_header(task.num_classes as u8))?;
    let mut io_err = None;
    ft.run(&corpus, |row| {
        eprintln!("{}", row.csv_row());
        if let Err(e) = writeln!(log, "{}", row.csv_row()) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e).context(format!("writing {}", log_path.display()));
    }
    save_state(out.join(checkpoint_name("finetune", ft.step)), &ft.checkpoint())?;
    let best = out.join("best.ckpt");
    save_state(&best, &ft.best_checkpoint())?;
    println!("{}", best.display());
    Ok(())
}

fn eval(cfg: &ExperimentConfig, path: &Path, task: Option<u32>) -> Result<()> {
    let ckpt = load_checkpoint(path)?;
    let corpus = load_corpus(cfg)?;
    let task_id = task.or_else(|| checkpoint_task(&ckpt)).unwrap_or(cfg.train.task);
    let split = cfg.eval.split;
    let report = evaluate(&ckpt.state, &corpus, task_id, split)?;
    echo_config(cfg, &cfg.out_dir, "eval")?;
    let csv = cfg.out_dir.join(format!("dice-task{task_id}-{}.csv", split.name()));
    write_text(&csv, &format!("{}\n{}\n", report.csv_header(), report.csv_row()))?;
    println!("{report}");
    Ok(())
}

/// The checkpoint's weights, or a seeded fresh model shaped for the corpus.
fn probe_state(cfg: &ExperimentConfig, corpus: &Corpus, checkpoint: Option<&Path>) -> Result<ModelState<f32>> {
    match checkpoint {
        Some(path) => Ok(load_checkpoint(path)?.state),
        None => {
            let (t, g) = (corpus.manifest.num_tasks(), corpus.manifest.num_groups());
            Ok(ModelState::init(&cfg.model_config(t, g), cfg.seed)?)
        }
    }
}

fn probe(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let state = probe_state(cfg, &corpus, checkpoint)?;
    let report = linear_probe(&state, &corpus, cfg.eval.level, cfg.seed)?;
    echo_config(cfg, &cfg.out_dir, "probe")?;
    let csv = cfg.out_dir.join(format!("probe-{}.csv", cfg.eval.level.name()));
    write_text(&csv, &format!("{}\n{}\n", ProbeReport::CSV_HEADER, report.csv_row()))?;
    println!("{}", ProbeReport::CSV_HEADER);
    println!("{}", report.csv_row());
    Ok(())
}

fn export(cfg: &ExperimentConfig, checkpoint: Option<&Path>, out: &Path) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let state = probe_state(cfg, &corpus, checkpoint)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let rows = export_features(&state, &corpus, out)?;
    echo_config(cfg, &cfg.out_dir, "export")?;
    eprintln!("{rows} rows");
    println!("{}", out.display());
    Ok(())
}

fn gradcheck(cfg: &ExperimentConfig) -> Result<()> {
    let check = PretextCheck {
        probes: cfg.eval.gradcheck_probes,
        seed: cfg.seed,
        loss: cfg.loss.clone(),
        ..Default::default()
    };
    let t = Instant::now();
    let report = check.run()?;
    echo_config(cfg, &cfg.out_dir, "gradcheck")?;
    println!("term,max_rel_error,tolerance,probes,status");
    let mut rows = vec![("L_total".to_string(), &report.total)];
    rows.extend(report.terms.iter().map(|(t, r)| (t.name().to_string(), r)));
    for ((name, r), (_, err, tol)) in rows.iter().zip(report.summary()) {
        let status = if err < tol { "ok" } else { "FAIL" };
        println!("{name},{err:.3e},{tol:e},{},{status}", r.probes.len());
    }
    eprintln!("checked in {:.1?}", t.elapsed());
    if !report.passed() {
        let worst = report.total.worst().map(|p| format!("{}[{}]", p.name, p.index)).unwrap_or_default();
        return Err(CheckFailed(format!("gradient check failed (worst total probe {worst})")).into());
    }
    Ok(())
}
