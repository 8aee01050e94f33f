//! Pre-training and fine-tuning.

pub mod finetune;
pub mod gradcheck;
pub mod objective;
pub mod optim;
pub mod pretrain;

pub use finetune::{checkpoint_task, segmentation_model, FinetuneConfig, FinetuneLog, Finetuner};
pub use gradcheck::{PretextCheck, PretextCheckReport};
pub use objective::{pretext_step, segmentation_step, PretextBatch, PretextEval, PretextObjective, SegmentationEval};
pub use optim::{poly_lr, pretrain_lr, Adam, PretrainSchedule};
pub use pretrain::{checkpoint_name, EpochLog, PretrainConfig, Pretrainer};

/// Order-preserving map over `items` on up to `workers` scoped threads.
pub fn parallel_map<I: Sync, O: Send>(items: &[I], workers: usize, f: impl Fn(&I) -> O + Sync) -> Vec<O> {
    let workers = workers.max(1).min(items.len().max(1));
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| {
                let f = &f;
                s.spawn(move || part.iter().map(f).collect::<Vec<O>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}
