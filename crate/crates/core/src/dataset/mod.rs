//! Corpus manifests, volumes, splitting, and the synthetic generator.

pub mod manifest;
pub mod sampler;
pub mod split;
pub mod synth;
pub mod volume;

pub use manifest::{CorpusManifest, ImageRecord, Split, TaskInfo};
pub use sampler::{epoch_batches, Corpus, Sampling};
pub use split::{annotation_count, split_corpus, split_counts, subsample_annotations};
pub use synth::{generate_synthetic, synthesize, Shape, SynthSpec, SynthTask, Texture};
pub use volume::{slice_volume, Image, Mask, Volume};
