//! Per-video feature containers, corpus manifests, and synthetic corpus
//! generators.

mod container;
mod manifest;
mod synth;

pub use container::{read_video, write_video, VideoFeatures};
pub use manifest::{load_corpus, CorpusManifest, ManifestEntry, MANIFEST_FILE};
pub use synth::{
    synth_labeled_corpus, synth_pretrain_corpus, write_corpus, LabeledSpec, LatentStructure,
    PretrainSpec, DEFAULT_STRUCT_SEED,
};
