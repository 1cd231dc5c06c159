//! Masked feature modelling over precomputed video features.
//!
//! The pipeline pretrains a graph-attention block without labels by masking
//! object feature vectors and predicting the video's visual-token target,
//! then transfers the block into a bottom-up event-recognition head that is
//! fine-tuned on a small labeled corpus.
//!
//! Modules:
//! - [`numerics`]: dense matrices, a per-step gradient tape, finite-difference checks
//! - [`tokenizer`]: codebook quantization and video-level token targets
//! - [`gat`]: the graph-attention block shared by pretraining and recognition
//! - [`mfm`]: feature masking and the unsupervised pretraining loop
//! - [`vigat`]: the supervised recognition head, transfer init and fine-tuning
//! - [`dataio`]: binary feature containers and synthetic corpus generators
//! - [`ckpt`]: named-tensor checkpoint files

mod binio;
mod seeding;

pub mod ckpt;
pub mod dataio;
pub mod error;
pub mod exec;
pub mod gat;
pub mod metrics;
pub mod mfm;
pub mod numerics;
pub mod opt;
pub mod tokenizer;
pub mod vigat;

pub use error::{Error, Result};
pub use numerics::{Matrix, Real};
