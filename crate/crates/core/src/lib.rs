//! Reverse-dictionary toolkit: learn to map dictionary glosses onto target
//! word embeddings.

pub mod dataio;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod multilingual;
pub mod multitask;
pub mod synth;
pub mod tensor;
pub mod tokenizers;
pub mod train;

pub use dataio::{Batch, CorpusStats, GlossEntry, LoadMode};
pub use encoders::{EncoderConfig, EncoderKind, SeqBatch};
pub use error::{Error, Result};
pub use metrics::EvalReport;
pub use model::TrainedModel;
pub use multilingual::{MultilingualCorpus, RunManifest, Tricks};
pub use multitask::{DwaState, Task, TaskHead, TaskSpec};
pub use synth::SynthConfig;
pub use tensor::{AdamW, AdamWConfig, Gradients, ParamStore, Tape, Tensor, Var};
pub use tokenizers::{TokenId, TokenizerKind, TokenizerModel, TokenizerSpec};
pub use train::{TrainOptions, TrainReport};
