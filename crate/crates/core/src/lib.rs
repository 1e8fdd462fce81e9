//! Segment-recurrent transformer acoustic model.
//!
//! Utterances are split into phoneme chunks with aligned mel frames. Each
//! chunk is encoded and decoded on its own, while the encoder and decoder
//! self-attention layers also attend to a fixed-size cache of hidden states
//! from earlier chunks of the same utterance. The cache is detached, so
//! gradients stay inside the current chunk.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod chunker;
pub mod config;
pub mod corpus;
pub mod error;
pub mod gradcheck;
pub mod memory;
pub mod model;
pub mod optim;
pub mod params;
pub mod reference;
pub mod symbols;
pub mod synth;
pub mod tensor;
pub mod toy_corpus;
pub mod train;
pub mod verify;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use config::{ModelConfig, RunConfig, StopRule};
pub use memory::CachedMemory;
pub use model::STransformer;
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
