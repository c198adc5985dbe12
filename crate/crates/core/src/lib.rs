//! Sentence-vector language modeling on a small deterministic tensor engine.
//!
//! The crate is organized around the pipeline it implements:
//!
//! - [`numerics`]: tensors, a reverse-mode tape, AdamW, schedules, clipping, EMA
//! - [`text`]: sentence segmentation, vocabulary, word-level tokenization
//! - [`nn`]: positional encoding, attention, transformer blocks, parameter store
//! - [`svae`]: the sentence autoencoder (encoder, feature fusion, decoder, focal loss)
//! - [`sllm`]: the sentence-level language model (embedding-free backbone,
//!   termination head, grafting, sentence-by-sentence generation)
//! - [`baseline`]: a token-level decoder-only LM used as the comparison point
//! - [`eval`]: perplexity, forward-pass counters, attention-cache accounting
//! - [`config`] / [`checkpoint`] / [`metrics`]: run configuration, persistence, CSV logs
//! - [`pcfg`]: a synthetic grammar for corpora with a membership oracle

pub mod baseline;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod nn;
pub mod numerics;
pub mod pcfg;
pub mod sllm;
pub mod svae;
pub mod text;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use nn::{AttentionMask, BlockConfig, BoundParams, ParamStore};
pub use numerics::{
    clip_grad_l2, ema_update, lr_at, AdamW, Ema, ScheduleConfig, Scalar, Tape, Tensor, Var,
};
pub use sllm::{GenerationTrace, SllmModel};
pub use svae::{SentenceToken, SvaeModel};
pub use text::{SentenceSpan, TokenSequence, Vocabulary};
