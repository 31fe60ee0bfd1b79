//! Toy masked-diffusion language model inference with a two-stage adaptive
//! KV cache.
//!
//! The [`model`] module provides a small bidirectional transformer with a
//! spliced partial forward pass; [`kvcache`] stores per-position K/V states;
//! [`selection`] decides which positions to recompute; [`decoder`] runs the
//! unmasking loop under several strategies and cache policies; [`analysis`]
//! turns traces into plot-ready tables.

pub mod analysis;
pub mod decoder;
pub mod error;
pub mod kvcache;
pub mod model;
pub mod selection;
pub mod tensor;
pub mod trace;

pub use decoder::{
    generate, CachePolicy, DecodeConfig, Decoder, MaskedUpdate, SequenceState, Strategy, TraceOptions,
};
pub use error::{Error, Result};
pub use kvcache::{CacheStats, KVCache, KVSnapshot};
pub use model::{ForwardOutput, Model, ModelConfig, Precision, TokenId};
pub use selection::{CertaintyParams, RolloutParams, RolloutState, SelectionOutcome};
pub use trace::{DecodeTrace, DecodedToken, StepRecord};
