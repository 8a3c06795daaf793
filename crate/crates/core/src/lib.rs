//! Counterfactual debiasing for abstractive summarization at desk scale.
//!
//! The crate holds a small encoder-decoder ([`model`]), dynamic
//! cross-attention partitioning ([`attention`]), counterfactual decoder
//! training ([`ict`]), the per-step consistency predictor ([`dda`]), the
//! debiased decoders ([`decode`]), and the synthetic corpus with its metrics
//! ([`data`], [`eval`]).

pub mod attention;
pub mod data;
pub mod dda;
pub mod decode;
pub mod error;
pub mod eval;
pub mod graph;
pub mod ict;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod scalar;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use model::{DecoderStepOutput, EncoderOutput, Model, ModelConfig, Stage};
pub use scalar::Scalar;
pub use vocab::{SpecialTokens, TokenId, Vocabulary};
