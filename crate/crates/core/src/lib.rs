//! Cross-lingual self-supervised speech representation learning at desk scale.
//!
//! The crate covers the full pipeline: a synthetic multilingual corpus and
//! temperature-based sampler ([`datapipe`]), a convolutional feature encoder
//! with a transformer context network ([`encoder`]), Gumbel-softmax product
//! quantization ([`quantizer`]), the masked contrastive pretraining objective
//! ([`pretrain`]), CTC training and LM-fused decoding ([`ctc`]), the three
//! fine-tuning heads ([`heads`]), scoring ([`metrics`]) and the run plumbing
//! used by the command-line tool ([`config`], [`checkpoint`], [`run`]).
//!
//! Everything is written against a small tensor substrate with hand-derived
//! gradients ([`numerics`], [`nn`]); there is no autodiff graph.

pub mod checkpoint;
pub mod config;
pub mod ctc;
pub mod datapipe;
pub mod encoder;
mod error;
pub mod heads;
pub mod metrics;
pub mod nn;
pub mod numerics;
pub mod pretrain;
pub mod quantizer;
pub mod rng;
pub mod run;

pub use error::{Error, Result};
