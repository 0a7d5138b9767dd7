//! Corpus manifests, audio loading, multilingual sampling, batching and the
//! synthetic corpus generator.

mod batch;
mod manifest;
pub mod sampler;
pub mod synth;
pub mod wav;

pub use batch::{crop_and_batch, crop_offset, AudioStore, Batch, BatchConfig, BatchStream};
pub use manifest::{Manifest, ManifestRow, MANIFEST_HEADER};
pub use sampler::{temperature_distribution, two_level_sample, CorpusSpec, SamplerSpec, TwoLevelSampler};
pub use synth::{generate_synthetic_corpus, LanguageProfile, SynthConfig, SyntheticCorpus};
