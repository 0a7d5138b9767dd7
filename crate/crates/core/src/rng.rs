//! Hierarchical seeding.
//!
//! A run owns one root seed. Each consumer (sampler, masking, quantizer noise,
//! layerdrop, ...) derives its own stream by label, and per-step streams are
//! derived by index, so adding draws in one consumer never shifts another and
//! any step can be replayed without carrying generator state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type RunRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SeedTree {
    seed: [u8; 32],
}

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"root");
        h.update(seed.to_le_bytes());
        Self {
            seed: h.finalize().into(),
        }
    }

    pub fn child(&self, label: &str) -> Self {
        let mut h = Sha256::new();
        h.update(self.seed);
        h.update(b"/");
        h.update(label.as_bytes());
        Self {
            seed: h.finalize().into(),
        }
    }

    pub fn index(&self, i: u64) -> Self {
        let mut h = Sha256::new();
        h.update(self.seed);
        h.update(b"#");
        h.update(i.to_le_bytes());
        Self {
            seed: h.finalize().into(),
        }
    }

    pub fn rng(&self) -> RunRng {
        ChaCha8Rng::from_seed(self.seed)
    }
}
