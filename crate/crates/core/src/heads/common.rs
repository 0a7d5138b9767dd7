use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datapipe::{AudioStore, Batch, ManifestRow};
use crate::encoder::{Mode, Trunk, TrunkCache, RECEPTIVE_FIELD};
use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, ScheduleSpec, Tensor};
use crate::pretrain::sample_mask;
use crate::rng::SeedTree;

/// Training settings shared by all fine-tuning heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub schedule: ScheduleSpec,
    /// Updates during which only the head is trained.
    pub freeze_trunk_updates: u64,
    /// Keep the convolutional feature encoder fixed for the whole run.
    pub freeze_feature_encoder: bool,
    /// Expected fraction of masked frames (span starts drawn with
    /// probability `mask_prob / mask_span`).
    pub mask_prob: f64,
    pub mask_span: usize,
    /// Stochastic depth rate of the context network.
    pub layerdrop: f64,
    /// Total-sample budget per batch (whole utterances, never cropped).
    pub batch_samples: usize,
    pub adam: AdamConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleSpec::tri_stage(5e-5, 20_000),
            freeze_trunk_updates: 0,
            freeze_feature_encoder: true,
            mask_prob: 0.5,
            mask_span: 10,
            layerdrop: 0.1,
            batch_samples: 480_000,
            adam: AdamConfig::default(),
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if !(0.0..=1.0).contains(&self.mask_prob) || self.mask_span == 0 {
            return Err(Error::Config(format!(
                "mask probability {} must be in [0, 1] with a positive span",
                self.mask_prob
            )));
        }
        if !(0.0..=1.0).contains(&self.layerdrop) {
            return Err(Error::Config(format!("layerdrop {} outside [0, 1]", self.layerdrop)));
        }
        let total = self.schedule.total_updates();
        if self.freeze_trunk_updates > total {
            return Err(Error::Config(format!(
                "freeze_trunk_updates {} exceeds the {total} scheduled updates",
                self.freeze_trunk_updates
            )));
        }
        if self.batch_samples == 0 {
            return Err(Error::Config("batch_samples must be positive".into()));
        }
        Ok(())
    }

    pub fn trunk_frozen(&self, step: u64) -> bool {
        step < self.freeze_trunk_updates
    }

    /// Whether the parameter `name` is updated at `step`.
    pub fn trainable(&self, name: &str, step: u64) -> bool {
        if name.starts_with("trunk.") {
            !self.trunk_frozen(step) && !(self.freeze_feature_encoder && name.starts_with("trunk.features."))
        } else {
            true
        }
    }
}

/// Uniformly drawn whole utterances up to the sample budget (at least one).
/// Returns the batch and the row indices it contains.
pub fn draw_batch(
    rows: &[ManifestRow],
    audio: &AudioStore,
    budget: usize,
    rng: &mut impl Rng,
) -> Result<(Batch, Vec<usize>)> {
    let usable: Vec<usize> = (0..rows.len())
        .filter(|&i| rows[i].num_samples >= RECEPTIVE_FIELD)
        .collect();
    if usable.is_empty() {
        return Err(Error::InvalidInput("no utterance is long enough for the encoder".into()));
    }
    let mut picked = Vec::new();
    let mut total = 0;
    loop {
        let i = usable[rng.random_range(0..usable.len())];
        let n = rows[i].num_samples;
        if !picked.is_empty() && total + n > budget {
            break;
        }
        picked.push(i);
        total += n;
        if total >= budget {
            break;
        }
    }
    let refs: Vec<&ManifestRow> = picked.iter().map(|&i| &rows[i]).collect();
    Ok((Batch::from_rows(&refs, audio)?, picked))
}

/// Trunk forward for fine-tuning: span masking in training mode, none in
/// evaluation.
pub fn encode(
    trunk: &Trunk<f32>,
    waveform: &[f32],
    config: &FinetuneConfig,
    mode: Mode,
    seeds: &SeedTree,
) -> Result<(Tensor<f32>, TrunkCache<f32>)> {
    let (frames, features) = trunk.features.forward(waveform)?;
    let mask = if mode == Mode::Train && config.mask_prob > 0.0 {
        let p_start = config.mask_prob / config.mask_span as f64;
        Some(sample_mask(frames.rows(), p_start, config.mask_span, &mut seeds.child("mask").rng())?.mask)
    } else {
        None
    };
    let input = match &mask {
        Some(m) => trunk.apply_mask(&frames, m),
        None => frames,
    };
    let (ctx, context) = trunk
        .context
        .forward(&input, input.rows(), mode, &mut seeds.child("layerdrop").rng())?;
    Ok((ctx, TrunkCache { features, context, mask }))
}

/// Backward into the trunk, skipping whatever is frozen at `step`.
pub fn trunk_backward(
    trunk: &mut Trunk<f32>,
    cache: &TrunkCache<f32>,
    grad: &Tensor<f32>,
    config: &FinetuneConfig,
    step: u64,
) {
    if config.trunk_frozen(step) {
        return;
    }
    if config.freeze_feature_encoder {
        trunk.backward_to_frames(cache, grad);
    } else {
        trunk.backward(cache, grad, None);
    }
}

pub fn warn_skipped(what: &str, id: &str, why: &str) {
    warn!("skipping {what} {id}: {why}");
}
