use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ctc::{beam_decode, ctc_loss, greedy_decode, Fusion, Vocabulary};
use crate::datapipe::{AudioStore, Manifest, ManifestRow};
use crate::encoder::{Mode, Trunk};
use crate::error::{Error, Result};
use crate::metrics::{error_rate, ErrorRateReport, Unit};
use crate::nn::Linear;
use crate::numerics::ops::LogSoftmax;
use crate::numerics::{lr_at, Adam, Parameterized, Tensor};
use crate::rng::SeedTree;

use super::common::{draw_batch, encode, trunk_backward, warn_skipped, FinetuneConfig};
use super::StepReport;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CtcHeadConfig {
    /// Output symbols; built from the training transcripts when absent.
    pub vocabulary: Option<Vocabulary>,
    pub train: FinetuneConfig,
    pub beam_width: usize,
}

impl Default for CtcHeadConfig {
    fn default() -> Self {
        Self {
            vocabulary: None,
            train: FinetuneConfig::default(),
            beam_width: 50,
        }
    }
}

/// Trunk plus a linear projection to the output symbols.
pub struct CtcModel<T: crate::numerics::Real> {
    pub trunk: Trunk<T>,
    pub head: Linear<T>,
}

crate::parameterized!(CtcModel { params: [], children: [trunk, head] });

impl CtcModel<f32> {
    pub fn new(trunk: Trunk<f32>, vocab_size: usize, rng: &mut impl Rng) -> Self {
        let head = Linear::new(trunk.config.dim, vocab_size, rng);
        Self { trunk, head }
    }

    /// Per-frame log distributions over the symbols (evaluation mode).
    pub fn log_probs(&self, waveform: &[f32]) -> Result<Tensor<f32>> {
        let mut unused = SeedTree::new(0).rng();
        let ctx = self.trunk.contextualize(&self.trunk.feature_encode(waveform)?, Mode::Eval, &mut unused)?;
        let logits = self.head.apply(&ctx)?;
        Ok(LogSoftmax::forward(&logits)?.0)
    }
}

/// Decoding strategy for [`CtcFinetuner::transcribe`].
#[derive(Clone, Copy, Debug)]
pub enum Decoder<'a> {
    Greedy,
    Beam { width: usize, fusion: Fusion<'a> },
}

/// Decodes one utterance; returns `(text, score)` where the greedy score is
/// the best-path log probability.
pub fn decode_log_probs(log_probs: &Tensor<f32>, vocab: &Vocabulary, decoder: Decoder) -> Result<(String, f64)> {
    match decoder {
        Decoder::Greedy => {
            let score = (0..log_probs.rows())
                .map(|t| log_probs.row(t).iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64)
                .sum();
            Ok((vocab.decode(&greedy_decode(log_probs)), score))
        }
        Decoder::Beam { width, fusion } => {
            let h = beam_decode(log_probs, vocab, fusion, width)?;
            Ok((vocab.decode(&h.tokens), h.score))
        }
    }
}

/// `(id, hypothesis, score)` for every row.
pub fn transcribe(
    model: &CtcModel<f32>,
    vocab: &Vocabulary,
    rows: &[ManifestRow],
    audio: &AudioStore,
    decoder: Decoder,
) -> Result<Vec<(String, String, f64)>> {
    rows.iter()
        .map(|r| {
            let lp = model.log_probs(audio.get(&r.id)?)?;
            let (text, score) = decode_log_probs(&lp, vocab, decoder)?;
            Ok((r.id.clone(), text, score))
        })
        .collect()
}

/// Error rate of `hyps` (as returned by [`transcribe`]) against the row transcripts.
pub fn score_transcripts(rows: &[ManifestRow], hyps: &[(String, String, f64)], unit: Unit) -> Result<ErrorRateReport> {
    let refs: Vec<&str> = rows.iter().map(|r| r.transcript.as_deref().unwrap_or("")).collect();
    let hyps: Vec<&str> = hyps.iter().map(|h| h.1.as_str()).collect();
    error_rate(&refs, &hyps, unit)
}

pub struct CtcFinetuner {
    pub config: CtcHeadConfig,
    pub model: CtcModel<f32>,
    pub vocab: Vocabulary,
    pub adam: Adam<f32>,
    pub step: u64,
    pub seeds: SeedTree,
    rows: Vec<ManifestRow>,
    audio: AudioStore,
    targets: Vec<Vec<usize>>,
}

impl CtcFinetuner {
    pub fn new(trunk: Trunk<f32>, manifest: &Manifest, audio: AudioStore, config: CtcHeadConfig, seed: u64) -> Result<Self> {
        config.train.validate()?;
        if config.beam_width == 0 {
            return Err(Error::Config("beam_width must be at least 1".into()));
        }
        let mut texts = Vec::with_capacity(manifest.rows.len());
        for r in &manifest.rows {
            match &r.transcript {
                Some(t) => texts.push(t.as_str()),
                None => return Err(Error::Manifest {
                    line: 0,
                    msg: format!("utterance {} has no transcript", r.id),
                }),
            }
        }
        let vocab = match &config.vocabulary {
            Some(v) => v.clone(),
            None => Vocabulary::from_transcripts(texts.iter().copied()),
        };
        let mut missing = std::collections::BTreeSet::new();
        let mut targets = Vec::with_capacity(texts.len());
        for t in &texts {
            match vocab.encode(t) {
                Ok(ids) => targets.push(ids),
                Err(Error::OutOfVocabulary(m)) => {
                    missing.extend(m);
                    targets.push(Vec::new());
                }
                Err(e) => return Err(e),
            }
        }
        if !missing.is_empty() {
            return Err(Error::OutOfVocabulary(missing.into_iter().collect()));
        }
        let seeds = SeedTree::new(seed);
        let mut trunk = trunk;
        trunk.context.layerdrop = config.train.layerdrop;
        let model = CtcModel::new(trunk, vocab.len(), &mut seeds.child("head-init").rng());
        Ok(Self {
            adam: Adam::new(config.train.adam),
            config,
            model,
            vocab,
            step: 0,
            seeds,
            rows: manifest.rows.clone(),
            audio,
            targets,
        })
    }

    pub fn train_step(&mut self) -> Result<StepReport> {
        let step = self.step;
        let cfg = &self.config.train;
        let lr = lr_at(&cfg.schedule, step)?;
        let step_seeds = self.seeds.child("step").index(step);
        let (batch, picked) = draw_batch(&self.rows, &self.audio, cfg.batch_samples, &mut step_seeds.child("sampler").rng())?;
        self.model.zero_grad();
        let mut total = 0.0;
        let mut used = 0usize;
        // Each utterance's loss is weighted 1/len(batch); skipped ones simply contribute nothing.
        let weight = 1.0 / batch.len() as f32;
        for (i, &row) in picked.iter().enumerate() {
            let item_seeds = step_seeds.index(i as u64);
            let (ctx, cache) = encode(&self.model.trunk, batch.waveform(i), cfg, Mode::Train, &item_seeds)?;
            let (logits, head_cache) = self.model.head.forward(&ctx)?;
            let (lp, ls) = LogSoftmax::forward(&logits)?;
            let out = match ctc_loss(&lp, &self.targets[row]) {
                Ok(o) => o,
                Err(Error::InfeasibleAlignment { frames, required }) => {
                    warn_skipped("utterance", &batch.ids[i], &format!("{frames} frames cannot emit {required} labels"));
                    continue;
                }
                Err(e) => return Err(e),
            };
            if !out.nll.is_finite() {
                return Err(Error::NonFinite(format!("CTC loss on utterance {}", batch.ids[i])));
            }
            total += out.nll;
            used += 1;
            let mut g = out.grad;
            g.scale(weight);
            let g_logits = ls.backward(&g);
            let g_ctx = self.model.head.backward(&head_cache, &g_logits);
            trunk_backward(&mut self.model.trunk, &cache, &g_ctx, cfg, step);
        }
        let norm = if used > 0 {
            let cfg = self.config.train.clone();
            self.adam.step(self.model.named_params_mut(), lr, |n| cfg.trainable(n, step))?
        } else {
            0.0
        };
        self.step += 1;
        Ok(StepReport {
            step,
            lr,
            loss: if used > 0 { total / used as f64 } else { 0.0 },
            items: used,
            grad_norm: norm,
        })
    }

    pub fn run(&mut self, until: u64, log: &mut impl Write) -> Result<Vec<StepReport>> {
        let mut out = Vec::new();
        while self.step < until {
            let r = self.train_step()?;
            writeln!(log, "{}", r.tsv_row())?;
            out.push(r);
        }
        Ok(out)
    }

    pub fn transcribe(&self, rows: &[ManifestRow], audio: &AudioStore, decoder: Decoder) -> Result<Vec<(String, String, f64)>> {
        transcribe(&self.model, &self.vocab, rows, audio, decoder)
    }

    pub fn evaluate(&self, rows: &[ManifestRow], audio: &AudioStore, decoder: Decoder, unit: Unit) -> Result<ErrorRateReport> {
        let hyps = self.transcribe(rows, audio, decoder)?;
        score_transcripts(rows, &hyps, unit)
    }

    pub fn training_rows(&self) -> &[ManifestRow] {
        &self.rows
    }

    pub fn training_audio(&self) -> &AudioStore {
        &self.audio
    }
}
