use std::io::Write;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::datapipe::{AudioStore, Manifest, ManifestRow};
use crate::encoder::{Mode, Trunk};
use crate::error::{Error, Result};
use crate::metrics::{corpus_bleu, BleuReport};
use crate::nn::{sinusoidal_positions, AttentionMask, BlockCache, Embedding, LayerNorm, Linear, LinearCache, TransformerBlock};
use crate::numerics::ops::{matmul, matmul_nt, matmul_tn_acc, CrossEntropy, LayerNormOp, LogSoftmax};
use crate::numerics::{lr_at, Adam, Parameterized, Real, Tensor};
use crate::rng::SeedTree;

use super::bpe::{language_tag, Bpe};
use super::common::{draw_batch, encode, trunk_backward, FinetuneConfig};
use super::StepReport;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TranslationMode {
    /// One direction, decoding starts from `<s>`.
    Bilingual,
    /// Several directions; a target-language tag replaces `<s>`.
    Multilingual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seq2SeqConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub bpe_merges: usize,
    pub label_smoothing: f64,
    pub beam: usize,
    /// Longest generated output, in subword tokens (excluding `</s>`).
    pub max_target_len: usize,
    pub mode: TranslationMode,
    /// Target language for rows whose text carries no `<2xx>` prefix.
    pub target_language: String,
    pub train: FinetuneConfig,
}

impl Default for Seq2SeqConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            dim: 128,
            heads: 2,
            ffn_dim: 512,
            bpe_merges: 1000,
            label_smoothing: 0.1,
            beam: 5,
            max_target_len: 64,
            mode: TranslationMode::Bilingual,
            target_language: "en".into(),
            train: FinetuneConfig {
                mask_prob: 0.15,
                mask_span: 5,
                ..FinetuneConfig::default()
            },
        }
    }
}

impl Seq2SeqConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label smoothing {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        if self.beam == 0 {
            return Err(Error::Config("beam must be at least 1".into()));
        }
        if self.depth == 0 || self.dim == 0 || self.ffn_dim == 0 || self.max_target_len == 0 {
            return Err(Error::Config("decoder depth, dims and max_target_len must be positive".into()));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} heads do not divide decoder dim {}",
                self.heads, self.dim
            )));
        }
        Ok(())
    }
}

/// Splits an optional leading `<2xx>` tag off a target text.
fn split_tag(text: &str) -> (Option<&str>, &str) {
    let t = text.trim_start();
    if let Some(rest) = t.strip_prefix("<2") {
        if let Some(end) = rest.find('>') {
            let lang = &rest[..end];
            if !lang.is_empty() && !lang.contains(char::is_whitespace) {
                return (Some(lang), rest[end + 1..].trim_start());
            }
        }
    }
    (None, t)
}

/// Trunk, a projection to the decoder width, and a transformer decoder whose
/// output layer shares the token embedding.
pub struct Seq2SeqModel<T: Real> {
    pub trunk: Trunk<T>,
    pub bridge: Linear<T>,
    pub embed: Embedding<T>,
    pub blocks: Vec<TransformerBlock<T>>,
    pub final_norm: LayerNorm<T>,
}

crate::parameterized!(Seq2SeqModel { params: [], children: [trunk, bridge, embed, blocks, final_norm] });

pub struct DecoderCache<T: Real> {
    ids: crate::numerics::ops::EmbeddingLookup,
    bridge: LinearCache<T>,
    blocks: Vec<BlockCache<T>>,
    norm: LayerNormOp<T>,
    hidden: Tensor<T>,
}

impl<T: Real> Seq2SeqModel<T> {
    /// `start_tokens` are re-initialized as copies of `<s>` so that a tag
    /// starts from the same point as the bilingual start token.
    pub fn new(trunk: Trunk<T>, config: &Seq2SeqConfig, vocab_size: usize, start_tokens: &[usize], seeds: &SeedTree) -> Result<Self> {
        let bridge = Linear::new(trunk.config.dim, config.dim, &mut seeds.child("bridge").rng());
        let mut embed = Embedding::new(vocab_size, config.dim, &mut seeds.child("embed").rng());
        let bos = embed.table.value.row(1).to_vec();
        for &t in start_tokens {
            embed.table.value.row_mut(t).copy_from_slice(&bos);
        }
        let blocks = (0..config.depth)
            .map(|i| TransformerBlock::new(config.dim, config.heads, config.ffn_dim, true, &mut seeds.child("block").index(i as u64).rng()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            trunk,
            bridge,
            embed,
            blocks,
            final_norm: LayerNorm::new(config.dim),
        })
    }

    fn dim(&self) -> usize {
        self.embed.table.value.cols()
    }

    /// Teacher-forced decoder pass over `inputs` attending to `context`.
    /// Returns logits `[inputs.len(), vocab]`.
    pub fn decode_forward(&self, context: &Tensor<T>, inputs: &[usize]) -> Result<(Tensor<T>, DecoderCache<T>)> {
        let (memory, bridge) = self.bridge.forward(context)?;
        let (mut x, ids) = self.embed.forward(inputs)?;
        let d = self.dim();
        x.scale(T::lit((d as f64).sqrt()));
        x.add_assign(&sinusoidal_positions(inputs.len(), d));
        let self_mask = AttentionMask {
            valid_keys: inputs.len(),
            causal: true,
        };
        let mem_mask = AttentionMask::full(memory.rows());
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(&x, self_mask, Some((&memory, mem_mask)))?;
            x = y;
            caches.push(c);
        }
        let (hidden, norm) = self.final_norm.forward(&x)?;
        let logits = matmul_nt(&hidden, &self.embed.table.value);
        Ok((
            logits,
            DecoderCache {
                ids,
                bridge,
                blocks: caches,
                norm,
                hidden,
            },
        ))
    }

    /// Backward of [`Self::decode_forward`]; returns the gradient w.r.t. the
    /// trunk context.
    pub fn decode_backward(&mut self, cache: &DecoderCache<T>, grad_logits: &Tensor<T>) -> Tensor<T> {
        let gh = matmul(grad_logits, &self.embed.table.value);
        matmul_tn_acc(&mut self.embed.table.grad, grad_logits, &cache.hidden);
        let mut gx = self.final_norm.backward(&cache.norm, &gh);
        let mut gmem: Option<Tensor<T>> = None;
        for (b, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            let (g, gm) = b.backward(c, &gx);
            gx = g;
            if let Some(gm) = gm {
                match &mut gmem {
                    Some(acc) => acc.add_assign(&gm),
                    None => gmem = Some(gm),
                }
            }
        }
        gx.scale(T::lit((self.dim() as f64).sqrt()));
        self.embed.backward(&cache.ids, &gx);
        let gmem = gmem.expect("decoder blocks always cross-attend");
        self.bridge.backward(&cache.bridge, &gmem)
    }

    /// Next-token log distribution after `prefix`.
    fn next_log_probs(&self, context: &Tensor<T>, prefix: &[usize]) -> Result<Vec<f64>> {
        let (logits, _) = self.decode_forward(context, prefix)?;
        let last = logits.slice_rows(prefix.len() - 1, prefix.len());
        let (lp, _) = LogSoftmax::forward(&last)?;
        Ok(lp.row(0).iter().map(|v| v.as_f64()).collect())
    }

    /// Beam search from `start`; hypotheses are ranked by mean token log
    /// probability (including `</s>`). Returns tokens without start or end.
    pub fn beam_search(&self, context: &Tensor<T>, start: usize, bpe: &Bpe, beam: usize, max_len: usize) -> Result<(Vec<usize>, f64)> {
        let allowed = bpe.output_mask();
        let eos = bpe.eos();
        let mut alive: Vec<(Vec<usize>, f64)> = vec![(vec![start], 0.0)];
        let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();
        let norm = |toks: &[usize], s: f64| s / (toks.len() - 1) as f64;
        for step in 0..=max_len {
            let mut cands: Vec<(Vec<usize>, f64)> = Vec::new();
            for (prefix, score) in &alive {
                let lp = self.next_log_probs(context, prefix)?;
                let mut order: Vec<usize> = (0..lp.len()).filter(|&c| allowed[c]).collect();
                order.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
                for &c in order.iter().take(beam) {
                    // At the length limit only `</s>` may follow.
                    if step == max_len && c != eos {
                        continue;
                    }
                    let mut p = prefix.clone();
                    p.push(c);
                    cands.push((p, score + lp[c]));
                }
                if step == max_len && !order.iter().take(beam).any(|&c| c == eos) {
                    let mut p = prefix.clone();
                    p.push(eos);
                    cands.push((p, score + lp[eos]));
                }
            }
            cands.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            alive.clear();
            for (rank, (toks, s)) in cands.into_iter().enumerate() {
                if *toks.last().unwrap() == eos {
                    if rank < beam {
                        finished.push((toks, s));
                    }
                } else if alive.len() < beam {
                    alive.push((toks, s));
                }
            }
            if alive.is_empty() || finished.len() >= beam {
                break;
            }
        }
        let (toks, s) = finished
            .into_iter()
            .max_by(|a, b| norm(&a.0, a.1).total_cmp(&norm(&b.0, b.1)).then_with(|| b.0.cmp(&a.0)))
            .ok_or_else(|| Error::InvalidInput("beam search produced no hypothesis".into()))?;
        let score = norm(&toks, s);
        Ok((toks[1..toks.len() - 1].to_vec(), score))
    }
}

/// Start token for text whose target language is `lang`.
pub fn start_token(bpe: &Bpe, config: &Seq2SeqConfig, lang: Option<&str>) -> Result<usize> {
    match config.mode {
        TranslationMode::Bilingual => Ok(bpe.bos()),
        TranslationMode::Multilingual => bpe.tag(lang.unwrap_or(&config.target_language)),
    }
}

/// `(id, hypothesis, score)` per row. A `<2xx>` prefix on the row's
/// transcript selects the target language in multilingual mode.
pub fn translate(
    model: &Seq2SeqModel<f32>,
    bpe: &Bpe,
    config: &Seq2SeqConfig,
    rows: &[ManifestRow],
    audio: &AudioStore,
) -> Result<Vec<(String, String, f64)>> {
    let mut unused = SeedTree::new(0).rng();
    rows.iter()
        .map(|r| {
            let lang = r.transcript.as_deref().and_then(|t| split_tag(t).0);
            let start = start_token(bpe, config, lang)?;
            let frames = model.trunk.feature_encode(audio.get(&r.id)?)?;
            let ctx = model.trunk.contextualize(&frames, Mode::Eval, &mut unused)?;
            let (toks, score) = model.beam_search(&ctx, start, bpe, config.beam, config.max_target_len)?;
            Ok((r.id.clone(), bpe.decode(&toks), score))
        })
        .collect()
}

/// Corpus BLEU of `hyps` against the row transcripts (tags stripped).
pub fn score_translations(rows: &[ManifestRow], hyps: &[(String, String, f64)]) -> Result<BleuReport> {
    let refs: Vec<&str> = rows.iter().map(|r| split_tag(r.transcript.as_deref().unwrap_or("")).1).collect();
    let hyps: Vec<&str> = hyps.iter().map(|h| h.1.as_str()).collect();
    corpus_bleu(&refs, &hyps)
}

struct Example {
    row: usize,
    start: usize,
    target: Vec<usize>,
}

pub struct Seq2SeqFinetuner {
    pub config: Seq2SeqConfig,
    pub model: Seq2SeqModel<f32>,
    pub bpe: Bpe,
    pub adam: Adam<f32>,
    pub step: u64,
    pub seeds: SeedTree,
    rows: Vec<ManifestRow>,
    audio: AudioStore,
    examples: Vec<Example>,
}

impl Seq2SeqFinetuner {
    /// `manifest` transcripts hold target-language text, optionally prefixed
    /// by a `<2xx>` tag naming the target language.
    pub fn new(trunk: Trunk<f32>, manifest: &Manifest, audio: AudioStore, config: Seq2SeqConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut kept = Vec::new();
        for (i, r) in manifest.rows.iter().enumerate() {
            let text = r.transcript.as_deref().unwrap_or("");
            let (lang, body) = split_tag(text);
            if body.trim().is_empty() {
                warn!("skipping utterance {}: empty target text", r.id);
                continue;
            }
            kept.push((i, lang.unwrap_or(&config.target_language).to_string(), body.to_string()));
        }
        if kept.is_empty() {
            return Err(Error::InvalidInput("no utterance has target text".into()));
        }
        let tags: Vec<String> = match config.mode {
            TranslationMode::Bilingual => Vec::new(),
            TranslationMode::Multilingual => {
                let set: std::collections::BTreeSet<&str> = kept.iter().map(|k| k.1.as_str()).collect();
                set.into_iter().map(String::from).collect()
            }
        };
        let bpe = Bpe::train(kept.iter().map(|k| k.2.as_str()), config.bpe_merges, &tags);
        let mut examples = Vec::with_capacity(kept.len());
        for (row, lang, body) in &kept {
            let start = match config.mode {
                TranslationMode::Bilingual => bpe.bos(),
                TranslationMode::Multilingual => bpe.tag(lang)?,
            };
            examples.push(Example {
                row: *row,
                start,
                target: bpe.encode(body),
            });
        }
        let seeds = SeedTree::new(seed);
        let starts: Vec<usize> = tags.iter().map(|t| bpe.id(&language_tag(t)).unwrap()).collect();
        let mut trunk = trunk;
        trunk.context.layerdrop = config.train.layerdrop;
        let model = Seq2SeqModel::new(trunk, &config, bpe.len(), &starts, &seeds.child("decoder-init"))?;
        Ok(Self {
            adam: Adam::new(config.train.adam),
            config,
            model,
            bpe,
            step: 0,
            seeds,
            rows: manifest.rows.clone(),
            audio,
            examples,
        })
    }

    /// Cross-entropy (with the configured smoothing) of one example; the
    /// gradient is accumulated into the model scaled by `weight`.
    fn example_loss(&mut self, ex: usize, waveform: &[f32], seeds: &SeedTree, step: u64, weight: f32, backward: bool) -> Result<f64> {
        let cfg = self.config.train.clone();
        let (ctx, cache) = encode(&self.model.trunk, waveform, &cfg, if backward { Mode::Train } else { Mode::Eval }, seeds)?;
        let ex = &self.examples[ex];
        let mut inputs = vec![ex.start];
        inputs.extend(&ex.target);
        let mut targets = ex.target.clone();
        targets.push(self.bpe.eos());
        let (logits, dcache) = self.model.decode_forward(&ctx, &inputs)?;
        let mask = self.bpe.output_mask();
        let (loss, ce) = CrossEntropy::forward(&logits, &targets, self.config.label_smoothing, Some(&mask))?;
        if backward {
            let gl = ce.backward(weight);
            let gctx = self.model.decode_backward(&dcache, &gl);
            trunk_backward(&mut self.model.trunk, &cache, &gctx, &cfg, step);
        }
        Ok(loss.as_f64())
    }

    pub fn train_step(&mut self) -> Result<StepReport> {
        let step = self.step;
        let lr = lr_at(&self.config.train.schedule, step)?;
        let step_seeds = self.seeds.child("step").index(step);
        let rows: Vec<ManifestRow> = self.examples.iter().map(|e| self.rows[e.row].clone()).collect();
        let (batch, picked) = draw_batch(&rows, &self.audio, self.config.train.batch_samples, &mut step_seeds.child("sampler").rng())?;
        self.model.zero_grad();
        let weight = 1.0 / batch.len() as f32;
        let mut total = 0.0;
        for (i, &ex) in picked.iter().enumerate() {
            let loss = self.example_loss(ex, batch.waveform(i), &step_seeds.index(i as u64), step, weight, true)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("translation loss on utterance {}", batch.ids[i])));
            }
            total += loss;
        }
        let cfg = self.config.train.clone();
        let norm = self.adam.step(self.model.named_params_mut(), lr, |n| cfg.trainable(n, step))?;
        self.step += 1;
        Ok(StepReport {
            step,
            lr,
            loss: total / picked.len() as f64,
            items: picked.len(),
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

    /// Mean teacher-forced loss over the training examples without masking
    /// or updates.
    pub fn training_loss(&mut self) -> Result<f64> {
        let seeds = self.seeds.child("eval");
        let mut total = 0.0;
        for ex in 0..self.examples.len() {
            let id = self.rows[self.examples[ex].row].id.clone();
            let w = self.audio.get(&id)?.to_vec();
            total += self.example_loss(ex, &w, &seeds, self.step, 0.0, false)?;
        }
        Ok(total / self.examples.len() as f64)
    }

    pub fn translate(&self, rows: &[ManifestRow], audio: &AudioStore) -> Result<Vec<(String, String, f64)>> {
        translate(&self.model, &self.bpe, &self.config, rows, audio)
    }

    pub fn evaluate(&self, rows: &[ManifestRow], audio: &AudioStore) -> Result<BleuReport> {
        score_translations(rows, &self.translate(rows, audio)?)
    }

    pub fn training_rows(&self) -> Vec<ManifestRow> {
        self.examples.iter().map(|e| self.rows[e.row].clone()).collect()
    }

    pub fn training_audio(&self) -> &AudioStore {
        &self.audio
    }
}
