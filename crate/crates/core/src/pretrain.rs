//! Masked contrastive pretraining.

use std::io::Write;

use log::{error, warn};
use rand::seq::index::sample as sample_without_replacement;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datapipe::{AudioStore, Batch, BatchConfig, BatchStream, Manifest, SamplerSpec};
use crate::encoder::{EncoderConfig, Mode, Trunk, TrunkCache};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::numerics::ops::log_sum_exp;
use crate::numerics::{lr_at, Adam, AdamConfig, Parameterized, Real, ScheduleSpec, Tensor};
use crate::quantizer::{codebook_perplexity, diversity_loss, CodebookConfig, QuantizedTargets, Quantizer};
use crate::rng::SeedTree;

/// Boolean frame mask built from randomly started spans.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    pub mask: Vec<bool>,
    pub span: usize,
    pub p_start: f64,
}

impl MaskSpec {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| self.mask[i]).collect()
    }

    pub fn fraction(&self) -> f64 {
        if self.mask.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.mask.len() as f64
        }
    }
}

/// Every position starts a span with probability `p_start`; a span covers
/// `[i, min(i + span, len))`.
pub fn sample_mask(len: usize, p_start: f64, span: usize, rng: &mut impl Rng) -> Result<MaskSpec> {
    if len == 0 || span == 0 || !(0.0..=1.0).contains(&p_start) {
        return Err(Error::InvalidInput(format!(
            "mask needs len >= 1, span >= 1 and p_start in [0, 1]; got {len}, {span}, {p_start}"
        )));
    }
    let mut mask = vec![false; len];
    for i in 0..len {
        if rng.random_bool(p_start) {
            mask[i..(i + span).min(len)].fill(true);
        }
    }
    Ok(MaskSpec { mask, span, p_start })
}

/// `k` masked positions other than `target`: without replacement when at
/// least `k` candidates exist, with replacement otherwise.
pub fn sample_distractors(mask: &MaskSpec, target: usize, k: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if target >= mask.len() || !mask.mask[target] {
        return Err(Error::InvalidInput(format!("frame {target} is not masked")));
    }
    let candidates: Vec<usize> = (0..mask.len()).filter(|&i| i != target && mask.mask[i]).collect();
    if candidates.is_empty() {
        return Err(Error::InsufficientContext(target));
    }
    if candidates.len() >= k {
        Ok(sample_without_replacement(rng, candidates.len(), k)
            .into_iter()
            .map(|i| candidates[i])
            .collect())
    } else {
        Ok((0..k)
            .map(|_| candidates[rng.random_range(0..candidates.len())])
            .collect())
    }
}

fn cosine_f64(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("contrastive_loss", format!("{} vs {}", a.len(), b.len())));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidInput("cosine similarity of a zero-norm vector".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Log-sum-exp of the positive logit followed by the distractor logits in
/// ascending order, so the result does not depend on distractor order.
fn ordered_lse<T: Real>(positive: T, distractors: &mut [T]) -> T {
    distractors.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let mut all = Vec::with_capacity(distractors.len() + 1);
    all.push(positive);
    all.extend_from_slice(distractors);
    log_sum_exp(&all)
}

/// `-log( e^{cos(c,q)/kappa} / (e^{cos(c,q)/kappa} + sum_d e^{cos(c,d)/kappa}) )`
/// for one frame.
pub fn contrastive_loss(context: &[f64], target: &[f64], distractors: &[&[f64]], kappa: f64) -> Result<f64> {
    if !(kappa > 0.0) {
        return Err(Error::InvalidInput(format!("kappa {kappa} must be positive")));
    }
    if distractors.is_empty() {
        return Err(Error::InvalidInput("no distractors".into()));
    }
    let s0 = cosine_f64(context, target)? / kappa;
    let mut s: Vec<f64> = distractors
        .iter()
        .map(|d| Ok(cosine_f64(context, d)? / kappa))
        .collect::<Result<_>>()?;
    Ok(ordered_lse(s0, &mut s) - s0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    /// Number of distractors.
    pub k: usize,
    /// Similarity temperature.
    pub kappa: f64,
    /// Diversity weight.
    pub diversity_weight: f64,
    /// Draw distractors from every utterance of the batch, not just the target's.
    pub cross_utterance: bool,
    /// Drop distractors whose quantized vector equals the target exactly.
    pub exclude_identical: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            k: 100,
            kappa: 0.1,
            diversity_weight: 0.1,
            cross_utterance: false,
            exclude_identical: true,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || !(self.kappa > 0.0) || !(self.diversity_weight >= 0.0) {
            return Err(Error::Config(format!(
                "contrastive config needs K >= 1, kappa > 0, diversity weight >= 0: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    pub p_start: f64,
    pub span: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            p_start: 0.065,
            span: 10,
        }
    }
}

/// Per-step losses, logged every step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: u64,
    pub lr: f64,
    pub contrastive: f64,
    pub diversity: f64,
    pub total: f64,
    pub accuracy: f64,
    pub temperature: f64,
    pub masked_frames: usize,
    /// Masked frames that contributed (had at least one usable distractor).
    pub scored_frames: usize,
}

impl LossBreakdown {
    pub const TSV_HEADER: &'static str = "step\tlr\tcontrastive\tdiversity\ttotal\taccuracy\ttemperature";

    pub fn tsv_row(&self) -> String {
        format!(
            "{}\t{:e}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.step, self.lr, self.contrastive, self.diversity, self.total, self.accuracy, self.temperature
        )
    }
}

/// Result of [`masked_objective`].
#[derive(Clone, Debug)]
pub struct Objective<T: Real> {
    pub contrastive: f64,
    pub diversity: f64,
    pub total: f64,
    pub correct: usize,
    pub scored: usize,
    /// Gradients of `total` w.r.t. the predictions, target vectors and
    /// codebook usage.
    pub grad_pred: Tensor<T>,
    pub grad_targets: Tensor<T>,
    pub grad_usage: Tensor<T>,
}

impl<T: Real> Objective<T> {
    pub fn accuracy(&self) -> f64 {
        if self.scored == 0 {
            0.0
        } else {
            self.correct as f64 / self.scored as f64
        }
    }
}

/// Contrastive plus weighted diversity loss over `n` masked frames.
///
/// `pred` and `targets` are `[n, dim]`; `distractors[i]` indexes rows of
/// `targets` (`None` marks a frame without masked context); `usage` is
/// `[groups, entries]`. The contrastive term is averaged over scored frames.
pub fn masked_objective<T: Real>(
    pred: &Tensor<T>,
    targets: &Tensor<T>,
    distractors: &[Option<Vec<usize>>],
    usage: &Tensor<T>,
    config: &ContrastiveConfig,
) -> Result<Objective<T>> {
    let n = pred.rows();
    if targets.shape() != pred.shape() || distractors.len() != n {
        return Err(Error::shape(
            "masked_objective",
            format!("pred {:?}, targets {:?}, {} distractor sets", pred.shape(), targets.shape(), distractors.len()),
        ));
    }
    let dim = pred.cols();
    let kappa = T::lit(config.kappa);
    let norms = |x: &Tensor<T>| -> Result<Vec<T>> {
        (0..x.rows())
            .map(|r| {
                let v = x.row(r).iter().map(|&a| a * a).sum::<T>().sqrt();
                if v == T::zero() || !v.is_finite() {
                    Err(Error::InvalidInput(format!("row {r} has zero or non-finite norm")))
                } else {
                    Ok(v)
                }
            })
            .collect()
    };
    let pn = norms(pred)?;
    let qn = norms(targets)?;
    let cos = |i: usize, j: usize| -> T {
        let dot: T = pred.row(i).iter().zip(targets.row(j)).map(|(&a, &b)| a * b).sum();
        dot / (pn[i] * qn[j])
    };

    // First pass: which frames are scored.
    let mut kept: Vec<Option<Vec<usize>>> = Vec::with_capacity(n);
    for (i, d) in distractors.iter().enumerate() {
        kept.push(d.as_ref().and_then(|d| {
            let k: Vec<usize> = d
                .iter()
                .copied()
                .filter(|&j| !(config.exclude_identical && targets.row(j) == targets.row(i)))
                .collect();
            (!k.is_empty()).then_some(k)
        }));
    }
    let scored = kept.iter().filter(|k| k.is_some()).count();

    let mut grad_pred = Tensor::zeros(pred.shape());
    let mut grad_targets = Tensor::zeros(targets.shape());
    let mut contrastive = 0.0;
    let mut correct = 0;
    if scored > 0 {
        let inv_scored = T::one() / T::from_usize(scored).unwrap();
        let mut logits = Vec::new();
        for (i, k) in kept.iter().enumerate() {
            let Some(k) = k else { continue };
            let s0 = cos(i, i) / kappa;
            logits.clear();
            logits.extend(k.iter().map(|&j| cos(i, j) / kappa));
            let best = logits.iter().copied().fold(T::neg_infinity(), T::max);
            if s0 > best {
                correct += 1;
            }
            let mut sorted = logits.clone();
            let lse = ordered_lse(s0, &mut sorted);
            contrastive += (lse - s0).as_f64();

            // d loss / d s_j = softmax_j - [j is positive]
            let scatter = |j: usize, ds: T, gp: &mut [T], gq: &mut Tensor<T>| {
                let c = cos(i, j);
                let g = ds * inv_scored / kappa;
                let (a, b) = (pred.row(i), targets.row(j));
                let inv = T::one() / (pn[i] * qn[j]);
                let sa = c / (pn[i] * pn[i]);
                let sb = c / (qn[j] * qn[j]);
                let gqj = gq.row_mut(j);
                for x in 0..dim {
                    gp[x] = gp[x] + g * (b[x] * inv - a[x] * sa);
                    gqj[x] = gqj[x] + g * (a[x] * inv - b[x] * sb);
                }
            };
            let mut gp = vec![T::zero(); dim];
            scatter(i, (s0 - lse).exp() - T::one(), &mut gp, &mut grad_targets);
            for (&j, &s) in k.iter().zip(&logits) {
                scatter(j, (s - lse).exp(), &mut gp, &mut grad_targets);
            }
            grad_pred.row_mut(i).copy_from_slice(&gp);
        }
        contrastive /= scored as f64;
    }

    let (diversity, mut grad_usage) = if n > 0 {
        diversity_loss(usage)?
    } else {
        (0.0, Tensor::zeros(usage.shape()))
    };
    grad_usage.scale(T::lit(config.diversity_weight));
    Ok(Objective {
        contrastive,
        diversity,
        total: contrastive + config.diversity_weight * diversity,
        correct,
        scored,
        grad_pred,
        grad_targets,
        grad_usage,
    })
}

/// Trunk, quantizer and the projection from context to target space.
pub struct PretrainModel<T: Real> {
    pub trunk: Trunk<T>,
    pub quantizer: Quantizer<T>,
    pub final_proj: Linear<T>,
}

crate::parameterized!(PretrainModel { params: [], children: [trunk, quantizer, final_proj] });

impl<T: Real> PretrainModel<T> {
    pub fn new(encoder: EncoderConfig, codebook: CodebookConfig, rng: &mut impl Rng) -> Result<Self> {
        let trunk = Trunk::new(encoder, rng)?;
        let target_dim = codebook.dim;
        let quantizer = Quantizer::new(trunk.config.feature_dim(), codebook, rng)?;
        let final_proj = Linear::new(trunk.config.dim, target_dim, rng);
        Ok(Self {
            trunk,
            quantizer,
            final_proj,
        })
    }
}

/// Per-step random streams.
#[derive(Clone, Copy, Debug)]
pub struct StepSeeds {
    pub mask: SeedTree,
    pub distractors: SeedTree,
    pub quantizer: SeedTree,
    pub layerdrop: SeedTree,
}

impl StepSeeds {
    pub fn new(root: &SeedTree, step: u64) -> Self {
        Self {
            mask: root.child("mask").index(step),
            distractors: root.child("distractors").index(step),
            quantizer: root.child("quantizer").index(step),
            layerdrop: root.child("layerdrop").index(step),
        }
    }
}

fn to_real<T: Real>(xs: &[f32]) -> Vec<T> {
    xs.iter().map(|&x| T::from_f32(x).unwrap()).collect()
}

/// Forward pass over a batch and, when `backward` is set, gradient
/// accumulation into the model. Returns the losses (lr and step unset).
#[allow(clippy::too_many_arguments)]
pub fn forward_backward<T: Real>(
    model: &mut PretrainModel<T>,
    batch: &Batch,
    objective: &ContrastiveConfig,
    masking: &MaskConfig,
    temperature: f64,
    seeds: &StepSeeds,
    backward: bool,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let mut mask_rng = seeds.mask.rng();
    let mut distractor_rng = seeds.distractors.rng();
    let mut layerdrop_rng = seeds.layerdrop.rng();

    struct Item<T: Real> {
        cache: TrunkCache<T>,
        rows: usize,
        masked: Vec<usize>,
    }
    let mut items = Vec::with_capacity(batch.len());
    let mut gathered_frames: Vec<T> = Vec::new();
    let mut gathered_ctx: Vec<T> = Vec::new();
    let feature_dim = model.trunk.config.feature_dim();
    let dim = model.trunk.config.dim;
    for i in 0..batch.len() {
        let wave = to_real::<T>(batch.waveform(i));
        let (frames, fcache) = model.trunk.features.forward(&wave)?;
        let mask = sample_mask(frames.rows(), masking.p_start, masking.span, &mut mask_rng)?;
        let input = model.trunk.apply_mask(&frames, &mask.mask);
        let (ctx, ccache) = model
            .trunk
            .context
            .forward(&input, input.rows(), Mode::Train, &mut layerdrop_rng)?;
        let masked = mask.masked_indices();
        for &t in &masked {
            gathered_frames.extend_from_slice(frames.row(t));
            gathered_ctx.extend_from_slice(ctx.row(t));
        }
        items.push((
            Item {
                cache: TrunkCache {
                    features: fcache,
                    context: ccache,
                    mask: Some(mask.mask.clone()),
                },
                rows: frames.rows(),
                masked,
            },
            mask,
        ));
    }
    let n: usize = items.iter().map(|(it, _)| it.masked.len()).sum();
    if n == 0 {
        warn!("batch {:?} has no masked frames", batch.ids);
        return Ok(LossBreakdown {
            temperature,
            ..Default::default()
        });
    }

    // Distractor sets as indices into the gathered masked rows.
    let mut distractors: Vec<Option<Vec<usize>>> = Vec::with_capacity(n);
    if objective.cross_utterance {
        let global = MaskSpec {
            mask: vec![true; n],
            span: 1,
            p_start: 1.0,
        };
        for t in 0..n {
            distractors.push(sample_distractors(&global, t, objective.k, &mut distractor_rng).ok());
        }
    } else {
        let mut offset = 0;
        for (item, mask) in &items {
            let mut slot = vec![usize::MAX; item.rows];
            for (j, &t) in item.masked.iter().enumerate() {
                slot[t] = offset + j;
            }
            for &t in &item.masked {
                distractors.push(match sample_distractors(mask, t, objective.k, &mut distractor_rng) {
                    Ok(d) => Some(d.into_iter().map(|f| slot[f]).collect()),
                    Err(Error::InsufficientContext(_)) => None,
                    Err(e) => return Err(e),
                });
            }
            offset += item.masked.len();
        }
    }

    let z = Tensor::new(vec![n, feature_dim], gathered_frames)?;
    let c = Tensor::new(vec![n, dim], gathered_ctx)?;
    let (pred, proj_cache) = model.final_proj.forward(&c)?;
    let (q, q_cache) = model
        .quantizer
        .quantize(&z, Mode::Train, temperature, &mut seeds.quantizer.rng())?;
    let QuantizedTargets { vectors, usage, .. } = q;
    let obj = masked_objective(&pred, &vectors, &distractors, &usage, objective)?;
    let breakdown = LossBreakdown {
        contrastive: obj.contrastive,
        diversity: obj.diversity,
        total: obj.total,
        accuracy: obj.accuracy(),
        temperature,
        masked_frames: n,
        scored_frames: obj.scored,
        ..Default::default()
    };
    if !breakdown.total.is_finite() {
        error!("non-finite loss {breakdown:?} on batch {:?}", batch.ids);
        return Err(Error::NonFinite(format!("pretraining loss on batch {:?}", batch.ids)));
    }
    if !backward {
        return Ok(breakdown);
    }

    // Usage is the mean of n probability rows.
    let gv = model.quantizer.config.groups * model.quantizer.config.entries;
    let inv_n = T::one() / T::from_usize(n).unwrap();
    let grad_probs = Tensor::from_fn(&[n, gv], |k| obj.grad_usage.data()[k % gv] * inv_n);
    let gz = model.quantizer.backward(&q_cache, &obj.grad_targets, Some(&grad_probs));
    let gc = model.final_proj.backward(&proj_cache, &obj.grad_pred);

    let mut offset = 0;
    for (item, _) in &items {
        let mut g_ctx = Tensor::zeros(&[item.rows, dim]);
        let mut g_frames = Tensor::zeros(&[item.rows, feature_dim]);
        for (j, &t) in item.masked.iter().enumerate() {
            g_ctx.row_mut(t).copy_from_slice(gc.row(offset + j));
            g_frames.row_mut(t).copy_from_slice(gz.row(offset + j));
        }
        model.trunk.backward(&item.cache, &g_ctx, Some(&g_frames));
        offset += item.masked.len();
    }
    Ok(breakdown)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub encoder: EncoderConfig,
    pub codebook: CodebookConfig,
    pub objective: ContrastiveConfig,
    pub mask: MaskConfig,
    pub batch: BatchConfig,
    pub schedule: ScheduleSpec,
    pub adam: AdamConfig,
    pub alpha_language: f64,
    pub alpha_corpus: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            codebook: CodebookConfig::default(),
            objective: ContrastiveConfig::default(),
            mask: MaskConfig::default(),
            batch: BatchConfig::default(),
            schedule: ScheduleSpec::poly(5e-4, 32_000, 400_000),
            adam: AdamConfig::default(),
            alpha_language: 0.5,
            alpha_corpus: 0.5,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.codebook.validate()?;
        self.objective.validate()?;
        self.schedule.validate()?;
        if !(0.0..=1.0).contains(&self.mask.p_start) || self.mask.span == 0 {
            return Err(Error::Config(format!("invalid mask config {:?}", self.mask)));
        }
        Ok(())
    }
}

/// One optimizer update: gradients, clipping, Adam at `lr_at(schedule, step)`.
pub fn pretrain_step(
    model: &mut PretrainModel<f32>,
    adam: &mut Adam<f32>,
    batch: &Batch,
    config: &PretrainConfig,
    step: u64,
    root: &SeedTree,
) -> Result<LossBreakdown> {
    let lr = lr_at(&config.schedule, step)?;
    let temperature = config.codebook.temperature_at(step);
    model.zero_grad();
    let mut b = forward_backward(
        model,
        batch,
        &config.objective,
        &config.mask,
        temperature,
        &StepSeeds::new(root, step),
        true,
    )?;
    b.step = step;
    b.lr = lr;
    if b.masked_frames > 0 {
        adam.step(model.named_params_mut(), lr, |_| true)?;
    }
    Ok(b)
}

/// Codebook perplexity `sum_g exp(H(usage_g))` on `batch`, with usage the
/// noise-free assignment probabilities averaged over every frame.
pub fn probe_perplexity<T: Real>(model: &PretrainModel<T>, batch: &Batch) -> Result<f64> {
    let (g, v) = (model.quantizer.config.groups, model.quantizer.config.entries);
    let mut usage = Tensor::<f64>::zeros(&[g, v]);
    let mut frames = 0usize;
    let mut unused = SeedTree::new(0).rng();
    for i in 0..batch.len() {
        let z = model.trunk.feature_encode(&to_real::<T>(batch.waveform(i)))?;
        let (q, _) = model.quantizer.quantize(&z, Mode::Eval, 1.0, &mut unused)?;
        for t in 0..q.probs.rows() {
            for (u, p) in usage.data_mut().iter_mut().zip(q.probs.row(t)) {
                *u += p.as_f64();
            }
        }
        frames += z.rows();
    }
    if frames == 0 {
        return Err(Error::InvalidInput("probe batch has no frames".into()));
    }
    usage.scale(1.0 / frames as f64);
    Ok(codebook_perplexity(&usage))
}

/// Training loop state: model, optimizer, data stream and step counter.
pub struct Pretrainer {
    pub config: PretrainConfig,
    pub model: PretrainModel<f32>,
    pub adam: Adam<f32>,
    pub step: u64,
    pub seeds: SeedTree,
    stream: BatchStream,
}

impl Pretrainer {
    pub fn new(config: PretrainConfig, manifest: Manifest, audio: AudioStore, seed: u64) -> Result<Self> {
        config.validate()?;
        let seeds = SeedTree::new(seed);
        let model = PretrainModel::new(
            config.encoder.clone(),
            config.codebook.clone(),
            &mut seeds.child("init").rng(),
        )?;
        let spec = SamplerSpec::from_manifest(&manifest, config.alpha_language, config.alpha_corpus)?;
        let stream = BatchStream::new(manifest, audio, &spec, config.batch, seeds.child("sampler"))?;
        Ok(Self {
            adam: Adam::new(config.adam),
            config,
            model,
            step: 0,
            seeds,
            stream,
        })
    }

    pub fn batch(&self, step: u64) -> Result<Batch> {
        self.stream.batch(step)
    }

    pub fn train_step(&mut self) -> Result<LossBreakdown> {
        let batch = self.stream.batch(self.step)?;
        let b = pretrain_step(&mut self.model, &mut self.adam, &batch, &self.config, self.step, &self.seeds)?;
        self.step += 1;
        Ok(b)
    }

    /// Losses of the batch for `step` without updating anything.
    pub fn evaluate_step(&mut self, step: u64) -> Result<LossBreakdown> {
        let batch = self.stream.batch(step)?;
        let mut b = forward_backward(
            &mut self.model,
            &batch,
            &self.config.objective,
            &self.config.mask,
            self.config.codebook.temperature_at(step),
            &StepSeeds::new(&self.seeds, step),
            false,
        )?;
        b.step = step;
        b.lr = lr_at(&self.config.schedule, step)?;
        Ok(b)
    }

    /// Trains until `step == until`, writing one TSV row per update.
    pub fn run(&mut self, until: u64, log: &mut impl Write) -> Result<Vec<LossBreakdown>> {
        let mut out = Vec::new();
        while self.step < until {
            let b = self.train_step()?;
            writeln!(log, "{}", b.tsv_row())?;
            out.push(b);
        }
        Ok(out)
    }
}
