use std::collections::BTreeSet;
use std::io::Write;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datapipe::{AudioStore, Manifest, ManifestRow};
use crate::encoder::{Mode, Trunk};
use crate::error::{Error, Result};
use crate::metrics::accuracy;
use crate::nn::Linear;
use crate::numerics::ops::CrossEntropy;
use crate::numerics::{lr_at, Adam, Parameterized, Real, Tensor};
use crate::rng::SeedTree;

use super::common::{draw_batch, encode, trunk_backward, FinetuneConfig};
use super::StepReport;

/// Which manifest column holds the class label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    Language,
    Transcript,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    /// Allowed labels; taken from the training rows when absent.
    pub labels: Option<Vec<String>>,
    pub label_source: LabelSource,
    pub train: FinetuneConfig,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            labels: None,
            label_source: LabelSource::Language,
            train: FinetuneConfig::default(),
        }
    }
}

fn label_of(row: &ManifestRow, source: LabelSource) -> Result<&str> {
    match source {
        LabelSource::Language => Ok(&row.language),
        LabelSource::Transcript => row.transcript.as_deref().map(str::trim).ok_or_else(|| Error::Manifest {
            line: 0,
            msg: format!("utterance {} has no label in the transcript column", row.id),
        }),
    }
}

/// Mean over frames, then a linear layer to class logits.
pub struct ClassifierModel<T: Real> {
    pub trunk: Trunk<T>,
    pub head: Linear<T>,
}

crate::parameterized!(ClassifierModel { params: [], children: [trunk, head] });

/// Average of the rows of `x` as a `[1, cols]` tensor.
pub fn mean_pool<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (n, d) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(&[1, d]);
    let inv = T::one() / T::from_usize(n).unwrap();
    for r in 0..n {
        for (o, &v) in out.data_mut().iter_mut().zip(x.row(r)) {
            *o = *o + v * inv;
        }
    }
    out
}

impl<T: Real> ClassifierModel<T> {
    pub fn new(trunk: Trunk<T>, classes: usize, rng: &mut impl Rng) -> Self {
        let head = Linear::new(trunk.config.dim, classes, rng);
        Self { trunk, head }
    }

    /// Class logits for one utterance (evaluation mode).
    pub fn logits(&self, waveform: &[T]) -> Result<Vec<T>> {
        let mut unused = SeedTree::new(0).rng();
        let ctx = self.trunk.contextualize(&self.trunk.feature_encode(waveform)?, Mode::Eval, &mut unused)?;
        Ok(self.head.apply(&mean_pool(&ctx))?.data().to_vec())
    }
}

pub struct ClassifierFinetuner {
    pub config: ClassifierConfig,
    pub model: ClassifierModel<f32>,
    pub labels: Vec<String>,
    pub adam: Adam<f32>,
    pub step: u64,
    pub seeds: SeedTree,
    rows: Vec<ManifestRow>,
    audio: AudioStore,
    targets: Vec<usize>,
}

impl ClassifierFinetuner {
    pub fn new(trunk: Trunk<f32>, manifest: &Manifest, audio: AudioStore, config: ClassifierConfig, seed: u64) -> Result<Self> {
        config.train.validate()?;
        let mut seen = Vec::with_capacity(manifest.rows.len());
        for r in &manifest.rows {
            seen.push(label_of(r, config.label_source)?.to_string());
        }
        let labels: Vec<String> = match &config.labels {
            Some(l) => {
                let unknown: BTreeSet<&String> = seen.iter().filter(|s| !l.contains(s)).collect();
                if !unknown.is_empty() {
                    return Err(Error::InvalidInput(format!(
                        "labels outside the label set: {:?}",
                        unknown.into_iter().collect::<Vec<_>>()
                    )));
                }
                l.clone()
            }
            None => seen.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect(),
        };
        if labels.is_empty() {
            return Err(Error::InvalidInput("no labeled utterances".into()));
        }
        if labels.len() < 2 {
            warn!("only one class ({}); classification is trivial", labels[0]);
        }
        for l in &labels {
            if !seen.contains(l) {
                warn!("class {l} has no training examples");
            }
        }
        let targets = seen.iter().map(|s| labels.iter().position(|l| l == s).unwrap()).collect();
        let seeds = SeedTree::new(seed);
        let mut trunk = trunk;
        trunk.context.layerdrop = config.train.layerdrop;
        let model = ClassifierModel::new(trunk, labels.len(), &mut seeds.child("head-init").rng());
        Ok(Self {
            adam: Adam::new(config.train.adam),
            config,
            model,
            labels,
            step: 0,
            seeds,
            rows: manifest.rows.clone(),
            audio,
            targets,
        })
    }

    pub fn train_step(&mut self) -> Result<StepReport> {
        let step = self.step;
        let cfg = self.config.train.clone();
        let lr = lr_at(&cfg.schedule, step)?;
        let step_seeds = self.seeds.child("step").index(step);
        let (batch, picked) = draw_batch(&self.rows, &self.audio, cfg.batch_samples, &mut step_seeds.child("sampler").rng())?;
        self.model.zero_grad();
        let weight = 1.0 / batch.len() as f32;
        let mut total = 0.0;
        for (i, &row) in picked.iter().enumerate() {
            let (ctx, cache) = encode(&self.model.trunk, batch.waveform(i), &cfg, Mode::Train, &step_seeds.index(i as u64))?;
            let pooled = mean_pool(&ctx);
            let (logits, head_cache) = self.model.head.forward(&pooled)?;
            let (loss, ce) = CrossEntropy::forward(&logits, &[self.targets[row]], 0.0, None)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("classification loss on utterance {}", batch.ids[i])));
            }
            total += loss as f64;
            let g_pooled = self.model.head.backward(&head_cache, &ce.backward(weight));
            let inv = 1.0 / ctx.rows() as f32;
            let g_ctx = Tensor::from_fn(ctx.shape(), |k| g_pooled.data()[k % ctx.cols()] * inv);
            trunk_backward(&mut self.model.trunk, &cache, &g_ctx, &cfg, step);
        }
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

    pub fn predict(&self, rows: &[ManifestRow], audio: &AudioStore) -> Result<Vec<(String, String, f64)>> {
        predict(&self.model, &self.labels, rows, audio)
    }

    pub fn evaluate(&self, rows: &[ManifestRow], audio: &AudioStore) -> Result<f64> {
        score_predictions(rows, &self.predict(rows, audio)?, self.config.label_source)
    }
}

/// `(id, predicted label, log probability of that label)` per row.
pub fn predict(
    model: &ClassifierModel<f32>,
    labels: &[String],
    rows: &[ManifestRow],
    audio: &AudioStore,
) -> Result<Vec<(String, String, f64)>> {
    rows.iter()
        .map(|r| {
            let logits: Vec<f64> = model.logits(audio.get(&r.id)?)?.iter().map(|&v| v as f64).collect();
            let best = (0..logits.len())
                .max_by(|&a, &b| logits[a].total_cmp(&logits[b]).then(b.cmp(&a)))
                .unwrap();
            let lse = crate::numerics::ops::log_sum_exp(&logits);
            Ok((r.id.clone(), labels[best].clone(), logits[best] - lse))
        })
        .collect()
}

pub fn score_predictions(rows: &[ManifestRow], preds: &[(String, String, f64)], source: LabelSource) -> Result<f64> {
    let truth = rows
        .iter()
        .map(|r| label_of(r, source).map(String::from))
        .collect::<Result<Vec<_>>>()?;
    let preds: Vec<String> = preds.iter().map(|p| p.1.clone()).collect();
    accuracy(&truth, &preds)
}
