//! Temperature-based multilingual sampling.
//!
//! Languages are drawn with probability proportional to `(n_l / N)^alpha`.
//! Sampling is two-level: a corpus is drawn first (corpora are treated like
//! languages, weighted by their total size), then a language within it.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::manifest::Manifest;

/// `p_l = (n_l/N)^alpha / sum_k (n_k/N)^alpha`.
pub fn temperature_distribution(quantities: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if quantities.is_empty() {
        return Err(Error::InvalidInput("no quantities to sample from".into()));
    }
    if let Some(q) = quantities.iter().find(|&&q| !(q > 0.0) || !q.is_finite()) {
        return Err(Error::InvalidInput(format!("quantity {q} must be positive")));
    }
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidInput(format!("alpha {alpha} must be nonnegative")));
    }
    let total: f64 = quantities.iter().sum();
    // Work in the log domain so extreme ratios do not underflow.
    let logs: Vec<f64> = quantities.iter().map(|&q| alpha * (q / total).ln()).collect();
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / z).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub id: String,
    /// `(language code, n_l)` pairs.
    pub languages: Vec<(String, f64)>,
}

impl CorpusSpec {
    pub fn total(&self) -> f64 {
        self.languages.iter().map(|(_, n)| n).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerSpec {
    pub corpora: Vec<CorpusSpec>,
    pub alpha_language: f64,
    pub alpha_corpus: f64,
}

impl SamplerSpec {
    /// Quantities are total samples per (corpus, language) in the manifest.
    pub fn from_manifest(manifest: &Manifest, alpha_language: f64, alpha_corpus: f64) -> Result<Self> {
        let mut totals: BTreeMap<&str, BTreeMap<&str, f64>> = BTreeMap::new();
        for r in &manifest.rows {
            *totals
                .entry(r.corpus.as_str())
                .or_default()
                .entry(r.language.as_str())
                .or_default() += r.num_samples as f64;
        }
        let spec = Self {
            corpora: totals
                .into_iter()
                .map(|(c, langs)| CorpusSpec {
                    id: c.to_string(),
                    languages: langs.into_iter().map(|(l, n)| (l.to_string(), n)).collect(),
                })
                .collect(),
            alpha_language,
            alpha_corpus,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.corpora.is_empty() || self.corpora.iter().any(|c| c.languages.is_empty()) {
            return Err(Error::Config("sampler needs at least one language per corpus".into()));
        }
        for a in [self.alpha_language, self.alpha_corpus] {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Config(format!("upsampling factor {a} outside [0, 1]")));
            }
        }
        if self
            .corpora
            .iter()
            .flat_map(|c| &c.languages)
            .any(|(_, n)| !(*n > 0.0))
        {
            return Err(Error::Config("all language quantities must be positive".into()));
        }
        Ok(())
    }

    pub fn corpus_probs(&self) -> Result<Vec<f64>> {
        let totals: Vec<f64> = self.corpora.iter().map(CorpusSpec::total).collect();
        temperature_distribution(&totals, self.alpha_corpus)
    }

    pub fn language_probs(&self, corpus: usize) -> Result<Vec<f64>> {
        let q: Vec<f64> = self.corpora[corpus].languages.iter().map(|(_, n)| *n).collect();
        temperature_distribution(&q, self.alpha_language)
    }

    /// Closed-form joint probabilities, flattened in corpus-major order.
    pub fn joint(&self) -> Result<Vec<f64>> {
        let pc = self.corpus_probs()?;
        let mut out = Vec::new();
        for (c, p) in pc.iter().enumerate() {
            for pl in self.language_probs(c)? {
                out.push(p * pl);
            }
        }
        Ok(out)
    }

    /// Flat index of `(corpus, language)` in [`SamplerSpec::joint`] order.
    pub fn flat_index(&self, corpus: usize, language: usize) -> usize {
        self.corpora[..corpus].iter().map(|c| c.languages.len()).sum::<usize>() + language
    }

    pub fn sampler(&self) -> Result<TwoLevelSampler> {
        self.validate()?;
        let corpus = WeightedIndex::new(self.corpus_probs()?)
            .map_err(|e| Error::Config(e.to_string()))?;
        let languages = (0..self.corpora.len())
            .map(|c| {
                WeightedIndex::new(self.language_probs(c)?).map_err(|e| Error::Config(e.to_string()))
            })
            .collect::<Result<_>>()?;
        Ok(TwoLevelSampler { corpus, languages })
    }
}

/// Precomputed draw tables for a [`SamplerSpec`].
#[derive(Clone, Debug)]
pub struct TwoLevelSampler {
    corpus: WeightedIndex<f64>,
    languages: Vec<WeightedIndex<f64>>,
}

impl TwoLevelSampler {
    /// Draws `(corpus index, language index within the corpus)`.
    pub fn sample(&self, rng: &mut impl Rng) -> (usize, usize) {
        let c = self.corpus.sample(rng);
        (c, self.languages[c].sample(rng))
    }
}

/// Draws one `(corpus id, language code)` pair.
pub fn two_level_sample<'a>(spec: &'a SamplerSpec, rng: &mut impl Rng) -> Result<(&'a str, &'a str)> {
    let (c, l) = spec.sampler()?.sample(rng);
    let corpus = &spec.corpora[c];
    Ok((corpus.id.as_str(), corpus.languages[l].0.as_str()))
}
