//! Error rates, corpus BLEU and accuracy.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    /// Whitespace-separated tokens.
    Word,
    /// Whitespace-separated phoneme symbols.
    Phoneme,
    /// Characters, whitespace ignored.
    Char,
}

impl std::str::FromStr for Unit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "word" => Ok(Unit::Word),
            "phoneme" => Ok(Unit::Phoneme),
            "char" => Ok(Unit::Char),
            other => Err(Error::Config(format!("unknown unit {other:?}; expected word, phoneme or char"))),
        }
    }
}

/// NFC-normalized tokens of `text`.
pub fn tokenize(text: &str, unit: Unit) -> Vec<String> {
    let norm: String = text.nfc().collect();
    match unit {
        Unit::Word | Unit::Phoneme => norm.split_whitespace().map(String::from).collect(),
        Unit::Char => norm.chars().filter(|c| !c.is_whitespace()).map(String::from).collect(),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_length: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

/// Minimum-edit alignment counts with unit costs. Among equal-cost
/// alignments, substitutions are preferred over deletion+insertion pairs.
pub fn align<S: PartialEq>(reference: &[S], hypothesis: &[S]) -> EditCounts {
    let (n, m) = (reference.len(), hypothesis.len());
    // (cost, subs, dels, ins) per cell, compared on cost only.
    let mut prev: Vec<(usize, usize, usize, usize)> = (0..=m).map(|j| (j, 0, 0, j)).collect();
    let mut cur = vec![(0, 0, 0, 0); m + 1];
    for i in 1..=n {
        cur[0] = (i, 0, i, 0);
        for j in 1..=m {
            let same = reference[i - 1] == hypothesis[j - 1];
            let diag = prev[j - 1];
            let diag = if same {
                diag
            } else {
                (diag.0 + 1, diag.1 + 1, diag.2, diag.3)
            };
            let del = (prev[j].0 + 1, prev[j].1, prev[j].2 + 1, prev[j].3);
            let ins = (cur[j - 1].0 + 1, cur[j - 1].1, cur[j - 1].2, cur[j - 1].3 + 1);
            let mut best = diag;
            for c in [del, ins] {
                if c.0 < best.0 {
                    best = c;
                }
            }
            cur[j] = best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let (_, s, d, ins) = prev[m];
    EditCounts {
        substitutions: s,
        deletions: d,
        insertions: ins,
        reference_length: n,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRateReport {
    pub unit: Unit,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_length: usize,
    /// Corpus-level `(S + D + I) / reference length`.
    pub rate: f64,
    /// Per-utterance rates; `None` where the reference is empty.
    pub per_utterance: Vec<Option<f64>>,
}

impl ErrorRateReport {
    /// Unweighted mean of the defined per-utterance rates.
    pub fn mean_utterance_rate(&self) -> Option<f64> {
        let rates: Vec<f64> = self.per_utterance.iter().flatten().copied().collect();
        (!rates.is_empty()).then(|| rates.iter().sum::<f64>() / rates.len() as f64)
    }

    pub fn tsv_header() -> &'static str {
        "unit\trate\tsubstitutions\tdeletions\tinsertions\treference_length\tmean_utterance_rate"
    }

    pub fn tsv_row(&self) -> String {
        let unit = match self.unit {
            Unit::Word => "word",
            Unit::Phoneme => "phoneme",
            Unit::Char => "char",
        };
        format!(
            "{unit}\t{:.6}\t{}\t{}\t{}\t{}\t{}",
            self.rate,
            self.substitutions,
            self.deletions,
            self.insertions,
            self.reference_length,
            self.mean_utterance_rate().map_or("nan".into(), |r| format!("{r:.6}"))
        )
    }
}

pub fn error_rate<R: AsRef<str>, H: AsRef<str>>(refs: &[R], hyps: &[H], unit: Unit) -> Result<ErrorRateReport> {
    if refs.len() != hyps.len() {
        return Err(Error::InvalidInput(format!(
            "{} references but {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let mut total = EditCounts::default();
    let mut per_utterance = Vec::with_capacity(refs.len());
    for (r, h) in refs.iter().zip(hyps) {
        let c = align(&tokenize(r.as_ref(), unit), &tokenize(h.as_ref(), unit));
        per_utterance.push((c.reference_length > 0).then(|| c.errors() as f64 / c.reference_length as f64));
        total.substitutions += c.substitutions;
        total.deletions += c.deletions;
        total.insertions += c.insertions;
        total.reference_length += c.reference_length;
    }
    if total.reference_length == 0 {
        return Err(Error::InvalidInput("reference corpus is empty; error rate undefined".into()));
    }
    Ok(ErrorRateReport {
        unit,
        substitutions: total.substitutions,
        deletions: total.deletions,
        insertions: total.insertions,
        reference_length: total.reference_length,
        rate: total.errors() as f64 / total.reference_length as f64,
        per_utterance,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    /// Modified n-gram precisions for n = 1..4 (smoothed for n >= 2).
    pub precisions: [f64; 4],
    pub brevity_penalty: f64,
    pub hypothesis_length: usize,
    pub reference_length: usize,
    /// In [0, 100].
    pub bleu: f64,
}

impl BleuReport {
    pub fn tsv_header() -> &'static str {
        "bleu\tp1\tp2\tp3\tp4\tbrevity_penalty\thypothesis_length\treference_length"
    }

    pub fn tsv_row(&self) -> String {
        let p = &self.precisions;
        format!(
            "{:.4}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}",
            self.bleu, p[0], p[1], p[2], p[3], self.brevity_penalty, self.hypothesis_length, self.reference_length
        )
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-4 over whitespace tokens, one reference per hypothesis.
pub fn corpus_bleu<R: AsRef<str>, H: AsRef<str>>(refs: &[R], hyps: &[H]) -> Result<BleuReport> {
    if hyps.is_empty() {
        return Err(Error::InvalidInput("hypothesis corpus is empty".into()));
    }
    if refs.len() != hyps.len() {
        return Err(Error::InvalidInput(format!(
            "{} references but {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (r, h) in refs.iter().zip(hyps) {
        let r = tokenize(r.as_ref(), Unit::Word);
        let h = tokenize(h.as_ref(), Unit::Word);
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let rc = ngram_counts(&r, n);
            for (g, c) in ngram_counts(&h, n) {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
                totals[n - 1] += c;
            }
        }
    }
    let mut precisions = [0.0; 4];
    for n in 0..4 {
        precisions[n] = if n == 0 {
            if totals[0] == 0 {
                0.0
            } else {
                matches[0] as f64 / totals[0] as f64
            }
        } else {
            (matches[n] + 1) as f64 / (totals[n] + 1) as f64
        };
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).min(0.0).exp()
    };
    let bleu = if precisions[0] == 0.0 || brevity_penalty == 0.0 {
        0.0
    } else {
        100.0 * brevity_penalty * (precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0).exp()
    };
    Ok(BleuReport {
        precisions,
        brevity_penalty,
        hypothesis_length: hyp_len,
        reference_length: ref_len,
        bleu: bleu.min(100.0),
    })
}

/// Fraction of positions where `predictions` equals `labels`.
pub fn accuracy<L: PartialEq>(labels: &[L], predictions: &[L]) -> Result<f64> {
    if labels.is_empty() || labels.len() != predictions.len() {
        return Err(Error::InvalidInput(format!(
            "accuracy needs equal nonempty inputs, got {} and {}",
            labels.len(),
            predictions.len()
        )));
    }
    let hits = labels.iter().zip(predictions).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / labels.len() as f64)
}
