//! Backoff n-gram language model read from ARPA text.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const SENTENCE_START: &str = "<s>";
pub const SENTENCE_END: &str = "</s>";
pub const UNKNOWN: &str = "<unk>";

/// log10 probability used for words when the model has no `<unk>` entry.
pub const UNKNOWN_FLOOR_LOG10: f64 = -10.0;

#[derive(Clone, Copy, Debug, PartialEq)]
struct Entry {
    log10_prob: f64,
    log10_backoff: f64,
}

#[derive(Clone, Debug)]
pub struct NgramLm {
    order: usize,
    vocab: HashMap<String, u32>,
    words: Vec<String>,
    /// Entries keyed by word-id sequence, one map per order.
    grams: Vec<HashMap<Vec<u32>, Entry>>,
}

fn arpa_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Arpa {
        line,
        msg: msg.into(),
    }
}

impl NgramLm {
    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut counts: Vec<usize> = Vec::new();
        let mut lm = NgramLm {
            order: 0,
            vocab: HashMap::new(),
            words: Vec::new(),
            grams: Vec::new(),
        };
        #[derive(PartialEq)]
        enum Section {
            Preamble,
            Data,
            Grams(usize),
            End,
        }
        let mut section = Section::Preamble;
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if line == "\\data\\" {
                section = Section::Data;
                continue;
            }
            if line == "\\end\\" {
                section = Section::End;
                continue;
            }
            if let Some(rest) = line.strip_prefix('\\') {
                let n = rest
                    .strip_suffix("-grams:")
                    .and_then(|n| n.parse::<usize>().ok())
                    .ok_or_else(|| arpa_err(lineno, format!("unknown section {line}")))?;
                if n == 0 || n > counts.len() {
                    return Err(arpa_err(lineno, format!("{n}-grams not announced in \\data\\")));
                }
                section = Section::Grams(n);
                continue;
            }
            match section {
                Section::Preamble | Section::End => {}
                Section::Data => {
                    let (k, v) = line
                        .strip_prefix("ngram ")
                        .and_then(|r| r.split_once('='))
                        .ok_or_else(|| arpa_err(lineno, "expected 'ngram N=count'"))?;
                    let n: usize = k.trim().parse().map_err(|_| arpa_err(lineno, "bad order"))?;
                    let c: usize = v.trim().parse().map_err(|_| arpa_err(lineno, "bad count"))?;
                    if n != counts.len() + 1 {
                        return Err(arpa_err(lineno, "orders must be listed as 1, 2, ..."));
                    }
                    counts.push(c);
                    lm.grams.push(HashMap::new());
                }
                Section::Grams(n) => {
                    let fields: Vec<&str> = line.split_whitespace().collect();
                    if fields.len() != n + 1 && fields.len() != n + 2 {
                        return Err(arpa_err(lineno, format!("expected {n} words, a probability and an optional backoff")));
                    }
                    let log10_prob: f64 = fields[0]
                        .parse()
                        .map_err(|_| arpa_err(lineno, format!("bad probability {}", fields[0])))?;
                    if log10_prob > 0.0 || log10_prob.is_nan() {
                        return Err(arpa_err(lineno, format!("log probability {log10_prob} > 0")));
                    }
                    let log10_backoff = match fields.get(n + 1) {
                        Some(b) => b.parse().map_err(|_| arpa_err(lineno, format!("bad backoff {b}")))?,
                        None => 0.0,
                    };
                    let ids: Vec<u32> = fields[1..=n]
                        .iter()
                        .map(|w| {
                            if n == 1 {
                                Ok(lm.intern(w))
                            } else {
                                lm.vocab
                                    .get(*w)
                                    .copied()
                                    .ok_or_else(|| arpa_err(lineno, format!("word {w} has no unigram")))
                            }
                        })
                        .collect::<Result<_>>()?;
                    if n > 1 && !lm.grams[n - 2].contains_key(&ids[..n - 1]) {
                        return Err(arpa_err(lineno, format!("context {:?} has no lower-order entry", &fields[1..n])));
                    }
                    lm.grams[n - 1].insert(
                        ids,
                        Entry {
                            log10_prob,
                            log10_backoff,
                        },
                    );
                }
            }
        }
        if section != Section::End {
            return Err(arpa_err(text.lines().count(), "missing \\end\\"));
        }
        if counts.is_empty() {
            return Err(arpa_err(1, "no \\data\\ section"));
        }
        for (n, (&c, grams)) in counts.iter().zip(&lm.grams).enumerate() {
            if c != grams.len() {
                return Err(arpa_err(0, format!("{}-grams: header says {c}, found {}", n + 1, grams.len())));
            }
        }
        lm.order = counts.len();
        Ok(lm)
    }

    fn intern(&mut self, w: &str) -> u32 {
        if let Some(&id) = self.vocab.get(w) {
            return id;
        }
        let id = self.words.len() as u32;
        self.words.push(w.to_string());
        self.vocab.insert(w.to_string(), id);
        id
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Word id, mapping out-of-vocabulary words to `<unk>` when present.
    pub fn word_id(&self, w: &str) -> Option<u32> {
        self.vocab.get(w).or_else(|| self.vocab.get(UNKNOWN)).copied()
    }

    pub fn contains(&self, w: &str) -> bool {
        self.vocab.contains_key(w)
    }

    /// Initial history (`<s>` if the model has it).
    pub fn start(&self) -> Vec<u32> {
        self.vocab.get(SENTENCE_START).map(|&s| vec![s]).unwrap_or_default()
    }

    /// log10 p(word | history) with Katz-style backoff. `None` word means a
    /// word unknown to a model without `<unk>`.
    fn log10_cond(&self, history: &[u32], word: Option<u32>) -> f64 {
        let Some(w) = word else {
            return UNKNOWN_FLOOR_LOG10;
        };
        let keep = history.len().min(self.order - 1);
        let mut ctx = &history[history.len() - keep..];
        let mut backoff = 0.0;
        loop {
            let mut key = ctx.to_vec();
            key.push(w);
            if let Some(e) = self.grams[ctx.len()].get(&key) {
                return backoff + e.log10_prob;
            }
            if ctx.is_empty() {
                return backoff + UNKNOWN_FLOOR_LOG10;
            }
            if let Some(e) = self.grams[ctx.len() - 1].get(ctx) {
                backoff += e.log10_backoff;
            }
            ctx = &ctx[1..];
        }
    }

    /// Natural-log conditional probability of `word` after `history`.
    pub fn score(&self, history: &[u32], word: &str) -> f64 {
        self.log10_cond(history, self.word_id(word)) * std::f64::consts::LN_10
    }

    /// Natural-log score and updated history after appending `word`.
    pub fn advance(&self, history: &[u32], word: &str) -> (f64, Vec<u32>) {
        let id = self.word_id(word);
        let s = self.log10_cond(history, id) * std::f64::consts::LN_10;
        let mut h: Vec<u32> = history.to_vec();
        if let Some(id) = id {
            h.push(id);
        }
        let keep = h.len().min(self.order.saturating_sub(1));
        (s, h.split_off(h.len() - keep))
    }

    /// log10 probability of a whole sentence, with `<s>`/`</s>` when the
    /// model defines them.
    pub fn sentence_log10(&self, words: &[&str]) -> f64 {
        let mut history = self.start();
        let mut total = 0.0;
        let mut seq: Vec<&str> = words.to_vec();
        if self.vocab.contains_key(SENTENCE_END) {
            seq.push(SENTENCE_END);
        }
        for w in seq {
            let id = self.word_id(w);
            total += self.log10_cond(&history, id);
            if let Some(id) = id {
                history.push(id);
            }
        }
        total
    }
}
