use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

use super::lm::NgramLm;
use super::vocab::Vocabulary;

/// Per-frame argmax, repeats collapsed, blanks removed.
pub fn greedy_decode<T: Real>(log_probs: &Tensor<T>) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for t in 0..log_probs.rows() {
        let row = log_probs.row(t);
        let mut best = 0;
        for (i, &x) in row.iter().enumerate() {
            if x > row[best] {
                best = i;
            }
        }
        if Some(best) != prev && best != 0 {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Language model and fusion weights for [`beam_decode`].
#[derive(Clone, Copy, Debug)]
pub struct Fusion<'a> {
    pub lm: Option<&'a NgramLm>,
    /// Weight of the LM log probability of each completed word.
    pub lambda: f64,
    /// Bonus per completed word.
    pub beta: f64,
}

impl Fusion<'_> {
    pub const NONE: Fusion<'static> = Fusion {
        lm: None,
        lambda: 0.0,
        beta: 0.0,
    };
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    /// Collapsed token sequence (no blanks).
    pub tokens: Vec<usize>,
    pub log_blank: f64,
    pub log_nonblank: f64,
    /// Sum of natural-log LM scores of the completed words.
    pub lm_score: f64,
    pub word_count: usize,
    pub score: f64,
}

impl BeamHypothesis {
    pub fn acoustic(&self) -> f64 {
        lse2(self.log_blank, self.log_nonblank)
    }
}

struct Node {
    tokens: Vec<usize>,
    pb: f64,
    pnb: f64,
    lm_score: f64,
    words: usize,
    /// LM history and the characters of the word in progress.
    history: Vec<u32>,
    partial: String,
}

impl Node {
    fn score(&self, f: &Fusion) -> f64 {
        lse2(self.pb, self.pnb) + f.lambda * self.lm_score + f.beta * self.words as f64
    }

    fn extend(&self, token: usize, vocab: &Vocabulary, f: &Fusion) -> Node {
        let mut tokens = self.tokens.clone();
        tokens.push(token);
        let mut n = Node {
            tokens,
            pb: f64::NEG_INFINITY,
            pnb: f64::NEG_INFINITY,
            lm_score: self.lm_score,
            words: self.words,
            history: self.history.clone(),
            partial: self.partial.clone(),
        };
        if Some(token) == vocab.delimiter() {
            if !n.partial.is_empty() {
                let word = std::mem::take(&mut n.partial);
                n.words += 1;
                if let Some(lm) = f.lm {
                    let (s, h) = lm.advance(&n.history, &word);
                    n.lm_score += s;
                    n.history = h;
                }
            }
        } else {
            n.partial.push_str(vocab.symbol(token));
        }
        n
    }
}

/// CTC prefix beam search. Word-level shallow fusion is applied when a word
/// is completed by a delimiter; the trailing partial word is not scored.
pub fn beam_decode<T: Real>(
    log_probs: &Tensor<T>,
    vocab: &Vocabulary,
    fusion: Fusion,
    beam_width: usize,
) -> Result<BeamHypothesis> {
    if beam_width == 0 {
        return Err(Error::InvalidInput("beam width must be at least 1".into()));
    }
    if fusion.lm.is_some() && fusion.lambda < 0.0 {
        return Err(Error::InvalidInput(format!("LM weight {} must be >= 0", fusion.lambda)));
    }
    if log_probs.cols() != vocab.len() {
        return Err(Error::shape(
            "beam_decode",
            format!("{} columns for a {}-symbol vocabulary", log_probs.cols(), vocab.len()),
        ));
    }
    let start_history = fusion.lm.map(NgramLm::start).unwrap_or_default();
    let mut beams = vec![Node {
        tokens: Vec::new(),
        pb: 0.0,
        pnb: f64::NEG_INFINITY,
        lm_score: 0.0,
        words: 0,
        history: start_history,
        partial: String::new(),
    }];
    for t in 0..log_probs.rows() {
        let row: Vec<f64> = log_probs.row(t).iter().map(|x| x.as_f64()).collect();
        let mut next: Vec<Node> = Vec::new();
        let mut index: HashMap<Vec<usize>, usize> = HashMap::new();
        let mut slot = |next: &mut Vec<Node>, make: &dyn Fn() -> Node, key: &[usize]| -> usize {
            if let Some(&i) = index.get(key) {
                return i;
            }
            next.push(make());
            index.insert(key.to_vec(), next.len() - 1);
            next.len() - 1
        };
        for b in &beams {
            let total = lse2(b.pb, b.pnb);
            // stay on the same prefix through a blank
            let i = slot(
                &mut next,
                &|| Node {
                    tokens: b.tokens.clone(),
                    pb: f64::NEG_INFINITY,
                    pnb: f64::NEG_INFINITY,
                    lm_score: b.lm_score,
                    words: b.words,
                    history: b.history.clone(),
                    partial: b.partial.clone(),
                },
                &b.tokens,
            );
            next[i].pb = lse2(next[i].pb, total + row[0]);
            for (c, &lp) in row.iter().enumerate().skip(1) {
                if lp == f64::NEG_INFINITY {
                    continue;
                }
                let last = b.tokens.last().copied();
                if last == Some(c) {
                    // repeat collapses into the same prefix...
                    let i = slot(
                        &mut next,
                        &|| Node {
                            tokens: b.tokens.clone(),
                            pb: f64::NEG_INFINITY,
                            pnb: f64::NEG_INFINITY,
                            lm_score: b.lm_score,
                            words: b.words,
                            history: b.history.clone(),
                            partial: b.partial.clone(),
                        },
                        &b.tokens,
                    );
                    next[i].pnb = lse2(next[i].pnb, b.pnb + lp);
                    // ...unless a blank separated them
                    let mut key = b.tokens.clone();
                    key.push(c);
                    let j = slot(&mut next, &|| b.extend(c, vocab, &fusion), &key);
                    next[j].pnb = lse2(next[j].pnb, b.pb + lp);
                } else {
                    let mut key = b.tokens.clone();
                    key.push(c);
                    let j = slot(&mut next, &|| b.extend(c, vocab, &fusion), &key);
                    next[j].pnb = lse2(next[j].pnb, total + lp);
                }
            }
        }
        next.retain(|n| lse2(n.pb, n.pnb) > f64::NEG_INFINITY);
        sort_nodes(&mut next, &fusion);
        next.truncate(beam_width);
        beams = next;
    }
    let best = beams
        .into_iter()
        .next()
        .ok_or_else(|| Error::InvalidInput("no finite-probability hypothesis".into()))?;
    Ok(BeamHypothesis {
        score: best.score(&fusion),
        tokens: best.tokens,
        log_blank: best.pb,
        log_nonblank: best.pnb,
        lm_score: best.lm_score,
        word_count: best.words,
    })
}

/// Descending score; ties broken by the token sequence so results do not
/// depend on insertion order.
fn sort_nodes(nodes: &mut [Node], fusion: &Fusion) {
    nodes.sort_by(|a, b| {
        b.score(fusion)
            .partial_cmp(&a.score(fusion))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
}
