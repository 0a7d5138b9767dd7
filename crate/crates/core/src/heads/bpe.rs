//! Byte-pair-encoding subword vocabulary learned from target text.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";
const END_OF_WORD: &str = "</w>";

/// Tag token that asks the decoder for target language `lang`.
pub fn language_tag(lang: &str) -> String {
    format!("<2{lang}>")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bpe {
    merges: Vec<(String, String)>,
    /// `<pad>`, `<s>`, `</s>`, `<unk>`, subword symbols, then language tags.
    symbols: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

fn split_word(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if i + 1 == chars.len() {
                format!("{c}{END_OF_WORD}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

fn apply_merge(parts: &mut Vec<String>, a: &str, b: &str) {
    let mut i = 0;
    while i + 1 < parts.len() {
        if parts[i] == a && parts[i + 1] == b {
            let merged = format!("{a}{b}");
            parts[i] = merged;
            parts.remove(i + 1);
        } else {
            i += 1;
        }
    }
}

impl Bpe {
    /// Learns up to `merges` merges (most frequent pair first, ties broken
    /// lexicographically) and appends one tag per language in `tags`.
    pub fn train<'a>(texts: impl IntoIterator<Item = &'a str>, merges: usize, tags: &[String]) -> Self {
        let mut words: BTreeMap<String, usize> = BTreeMap::new();
        for t in texts {
            let norm: String = t.nfc().collect();
            for w in norm.split_whitespace() {
                *words.entry(w.to_string()).or_default() += 1;
            }
        }
        let mut split: Vec<(Vec<String>, usize)> = words.iter().map(|(w, &c)| (split_word(w), c)).collect();
        let mut alphabet: BTreeSet<String> = split.iter().flat_map(|(p, _)| p.iter().cloned()).collect();
        let mut learned = Vec::new();
        let mut merged_symbols = Vec::new();
        for _ in 0..merges {
            let mut pairs: BTreeMap<(String, String), usize> = BTreeMap::new();
            for (parts, c) in &split {
                for w in parts.windows(2) {
                    *pairs.entry((w[0].clone(), w[1].clone())).or_default() += c;
                }
            }
            // BTreeMap iteration is sorted, so the first maximum is the lexicographically smallest.
            let Some((best, _)) = pairs.iter().fold(None::<(&(String, String), usize)>, |acc, (p, &c)| match acc {
                Some((_, bc)) if bc >= c => acc,
                _ => Some((p, c)),
            }) else {
                break;
            };
            let best = best.clone();
            for (parts, _) in &mut split {
                apply_merge(parts, &best.0, &best.1);
            }
            merged_symbols.push(format!("{}{}", best.0, best.1));
            learned.push(best);
        }
        for s in &merged_symbols {
            alphabet.remove(s);
        }
        let mut symbols: Vec<String> = [PAD, BOS, EOS, UNK].iter().map(|s| s.to_string()).collect();
        symbols.extend(alphabet);
        for s in merged_symbols {
            if !symbols.contains(&s) {
                symbols.push(s);
            }
        }
        for t in tags {
            let tag = language_tag(t);
            if !symbols.contains(&tag) {
                symbols.push(tag);
            }
        }
        let mut bpe = Bpe {
            merges: learned,
            symbols,
            index: HashMap::new(),
        };
        bpe.reindex();
        bpe
    }

    /// Rebuilds the lookup table (needed after deserializing).
    pub fn reindex(&mut self) {
        self.index = self.symbols.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, id: usize) -> &str {
        &self.symbols[id]
    }

    pub fn pad(&self) -> usize {
        0
    }

    pub fn bos(&self) -> usize {
        1
    }

    pub fn eos(&self) -> usize {
        2
    }

    pub fn unk(&self) -> usize {
        3
    }

    pub fn tag(&self, lang: &str) -> Result<usize> {
        self.id(&language_tag(lang))
            .ok_or_else(|| Error::InvalidInput(format!("no language tag for {lang}")))
    }

    pub fn is_tag(&self, id: usize) -> bool {
        let s = &self.symbols[id];
        s.starts_with("<2") && s.ends_with('>')
    }

    /// Classes the decoder may emit: everything but padding, `<s>` and tags.
    pub fn output_mask(&self) -> Vec<bool> {
        (0..self.len())
            .map(|i| i != self.pad() && i != self.bos() && !self.is_tag(i))
            .collect()
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        let norm: String = text.nfc().collect();
        let mut out = Vec::new();
        for w in norm.split_whitespace() {
            let mut parts = split_word(w);
            for (a, b) in &self.merges {
                apply_merge(&mut parts, a, b);
            }
            out.extend(parts.iter().map(|p| self.id(p).unwrap_or(self.unk())));
        }
        out
    }

    /// Text of a token sequence; special tokens are dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut s = String::new();
        for &i in ids {
            if i < 4 || self.is_tag(i) {
                continue;
            }
            let sym = &self.symbols[i];
            match sym.strip_suffix(END_OF_WORD) {
                Some(stem) => {
                    s.push_str(stem);
                    s.push(' ');
                }
                None => s.push_str(sym),
            }
        }
        s.trim_end().to_string()
    }
}
