use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BLANK: &str = "<blank>";
pub const WORD_DELIMITER: &str = "|";

/// Output symbols of a CTC head. Index 0 is always the blank.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(symbols: Vec<String>) -> Result<Self> {
        Self::new(symbols)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.symbols
    }
}

impl Vocabulary {
    /// `symbols[0]` must be the blank.
    pub fn new(symbols: Vec<String>) -> Result<Self> {
        if symbols.first().map(String::as_str) != Some(BLANK) {
            return Err(Error::Config(format!("vocabulary must start with {BLANK}")));
        }
        let mut index = HashMap::new();
        for (i, s) in symbols.iter().enumerate() {
            if index.insert(s.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary symbol {s:?}")));
            }
        }
        Ok(Self { symbols, index })
    }

    /// Blank, the word delimiter, then every other character of the
    /// transcripts in sorted order. Spaces map to the delimiter.
    pub fn from_transcripts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let chars: BTreeSet<char> = texts
            .into_iter()
            .flat_map(str::chars)
            .filter(|c| !c.is_whitespace())
            .collect();
        let mut symbols = vec![BLANK.to_string(), WORD_DELIMITER.to_string()];
        symbols.extend(chars.into_iter().map(String::from).filter(|s| s != WORD_DELIMITER));
        Self::new(symbols).expect("symbols are unique")
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn blank(&self) -> usize {
        0
    }

    pub fn delimiter(&self) -> Option<usize> {
        self.index.get(WORD_DELIMITER).copied()
    }

    pub fn symbol(&self, id: usize) -> &str {
        &self.symbols[id]
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    /// Character-level encoding; runs of whitespace become one delimiter.
    /// Fails listing every symbol missing from the vocabulary.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        let mut missing = BTreeSet::new();
        let delim = self.delimiter();
        for word in text.split_whitespace() {
            if !out.is_empty() {
                match delim {
                    Some(d) => out.push(d),
                    None => {
                        missing.insert(WORD_DELIMITER.to_string());
                    }
                }
            }
            for c in word.chars() {
                let s = c.to_string();
                match self.index.get(&s) {
                    Some(&i) if i != 0 => out.push(i),
                    _ => {
                        missing.insert(s);
                    }
                }
            }
        }
        if !missing.is_empty() {
            return Err(Error::OutOfVocabulary(missing.into_iter().collect()));
        }
        Ok(out)
    }

    /// Text of a blank-free token sequence; delimiters become single spaces.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut words: Vec<String> = vec![String::new()];
        for &i in ids {
            if Some(i) == self.delimiter() {
                words.push(String::new());
            } else if i != 0 {
                words.last_mut().unwrap().push_str(&self.symbols[i]);
            }
        }
        words.retain(|w| !w.is_empty());
        words.join(" ")
    }

    /// Completed and trailing words of a token sequence.
    pub fn words(&self, ids: &[usize]) -> Vec<String> {
        self.decode(ids).split(' ').filter(|w| !w.is_empty()).map(String::from).collect()
    }
}
