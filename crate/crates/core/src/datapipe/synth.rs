//! Synthetic multilingual speech corpus.
//!
//! Every language owns 3-5 band center frequencies that no other language
//! uses and a private token alphabet. A token sounds as a mixture of the
//! language's tones with a token-specific loudness pattern over the bands,
//! lasting a token-specific 40-120 ms. Words are runs of tokens from a small
//! per-language lexicon; words are separated by short noise-only gaps.
//! Each lexicon word also has an ASCII gloss, giving a parallel "translation"
//! for sequence-to-sequence experiments.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::SAMPLE_RATE;
use crate::error::{Error, Result};
use crate::rng::SeedTree;

use super::batch::AudioStore;
use super::manifest::{Manifest, ManifestRow};
use super::wav::{pcm16_round_trip, write_wav};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_languages: usize,
    /// Hours per language; a single value applies to every language.
    pub hours_per_language: Vec<f64>,
    pub seed: u64,
    pub corpus: String,
    pub min_utterance_seconds: f64,
    pub max_utterance_seconds: f64,
    pub alphabet_size: usize,
    pub lexicon_size: usize,
    pub noise_std: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_languages: 3,
            hours_per_language: vec![0.2],
            seed: 0,
            corpus: "synth".into(),
            min_utterance_seconds: 3.0,
            max_utterance_seconds: 6.0,
            alphabet_size: 6,
            lexicon_size: 24,
            noise_std: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageProfile {
    pub code: String,
    /// Band center frequencies in Hz, unique to this language.
    pub band_centers: Vec<f64>,
    pub alphabet: Vec<char>,
    /// Per-token loudness over the bands.
    pub token_patterns: Vec<Vec<f64>>,
    /// Per-token duration in milliseconds.
    pub token_ms: Vec<u32>,
    /// Words as token index sequences.
    pub lexicon: Vec<Vec<usize>>,
    /// ASCII gloss of each lexicon word.
    pub glosses: Vec<String>,
}

impl LanguageProfile {
    pub fn word_text(&self, word: usize) -> String {
        self.lexicon[word].iter().map(|&t| self.alphabet[t]).collect()
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub config: SynthConfig,
    pub languages: Vec<LanguageProfile>,
    pub manifest: Manifest,
    /// Same rows as `manifest`, transcript replaced by the glossed translation.
    pub translations: Manifest,
    pub audio: AudioStore,
}

const GAP_MS: u32 = 80;
const EDGE_MS: u32 = 60;
const RAMP_SAMPLES: usize = 80;

/// The `k`-th symbol available for synthetic alphabets.
fn symbol(k: usize) -> char {
    const RANGES: [(u32, u32); 4] = [
        ('a' as u32, 26),
        ('A' as u32, 26),
        (0x03B1, 25), // Greek small letters
        (0x0430, 32), // Cyrillic small letters
    ];
    let mut k = k as u32;
    for (start, n) in RANGES {
        if k < n {
            return char::from_u32(start + k).expect("valid letter");
        }
        k -= n;
    }
    char::from_u32(0x4E00 + k).expect("valid ideograph")
}

fn ms_to_samples(ms: u32) -> usize {
    (ms as usize * SAMPLE_RATE as usize) / 1000
}

fn make_language(index: usize, n_languages: usize, cfg: &SynthConfig, seeds: &SeedTree) -> LanguageProfile {
    let mut rng = seeds.child("language").index(index as u64).rng();
    let n_bands = rng.random_range(3..=5);
    // Interleave languages on a shared log-frequency grid so centers never collide.
    let slots = (5 * n_languages).max(40);
    let (lo, hi): (f64, f64) = (250.0, 6000.0);
    let band_centers: Vec<f64> = (0..n_bands)
        .map(|j| {
            let slot = index + j * n_languages;
            lo * (hi / lo).powf(slot as f64 / (slots - 1) as f64)
        })
        .collect();
    let alphabet: Vec<char> = (0..cfg.alphabet_size)
        .map(|j| symbol(index * cfg.alphabet_size + j))
        .collect();
    let patterns_available = (1usize << n_bands) - 1;
    let token_patterns = (0..cfg.alphabet_size)
        .map(|j| {
            let bits = j % patterns_available + 1;
            let shift = 1.0 + 0.03 * (j / patterns_available) as f64;
            (0..n_bands)
                .map(|b| if bits >> b & 1 == 1 { shift } else { 0.15 * shift })
                .collect()
        })
        .collect();
    let token_ms = (0..cfg.alphabet_size)
        .map(|_| rng.random_range(40..=120))
        .collect();

    // Lexicon from a sparse transition structure without immediate repeats.
    let successor: Vec<usize> = (0..cfg.alphabet_size)
        .map(|t| (t + 1 + rng.random_range(0..cfg.alphabet_size.saturating_sub(1).max(1))) % cfg.alphabet_size)
        .collect();
    let mut lexicon: Vec<Vec<usize>> = Vec::new();
    let mut attempts = 0;
    while lexicon.len() < cfg.lexicon_size && attempts < 100 * cfg.lexicon_size {
        attempts += 1;
        let len = rng.random_range(2..=4);
        let mut word = vec![rng.random_range(0..cfg.alphabet_size)];
        while word.len() < len {
            let prev = *word.last().unwrap();
            let next = if rng.random::<f64>() < 0.6 || cfg.alphabet_size < 3 {
                successor[prev]
            } else {
                let mut t = rng.random_range(0..cfg.alphabet_size);
                while t == prev {
                    t = rng.random_range(0..cfg.alphabet_size);
                }
                t
            };
            if next == prev {
                break;
            }
            word.push(next);
        }
        if word.len() >= 2 && !lexicon.contains(&word) {
            lexicon.push(word);
        }
    }

    const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
    const VOWELS: &[u8] = b"aeiou";
    let mut glosses: Vec<String> = Vec::new();
    while glosses.len() < lexicon.len() {
        let syllables = rng.random_range(1..=3);
        let g: String = (0..syllables)
            .flat_map(|_| {
                [
                    CONSONANTS[rng.random_range(0..CONSONANTS.len())] as char,
                    VOWELS[rng.random_range(0..VOWELS.len())] as char,
                ]
            })
            .collect();
        if !glosses.contains(&g) {
            glosses.push(g);
        }
    }

    LanguageProfile {
        code: format!("l{index:02}"),
        band_centers,
        alphabet,
        token_patterns,
        token_ms,
        lexicon,
        glosses,
    }
}

/// Renders a word sequence; returns the waveform.
pub fn render(lang: &LanguageProfile, words: &[usize], noise_std: f64, rng: &mut impl Rng) -> Vec<f32> {
    let mut out: Vec<f64> = vec![0.0; ms_to_samples(EDGE_MS)];
    for (wi, &w) in words.iter().enumerate() {
        if wi > 0 {
            out.extend(std::iter::repeat_n(0.0, ms_to_samples(GAP_MS)));
        }
        for &tok in &lang.lexicon[w] {
            let n = ms_to_samples(lang.token_ms[tok]);
            let pattern = &lang.token_patterns[tok];
            let norm: f64 = pattern.iter().sum();
            let phases: Vec<f64> = pattern.iter().map(|_| rng.random_range(0.0..2.0 * PI)).collect();
            for i in 0..n {
                let ramp = RAMP_SAMPLES.min(n / 2);
                let env = if i < ramp {
                    0.5 - 0.5 * (PI * i as f64 / ramp as f64).cos()
                } else if i >= n - ramp {
                    0.5 - 0.5 * (PI * (n - 1 - i) as f64 / ramp as f64).cos()
                } else {
                    1.0
                };
                let t = i as f64 / SAMPLE_RATE as f64;
                let s: f64 = pattern
                    .iter()
                    .zip(&lang.band_centers)
                    .zip(&phases)
                    .map(|((&a, &f), &ph)| a * (2.0 * PI * f * t + ph).sin())
                    .sum();
                out.push(0.5 * env * s / norm);
            }
        }
    }
    out.extend(std::iter::repeat_n(0.0, ms_to_samples(EDGE_MS)));
    let noise = Normal::new(0.0, noise_std.max(0.0)).expect("valid noise std");
    out.iter()
        .map(|&x| pcm16_round_trip((x + noise.sample(rng)) as f32))
        .collect()
}

impl SynthConfig {
    /// Per-language durations in hours, with a single value broadcast.
    pub fn hours(&self) -> Result<Vec<f64>> {
        if self.n_languages == 0 {
            return Err(Error::Config("n_languages must be at least 1".into()));
        }
        let hours: Vec<f64> = match self.hours_per_language.len() {
            1 => vec![self.hours_per_language[0]; self.n_languages],
            n if n == self.n_languages => self.hours_per_language.clone(),
            n => {
                return Err(Error::Config(format!(
                    "{n} durations given for {} languages",
                    self.n_languages
                )))
            }
        };
        if hours.iter().any(|&h| !(h > 0.0)) {
            return Err(Error::Config("every language needs a positive duration".into()));
        }
        Ok(hours)
    }

    pub fn validate(&self) -> Result<()> {
        self.hours()?;
        if self.alphabet_size < 2 || self.lexicon_size == 0 {
            return Err(Error::Config("alphabet needs >= 2 tokens and a non-empty lexicon".into()));
        }
        if !(self.min_utterance_seconds > 0.0 && self.max_utterance_seconds >= self.min_utterance_seconds) {
            return Err(Error::Config("utterance duration range is empty".into()));
        }
        Ok(())
    }
}

pub fn generate_synthetic_corpus(cfg: &SynthConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let hours = cfg.hours()?;
    let seeds = SeedTree::new(cfg.seed);
    let languages: Vec<LanguageProfile> = (0..cfg.n_languages)
        .map(|i| make_language(i, cfg.n_languages, cfg, &seeds))
        .collect();

    let mut rows = Vec::new();
    let mut translation_rows = Vec::new();
    let mut audio = AudioStore::default();
    for (li, lang) in languages.iter().enumerate() {
        let target = (hours[li] * 3600.0 * SAMPLE_RATE as f64).round() as usize;
        let zipf: Vec<f64> = (0..lang.lexicon.len()).map(|r| 1.0 / (r as f64 + 1.0)).collect();
        let word_dist = rand::distr::weighted::WeightedIndex::new(&zipf).expect("positive weights");
        let mut total = 0usize;
        let mut k = 0u64;
        while total < target {
            let mut rng = seeds.child("utterance").child(&lang.code).index(k).rng();
            let want = rng.random_range(cfg.min_utterance_seconds..=cfg.max_utterance_seconds)
                * SAMPLE_RATE as f64;
            let mut words = Vec::new();
            let mut est = ms_to_samples(2 * EDGE_MS);
            while (est as f64) < want {
                let w = word_dist.sample(&mut rng);
                if !words.is_empty() {
                    est += ms_to_samples(GAP_MS);
                }
                est += lang.lexicon[w].iter().map(|&t| ms_to_samples(lang.token_ms[t])).sum::<usize>();
                words.push(w);
            }
            let wave = render(lang, &words, cfg.noise_std, &mut rng);
            let id = format!("{}_{k:05}", lang.code);
            let transcript = words.iter().map(|&w| lang.word_text(w)).collect::<Vec<_>>().join(" ");
            let gloss = words.iter().map(|&w| lang.glosses[w].as_str()).collect::<Vec<_>>().join(" ");
            let row = ManifestRow {
                id: id.clone(),
                path: format!("wav/{}/{id}.wav", lang.code).into(),
                num_samples: wave.len(),
                language: lang.code.clone(),
                corpus: cfg.corpus.clone(),
                transcript: Some(transcript),
            };
            translation_rows.push(ManifestRow {
                transcript: Some(gloss),
                ..row.clone()
            });
            rows.push(row);
            total += wave.len();
            audio.insert(id, wave);
            k += 1;
        }
    }
    Ok(SyntheticCorpus {
        config: cfg.clone(),
        languages,
        manifest: Manifest::new(rows, "")?,
        translations: Manifest::new(translation_rows, "")?,
        audio,
    })
}

impl SyntheticCorpus {
    /// Writes `manifest.tsv`, `translations.tsv`, `languages.json` and the
    /// WAV files under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for row in &self.manifest.rows {
            let p = dir.join(&row.path);
            if let Some(parent) = p.parent() {
                fs::create_dir_all(parent)?;
            }
            write_wav(&p, self.audio.get(&row.id)?)?;
        }
        self.manifest.write(&dir.join("manifest.tsv"))?;
        self.translations.write(&dir.join("translations.tsv"))?;
        fs::write(
            dir.join("languages.json"),
            serde_json::to_string_pretty(&self.languages)?,
        )?;
        Ok(())
    }

    pub fn language(&self, code: &str) -> Option<&LanguageProfile> {
        self.languages.iter().find(|l| l.code == code)
    }
}
