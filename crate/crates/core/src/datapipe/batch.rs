use std::collections::HashMap;
use std::sync::Arc;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::RECEPTIVE_FIELD;
use crate::error::{Error, Result};
use crate::rng::SeedTree;

use super::manifest::{Manifest, ManifestRow};
use super::sampler::{SamplerSpec, TwoLevelSampler};
use super::wav::read_wav;

/// Waveforms keyed by utterance id.
#[derive(Clone, Debug, Default)]
pub struct AudioStore {
    audio: HashMap<String, Arc<Vec<f32>>>,
}

impl AudioStore {
    pub fn insert(&mut self, id: impl Into<String>, samples: Vec<f32>) {
        self.audio.insert(id.into(), Arc::new(samples));
    }

    pub fn get(&self, id: &str) -> Result<&[f32]> {
        self.audio
            .get(id)
            .map(|a| a.as_slice())
            .ok_or_else(|| Error::InvalidInput(format!("no audio loaded for utterance {id}")))
    }

    /// Loads every manifest row from disk, checking lengths against the manifest.
    pub fn load(manifest: &Manifest) -> Result<Self> {
        let mut store = Self::default();
        for row in &manifest.rows {
            let samples = read_wav(&manifest.resolve(row))?;
            if samples.len() != row.num_samples {
                return Err(Error::InvalidInput(format!(
                    "{}: manifest says {} samples, file has {}",
                    row.id,
                    row.num_samples,
                    samples.len()
                )));
            }
            store.insert(row.id.clone(), samples);
        }
        Ok(store)
    }

    pub fn len(&self) -> usize {
        self.audio.len()
    }

    pub fn is_empty(&self) -> bool {
        self.audio.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchConfig {
    /// Longest waveform kept per item, in samples.
    pub max_crop: usize,
    /// Total-sample budget of one batch.
    pub batch_samples: usize,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            max_crop: 320_000,
            batch_samples: 960_000,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    /// Zero-padded to the longest item.
    pub waveforms: Vec<Vec<f32>>,
    /// True lengths before padding.
    pub lengths: Vec<usize>,
    pub languages: Vec<String>,
    pub corpora: Vec<String>,
    pub transcripts: Vec<Option<String>>,
    /// Token ids per item, when a tokenizer has been applied.
    pub targets: Option<Vec<Vec<usize>>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn total_samples(&self) -> usize {
        self.lengths.iter().sum()
    }

    /// Unpadded waveform of item `i`.
    pub fn waveform(&self, i: usize) -> &[f32] {
        &self.waveforms[i][..self.lengths[i]]
    }

    fn push(&mut self, row: &ManifestRow, samples: Vec<f32>) {
        self.ids.push(row.id.clone());
        self.lengths.push(samples.len());
        self.waveforms.push(samples);
        self.languages.push(row.language.clone());
        self.corpora.push(row.corpus.clone());
        self.transcripts.push(row.transcript.clone());
    }

    fn pad(&mut self) {
        let max = self.lengths.iter().copied().max().unwrap_or(0);
        for w in &mut self.waveforms {
            w.resize(max, 0.0);
        }
    }

    /// Batch of whole utterances in the given order (no cropping).
    pub fn from_rows(rows: &[&ManifestRow], audio: &AudioStore) -> Result<Self> {
        let mut b = Batch::default();
        for row in rows {
            b.push(row, audio.get(&row.id)?.to_vec());
        }
        b.pad();
        Ok(b)
    }
}

/// Start offset of a uniformly random `max_crop` window, or `None` when the
/// waveform already fits.
pub fn crop_offset(len: usize, max_crop: usize, rng: &mut impl Rng) -> Option<usize> {
    (len > max_crop).then(|| rng.random_range(0..=len - max_crop))
}

/// Draws rows with `draw`, crops each to `max_crop`, and accumulates items
/// while the total stays within the sample budget. Utterances shorter than
/// the encoder receptive field are skipped.
pub fn crop_and_batch<'a, R: Rng>(
    mut draw: impl FnMut(&mut R) -> &'a ManifestRow,
    audio: &AudioStore,
    config: BatchConfig,
    rng: &mut R,
) -> Result<Batch> {
    if config.max_crop == 0 {
        return Err(Error::Config("max_crop must be positive".into()));
    }
    let mut batch = Batch::default();
    let mut total = 0usize;
    let mut consecutive_skips = 0;
    loop {
        let row = draw(rng);
        if row.num_samples < RECEPTIVE_FIELD {
            warn!(
                "skipping {}: {} samples is below the {RECEPTIVE_FIELD}-sample receptive field",
                row.id, row.num_samples
            );
            consecutive_skips += 1;
            if consecutive_skips > 10_000 {
                return Err(Error::InvalidInput(
                    "no utterance long enough for the encoder was drawn".into(),
                ));
            }
            continue;
        }
        consecutive_skips = 0;
        let wave = audio.get(&row.id)?;
        let samples = match crop_offset(wave.len(), config.max_crop, rng) {
            Some(start) => wave[start..start + config.max_crop].to_vec(),
            None => wave.to_vec(),
        };
        if !batch.is_empty() && total + samples.len() > config.batch_samples {
            break;
        }
        total += samples.len();
        batch.push(row, samples);
        if total >= config.batch_samples {
            break;
        }
    }
    batch.pad();
    Ok(batch)
}

/// Reproducible batch sequence: batch `k` depends only on the manifest, the
/// sampler spec, the config and `(seed, k)`.
pub struct BatchStream {
    manifest: Manifest,
    audio: AudioStore,
    sampler: TwoLevelSampler,
    /// Row indices per (corpus, language) in sampler order.
    pools: Vec<Vec<Vec<usize>>>,
    config: BatchConfig,
    seeds: SeedTree,
}

impl BatchStream {
    pub fn new(
        manifest: Manifest,
        audio: AudioStore,
        spec: &SamplerSpec,
        config: BatchConfig,
        seeds: SeedTree,
    ) -> Result<Self> {
        let sampler = spec.sampler()?;
        let mut pools: Vec<Vec<Vec<usize>>> = spec
            .corpora
            .iter()
            .map(|c| vec![Vec::new(); c.languages.len()])
            .collect();
        for (i, r) in manifest.rows.iter().enumerate() {
            let c = spec.corpora.iter().position(|c| c.id == r.corpus);
            let l = c.and_then(|c| spec.corpora[c].languages.iter().position(|(l, _)| *l == r.language));
            if let (Some(c), Some(l)) = (c, l) {
                pools[c][l].push(i);
            }
        }
        if pools.iter().flatten().any(Vec::is_empty) {
            return Err(Error::Config("sampler lists a language with no manifest rows".into()));
        }
        Ok(Self {
            manifest,
            audio,
            sampler,
            pools,
            config,
            seeds,
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn audio(&self) -> &AudioStore {
        &self.audio
    }

    pub fn batch(&self, index: u64) -> Result<Batch> {
        let mut rng = self.seeds.index(index).rng();
        let rows = &self.manifest.rows;
        crop_and_batch(
            |rng| {
                let (c, l) = self.sampler.sample(rng);
                let pool = &self.pools[c][l];
                &rows[pool[rng.random_range(0..pool.len())]]
            },
            &self.audio,
            self.config,
            &mut rng,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str, n: usize) -> ManifestRow {
        ManifestRow {
            id: id.into(),
            path: "x.wav".into(),
            num_samples: n,
            language: "l".into(),
            corpus: "c".into(),
            transcript: None,
        }
    }

    #[test]
    fn crop_window_arithmetic() {
        let mut rng = SeedTree::new(5).rng();
        assert_eq!(crop_offset(320_000, 320_000, &mut rng), None);
        for _ in 0..200 {
            let s = crop_offset(500_000, 320_000, &mut rng).unwrap();
            assert!(s <= 180_000);
        }
    }

    #[test]
    fn short_utterances_are_skipped_and_budget_respected() {
        let rows = [row("short", 300), row("long", 500_000), row("mid", 1_000)];
        let mut audio = AudioStore::default();
        audio.insert("short", vec![0.1; 300]);
        audio.insert("long", (0..500_000).map(|i| i as f32).collect());
        audio.insert("mid", vec![0.2; 1_000]);
        let mut rng = SeedTree::new(1).rng();
        let mut k = 0;
        let cfg = BatchConfig {
            max_crop: 320_000,
            batch_samples: 321_500,
        };
        let b = crop_and_batch(
            |_| {
                k += 1;
                &rows[(k - 1) % 3]
            },
            &audio,
            cfg,
            &mut rng,
        )
        .unwrap();
        assert!(!b.ids.contains(&"short".to_string()));
        assert!(b.lengths.iter().all(|&l| l <= 320_000));
        assert!(b.total_samples() <= cfg.batch_samples);
        assert_eq!(b.ids[0], "long");
        assert_eq!(b.lengths[0], 320_000);
        let w = &b.waveforms[0];
        // a contiguous window of the ramp
        assert!(w.windows(2).all(|p| p[1] - p[0] == 1.0));
        assert!(b.waveforms.iter().all(|w| w.len() == 320_000));
        // padding is zero beyond the true length
        let mid = b.ids.iter().position(|i| i == "mid").unwrap();
        assert!(b.waveforms[mid][1_000..].iter().all(|&x| x == 0.0));
    }
}
