//! Desk-scale training runs: the pretraining smoke test and the three
//! fine-tuning overfit/separability runs that start from it.

use std::path::Path;

use crossling::checkpoint::Checkpoint;
use crossling::datapipe::{generate_synthetic_corpus, AudioStore, Manifest, ManifestRow, SynthConfig, SyntheticCorpus};
use crossling::encoder::{EncoderConfig, Trunk};
use crossling::heads::{
    ClassifierConfig, ClassifierFinetuner, CtcFinetuner, CtcHeadConfig, Decoder, FinetuneConfig, Seq2SeqConfig,
    Seq2SeqFinetuner,
};
use crossling::metrics::Unit;
use crossling::numerics::ScheduleSpec;
use crossling::pretrain::{probe_perplexity, ContrastiveConfig, PretrainConfig, Pretrainer};
use crossling::quantizer::CodebookConfig;
use crossling::run::trunk_from_checkpoint;
use crossling::rng::SeedTree;
use rand::seq::SliceRandom;

pub const SMOKE_UPDATES: u64 = 2000;
pub const SMOKE_SEEDS: [u64; 3] = [0, 1, 2];
/// Accuracy is read as a running mean over this many updates.
pub const ACCURACY_WINDOW: usize = 50;

pub fn smoke_corpus() -> SyntheticCorpus {
    generate_synthetic_corpus(&SynthConfig {
        n_languages: 3,
        hours_per_language: vec![0.2],
        seed: 0,
        ..Default::default()
    })
    .unwrap()
}

pub fn smoke_config() -> PretrainConfig {
    PretrainConfig {
        encoder: EncoderConfig::tiny(),
        codebook: CodebookConfig {
            groups: 2,
            entries: 64,
            dim: 64,
            temp_decay: 0.9995,
            ..Default::default()
        },
        objective: ContrastiveConfig { k: 100, ..Default::default() },
        batch: crossling::datapipe::BatchConfig { max_crop: 80_000, batch_samples: 160_000 },
        schedule: ScheduleSpec::poly(1e-3, 200, SMOKE_UPDATES),
        ..Default::default()
    }
}

pub struct Smoke {
    pub seed: u64,
    /// Mean accuracy of the first window (random weights).
    pub initial_accuracy: f64,
    /// Best windowed accuracy and the update at which the window ended.
    pub best_accuracy: (f64, u64),
    pub probe_perplexity: (f64, f64),
    pub checkpoint: Checkpoint,
}

impl Smoke {
    pub fn learned(&self) -> bool {
        self.best_accuracy.0 > 0.5
    }

    pub fn perplexity_rose(&self) -> bool {
        self.probe_perplexity.1 > self.probe_perplexity.0
    }

    pub fn summary(&self) -> String {
        format!(
            "seed {}: accuracy {:.3} -> {:.3} (window ending at {}), probe perplexity {:.2} -> {:.2}",
            self.seed,
            self.initial_accuracy,
            self.best_accuracy.0,
            self.best_accuracy.1,
            self.probe_perplexity.0,
            self.probe_perplexity.1
        )
    }
}

pub fn pretrain_smoke(corpus: &SyntheticCorpus, seed: u64) -> Smoke {
    let config = smoke_config();
    let mut tr = Pretrainer::new(config.clone(), corpus.manifest.clone(), corpus.audio.clone(), seed).unwrap();
    // A batch index the run never reaches, so the probe is held out.
    let probe = tr.batch(1 << 40).unwrap();
    let ppl0 = probe_perplexity(&tr.model, &probe).unwrap();
    let acc: Vec<f64> = tr
        .run(SMOKE_UPDATES, &mut std::io::sink())
        .unwrap()
        .iter()
        .map(|b| b.accuracy)
        .collect();
    let windowed: Vec<f64> = acc
        .windows(ACCURACY_WINDOW)
        .map(|w| w.iter().sum::<f64>() / ACCURACY_WINDOW as f64)
        .collect();
    let best = windowed
        .iter()
        .enumerate()
        .fold((f64::NEG_INFINITY, 0), |b, (i, &a)| if a > b.0 { (a, (i + ACCURACY_WINDOW) as u64) } else { b });
    let mut checkpoint = Checkpoint::new("pretrain", &config, seed, tr.step).unwrap();
    checkpoint.add_params("model", &tr.model);
    Smoke {
        seed,
        initial_accuracy: windowed[0],
        best_accuracy: best,
        probe_perplexity: (ppl0, probe_perplexity(&tr.model, &probe).unwrap()),
        checkpoint,
    }
}

/// Reads the trunk of a saved checkpoint, as a fine-tuning job would.
pub fn load_trunk(path: &Path) -> Trunk<f32> {
    trunk_from_checkpoint(&Checkpoint::load(path).unwrap()).unwrap()
}

fn finetune(lr: f64, total: u64, batch_samples: usize) -> FinetuneConfig {
    FinetuneConfig {
        schedule: ScheduleSpec::tri_stage(lr, total),
        batch_samples,
        ..Default::default()
    }
}

pub struct CtcOverfit {
    pub updates: u64,
    pub wer: f64,
    pub agreement: f64,
}

pub const CTC_UTTERANCES: usize = 20;
pub const CTC_UPDATES: u64 = 2000;

/// Fine-tunes on 20 utterances, checking greedy training WER every 100
/// updates and stopping at zero.
pub fn ctc_overfit(trunk: Trunk<f32>, corpus: &SyntheticCorpus) -> CtcOverfit {
    let rows: Vec<ManifestRow> = corpus.manifest.rows.iter().step_by(7).take(CTC_UTTERANCES).cloned().collect();
    let manifest = Manifest::new(rows.clone(), "").unwrap();
    // Memorization wants every layer trainable and no stochastic depth.
    let train = FinetuneConfig {
        layerdrop: 0.0,
        freeze_feature_encoder: false,
        ..finetune(2e-3, CTC_UPDATES, 320_000)
    };
    let cfg = CtcHeadConfig { train, ..Default::default() };
    let mut ft = CtcFinetuner::new(trunk, &manifest, corpus.audio.clone(), cfg, 0).unwrap();
    let mut wer = 1.0;
    while ft.step < CTC_UPDATES {
        ft.run(ft.step + 100, &mut std::io::sink()).unwrap();
        wer = ft.evaluate(&rows, &corpus.audio, Decoder::Greedy, Unit::Word).unwrap().rate;
        if wer == 0.0 {
            break;
        }
    }
    let greedy = ft.transcribe(&rows, &corpus.audio, Decoder::Greedy).unwrap();
    let beam = ft
        .transcribe(&rows, &corpus.audio, Decoder::Beam { width: 50, fusion: crossling::ctc::Fusion::NONE })
        .unwrap();
    let same = greedy.iter().zip(&beam).filter(|(g, b)| g.1 == b.1).count();
    CtcOverfit {
        updates: ft.step,
        wer,
        agreement: same as f64 / rows.len() as f64,
    }
}

pub const COPIES: usize = 64;
pub const SEQ2SEQ_UPDATES: u64 = 1000;

/// One utterance and its translation, repeated 64 times. Returns the
/// reference and the beam-5 output.
pub fn seq2seq_overfit(trunk: Trunk<f32>, corpus: &SyntheticCorpus) -> (String, String) {
    let src = corpus.translations.rows[0].clone();
    let wave = corpus.audio.get(&src.id).unwrap().to_vec();
    let mut audio = AudioStore::default();
    let rows: Vec<ManifestRow> = (0..COPIES)
        .map(|i| {
            let id = format!("copy_{i:02}");
            audio.insert(id.clone(), wave.clone());
            ManifestRow { id, ..src.clone() }
        })
        .collect();
    let manifest = Manifest::new(rows.clone(), "").unwrap();
    let cfg = Seq2SeqConfig { beam: 5, train: FinetuneConfig { mask_prob: 0.15, mask_span: 5, ..finetune(1e-3, SEQ2SEQ_UPDATES, 160_000) }, ..Default::default() };
    let mut ft = Seq2SeqFinetuner::new(trunk, &manifest, audio.clone(), cfg, 0).unwrap();
    ft.run(SEQ2SEQ_UPDATES, &mut std::io::sink()).unwrap();
    let out = ft.translate(&rows[..1], &audio).unwrap();
    (src.transcript.unwrap(), out[0].1.clone())
}

pub const CLASSIFY_UPDATES: u64 = 1000;
pub const CLASSES: usize = 5;
pub const TRAIN_PER_CLASS: usize = 20;

/// Balanced train/dev split of a five-language corpus of short utterances.
pub fn classification_data() -> (Manifest, Manifest, AudioStore) {
    let c = generate_synthetic_corpus(&SynthConfig {
        n_languages: CLASSES,
        hours_per_language: vec![0.045],
        seed: 21,
        min_utterance_seconds: 1.0,
        max_utterance_seconds: 2.0,
        ..Default::default()
    })
    .unwrap();
    let (mut train, mut dev) = (Vec::new(), Vec::new());
    let per_dev = c
        .languages
        .iter()
        .map(|l| c.manifest.rows.iter().filter(|r| r.language == l.code).count() - TRAIN_PER_CLASS)
        .min()
        .unwrap();
    for l in &c.languages {
        let rows: Vec<&ManifestRow> = c.manifest.rows.iter().filter(|r| r.language == l.code).collect();
        train.extend(rows[..TRAIN_PER_CLASS].iter().map(|r| (*r).clone()));
        dev.extend(rows[TRAIN_PER_CLASS..TRAIN_PER_CLASS + per_dev].iter().map(|r| (*r).clone()));
    }
    (Manifest::new(train, "").unwrap(), Manifest::new(dev, "").unwrap(), c.audio)
}

/// Dev accuracy after training; `shuffle` permutes the training labels.
pub fn classify(trunk: Trunk<f32>, shuffle: bool) -> (f64, usize) {
    let (mut train, dev, audio) = classification_data();
    if shuffle {
        // Every language gets each label equally often, so the labels say
        // nothing about the language. A plain permutation of 100 labels
        // leaves each language with a lopsided label mix the classifier
        // can learn, and dev accuracy then lands far from chance.
        let codes: Vec<String> = train.rows.iter().step_by(TRAIN_PER_CLASS).map(|r| r.language.clone()).collect();
        let mut rng = SeedTree::new(4).rng();
        for rows in train.rows.chunks_mut(TRAIN_PER_CLASS) {
            let mut labels: Vec<&String> = codes.iter().cycle().take(TRAIN_PER_CLASS).collect();
            labels.shuffle(&mut rng);
            for (r, l) in rows.iter_mut().zip(labels) {
                r.language = l.clone();
            }
        }
    }
    let cfg = ClassifierConfig { train: finetune(1e-3, CLASSIFY_UPDATES, 160_000), ..Default::default() };
    let mut ft = ClassifierFinetuner::new(trunk, &train, audio.clone(), cfg, 0).unwrap();
    ft.run(CLASSIFY_UPDATES, &mut std::io::sink()).unwrap();
    (ft.evaluate(&dev.rows, &audio).unwrap(), dev.rows.len())
}
