//! Task dispatch for [`RunConfig`]: each task reads its inputs, runs the
//! owning module and writes its artifacts under `paths.output_dir`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{atomic_write, config_hash, Checkpoint};
use crate::config::{DecodeMethod, RunConfig, Task};
use crate::ctc::{tune_lm, write_decodes, Fusion, NgramLm, Vocabulary};
use crate::datapipe::{generate_synthetic_corpus, AudioStore, Manifest};
use crate::encoder::{EncoderConfig, Trunk};
use crate::error::{Error, Result};
use crate::heads::{
    decode_log_probs, predict, score_predictions, score_transcripts, score_translations, transcribe, translate, Bpe,
    ClassifierConfig, ClassifierFinetuner, ClassifierModel, CtcFinetuner, CtcHeadConfig, CtcModel, Decoder,
    Seq2SeqConfig, Seq2SeqFinetuner, Seq2SeqModel, StepReport,
};
use crate::metrics::{error_rate, ErrorRateReport};
use crate::pretrain::{LossBreakdown, Pretrainer};
use crate::rng::SeedTree;

pub const METRICS_FILE: &str = "metrics.tsv";
pub const DEV_METRICS_FILE: &str = "dev_metrics.tsv";
pub const DECODES_FILE: &str = "decodes.tsv";
pub const TUNE_FILE: &str = "tune.tsv";

/// What a finished run produced.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub task: Task,
    pub artifacts: Vec<PathBuf>,
    /// One-line human summary.
    pub summary: String,
}

/// Config snapshot stored with every fine-tuned checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSnapshot<C> {
    pub encoder: EncoderConfig,
    pub head: C,
}

pub fn run(config: &RunConfig) -> Result<RunOutcome> {
    config.validate()?;
    match config.task()? {
        Task::Pretrain => pretrain(config),
        Task::FinetuneCtc => finetune_ctc(config),
        Task::FinetuneSeq2seq => finetune_seq2seq(config),
        Task::FinetuneClassify => finetune_classify(config),
        Task::Decode => decode(config, false),
        Task::Evaluate => decode(config, true),
        Task::TuneLm => tune(config),
        Task::MakeSynthCorpus => make_synth_corpus(config),
    }
}

fn load_data(path: &Path) -> Result<(Manifest, AudioStore)> {
    let manifest = Manifest::read(path)?;
    let audio = AudioStore::load(&manifest)?;
    Ok((manifest, audio))
}

fn required(p: &Option<PathBuf>) -> &Path {
    p.as_deref().expect("validated by RunConfig::validate")
}

fn updates(config: &RunConfig, total: u64) -> u64 {
    if config.train.updates == 0 {
        total
    } else {
        config.train.updates
    }
}

/// Rows of an existing metrics log with `step < keep_before`, header included.
fn previous_log(path: &Path, header: &str, keep_before: u64) -> Result<String> {
    let mut out = format!("{header}\n");
    if let Ok(text) = fs::read_to_string(path) {
        for line in text.lines().skip(1) {
            let step: Option<u64> = line.split('\t').next().and_then(|s| s.parse().ok());
            if step.is_some_and(|s| s < keep_before) {
                out.push_str(line);
                out.push('\n');
            }
        }
    }
    Ok(out)
}

fn pretrain_checkpoint(config: &RunConfig, tr: &Pretrainer) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new("pretrain", &tr.config, config.seed, tr.step)?;
    ck.meta.temperature = Some(tr.config.codebook.temperature_at(tr.step));
    ck.add_params("model", &tr.model);
    ck.add_adam("optim", &tr.adam);
    Ok(ck)
}

fn pretrain(config: &RunConfig) -> Result<RunOutcome> {
    let (manifest, audio) = load_data(required(&config.paths.manifest))?;
    let mut tr = Pretrainer::new(config.pretrain.clone(), manifest, audio, config.seed)?;
    if config.train.resume {
        let ck = Checkpoint::load(required(&config.paths.checkpoint_in))?;
        expect_kind(&ck, "pretrain")?;
        ck.check_config(&config_hash(&config.pretrain)?, config.train.allow_config_mismatch)?;
        if ck.meta.seed != config.seed {
            warn!("resuming a seed-{} run with seed {}", ck.meta.seed, config.seed);
        }
        ck.load_params("model", &mut tr.model)?;
        ck.load_adam("optim", &mut tr.adam)?;
        tr.step = ck.meta.step;
        info!("resumed pretraining at step {}", tr.step);
    }
    let out = &config.paths.output_dir;
    fs::create_dir_all(out)?;
    let log_path = out.join(METRICS_FILE);
    let mut log = previous_log(&log_path, LossBreakdown::TSV_HEADER, tr.step)?;
    let until = updates(config, config.pretrain.schedule.total_updates());
    let ck_path = config.checkpoint_out();
    let mut last = None;
    while tr.step < until {
        let b = tr.train_step()?;
        writeln!(log, "{}", b.tsv_row()).unwrap();
        if config.train.checkpoint_every > 0 && tr.step % config.train.checkpoint_every == 0 && tr.step < until {
            pretrain_checkpoint(config, &tr)?.save(&ck_path)?;
            atomic_write(&log_path, log.as_bytes())?;
        }
        last = Some(b);
    }
    pretrain_checkpoint(config, &tr)?.save(&ck_path)?;
    atomic_write(&log_path, log.as_bytes())?;
    let summary = match last {
        Some(b) => format!(
            "pretrained to step {}: contrastive {:.4}, diversity {:.4}, accuracy {:.3}",
            tr.step, b.contrastive, b.diversity, b.accuracy
        ),
        None => format!("nothing to do at step {}", tr.step),
    };
    Ok(RunOutcome {
        task: Task::Pretrain,
        artifacts: vec![ck_path, log_path],
        summary,
    })
}

fn expect_kind(ck: &Checkpoint, kind: &str) -> Result<()> {
    if ck.meta.kind != kind {
        return Err(Error::Config(format!(
            "checkpoint holds a `{}` model, expected `{kind}`",
            ck.meta.kind
        )));
    }
    Ok(())
}

/// Encoder config and trunk weights from any checkpoint kind.
pub fn trunk_from_checkpoint(ck: &Checkpoint) -> Result<Trunk<f32>> {
    let encoder: EncoderConfig = serde_json::from_value(
        ck.meta
            .config
            .get("encoder")
            .cloned()
            .ok_or_else(|| Error::CorruptCheckpoint("config snapshot has no encoder section".into()))?,
    )?;
    // Initial values are overwritten below; the generator only shapes them.
    let mut trunk = Trunk::new(encoder, &mut SeedTree::new(0).rng())?;
    ck.load_params("model.trunk", &mut trunk)?;
    Ok(trunk)
}

fn write_log(path: &Path, reports: &[StepReport]) -> Result<()> {
    let mut s = format!("{}\n", StepReport::TSV_HEADER);
    for r in reports {
        writeln!(s, "{}", r.tsv_row()).unwrap();
    }
    atomic_write(path, s.as_bytes())
}

fn decode_rows(rows: &[(String, String, f64)]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_decodes(&mut buf, rows.iter().map(|(a, b, c)| (a.as_str(), b.as_str(), *c)))?;
    Ok(buf)
}

fn error_rate_tsv(r: &ErrorRateReport) -> String {
    format!("{}\n{}\n", ErrorRateReport::tsv_header(), r.tsv_row())
}

fn ctc_decoder<'a>(config: &RunConfig, lm: Option<&'a NgramLm>) -> Decoder<'a> {
    match config.decode.method {
        DecodeMethod::Greedy => Decoder::Greedy,
        DecodeMethod::Beam => Decoder::Beam {
            width: config.decode.beam_width,
            fusion: Fusion {
                lm,
                lambda: if lm.is_some() { config.decode.lm_weight } else { 0.0 },
                beta: config.decode.word_bonus,
            },
        },
    }
}

fn load_lm(config: &RunConfig) -> Result<Option<NgramLm>> {
    config.paths.lm.as_deref().map(NgramLm::read).transpose()
}

fn finetune_ctc(config: &RunConfig) -> Result<RunOutcome> {
    let ck = Checkpoint::load(required(&config.paths.checkpoint_in))?;
    let trunk = trunk_from_checkpoint(&ck)?;
    let (manifest, audio) = load_data(required(&config.paths.manifest))?;
    let mut ft = CtcFinetuner::new(trunk, &manifest, audio, config.ctc.clone(), config.seed)?;
    let until = updates(config, config.ctc.train.schedule.total_updates());
    let out = &config.paths.output_dir;
    fs::create_dir_all(out)?;
    let reports = ft.run(until, &mut std::io::sink())?;
    let mut artifacts = save_ctc(config, &ft)?;
    let log_path = out.join(METRICS_FILE);
    write_log(&log_path, &reports)?;
    artifacts.push(log_path);
    let mut summary = format!("fine-tuned CTC head for {} updates", ft.step);
    if let Some(dev) = &config.paths.dev_manifest {
        let (dev, dev_audio) = load_data(dev)?;
        let lm = load_lm(config)?;
        let hyps = ft.transcribe(&dev.rows, &dev_audio, ctc_decoder(config, lm.as_ref()))?;
        let report = score_transcripts(&dev.rows, &hyps, config.decode.unit)?;
        artifacts.extend(write_dev(out, &error_rate_tsv(&report), &decode_rows(&hyps)?)?);
        write!(summary, "; dev error rate {:.4}", report.rate).unwrap();
    }
    Ok(RunOutcome {
        task: Task::FinetuneCtc,
        artifacts,
        summary,
    })
}

fn write_dev(out: &Path, metrics: &str, decodes: &[u8]) -> Result<Vec<PathBuf>> {
    let m = out.join(DEV_METRICS_FILE);
    let d = out.join(DECODES_FILE);
    atomic_write(&m, metrics.as_bytes())?;
    atomic_write(&d, decodes)?;
    Ok(vec![m, d])
}

fn save_ctc(config: &RunConfig, ft: &CtcFinetuner) -> Result<Vec<PathBuf>> {
    let head = CtcHeadConfig {
        vocabulary: Some(ft.vocab.clone()),
        ..ft.config.clone()
    };
    let snap = HeadSnapshot {
        encoder: ft.model.trunk.config.clone(),
        head,
    };
    let mut ck = Checkpoint::new("ctc", &snap, config.seed, ft.step)?;
    ck.add_params("model", &ft.model);
    ck.add_adam("optim", &ft.adam);
    let path = config.checkpoint_out();
    ck.save(&path)?;
    Ok(vec![path])
}

fn finetune_seq2seq(config: &RunConfig) -> Result<RunOutcome> {
    let ck = Checkpoint::load(required(&config.paths.checkpoint_in))?;
    let trunk = trunk_from_checkpoint(&ck)?;
    let (manifest, audio) = load_data(required(&config.paths.manifest))?;
    let mut ft = Seq2SeqFinetuner::new(trunk, &manifest, audio, config.seq2seq.clone(), config.seed)?;
    let until = updates(config, config.seq2seq.train.schedule.total_updates());
    let out = &config.paths.output_dir;
    fs::create_dir_all(out)?;
    let reports = ft.run(until, &mut std::io::sink())?;
    let snap = HeadSnapshot {
        encoder: ft.model.trunk.config.clone(),
        head: ft.config.clone(),
    };
    let mut ck = Checkpoint::new("seq2seq", &snap, config.seed, ft.step)?;
    ck.meta.extra = serde_json::to_value(&ft.bpe)?;
    ck.add_params("model", &ft.model);
    ck.add_adam("optim", &ft.adam);
    let ck_path = config.checkpoint_out();
    ck.save(&ck_path)?;
    let log_path = out.join(METRICS_FILE);
    write_log(&log_path, &reports)?;
    let mut artifacts = vec![ck_path, log_path];
    let mut summary = format!("fine-tuned translation head for {} updates", ft.step);
    if let Some(dev) = &config.paths.dev_manifest {
        let (dev, dev_audio) = load_data(dev)?;
        let hyps = ft.translate(&dev.rows, &dev_audio)?;
        let bleu = score_translations(&dev.rows, &hyps)?;
        artifacts.extend(write_dev(out, &bleu_tsv(&bleu), &decode_rows(&hyps)?)?);
        write!(summary, "; dev BLEU {:.2}", bleu.bleu).unwrap();
    }
    Ok(RunOutcome {
        task: Task::FinetuneSeq2seq,
        artifacts,
        summary,
    })
}

fn bleu_tsv(r: &crate::metrics::BleuReport) -> String {
    format!("{}\n{}\n", crate::metrics::BleuReport::tsv_header(), r.tsv_row())
}

fn accuracy_tsv(acc: f64, n: usize) -> String {
    format!("accuracy\tutterances\n{acc:.6}\t{n}\n")
}

fn finetune_classify(config: &RunConfig) -> Result<RunOutcome> {
    let ck = Checkpoint::load(required(&config.paths.checkpoint_in))?;
    let trunk = trunk_from_checkpoint(&ck)?;
    let (manifest, audio) = load_data(required(&config.paths.manifest))?;
    let mut ft = ClassifierFinetuner::new(trunk, &manifest, audio, config.classifier.clone(), config.seed)?;
    let until = updates(config, config.classifier.train.schedule.total_updates());
    let out = &config.paths.output_dir;
    fs::create_dir_all(out)?;
    let reports = ft.run(until, &mut std::io::sink())?;
    let head = ClassifierConfig {
        labels: Some(ft.labels.clone()),
        ..ft.config.clone()
    };
    let snap = HeadSnapshot {
        encoder: ft.model.trunk.config.clone(),
        head,
    };
    let mut ck = Checkpoint::new("classifier", &snap, config.seed, ft.step)?;
    ck.add_params("model", &ft.model);
    ck.add_adam("optim", &ft.adam);
    let ck_path = config.checkpoint_out();
    ck.save(&ck_path)?;
    let log_path = out.join(METRICS_FILE);
    write_log(&log_path, &reports)?;
    let mut artifacts = vec![ck_path, log_path];
    let mut summary = format!("fine-tuned classifier for {} updates", ft.step);
    if let Some(dev) = &config.paths.dev_manifest {
        let (dev, dev_audio) = load_data(dev)?;
        let preds = ft.predict(&dev.rows, &dev_audio)?;
        let acc = score_predictions(&dev.rows, &preds, ft.config.label_source)?;
        artifacts.extend(write_dev(out, &accuracy_tsv(acc, dev.rows.len()), &decode_rows(&preds)?)?);
        write!(summary, "; dev accuracy {acc:.4}").unwrap();
    }
    Ok(RunOutcome {
        task: Task::FinetuneClassify,
        artifacts,
        summary,
    })
}

/// A fine-tuned model restored from its checkpoint.
pub enum HeadModel {
    Ctc { model: CtcModel<f32>, vocab: Vocabulary },
    Seq2Seq { model: Seq2SeqModel<f32>, bpe: Bpe, config: Seq2SeqConfig },
    Classifier { model: ClassifierModel<f32>, config: ClassifierConfig, labels: Vec<String> },
}

fn snapshot<C: serde::de::DeserializeOwned>(ck: &Checkpoint) -> Result<HeadSnapshot<C>> {
    serde_json::from_value(ck.meta.config.clone()).map_err(|e| Error::CorruptCheckpoint(format!("config snapshot: {e}")))
}

pub fn load_head(ck: &Checkpoint) -> Result<HeadModel> {
    let mut rng = SeedTree::new(0).rng();
    match ck.meta.kind.as_str() {
        "ctc" => {
            let snap: HeadSnapshot<CtcHeadConfig> = snapshot(ck)?;
            let vocab = snap
                .head
                .vocabulary
                .ok_or_else(|| Error::CorruptCheckpoint("CTC checkpoint without vocabulary".into()))?;
            let mut model = CtcModel::new(Trunk::new(snap.encoder, &mut rng)?, vocab.len(), &mut rng);
            ck.load_params("model", &mut model)?;
            Ok(HeadModel::Ctc { model, vocab })
        }
        "seq2seq" => {
            let snap: HeadSnapshot<Seq2SeqConfig> = snapshot(ck)?;
            let mut bpe: Bpe = serde_json::from_value(ck.meta.extra.clone())?;
            bpe.reindex();
            let trunk = Trunk::new(snap.encoder, &mut rng)?;
            let mut model = Seq2SeqModel::new(trunk, &snap.head, bpe.len(), &[], &SeedTree::new(0))?;
            ck.load_params("model", &mut model)?;
            Ok(HeadModel::Seq2Seq {
                model,
                bpe,
                config: snap.head,
            })
        }
        "classifier" => {
            let snap: HeadSnapshot<ClassifierConfig> = snapshot(ck)?;
            let labels = snap
                .head
                .labels
                .clone()
                .ok_or_else(|| Error::CorruptCheckpoint("classifier checkpoint without labels".into()))?;
            let mut model = ClassifierModel::new(Trunk::new(snap.encoder, &mut rng)?, labels.len(), &mut rng);
            ck.load_params("model", &mut model)?;
            Ok(HeadModel::Classifier {
                model,
                config: snap.head,
                labels,
            })
        }
        "pretrain" => Err(Error::Config(
            "checkpoint holds a pretrained model without a head; fine-tune it first".into(),
        )),
        other => Err(Error::CorruptCheckpoint(format!("unknown model kind `{other}`"))),
    }
}

/// Decodes `paths.manifest`; with `score`, also scores against its transcripts.
fn decode(config: &RunConfig, score: bool) -> Result<RunOutcome> {
    let ck = Checkpoint::load(required(&config.paths.checkpoint_in))?;
    let head = load_head(&ck)?;
    let lm = load_lm(config)?;
    let (manifest, audio) = load_data(required(&config.paths.manifest))?;
    let rows = &manifest.rows;
    let (hyps, metrics) = match &head {
        HeadModel::Ctc { model, vocab } => {
            let hyps = transcribe(model, vocab, rows, &audio, ctc_decoder(config, lm.as_ref()))?;
            let m = if score {
                let r = score_transcripts(rows, &hyps, config.decode.unit)?;
                Some((error_rate_tsv(&r), format!("error rate {:.4}", r.rate)))
            } else {
                None
            };
            (hyps, m)
        }
        HeadModel::Seq2Seq { model, bpe, config: c } => {
            let hyps = translate(model, bpe, c, rows, &audio)?;
            let m = if score {
                let r = score_translations(rows, &hyps)?;
                Some((bleu_tsv(&r), format!("BLEU {:.2}", r.bleu)))
            } else {
                None
            };
            (hyps, m)
        }
        HeadModel::Classifier { model, config: c, labels } => {
            let preds = predict(model, labels, rows, &audio)?;
            let m = if score {
                let acc = score_predictions(rows, &preds, c.label_source)?;
                Some((accuracy_tsv(acc, rows.len()), format!("accuracy {acc:.4}")))
            } else {
                None
            };
            (preds, m)
        }
    };
    let out = &config.paths.output_dir;
    fs::create_dir_all(out)?;
    let dec_path = out.join(DECODES_FILE);
    atomic_write(&dec_path, &decode_rows(&hyps)?)?;
    let mut artifacts = vec![dec_path];
    let summary = match metrics {
        Some((tsv, line)) => {
            let p = out.join(METRICS_FILE);
            atomic_write(&p, tsv.as_bytes())?;
            artifacts.push(p);
            format!("scored {} utterances: {line}", rows.len())
        }
        None => format!("decoded {} utterances", rows.len()),
    };
    Ok(RunOutcome {
        task: if score { Task::Evaluate } else { Task::Decode },
        artifacts,
        summary,
    })
}

fn tune(config: &RunConfig) -> Result<RunOutcome> {
    let ck = Checkpoint::load(required(&config.paths.checkpoint_in))?;
    let HeadModel::Ctc { model, vocab } = load_head(&ck)? else {
        return Err(Error::Config("LM tuning needs a CTC checkpoint".into()));
    };
    let lm = NgramLm::read(required(&config.paths.lm))?;
    let (manifest, audio) = load_data(required(&config.paths.manifest))?;
    let log_probs = manifest
        .rows
        .iter()
        .map(|r| model.log_probs(audio.get(&r.id)?))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&str> = manifest.rows.iter().map(|r| r.transcript.as_deref().unwrap_or("")).collect();
    let width = config.tune.beam_width;
    let unit = config.tune.unit;
    let objective = |lambda: f64, beta: f64| -> Result<f64> {
        let decoder = Decoder::Beam {
            width,
            fusion: Fusion {
                lm: Some(&lm),
                lambda,
                beta,
            },
        };
        let hyps = log_probs
            .iter()
            .map(|lp| decode_log_probs(lp, &vocab, decoder).map(|h| h.0))
            .collect::<Result<Vec<_>>>()?;
        Ok(error_rate(&refs, &hyps, unit)?.rate)
    };
    let mut rng = SeedTree::new(config.seed).child("tune").rng();
    let result = tune_lm(&config.tune.space, config.tune.trials, &mut rng, objective)?;
    let out = &config.paths.output_dir;
    fs::create_dir_all(out)?;
    let mut s = String::from("trial\tlambda\tbeta\terror_rate\n");
    for (i, (l, b, e)) in result.trials.iter().enumerate() {
        writeln!(s, "{i}\t{l}\t{b}\t{e:.6}").unwrap();
    }
    let trials_path = out.join(TUNE_FILE);
    atomic_write(&trials_path, s.as_bytes())?;
    let best_path = out.join(METRICS_FILE);
    let best = format!(
        "lambda\tbeta\terror_rate\n{}\t{}\t{:.6}\n",
        result.lambda, result.beta, result.error_rate
    );
    atomic_write(&best_path, best.as_bytes())?;
    Ok(RunOutcome {
        task: Task::TuneLm,
        artifacts: vec![best_path, trials_path],
        summary: format!(
            "best lambda {} beta {} with error rate {:.4}",
            result.lambda, result.beta, result.error_rate
        ),
    })
}

fn make_synth_corpus(config: &RunConfig) -> Result<RunOutcome> {
    let corpus = generate_synthetic_corpus(&config.synth)?;
    let out = &config.paths.output_dir;
    corpus.write(out)?;
    Ok(RunOutcome {
        task: Task::MakeSynthCorpus,
        artifacts: vec![out.join("manifest.tsv"), out.join("translations.tsv")],
        summary: format!(
            "wrote {} utterances in {} languages",
            corpus.manifest.rows.len(),
            corpus.languages.len()
        ),
    })
}
