//! Run configuration: a TOML file with one section per component, where any
//! key can be overridden from the command line as `--section.key=value`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ctc::SearchSpace;
use crate::datapipe::SynthConfig;
use crate::error::{Error, Result};
use crate::heads::{ClassifierConfig, CtcHeadConfig, Seq2SeqConfig};
use crate::metrics::Unit;
use crate::pretrain::PretrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Pretrain,
    FinetuneCtc,
    FinetuneSeq2seq,
    FinetuneClassify,
    Decode,
    Evaluate,
    TuneLm,
    MakeSynthCorpus,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.into()))
            .map_err(|_| Error::Config(format!("unknown task {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Training manifest (or the manifest to decode / evaluate / tune on).
    pub manifest: Option<PathBuf>,
    /// Held-out manifest scored after fine-tuning.
    pub dev_manifest: Option<PathBuf>,
    pub checkpoint_in: Option<PathBuf>,
    /// Defaults to `<output_dir>/checkpoint.bin`.
    pub checkpoint_out: Option<PathBuf>,
    /// ARPA language model for decoding and tuning.
    pub lm: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            manifest: None,
            dev_manifest: None,
            checkpoint_in: None,
            checkpoint_out: None,
            lm: None,
            output_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainLoop {
    /// Stop after this many completed updates; 0 means the schedule length.
    pub updates: u64,
    /// Save an intermediate checkpoint every this many updates; 0 disables.
    pub checkpoint_every: u64,
    /// Continue from `checkpoint_in` (same task) instead of starting fresh.
    pub resume: bool,
    /// Accept a checkpoint whose config hash differs from the run's.
    pub allow_config_mismatch: bool,
}

impl Default for TrainLoop {
    fn default() -> Self {
        Self {
            updates: 0,
            checkpoint_every: 0,
            resume: false,
            allow_config_mismatch: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMethod {
    Greedy,
    Beam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub method: DecodeMethod,
    pub beam_width: usize,
    /// LM weight; only used with `paths.lm`.
    pub lm_weight: f64,
    /// Per-word bonus added at each completed word.
    pub word_bonus: f64,
    /// Error-rate unit for CTC evaluation.
    pub unit: Unit,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            method: DecodeMethod::Beam,
            beam_width: 50,
            lm_weight: 0.0,
            word_bonus: 0.0,
            unit: Unit::Word,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneConfig {
    pub trials: usize,
    pub space: SearchSpace,
    pub beam_width: usize,
    pub unit: Unit,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            trials: 128,
            space: SearchSpace::default(),
            beam_width: 50,
            unit: Unit::Word,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Option<Task>,
    pub seed: u64,
    pub paths: Paths,
    pub train: TrainLoop,
    pub pretrain: PretrainConfig,
    pub ctc: CtcHeadConfig,
    pub seq2seq: Seq2SeqConfig,
    pub classifier: ClassifierConfig,
    pub decode: DecodeConfig,
    pub tune: TuneConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: None,
            seed: 0,
            paths: Paths::default(),
            train: TrainLoop::default(),
            pretrain: PretrainConfig::default(),
            ctc: CtcHeadConfig::default(),
            seq2seq: Seq2SeqConfig::default(),
            classifier: ClassifierConfig::default(),
            decode: DecodeConfig::default(),
            tune: TuneConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

/// Parses `raw` as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies one `--dotted.key=value` override to `table`.
pub fn apply_override(table: &mut toml::Table, flag: &str) -> Result<()> {
    let body = flag
        .strip_prefix("--")
        .ok_or_else(|| Error::Config(format!("override {flag:?} must start with --")))?;
    let (key, raw) = body
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {flag:?} must look like --section.key=value")))?;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override {flag:?} has an empty key segment")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {flag:?}: `{p}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw));
    Ok(())
}

impl RunConfig {
    /// Parses TOML text plus overrides and validates the result.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::parse(&std::fs::read_to_string(path)?, overrides)
    }

    pub fn task(&self) -> Result<Task> {
        self.task.ok_or_else(|| Error::Config("no task given".into()))
    }

    pub fn checkpoint_out(&self) -> PathBuf {
        self.paths
            .checkpoint_out
            .clone()
            .unwrap_or_else(|| self.paths.output_dir.join("checkpoint.bin"))
    }

    /// Section validation plus the paths the task needs. Unset required
    /// paths are configuration errors; set paths that do not exist are
    /// missing artifacts.
    pub fn validate(&self) -> Result<()> {
        let task = self.task()?;
        let need = |p: &Option<PathBuf>, what: &str| -> Result<()> {
            match p {
                None => Err(Error::Config(format!("task {task:?} needs paths.{what}"))),
                Some(p) if !p.exists() => Err(Error::MissingArtifact(p.clone())),
                Some(_) => Ok(()),
            }
        };
        let optional = |p: &Option<PathBuf>| -> Result<()> {
            match p {
                Some(p) if !p.exists() => Err(Error::MissingArtifact(p.clone())),
                _ => Ok(()),
            }
        };
        match task {
            Task::Pretrain => {
                self.pretrain.validate()?;
                need(&self.paths.manifest, "manifest")?;
                if self.train.resume {
                    need(&self.paths.checkpoint_in, "checkpoint_in")?;
                }
            }
            Task::FinetuneCtc | Task::FinetuneSeq2seq | Task::FinetuneClassify => {
                match task {
                    Task::FinetuneCtc => self.ctc.train.validate()?,
                    Task::FinetuneSeq2seq => self.seq2seq.validate()?,
                    _ => self.classifier.train.validate()?,
                }
                need(&self.paths.manifest, "manifest")?;
                need(&self.paths.checkpoint_in, "checkpoint_in")?;
                optional(&self.paths.dev_manifest)?;
            }
            Task::Decode | Task::Evaluate => {
                need(&self.paths.checkpoint_in, "checkpoint_in")?;
                need(&self.paths.manifest, "manifest")?;
                optional(&self.paths.lm)?;
                if self.decode.beam_width == 0 {
                    return Err(Error::Config("decode.beam_width must be at least 1".into()));
                }
                if self.paths.lm.is_some() && self.decode.lm_weight < 0.0 {
                    return Err(Error::Config("decode.lm_weight must be non-negative".into()));
                }
            }
            Task::TuneLm => {
                need(&self.paths.checkpoint_in, "checkpoint_in")?;
                need(&self.paths.manifest, "manifest")?;
                need(&self.paths.lm, "lm")?;
                self.tune.space.validate()?;
                if self.tune.trials == 0 || self.tune.beam_width == 0 {
                    return Err(Error::Config("tune.trials and tune.beam_width must be positive".into()));
                }
            }
            Task::MakeSynthCorpus => self.synth.validate()?,
        }
        Ok(())
    }
}
