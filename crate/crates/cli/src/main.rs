use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use crossling::config::{RunConfig, Task};
use crossling::{Error, Result};
use crossling::metrics::{accuracy, corpus_bleu, error_rate, BleuReport, ErrorRateReport, Unit};
use crossling::run::run;

/// Multilingual speech pretraining, fine-tuning and evaluation.
///
/// Every config key can be overridden after the config path as
/// `--section.key=value`, e.g. `--paths.output_dir=runs/a --pretrain.objective.k=50`.
#[derive(Parser)]
#[command(name = "crossling", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct TaskArgs {
    /// TOML run config; optional when every needed key is given as an override.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// `--section.key=value` overrides.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the task named by the config's `task` key.
    Run {
        config: PathBuf,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    Pretrain(TaskArgs),
    FinetuneCtc(TaskArgs),
    FinetuneSeq2seq(TaskArgs),
    FinetuneClassify(TaskArgs),
    /// Decode a manifest with a fine-tuned checkpoint.
    Decode(TaskArgs),
    /// Decode and score a manifest with a fine-tuned checkpoint.
    Evaluate(TaskArgs),
    /// Random search over LM weight and word bonus.
    TuneLm(TaskArgs),
    MakeSynthCorpus(TaskArgs),
    /// Score a hypothesis TSV against a reference TSV, joined on the first column.
    Score {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long, value_enum)]
        metric: Metric,
        /// Reference column holding the text.
        #[arg(long, default_value = "transcript")]
        ref_column: String,
        /// Hypothesis column holding the text.
        #[arg(long, default_value = "hypothesis")]
        hyp_column: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Wer,
    Per,
    Cer,
    Bleu,
    Accuracy,
}

fn task_config(task: Task, args: TaskArgs) -> Result<RunConfig> {
    let text = match &args.config {
        Some(p) if !p.exists() => return Err(Error::MissingArtifact(p.clone())),
        Some(p) => fs::read_to_string(p)?,
        None => String::new(),
    };
    let name = serde_json::to_value(task)?;
    let mut overrides = vec![format!("--task={name}")];
    overrides.extend(args.overrides);
    RunConfig::parse(&text, &overrides)
}

/// `id -> column` for a headed TSV.
fn read_column(path: &Path, column: &str) -> Result<(Vec<String>, HashMap<String, String>)> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split('\t').collect();
    let col = header.iter().position(|h| *h == column).ok_or_else(|| Error::Manifest {
        line: 1,
        msg: format!("{} has no `{column}` column", path.display()),
    })?;
    let mut order = Vec::new();
    let mut map = HashMap::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let value = fields.get(col).ok_or_else(|| Error::Manifest {
            line: i + 2,
            msg: format!("expected {} fields, found {}", header.len(), fields.len()),
        })?;
        if map.insert(fields[0].to_string(), value.to_string()).is_some() {
            return Err(Error::Manifest {
                line: i + 2,
                msg: format!("duplicate id {}", fields[0]),
            });
        }
        order.push(fields[0].to_string());
    }
    Ok((order, map))
}

fn score(reference: &Path, hyp: &Path, metric: Metric, ref_column: &str, hyp_column: &str) -> Result<String> {
    let (ids, refs) = read_column(reference, ref_column)?;
    let (_, hyps) = read_column(hyp, hyp_column)?;
    let mut r = Vec::with_capacity(ids.len());
    let mut h = Vec::with_capacity(ids.len());
    for id in &ids {
        let hy = hyps
            .get(id)
            .ok_or_else(|| Error::InvalidInput(format!("no hypothesis for utterance {id}")))?;
        r.push(refs[id].as_str());
        h.push(hy.as_str());
    }
    if hyps.len() != ids.len() {
        return Err(Error::InvalidInput(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            ids.len()
        )));
    }
    Ok(match metric {
        Metric::Wer | Metric::Per | Metric::Cer => {
            let unit = match metric {
                Metric::Wer => Unit::Word,
                Metric::Per => Unit::Phoneme,
                _ => Unit::Char,
            };
            let rep = error_rate(&r, &h, unit)?;
            format!("{}\n{}", ErrorRateReport::tsv_header(), rep.tsv_row())
        }
        Metric::Bleu => format!("{}\n{}", BleuReport::tsv_header(), corpus_bleu(&r, &h)?.tsv_row()),
        Metric::Accuracy => {
            let r: Vec<&str> = r.iter().map(|s| s.trim()).collect();
            let h: Vec<&str> = h.iter().map(|s| s.trim()).collect();
            format!("accuracy\tutterances\n{:.6}\t{}", accuracy(&r, &h)?, r.len())
        }
    })
}

fn dispatch(cli: Cli) -> Result<()> {
    let config = match cli.command {
        Command::Score {
            reference,
            hyp,
            metric,
            ref_column,
            hyp_column,
        } => {
            println!("{}", score(&reference, &hyp, metric, &ref_column, &hyp_column)?);
            return Ok(());
        }
        Command::Run { config, overrides } => RunConfig::load(&config, &overrides)?,
        Command::Pretrain(a) => task_config(Task::Pretrain, a)?,
        Command::FinetuneCtc(a) => task_config(Task::FinetuneCtc, a)?,
        Command::FinetuneSeq2seq(a) => task_config(Task::FinetuneSeq2seq, a)?,
        Command::FinetuneClassify(a) => task_config(Task::FinetuneClassify, a)?,
        Command::Decode(a) => task_config(Task::Decode, a)?,
        Command::Evaluate(a) => task_config(Task::Evaluate, a)?,
        Command::TuneLm(a) => task_config(Task::TuneLm, a)?,
        Command::MakeSynthCorpus(a) => task_config(Task::MakeSynthCorpus, a)?,
    };
    let outcome = run(&config)?;
    println!("{}", outcome.summary);
    for a in &outcome.artifacts {
        println!("wrote {}", a.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.code());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
