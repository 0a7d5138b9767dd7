//! A micro configuration driven end to end through `run::run`.

use std::fs;
use std::path::{Path, PathBuf};

use crossling::config::RunConfig;
use crossling::run::{run, METRICS_FILE};

pub const MICRO: &str = r#"
seed = 3

[synth]
n_languages = 2
hours_per_language = [0.004]

[pretrain.encoder]
depth = 1
dim = 16
heads = 2
ffn_dim = 32
layerdrop = 0.0
pos_conv_kernel = 5
pos_conv_groups = 2
conv = [
  { channels = 8, kernel = 10, stride = 5 },
  { channels = 8, kernel = 7, stride = 4 },
  { channels = 8, kernel = 7, stride = 4 },
  { channels = 8, kernel = 2, stride = 2 },
  { channels = 8, kernel = 2, stride = 2 },
]

[pretrain.codebook]
groups = 2
entries = 8
dim = 16

[pretrain.objective]
k = 10

[pretrain.batch]
max_crop = 16000
batch_samples = 32000

[pretrain.schedule]
kind = "poly-warmup"
peak_lr = 1e-3
total_updates = 8
warmup_updates = 2
"#;

pub fn config(task: &str, overrides: &[String]) -> RunConfig {
    let mut all = vec![format!("--task={task}")];
    all.extend_from_slice(overrides);
    RunConfig::parse(MICRO, &all).unwrap()
}

pub fn path_flag(key: &str, p: &Path) -> String {
    format!("--paths.{key}=\"{}\"", p.display())
}

pub fn make_corpus(dir: &Path) -> PathBuf {
    run(&config("make-synth-corpus", &[path_flag("output_dir", dir)])).unwrap();
    dir.join("manifest.tsv")
}

pub fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

pub fn pretrain(manifest: &Path, out: &Path, extra: &[String]) -> String {
    let mut o = vec![path_flag("manifest", manifest), path_flag("output_dir", out)];
    o.extend_from_slice(extra);
    run(&config("pretrain", &o)).unwrap();
    fs::read_to_string(out.join(METRICS_FILE)).unwrap()
}

/// Two identical pretraining runs, then a run stopped at update 3 and
/// resumed from its checkpoint; all three logs must match byte for byte.
pub fn determinism_and_resume() -> String {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = make_corpus(&tmp.path().join("corpus"));
    let full = pretrain(&manifest, &tmp.path().join("full"), &[]);
    let again = pretrain(&manifest, &tmp.path().join("again"), &[]);
    assert_eq!(full, again, "identical runs diverged");
    assert_eq!(full.lines().count(), 9);

    let part = tmp.path().join("part");
    let head = pretrain(&manifest, &part, &["--train.updates=3".into()]);
    assert_eq!(head.lines().count(), 4);
    let resumed = pretrain(
        &manifest,
        &part,
        &["--train.resume=true".into(), path_flag("checkpoint_in", &part.join("checkpoint.bin"))],
    );
    assert_eq!(resumed, full, "resumed run diverged");
    format!("{} logged updates identical across runs and across a resume at update 3", full.lines().count() - 1)
}
