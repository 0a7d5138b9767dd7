use std::collections::HashSet;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const MANIFEST_HEADER: [&str; 6] = ["id", "path", "num_samples", "language", "corpus", "transcript"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub id: String,
    /// Audio path, relative to the manifest's directory unless absolute.
    pub path: PathBuf,
    pub num_samples: usize,
    pub language: String,
    pub corpus: String,
    pub transcript: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    /// Directory that relative audio paths resolve against.
    pub root: PathBuf,
}

impl Manifest {
    pub fn new(rows: Vec<ManifestRow>, root: impl Into<PathBuf>) -> Result<Self> {
        let m = Self {
            rows,
            root: root.into(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (i, r) in self.rows.iter().enumerate() {
            let line = i + 2;
            let fail = |msg: String| Err(Error::Manifest { line, msg });
            if r.num_samples == 0 {
                return fail(format!("utterance {} has zero samples", r.id));
            }
            if r.language.is_empty() || r.corpus.is_empty() || r.id.is_empty() {
                return fail("id, language and corpus must be non-empty".into());
            }
            if r.id.contains(['\t', '\n']) || r.transcript.as_deref().is_some_and(|t| t.contains(['\t', '\n'])) {
                return fail("fields may not contain tabs or newlines".into());
            }
            if !seen.insert(r.id.as_str()) {
                return fail(format!("duplicate utterance id {}", r.id));
            }
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let mut reader = csv::ReaderBuilder::new()
            .delimiter(b'\t')
            .quoting(false)
            .has_headers(true)
            .flexible(true)
            .from_path(path)?;
        let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        if header != MANIFEST_HEADER {
            return Err(Error::Manifest {
                line: 1,
                msg: format!("expected header {MANIFEST_HEADER:?}, found {header:?}"),
            });
        }
        let mut rows = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            if rec.len() != 5 && rec.len() != 6 {
                return Err(Error::Manifest {
                    line,
                    msg: format!("expected 6 fields, found {}", rec.len()),
                });
            }
            let num_samples = rec[2].parse().map_err(|_| Error::Manifest {
                line,
                msg: format!("num_samples `{}` is not an integer", &rec[2]),
            })?;
            let transcript = rec.get(5).filter(|t| !t.is_empty()).map(str::to_string);
            rows.push(ManifestRow {
                id: rec[0].to_string(),
                path: PathBuf::from(&rec[1]),
                num_samples,
                language: rec[3].to_string(),
                corpus: rec[4].to_string(),
                transcript,
            });
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(rows, root)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = MANIFEST_HEADER.join("\t");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                r.id,
                r.path.display(),
                r.num_samples,
                r.language,
                r.corpus,
                r.transcript.as_deref().unwrap_or("")
            ));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = File::create(path)?;
        f.write_all(self.to_tsv().as_bytes())?;
        Ok(())
    }

    pub fn resolve(&self, row: &ManifestRow) -> PathBuf {
        if row.path.is_absolute() {
            row.path.clone()
        } else {
            self.root.join(&row.path)
        }
    }

    pub fn total_samples(&self) -> usize {
        self.rows.iter().map(|r| r.num_samples).sum()
    }
}
