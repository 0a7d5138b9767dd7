//! Framed binary checkpoints. The byte layout is documented in
//! `docs/checkpoint-format.md`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Adam, AdamState, DType, Parameterized, Real, Tensor};

pub const MAGIC: &[u8; 8] = b"CRSLCKPT";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Hex SHA-256 of the canonical JSON form of `config`.
pub fn config_hash(config: &impl Serialize) -> Result<String> {
    // Round-trip through Value so object keys come out sorted.
    let v = serde_json::to_value(config)?;
    let digest = Sha256::digest(serde_json::to_vec(&v)?);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    /// Which model the arrays belong to: `pretrain`, `ctc`, `seq2seq`, `classifier`.
    pub kind: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub seed: u64,
    /// Completed updates.
    pub step: u64,
    /// Gumbel temperature at `step`, for pretraining checkpoints.
    pub temperature: Option<f64>,
    /// Per-parameter optimizer update counts.
    pub optimizer_steps: BTreeMap<String, u64>,
    /// Head-specific state such as vocabularies or label sets.
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Little-endian raw values.
    pub data: Vec<u8>,
}

impl Array {
    pub fn from_tensor<T: Real>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let mut data = Vec::with_capacity(t.len() * T::DTYPE.size());
        for v in t.data() {
            match T::DTYPE {
                DType::F32 => data.extend_from_slice(&v.to_f32().unwrap().to_le_bytes()),
                DType::F64 => data.extend_from_slice(&v.to_f64().unwrap().to_le_bytes()),
            }
        }
        Self {
            name: name.into(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            data,
        }
    }

    /// Values as `T`. Widening `f32` into `f64` is exact and allowed;
    /// narrowing is refused.
    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        let values: Vec<T> = match (self.dtype, T::DTYPE) {
            (DType::F32, _) => self
                .data
                .chunks_exact(4)
                .map(|c| T::from_f32(f32::from_le_bytes(c.try_into().unwrap())).unwrap())
                .collect(),
            (DType::F64, DType::F64) => self
                .data
                .chunks_exact(8)
                .map(|c| T::from_f64(f64::from_le_bytes(c.try_into().unwrap())).unwrap())
                .collect(),
            (DType::F64, DType::F32) => {
                return Err(Error::CorruptCheckpoint(format!(
                    "array `{}` is f64 but the model stores f32",
                    self.name
                )))
            }
        };
        Tensor::new(self.shape.clone(), values)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: Metadata,
    pub arrays: Vec<Array>,
}

impl Checkpoint {
    pub fn new(kind: &str, config: &impl Serialize, seed: u64, step: u64) -> Result<Self> {
        Ok(Self {
            meta: Metadata {
                kind: kind.into(),
                config: serde_json::to_value(config)?,
                config_hash: config_hash(config)?,
                seed,
                step,
                temperature: None,
                optimizer_steps: BTreeMap::new(),
                extra: serde_json::Value::Null,
            },
            arrays: Vec::new(),
        })
    }

    pub fn array(&self, name: &str) -> Option<&Array> {
        self.arrays.iter().find(|a| a.name == name)
    }

    /// Appends every parameter of `model` as `{prefix}.{name}`.
    pub fn add_params<T: Real>(&mut self, prefix: &str, model: &impl Parameterized<T>) {
        for (name, p) in model.named_params() {
            self.arrays.push(Array::from_tensor(format!("{prefix}.{name}"), &p.value));
        }
    }

    /// Copies `{prefix}.*` arrays into `model`. The array sets must match
    /// exactly; the first disagreement in model order is reported.
    pub fn load_params<T: Real>(&self, prefix: &str, model: &mut impl Parameterized<T>) -> Result<()> {
        let pre = format!("{prefix}.");
        let mut params = model.named_params_mut();
        let stored: Vec<&Array> = self.arrays.iter().filter(|a| a.name.starts_with(&pre)).collect();
        for (i, (name, p)) in params.iter().enumerate() {
            let full = format!("{pre}{name}");
            let found = stored.get(i).filter(|a| a.name == full).copied().or_else(|| self.array(&full));
            match found {
                Some(a) if a.shape == p.value.shape() => {}
                other => {
                    return Err(Error::CheckpointShape {
                        name: full,
                        expected: Some(p.value.shape().to_vec()),
                        found: other.map(|a| a.shape.clone()),
                    })
                }
            }
        }
        if let Some(extra) = stored.iter().find(|a| !params.iter().any(|(n, _)| format!("{pre}{n}") == a.name)) {
            return Err(Error::CheckpointShape {
                name: extra.name.clone(),
                expected: None,
                found: Some(extra.shape.clone()),
            });
        }
        for (name, p) in params.iter_mut() {
            p.value = self.array(&format!("{pre}{name}")).unwrap().to_tensor()?;
        }
        Ok(())
    }

    /// Appends first and second moments as `{prefix}.{param}.m` / `.v`.
    pub fn add_adam<T: Real>(&mut self, prefix: &str, adam: &Adam<T>) {
        for (name, s) in &adam.states {
            self.arrays.push(Array::from_tensor(format!("{prefix}.{name}.m"), &s.m));
            self.arrays.push(Array::from_tensor(format!("{prefix}.{name}.v"), &s.v));
            self.meta.optimizer_steps.insert(name.clone(), s.t);
        }
    }

    /// Rebuilds optimizer state saved by [`Self::add_adam`].
    pub fn load_adam<T: Real>(&self, prefix: &str, adam: &mut Adam<T>) -> Result<()> {
        let c = adam.config;
        adam.states.clear();
        for (name, &t) in &self.meta.optimizer_steps {
            let get = |part: &str| {
                let full = format!("{prefix}.{name}.{part}");
                self.array(&full)
                    .ok_or_else(|| Error::CorruptCheckpoint(format!("optimizer array `{full}` missing")))?
                    .to_tensor::<T>()
            };
            let mut s = AdamState::new(&[0], c.beta1, c.beta2, c.eps);
            s.m = get("m")?;
            s.v = get("v")?;
            s.t = t;
            adam.states.insert(name.clone(), s);
        }
        Ok(())
    }

    /// Errors unless the stored config hash equals `expected` or `allow_mismatch` is set.
    pub fn check_config(&self, expected: &str, allow_mismatch: bool) -> Result<()> {
        if self.meta.config_hash != expected && !allow_mismatch {
            return Err(Error::ConfigHash {
                expected: expected.into(),
                found: self.meta.config_hash.clone(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            let expected = a.shape.iter().product::<usize>() * a.dtype.size();
            if a.data.len() != expected || a.shape.len() > u8::MAX as usize {
                return Err(Error::InvalidInput(format!("array `{}` has inconsistent size", a.name)));
            }
            out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            out.push(a.dtype.tag());
            out.push(a.shape.len() as u8);
            for &d in &a.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(a.data.len() as u64).to_le_bytes());
            out.extend_from_slice(&a.data);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::CorruptCheckpoint("bad magic bytes".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::CheckpointVersion(version));
        }
        if bytes.len() < 12 + DIGEST_LEN {
            return Err(Error::CorruptCheckpoint("file truncated".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        let mut r = Reader { buf: body, pos: 12 };
        let meta_len = r.u64()? as usize;
        let meta: Metadata = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::CorruptCheckpoint(format!("metadata: {e}")))?;
        let n = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::CorruptCheckpoint("array name is not UTF-8".into()))?;
            let dtype = DType::from_tag(r.take(1)?[0])
                .ok_or_else(|| Error::CorruptCheckpoint(format!("array `{name}` has an unknown dtype")))?;
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = r.u64()? as usize;
            if shape.iter().try_fold(dtype.size(), |acc, &d| acc.checked_mul(d)) != Some(len) {
                return Err(Error::CorruptCheckpoint(format!("array `{name}` payload does not match its shape")));
            }
            let data = r.take(len)?.to_vec();
            arrays.push(Array { name, dtype, shape, data });
        }
        if r.pos != body.len() {
            return Err(Error::CorruptCheckpoint("trailing bytes after the array table".into()));
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::CorruptCheckpoint("checksum mismatch".into()));
        }
        Ok(Self { meta, arrays })
    }

    /// Writes to a temporary sibling and renames it over `path`, so readers
    /// see either the previous file or the complete new one.
    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Temp-file-then-rename write in the destination directory.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::CorruptCheckpoint(format!(
                "file truncated: needed {n} bytes at offset {}",
                self.pos
            ))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
