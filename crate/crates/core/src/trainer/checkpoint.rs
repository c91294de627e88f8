//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "RLMCKPT1"            8 bytes
//! version               u32
//! metadata length       u64, followed by that many bytes of UTF-8 JSON
//!                       {"config": .., "vocabulary": [..], "train_state": ..}
//! tensor count          u32
//! per tensor:
//!   name length         u32, followed by the UTF-8 name
//!   rank                u32
//!   dims                rank × u32
//!   dtype               u8 (0 = f32, 1 = f64)
//!   values              row-major, 4 or 8 bytes each
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::state::TrainState;
use crate::autodiff::Tensor;
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::nn::{LanguageModel, ModelConfig, NamedParam};

pub const MAGIC: &[u8; 8] = b"RLMCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub dtype: DType,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    pub vocabulary: Vocabulary,
    pub train_state: TrainState,
    pub tensors: Vec<StoredTensor>,
}

#[derive(Serialize)]
struct MetadataOut<'a> {
    config: &'a TrainConfig,
    vocabulary: &'a Vocabulary,
    train_state: &'a TrainState,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MetadataIn {
    config: TrainConfig,
    vocabulary: Vocabulary,
    train_state: TrainState,
}

impl Checkpoint {
    pub fn from_model(
        model: &LanguageModel,
        config: &TrainConfig,
        vocabulary: &Vocabulary,
        train_state: &TrainState,
    ) -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION,
            config: config.clone(),
            vocabulary: vocabulary.clone(),
            train_state: train_state.clone(),
            tensors: model
                .params()
                .iter()
                .map(|p| StoredTensor {
                    name: p.name.clone(),
                    dtype: DType::F64,
                    value: p.value.clone(),
                })
                .collect(),
        }
    }

    /// Architecture implied by the stored config and vocabulary.
    pub fn model_config(&self) -> ModelConfig {
        self.config.model_config(self.vocabulary.len())
    }

    pub fn model(&self) -> Result<LanguageModel> {
        self.model_for(&self.model_config())
    }

    /// Builds a model of the requested architecture, rejecting tensors whose
    /// names or shapes do not fit it.
    pub fn model_for(&self, config: &ModelConfig) -> Result<LanguageModel> {
        let params = self
            .tensors
            .iter()
            .map(|t| NamedParam {
                name: t.name.clone(),
                value: t.value.clone(),
            })
            .collect();
        LanguageModel::from_params(config.clone(), params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&MetadataOut {
            config: &self.config,
            vocabulary: &self.vocabulary,
            train_state: &self.train_state,
        })
        .map_err(|e| Error::format("metadata", e.to_string()))?;

        let mut out = Vec::with_capacity(
            64 + meta.len() + self.tensors.iter().map(|t| t.value.numel() * 8 + 64).sum::<usize>(),
        );
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&u32_len(self.tensors.len(), "tensor count")?.to_le_bytes());
        for t in &self.tensors {
            let field = format!("tensor `{}`", t.name);
            out.extend_from_slice(&u32_len(t.name.len(), &field)?.to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&u32_len(t.value.rank(), &field)?.to_le_bytes());
            for &d in t.value.shape() {
                out.extend_from_slice(&u32_len(d, &field)?.to_le_bytes());
            }
            out.push(t.dtype as u8);
            match t.dtype {
                DType::F32 => {
                    for &v in t.value.data() {
                        out.extend_from_slice(&(v as f32).to_le_bytes());
                    }
                }
                DType::F64 => {
                    for &v in t.value.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::format("magic", "not a checkpoint file"));
        }
        let format_version = r.u32("version")?;
        if format_version != FORMAT_VERSION {
            return Err(Error::format(
                "version",
                format!("unsupported version {format_version}, expected {FORMAT_VERSION}"),
            ));
        }
        let meta_len = r.u64("metadata length")?;
        let meta_len = usize::try_from(meta_len)
            .map_err(|_| Error::format("metadata length", format!("{meta_len} is too large")))?;
        let meta: MetadataIn = serde_json::from_slice(r.take(meta_len, "metadata")?)
            .map_err(|e| Error::format("metadata", e.to_string()))?;

        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for i in 0..count {
            let field = format!("tensor #{i}");
            let name_len = r.u32(&format!("{field} name length"))? as usize;
            let name = std::str::from_utf8(r.take(name_len, &format!("{field} name"))?)
                .map_err(|_| Error::format(format!("{field} name"), "invalid UTF-8"))?
                .to_string();
            let field = format!("tensor `{name}`");
            let rank = r.u32(&format!("{field} rank"))? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u32(&format!("{field} dims"))? as usize);
            }
            let dtype = match r.take(1, &format!("{field} dtype"))?[0] {
                0 => DType::F32,
                1 => DType::F64,
                code => {
                    return Err(Error::format(
                        format!("{field} dtype"),
                        format!("unknown dtype code {code}"),
                    ))
                }
            };
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(dtype.width()).map(|_| n))
                .ok_or_else(|| Error::format(format!("{field} dims"), format!("{shape:?} overflows")))?;
            let raw = r.take(numel * dtype.width(), &format!("{field} values"))?;
            let data = match dtype {
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            };
            let value = Tensor::from_vec(&shape, data)
                .map_err(|e| Error::format(format!("{field} dims"), e.to_string()))?;
            tensors.push(StoredTensor { name, dtype, value });
        }
        if r.pos != bytes.len() {
            return Err(Error::format(
                "end of file",
                format!("{} trailing bytes", bytes.len() - r.pos),
            ));
        }
        Ok(Checkpoint {
            format_version,
            config: meta.config,
            vocabulary: meta.vocabulary,
            train_state: meta.train_state,
            tensors,
        })
    }
}

fn u32_len(n: usize, field: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::format(field, format!("{n} does not fit in u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if n > remaining {
            return Err(Error::format(
                field,
                format!(
                    "truncated: need {n} bytes at offset {}, {remaining} left",
                    self.pos
                ),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
}

/// Writes to a sibling temporary file and renames it over `path`.
pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let bytes = checkpoint.to_bytes()?;
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()
    };
    write().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
