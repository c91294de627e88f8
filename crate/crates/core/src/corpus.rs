//! Vocabulary, corpus files, contiguous batching and BPTT slicing.
//!
//! Files are UTF-8, whitespace-tokenized, one segment per line. An end of
//! line marker is appended after every line.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

/// Bidirectional token ↔ id mapping with dense ids in first-occurrence order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
    eos_id: usize,
    unk_id: usize,
}

impl Vocabulary {
    /// Assigns ids in first-occurrence order. `<eos>` and `<unk>` are added at
    /// the end if the tokens never mention them.
    pub fn build<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut id_to_token = Vec::new();
        let mut token_to_id = HashMap::new();
        for tok in tokens {
            let tok = tok.as_ref();
            if tok.is_empty() || token_to_id.contains_key(tok) {
                continue;
            }
            token_to_id.insert(tok.to_string(), id_to_token.len());
            id_to_token.push(tok.to_string());
        }
        if id_to_token.is_empty() {
            return Err(Error::EmptyCorpus("no tokens to build a vocabulary from".into()));
        }
        Self::from_tokens(id_to_token)
    }

    /// Rebuilds a vocabulary from its id-ordered token list, adding the
    /// reserved tokens when missing.
    pub fn from_tokens(mut id_to_token: Vec<String>) -> Result<Self> {
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (i, tok) in id_to_token.iter().enumerate() {
            if token_to_id.insert(tok.clone(), i).is_some() {
                return Err(Error::format("vocabulary", format!("duplicate token `{tok}`")));
            }
        }
        for reserved in [EOS, UNK] {
            if !token_to_id.contains_key(reserved) {
                token_to_id.insert(reserved.to_string(), id_to_token.len());
                id_to_token.push(reserved.to_string());
            }
        }
        Ok(Vocabulary {
            eos_id: token_to_id[EOS],
            unk_id: token_to_id[UNK],
            id_to_token,
            token_to_id,
        })
    }

    /// Vocabulary over a training file's tokens, with `<eos>` after each line.
    pub fn from_lines<'a>(lines: impl IntoIterator<Item = &'a str> + Clone) -> Result<Self> {
        if lines.clone().into_iter().all(|l| l.trim().is_empty()) {
            return Err(Error::EmptyCorpus("training text has no tokens".into()));
        }
        Self::build(
            lines
                .into_iter()
                .flat_map(|l| l.split_whitespace().chain(std::iter::once(EOS))),
        )
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn eos_id(&self) -> usize {
        self.eos_id
    }

    pub fn unk_id(&self) -> usize {
        self.unk_id
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    /// Id of `token`, or the unknown id.
    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(self.unk_id)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.id_to_token.iter().map(String::as_str)
    }

    /// Maps every whitespace token to its id and appends `<eos>` per line.
    pub fn encode<'a>(&self, lines: impl IntoIterator<Item = &'a str>) -> Vec<usize> {
        let mut ids = Vec::new();
        for line in lines {
            ids.extend(line.split_whitespace().map(|t| self.id_or_unk(t)));
            ids.push(self.eos_id);
        }
        ids
    }

    /// Inverse of [`encode`](Self::encode): ids back to lines, splitting at
    /// `<eos>`.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        let mut lines = Vec::new();
        let mut current: Vec<&str> = Vec::new();
        for &id in ids {
            if id == self.eos_id {
                lines.push(current.join(" "));
                current.clear();
            } else {
                current.push(self.token(id).unwrap_or(UNK));
            }
        }
        if !current.is_empty() {
            lines.push(current.join(" "));
        }
        lines
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Self::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.id_to_token
    }
}

pub fn read_lines(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Training, validation and optional test splits encoded with one vocabulary
/// built from the training split.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Option<Vec<usize>>,
}

impl Corpus {
    pub fn from_texts(train: &str, valid: &str, test: Option<&str>) -> Result<Self> {
        let vocab = Vocabulary::from_lines(train.lines())?;
        Ok(Corpus {
            train: vocab.encode(train.lines()),
            valid: vocab.encode(valid.lines()),
            test: test.map(|t| vocab.encode(t.lines())),
            vocab,
        })
    }

    pub fn load(train: &Path, valid: &Path, test: Option<&Path>) -> Result<Self> {
        let train_text = read_lines(train)?;
        let valid_text = read_lines(valid)?;
        let test_text = test.map(read_lines).transpose()?;
        Self::from_texts(&train_text, &valid_text, test_text.as_deref())
    }
}

/// Token ids laid out as `n_steps × batch_size`, where column `b` holds the
/// contiguous stream `ids[b·n_steps .. (b+1)·n_steps]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchedCorpus {
    data: Vec<usize>,
    n_steps: usize,
    batch_size: usize,
}

/// Input and next-token target blocks, both `len × batch` row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BpttSlice {
    pub len: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Splits `ids` into `batch_size` contiguous columns, discarding the
/// `len % batch_size` trailing tokens.
pub fn batchify(ids: &[usize], batch_size: usize) -> Result<BatchedCorpus> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if ids.len() < batch_size {
        return Err(Error::EmptyCorpus(format!(
            "{} tokens cannot fill a batch of {batch_size}",
            ids.len()
        )));
    }
    let n_steps = ids.len() / batch_size;
    let mut data = vec![0; n_steps * batch_size];
    for b in 0..batch_size {
        for t in 0..n_steps {
            data[t * batch_size + b] = ids[b * n_steps + t];
        }
    }
    Ok(BatchedCorpus {
        data,
        n_steps,
        batch_size,
    })
}

impl BatchedCorpus {
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn at(&self, step: usize, column: usize) -> usize {
        self.data[step * self.batch_size + column]
    }

    pub fn row(&self, step: usize) -> &[usize] {
        &self.data[step * self.batch_size..(step + 1) * self.batch_size]
    }

    pub fn column(&self, b: usize) -> Vec<usize> {
        (0..self.n_steps).map(|t| self.at(t, b)).collect()
    }

    /// Number of target tokens per column over a full pass.
    pub fn targets_per_column(&self) -> usize {
        self.n_steps.saturating_sub(1)
    }

    /// Segment starting at `offset`, `min(bptt, n_steps - 1 - offset)` rows
    /// long, with targets shifted one row ahead.
    pub fn bptt_slice(&self, offset: usize, bptt: usize) -> Result<BpttSlice> {
        if bptt == 0 {
            return Err(Error::Config("bptt must be positive".into()));
        }
        if offset + 1 >= self.n_steps {
            return Err(Error::Index {
                op: "bptt_slice",
                id: offset,
                bound: self.n_steps.saturating_sub(1),
            });
        }
        let len = bptt.min(self.n_steps - 1 - offset);
        let b = self.batch_size;
        Ok(BpttSlice {
            len,
            inputs: self.data[offset * b..(offset + len) * b].to_vec(),
            targets: self.data[(offset + 1) * b..(offset + 1 + len) * b].to_vec(),
        })
    }

    /// Slice offsets `0, bptt, 2·bptt, …` covering every target row once.
    pub fn slice_offsets(&self, bptt: usize) -> impl Iterator<Item = usize> {
        (0..self.n_steps.saturating_sub(1)).step_by(bptt.max(1))
    }
}
