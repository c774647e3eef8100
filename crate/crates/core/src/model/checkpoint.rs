//! Self-describing parameter archive.
//!
//! Layout: the magic line `DAMICKPT\n`, a little-endian `u64` header
//! length, a JSON header (model config, vocabulary, POS tagset and a
//! tensor table of name, shape and element offset), then every tensor as
//! row-major little-endian `f32`.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Dami, ModelConfig, ModelParams};
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};

const MAGIC: &[u8] = b"DAMICKPT\n";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocabulary: Vocabulary,
    pos_tagset: Vec<String>,
    tensors: Vec<TensorEntry>,
}

/// A trained model together with the vocabulary and tagset it was
/// trained against.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Dami,
    pub vocabulary: Vocabulary,
    pub pos_tagset: Vec<String>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let tensors = self
            .model
            .params
            .iter()
            .map(|(name, v)| {
                let entry = TensorEntry {
                    name: name.to_string(),
                    shape: [v.nrows(), v.ncols()],
                    offset,
                };
                offset += v.len();
                entry
            })
            .collect();
        let header = Header {
            config: self.model.config.clone(),
            vocabulary: self.vocabulary.clone(),
            pos_tagset: self.pos_tagset.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + 4 * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, v) in self.model.params.iter() {
            for x in v.iter() {
                out.extend_from_slice(&(*x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let rest = bytes.strip_prefix(MAGIC).ok_or_else(|| bad("not a checkpoint (bad magic)"))?;
        if rest.len() < 8 {
            return Err(bad("truncated header length"));
        }
        let (len, rest) = rest.split_at(8);
        let len = u64::from_le_bytes(len.try_into().expect("8 bytes")) as usize;
        if rest.len() < len {
            return Err(bad("truncated header"));
        }
        let (json, payload) = rest.split_at(len);
        let header: Header = serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let config = header.config;
        config.validate()?;
        let vocabulary = header.vocabulary.reindex()?;
        if vocabulary.len() != config.vocab_size {
            return Err(Error::Shape {
                tensor: "vocabulary".into(),
                expected: vec![config.vocab_size],
                found: vec![vocabulary.len()],
            });
        }
        if header.pos_tagset.len() != config.n_pos {
            return Err(Error::Shape {
                tensor: "pos_tagset".into(),
                expected: vec![config.n_pos],
                found: vec![header.pos_tagset.len()],
            });
        }
        let expected = config.param_shapes();
        if expected.len() != header.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                header.tensors.len()
            )));
        }
        let n_floats = payload.len() / 4;
        if payload.len() % 4 != 0 {
            return Err(bad("payload is not a whole number of f32 values"));
        }
        let mut named = Vec::with_capacity(expected.len());
        for ((name, (rows, cols)), entry) in expected.into_iter().zip(header.tensors) {
            if entry.name != name {
                return Err(Error::Checkpoint(format!("expected tensor `{name}`, found `{}`", entry.name)));
            }
            if entry.shape != [rows, cols] {
                return Err(Error::Shape {
                    tensor: name,
                    expected: vec![rows, cols],
                    found: entry.shape.to_vec(),
                });
            }
            let end = entry.offset + rows * cols;
            if end > n_floats {
                return Err(Error::Checkpoint(format!("tensor `{name}` runs past the payload")));
            }
            let data: Vec<f64> = payload[4 * entry.offset..4 * end]
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect();
            let value = Array2::from_shape_vec((rows, cols), data).expect("shape checked");
            named.push((name, value));
        }
        let params = ModelParams::from_named(named);
        if !params.all_finite() {
            return Err(bad("non-finite parameter values"));
        }
        Ok(Checkpoint {
            model: Dami::from_parts(config, params)?,
            vocabulary,
            pos_tagset: header.pos_tagset,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Parameters rounded through `f32`, as they come back from disk.
    pub fn rounded(mut self) -> Self {
        for i in 0..self.model.params.len() {
            self.model.params.value_mut(i).mapv_inplace(|x| f64::from(x as f32));
        }
        self
    }
}
