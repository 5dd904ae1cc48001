//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, u64 LE header length, JSON header, then each tensor's
//! f64 LE payload in header order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AblationFlags, ModelConfig, Reg2Rg};
use crate::nn::ParamStore;
use crate::prompt::PromptTemplate;
use crate::tensor::Matrix;
use crate::tokenizer::Tokenizer;

pub const MAGIC: &[u8; 8] = b"R2RGCKP1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config_hash: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn write_checkpoint(
    path: &Path,
    config_hash: &str,
    meta: serde_json::Value,
    tensors: &[(&str, &Matrix)],
) -> Result<()> {
    let header = Header {
        config_hash: config_hash.to_string(),
        meta,
        tensors: tensors
            .iter()
            .map(|(n, m)| TensorEntry {
                name: n.to_string(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect(),
    };
    let head = serde_json::to_vec(&header)?;
    let total: usize = tensors.iter().map(|(_, m)| m.len() * 8).sum();
    let mut buf = Vec::with_capacity(16 + head.len() + total);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(head.len() as u64).to_le_bytes());
    buf.extend_from_slice(&head);
    for (_, m) in tensors {
        for v in m.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<(Header, BTreeMap<String, Matrix>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::Checkpoint(format!("{}: {reason}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    let mut offset = 16 + hlen;
    let mut tensors = BTreeMap::new();
    for t in &header.tensors {
        let n = t.rows * t.cols;
        let chunk = bytes
            .get(offset..offset + n * 8)
            .ok_or_else(|| bad(&format!("truncated tensor {}", t.name)))?;
        let data = chunk
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        offset += n * 8;
        if tensors
            .insert(t.name.clone(), Matrix::from_vec(t.rows, t.cols, data))
            .is_some()
        {
            return Err(bad(&format!("duplicate tensor {}", t.name)));
        }
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok((header, tensors))
}

/// Serializable position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = || Error::Checkpoint("malformed rng state".into());
        let seed: [u8; 32] = hex::decode(&self.seed)
            .map_err(|_| bad())?
            .try_into()
            .map_err(|_| bad())?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

/// Everything needed to rebuild the model from a checkpoint alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: u64,
    pub epoch: u64,
    pub rng: RngState,
    pub model: ModelConfig,
    pub tokenizer: Vec<String>,
    pub flags: AblationFlags,
    pub prompt: PromptTemplate,
}

/// Rebuilds the model described by a checkpoint and loads its parameters.
pub fn load_model(path: &Path) -> Result<(Reg2Rg, ParamStore, CheckpointMeta)> {
    let (header, mut tensors) = read_checkpoint(path)?;
    let meta: CheckpointMeta = serde_json::from_value(header.meta.clone())?;
    let tokenizer = Tokenizer::from_tokens(meta.tokenizer.clone())?;
    let (model, mut store) = Reg2Rg::new(meta.model.clone(), tokenizer, meta.prompt.clone(), 0)?;
    if model.config_hash() != header.config_hash {
        return Err(Error::ConfigHashMismatch {
            checkpoint: header.config_hash,
            model: model.config_hash(),
        });
    }
    fill_store(&mut store, &mut tensors, "param/")?;
    Ok((model, store, meta))
}

/// Moves `prefix`-named tensors into `store`, requiring an exact name and
/// shape match.
pub fn fill_store(store: &mut ParamStore, tensors: &mut BTreeMap<String, Matrix>, prefix: &str) -> Result<()> {
    let names: Vec<String> = store.names().cloned().collect();
    for name in names {
        let key = format!("{prefix}{name}");
        let m = tensors
            .remove(&key)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
        let slot = store.get_mut(&name).expect("name from store");
        if slot.shape() != m.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {key} has shape {:?}, model expects {:?}",
                m.shape(),
                slot.shape()
            )));
        }
        *slot = m;
    }
    if let Some(extra) = tensors.keys().find(|k| k.starts_with(prefix)) {
        return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
    }
    Ok(())
}
