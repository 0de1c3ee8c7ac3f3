//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!   magic "LSNT" | version u32 | meta_len u64 | meta TOML bytes
//!   | tensor_count u32 | tensors | crc32 u32
//! Each tensor: name_len u16 | name bytes | ndim u8 | dims (u64 each)
//! | values (f32 each, row-major). The trailing CRC-32 covers every
//! preceding byte; loads verify it before touching the payload, and a
//! version other than ours is refused outright.

use std::path::Path;
use std::sync::OnceLock;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelParams};
use crate::vocab::Vocab;

pub const MAGIC: [u8; 4] = *b"LSNT";
pub const VERSION: u32 = 1;

/// Name of the extra tensor holding the hypersphere center.
pub const CENTER_TENSOR: &str = "center";

/// Everything a checkpoint records besides tensor values. Stored as TOML,
/// which keeps infinite thresholds representable. Plain values must come
/// before tables in TOML, hence the field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Template keys in id order; rebuilding the vocabulary from these
    /// reproduces the exact id assignment.
    pub vocab_keys: Vec<u32>,
    /// Resolved configuration of the producing run, model dimensions and
    /// vocabulary size included.
    pub config: RunConfig,
}

/// CRC-32 (reflected, polynomial 0xEDB88320), the common zip/PNG variant.
pub fn crc32(bytes: &[u8]) -> u32 {
    static TABLE: OnceLock<[u32; 256]> = OnceLock::new();
    let table = TABLE.get_or_init(|| {
        let mut t = [0u32; 256];
        for (i, slot) in t.iter_mut().enumerate() {
            let mut c = i as u32;
            for _ in 0..8 {
                c = if c & 1 != 0 {
                    0xEDB8_8320 ^ (c >> 1)
                } else {
                    c >> 1
                };
            }
            *slot = c;
        }
        t
    });
    let mut c = !0u32;
    for &b in bytes {
        c = table[((c ^ b as u32) & 0xFF) as usize] ^ (c >> 8);
    }
    !c
}

fn encode(meta: &CheckpointMeta, tensors: &[(String, Vec<usize>, &[f32])]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let meta_toml = toml::to_string(meta)
        .map_err(|e| Error::Checkpoint(format!("cannot encode metadata: {e}")))?;
    buf.extend_from_slice(&(meta_toml.len() as u64).to_le_bytes());
    buf.extend_from_slice(meta_toml.as_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, shape, values) in tensors {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has {} values for shape {shape:?}",
                values.len()
            )));
        }
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(shape.len() as u8);
        for &d in shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in *values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[allow(clippy::type_complexity)]
fn decode(bytes: &[u8]) -> Result<(CheckpointMeta, Vec<(String, Vec<usize>, Vec<f32>)>)> {
    if bytes.len() < MAGIC.len() + 8 {
        return Err(Error::Checkpoint("truncated checkpoint".into()));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let actual = crc32(body);
    if stored != actual {
        return Err(Error::Checkpoint(format!(
            "checksum mismatch: stored {stored:#010x}, computed {actual:#010x}; refusing to load"
        )));
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "version {version} not supported; this build reads version {VERSION}"
        )));
    }
    let meta_len = r.u64()? as usize;
    let meta_text = std::str::from_utf8(r.take(meta_len)?)
        .map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
    let meta: CheckpointMeta = toml::from_str(meta_text)
        .map_err(|e| Error::Checkpoint(format!("cannot decode metadata: {e}")))?;
    let n_tensors = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(4 * n)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, shape, values));
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after tensors".into()));
    }
    Ok((meta, tensors))
}

/// Write a trained model, its vocabulary, the center, and the producing
/// configuration to one file.
pub fn save(
    path: &Path,
    config: &RunConfig,
    vocab: &Vocab,
    model: &Model<f32>,
    center: &Array1<f32>,
) -> Result<()> {
    let meta = CheckpointMeta {
        vocab_keys: vocab.keys().to_vec(),
        config: config.clone(),
    };
    let named = model.params.named_tensors();
    let mut tensors: Vec<(String, Vec<usize>, &[f32])> = named
        .iter()
        .map(|(name, t)| (name.clone(), t.shape(), t.as_slice()))
        .collect();
    let center_slice = center
        .as_slice()
        .ok_or_else(|| Error::Checkpoint("center is not contiguous".into()))?;
    tensors.push((CENTER_TENSOR.into(), vec![center.len()], center_slice));
    let buf = encode(&meta, &tensors)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub struct Loaded {
    pub config: RunConfig,
    pub vocab: Vocab,
    pub model: Model<f32>,
    pub center: Array1<f32>,
}

/// Load and verify a checkpoint. Every model tensor must be present with
/// its exact shape; names are matched, not ordered.
pub fn load(path: &Path) -> Result<Loaded> {
    let bytes = std::fs::read(path)?;
    let (meta, tensors) = decode(&bytes)?;
    let vocab = Vocab::from_keys(meta.vocab_keys.clone());
    let model_config = meta.config.model.clone();
    if model_config.vocab_size != vocab.size() {
        return Err(Error::Checkpoint(format!(
            "config says vocab_size {}, vocabulary table has {}",
            model_config.vocab_size,
            vocab.size()
        )));
    }
    let mut by_name: std::collections::HashMap<String, (Vec<usize>, Vec<f32>)> = tensors
        .into_iter()
        .map(|(name, shape, values)| (name, (shape, values)))
        .collect();

    let mut params: ModelParams<f32> = ModelParams::init(&model_config, 0);
    for (name, mut t) in params.named_tensors_mut() {
        let (shape, values) = by_name
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if shape != t.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {shape:?}, expected {:?}",
                t.shape()
            )));
        }
        t.as_slice_mut().copy_from_slice(&values);
    }
    let (shape, values) = by_name
        .remove(CENTER_TENSOR)
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor {CENTER_TENSOR}")))?;
    if shape != [model_config.d_model] {
        return Err(Error::Checkpoint(format!(
            "center has shape {shape:?}, expected [{}]",
            model_config.d_model
        )));
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
    }
    let model = Model::from_params(model_config, params)?;
    Ok(Loaded {
        config: meta.config,
        vocab,
        model,
        center: Array1::from_vec(values),
    })
}
