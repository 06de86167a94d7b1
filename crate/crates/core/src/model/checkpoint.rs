//! Binary checkpoint format.
//!
//! ```text
//! "JQCK" | version: u32 LE | meta_len: u64 LE | meta: UTF-8 JSON | payload
//! ```
//!
//! The metadata holds the model config and a tensor manifest (name, shape,
//! byte offset into the payload). The payload is every tensor as raw
//! little-endian `f32`, in manifest order. The soft-token rows are stored
//! as their own tensor, `soft_bank`, separate from `embedding`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, Weights};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"JQCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Metadata {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

fn named_blocks(w: &Weights<f32>) -> Vec<(String, [usize; 2], &[f32])> {
    let cfg = &w.config;
    let vocab_len = cfg.vocab_size * cfg.d_model;
    let mut out = Vec::new();
    for (name, m) in w.tensors() {
        if name == "embedding" {
            out.push((name, [cfg.vocab_size, cfg.d_model], &m.data[..vocab_len]));
        } else {
            out.push((name, [m.rows, m.cols], &m.data[..]));
        }
    }
    out.push((
        "soft_bank".into(),
        [cfg.n_soft, cfg.d_model],
        &w.embedding.data[vocab_len..],
    ));
    out
}

pub fn write_checkpoint<W: Write>(w: &Weights<f32>, mut out: W) -> Result<()> {
    let blocks = named_blocks(w);
    let mut offset = 0u64;
    let mut tensors = Vec::with_capacity(blocks.len());
    for (name, shape, data) in &blocks {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: *shape,
            offset,
        });
        offset += (data.len() * 4) as u64;
    }
    let meta = serde_json::to_vec(&Metadata {
        config: w.config.clone(),
        tensors,
    })?;
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(meta.len() as u64).to_le_bytes())?;
    out.write_all(&meta)?;
    let mut buf = Vec::with_capacity(offset as usize);
    for (_, _, data) in &blocks {
        for x in *data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Weights<f32>> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let meta_len = u64::from_le_bytes(len) as usize;
    let mut meta = vec![0u8; meta_len];
    input.read_exact(&mut meta)?;
    let meta: Metadata = serde_json::from_slice(&meta)?;
    let mut payload = Vec::new();
    input.read_to_end(&mut payload)?;

    let mut w = Weights::<f32>::zeros(&meta.config)?;
    let expected: Vec<(String, [usize; 2])> = named_blocks(&w)
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .collect();
    if expected.len() != meta.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors, model needs {}",
            meta.tensors.len(),
            expected.len()
        )));
    }
    let mut cursor = 0u64;
    let mut decoded: Vec<Vec<f32>> = Vec::with_capacity(expected.len());
    for ((name, shape), entry) in expected.iter().zip(&meta.tensors) {
        if &entry.name != name || &entry.shape != shape || entry.offset != cursor {
            return Err(Error::Checkpoint(format!(
                "manifest entry {:?} does not match expected {name} {shape:?} at offset {cursor}",
                entry
            )));
        }
        let n = shape[0] * shape[1];
        let begin = cursor as usize;
        let end = begin + n * 4;
        let bytes = payload
            .get(begin..end)
            .ok_or_else(|| Error::Checkpoint(format!("payload truncated in {name}")))?;
        decoded.push(
            bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
        );
        cursor = end as u64;
    }
    if cursor as usize != payload.len() {
        return Err(Error::Checkpoint("trailing bytes after payload".into()));
    }
    let soft = decoded.pop().expect("soft_bank entry");
    let vocab_len = meta.config.vocab_size * meta.config.d_model;
    for ((name, m), data) in w.tensors_mut().into_iter().zip(decoded) {
        if name == "embedding" {
            m.data[..vocab_len].copy_from_slice(&data);
        } else {
            m.data.copy_from_slice(&data);
        }
    }
    w.embedding.data[vocab_len..].copy_from_slice(&soft);
    if !w.tensors().iter().all(|(_, m)| m.is_finite()) {
        return Err(Error::Checkpoint("non-finite values in checkpoint".into()));
    }
    Ok(w)
}

pub fn save_checkpoint(w: &Weights<f32>, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut out = std::io::BufWriter::new(file);
    write_checkpoint(w, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Weights<f32>> {
    let file = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 20,
            n_soft: 2,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            n_kv_heads: 1,
            head_dim: 4,
            max_seq: 16,
            rope_theta: 500.0,
            mlp_hidden: 6,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let w = init_model(&cfg(), 42).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&w, &mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"JQCK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let back = read_checkpoint(&bytes[..]).unwrap();
        assert_eq!(back, w);
        let mut again = Vec::new();
        write_checkpoint(&back, &mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn manifest_names_soft_bank() {
        let w = init_model(&cfg(), 1).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&w, &mut bytes).unwrap();
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let meta: serde_json::Value = serde_json::from_slice(&bytes[16..16 + meta_len]).unwrap();
        let names: Vec<&str> = meta["tensors"]
            .as_array()
            .unwrap()
            .iter()
            .map(|t| t["name"].as_str().unwrap())
            .collect();
        assert_eq!(names.first(), Some(&"embedding"));
        assert_eq!(names.last(), Some(&"soft_bank"));
        assert_eq!(meta["config"]["n_soft"], 2);
    }

    #[test]
    fn rejects_corruption() {
        let w = init_model(&cfg(), 1).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&w, &mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(&bad[..]).is_err());
        let truncated = &bytes[..bytes.len() - 4];
        assert!(read_checkpoint(truncated).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(read_checkpoint(&extra[..]).is_err());
    }
}
