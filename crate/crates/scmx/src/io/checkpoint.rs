//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "SCMX" | u32 version | u32 config_len | config JSON bytes
//! | u32 tensor_count
//! | per tensor: u32 name_len, name bytes, u32 rank, u64 dims[rank], u64 offset
//! | payload: raw f32 little-endian, row-major
//! ```
//!
//! Offsets are byte positions into the payload. Round trips are lossless
//! at the bit level, so a saved-and-reloaded model produces bit-identical
//! logits.

use crate::error::{Error, Result};
use crate::model::{ModelConfig, MoeModel};
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SCMX";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializes a model into any writer.
pub fn write_checkpoint<W: Write>(model: &MoeModel, mut w: W) -> Result<()> {
    let mut directory: Vec<(String, Vec<usize>, u64)> = Vec::new();
    let mut payload_len = 0u64;
    model.visit_tensors(|name, shape, data| {
        directory.push((name.to_string(), shape.to_vec(), payload_len));
        payload_len += (data.len() * 4) as u64;
    });

    let config_blob = serde_json::to_vec(model.config())?;
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(config_blob.len() as u32).to_le_bytes())?;
    w.write_all(&config_blob)?;
    w.write_all(&(directory.len() as u32).to_le_bytes())?;
    for (name, shape, offset) in &directory {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &dim in shape {
            w.write_all(&(dim as u64).to_le_bytes())?;
        }
        w.write_all(&offset.to_le_bytes())?;
    }
    let mut err = None;
    model.visit_tensors(|_, _, data| {
        if err.is_some() {
            return;
        }
        for &v in data {
            if let Err(e) = w.write_all(&v.to_le_bytes()) {
                err = Some(e);
                return;
            }
        }
    });
    if let Some(e) = err {
        return Err(e.into());
    }
    w.flush()?;
    Ok(())
}

pub fn save_checkpoint<P: AsRef<Path>>(model: &MoeModel, path: P) -> Result<()> {
    write_checkpoint(model, BufWriter::new(File::create(path)?))
}

struct ByteReader<R: Read> {
    inner: R,
}

impl<R: Read> ByteReader<R> {
    fn exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        self.inner.read_exact(buf).map_err(|_| Error::TruncatedPayload {
            context: format!("unexpected end of file while reading {what}"),
        })
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.exact(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }
}

/// Deserializes a model from any reader.
pub fn read_checkpoint<R: Read>(reader: R) -> Result<MoeModel> {
    let mut r = ByteReader { inner: reader };

    let mut magic = [0u8; 4];
    r.exact(&mut magic, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let config_len = r.u32("config length")? as usize;
    let mut config_blob = vec![0u8; config_len];
    r.exact(&mut config_blob, "config blob")?;
    let cfg: ModelConfig = serde_json::from_slice(&config_blob)?;

    let tensor_count = r.u32("tensor count")? as usize;
    let mut directory: HashMap<String, (Vec<usize>, u64)> = HashMap::with_capacity(tensor_count);
    let mut payload_len = 0u64;
    for i in 0..tensor_count {
        let name_len = r.u32("tensor name length")? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.exact(&mut name_bytes, "tensor name")?;
        let name = String::from_utf8(name_bytes).map_err(|_| Error::InvalidParameter(
            format!("tensor {i}: name is not UTF-8"),
        ))?;
        let rank = r.u32("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("tensor dim")? as usize);
        }
        let offset = r.u64("tensor offset")?;
        let numel: usize = shape.iter().product();
        payload_len = payload_len.max(offset + (numel * 4) as u64);
        directory.insert(name, (shape, offset));
    }

    let mut payload = Vec::with_capacity(payload_len as usize);
    r.inner.read_to_end(&mut payload)?;
    if (payload.len() as u64) < payload_len {
        return Err(Error::TruncatedPayload {
            context: format!(
                "directory describes {payload_len} payload bytes, file has {}",
                payload.len()
            ),
        });
    }

    let mut consumed = 0usize;
    let model = MoeModel::from_parts(cfg, |name, shape| {
        let (found_shape, offset) = directory
            .get(name)
            .ok_or_else(|| Error::MissingTensor {
                name: name.to_string(),
            })?;
        if found_shape != shape {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                expected: shape.to_vec(),
                found: found_shape.clone(),
            });
        }
        consumed += 1;
        let numel: usize = shape.iter().product();
        let start = *offset as usize;
        let bytes = &payload[start..start + numel * 4];
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    })?;
    if consumed != directory.len() {
        return Err(Error::InvalidParameter(format!(
            "checkpoint carries {} tensors, model expects {consumed}",
            directory.len()
        )));
    }
    Ok(model)
}

pub fn load_checkpoint<P: AsRef<Path>>(path: P) -> Result<MoeModel> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

/// Draws a fresh random model for `(config, seed)` and writes it to
/// `path`. The seed overrides the config's `rng_seed`, keeping the file a
/// pure function of its arguments.
pub fn generate_random_checkpoint<P: AsRef<Path>>(
    config: &ModelConfig,
    seed: u64,
    path: P,
) -> Result<MoeModel> {
    let cfg = ModelConfig {
        rng_seed: seed,
        ..config.clone()
    };
    let model = MoeModel::random(cfg)?;
    save_checkpoint(&model, path)?;
    Ok(model)
}
