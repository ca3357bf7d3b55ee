//! Versioned binary checkpoints: magic, version, config echo, then every
//! learnable tensor in declared order as 64-bit little-endian reals.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelConfig, ModelError, ModelParameters};

const MAGIC: &[u8; 8] = b"GENOCKP1";
const VERSION: u32 = 1;

pub fn save_checkpoint(params: &ModelParameters, path: &Path) -> Result<(), ModelError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let cfg = &params.config;
    for v in [
        cfg.vocab_size,
        cfg.embed_dim,
        cfg.n_layers,
        cfg.n_heads,
        cfg.linformer_k,
        cfg.seq_len,
        cfg.ffn_dim(),
    ] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for (_, tensor) in params.tensors() {
        for v in tensor.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParameters, ModelError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ModelError::Checkpoint("wrong magic bytes".to_string()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let mut next = || -> Result<usize, ModelError> {
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        Ok(u32::from_le_bytes(word) as usize)
    };
    let config = ModelConfig {
        vocab_size: next()?,
        embed_dim: next()?,
        n_layers: next()?,
        n_heads: next()?,
        linformer_k: next()?,
        seq_len: next()?,
        ffn_dim: next()?,
    };
    config
        .validate()
        .map_err(|e| ModelError::Checkpoint(format!("stored config invalid: {e}")))?;

    let mut params = ModelParameters::zeros(&config)?;
    let mut buf = [0u8; 8];
    for tensor in params.tensors_mut() {
        for v in tensor.iter_mut() {
            r.read_exact(&mut buf)
                .map_err(|_| ModelError::Checkpoint("truncated tensor data".to_string()))?;
            *v = f64::from_le_bytes(buf);
        }
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(ModelError::Checkpoint(format!(
            "{} trailing bytes",
            rest.len()
        )));
    }
    if !params.is_finite() {
        return Err(ModelError::Checkpoint("non-finite parameter".to_string()));
    }
    Ok(params)
}

/// Loads a checkpoint and rejects it unless its stored config matches.
pub fn load_checkpoint_expecting(
    path: &Path,
    expected: &ModelConfig,
) -> Result<ModelParameters, ModelError> {
    let params = load_checkpoint(path)?;
    let stored = &params.config;
    let same = stored.vocab_size == expected.vocab_size
        && stored.embed_dim == expected.embed_dim
        && stored.n_layers == expected.n_layers
        && stored.n_heads == expected.n_heads
        && stored.linformer_k == expected.linformer_k
        && stored.seq_len == expected.seq_len
        && stored.ffn_dim() == expected.ffn_dim();
    if !same {
        return Err(ModelError::Checkpoint(format!(
            "config mismatch: stored {stored:?}, expected {expected:?}"
        )));
    }
    Ok(params)
}
