//! llm.c GPT-2 checkpoints: a header of 256 little-endian `i32` followed by
//! the parameter tensors as row-major little-endian `f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::model::ModelConfig;

/// Magic of checkpoints written by llm.c.
pub const LLMC_MAGIC: i32 = 20240326;
/// Magic of checkpoints written by this crate; same layout otherwise.
pub const NATIVE_MAGIC: i32 = 0x4D58_4350;
const HEADER_INTS: usize = 256;
/// Refuse to allocate more parameters than this.
pub const MAX_PARAMS: usize = 1 << 31;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad checkpoint magic {0}")]
    BadMagic(i32),
    #[error("unsupported checkpoint version {0}")]
    BadVersion(i32),
    #[error("invalid checkpoint dimensions: {0}")]
    BadDims(String),
    #[error("model has {0} parameters, more than this build loads")]
    TooLarge(usize),
    #[error("checkpoint truncated: expected {expected} parameters")]
    Truncated { expected: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub weights: Vec<f64>,
    pub native: bool,
}

fn dim(header: &[i32], i: usize, name: &str) -> Result<usize, CheckpointError> {
    let x = header[i];
    if x <= 0 {
        return Err(CheckpointError::BadDims(format!("{name} = {x}")));
    }
    Ok(x as usize)
}

pub fn read_from(mut r: impl Read) -> Result<Checkpoint, CheckpointError> {
    let mut raw = vec![0u8; HEADER_INTS * 4];
    r.read_exact(&mut raw).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => CheckpointError::BadDims("file shorter than header".into()),
        _ => CheckpointError::Io(e),
    })?;
    let header: Vec<i32> = raw.chunks_exact(4).map(|b| i32::from_le_bytes(b.try_into().unwrap())).collect();
    let native = match header[0] {
        LLMC_MAGIC => false,
        NATIVE_MAGIC => true,
        m => return Err(CheckpointError::BadMagic(m)),
    };
    let version = header[1];
    let padded_vocab = match version {
        3 => dim(&header, 7, "padded vocab")?,
        2 => dim(&header, 3, "vocab")?,
        v => return Err(CheckpointError::BadVersion(v)),
    };
    let config = ModelConfig {
        max_seq_len: dim(&header, 2, "max_seq_len")?,
        vocab: dim(&header, 3, "vocab")?,
        padded_vocab,
        layers: dim(&header, 4, "layers")?,
        heads: dim(&header, 5, "heads")?,
        channels: dim(&header, 6, "channels")?,
    };
    config.validate().map_err(|e| CheckpointError::BadDims(e.to_string()))?;
    let n = config
        .param_sizes()
        .iter()
        .try_fold(0usize, |acc, &x| acc.checked_add(x))
        .ok_or(CheckpointError::TooLarge(usize::MAX))?;
    if n > MAX_PARAMS {
        return Err(CheckpointError::TooLarge(n));
    }
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => CheckpointError::Truncated { expected: n },
        _ => CheckpointError::Io(e),
    })?;
    let weights = buf.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect();
    Ok(Checkpoint { config, weights, native })
}

pub fn read(path: &Path) -> Result<Checkpoint, CheckpointError> {
    read_from(BufReader::new(File::open(path)?))
}

pub fn write_to(mut w: impl Write, config: &ModelConfig, weights: &[f64], magic: i32) -> Result<(), CheckpointError> {
    if weights.len() != config.num_params() {
        return Err(CheckpointError::BadDims(format!(
            "{} weights for a model of {} parameters",
            weights.len(),
            config.num_params()
        )));
    }
    let to_i32 = |x: usize| i32::try_from(x).map_err(|_| CheckpointError::BadDims(format!("{x} does not fit a header field")));
    let mut header = [0i32; HEADER_INTS];
    header[0] = magic;
    header[1] = 3;
    header[2] = to_i32(config.max_seq_len)?;
    header[3] = to_i32(config.vocab)?;
    header[4] = to_i32(config.layers)?;
    header[5] = to_i32(config.heads)?;
    header[6] = to_i32(config.channels)?;
    header[7] = to_i32(config.padded_vocab)?;
    for h in header {
        w.write_all(&h.to_le_bytes())?;
    }
    for &x in weights {
        w.write_all(&(x as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a native checkpoint.
pub fn write(path: &Path, config: &ModelConfig, weights: &[f64]) -> Result<(), CheckpointError> {
    write_to(BufWriter::new(File::create(path)?), config, weights, NATIVE_MAGIC)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig { max_seq_len: 4, vocab: 10, padded_vocab: 12, layers: 1, heads: 2, channels: 4 }
    }

    #[test]
    fn round_trip_is_f32_exact() {
        let cfg = tiny();
        let w: Vec<f64> = (0..cfg.num_params()).map(|i| (i as f32 * 0.37).sin() as f64).collect();
        let mut buf = Vec::new();
        write_to(&mut buf, &cfg, &w, NATIVE_MAGIC).unwrap();
        assert_eq!(buf.len(), 1024 + 4 * cfg.num_params());
        let c = read_from(&buf[..]).unwrap();
        assert!(c.native);
        assert_eq!(c.config, cfg);
        assert_eq!(c.weights, w);
    }

    #[test]
    fn llmc_magic_is_accepted() {
        let cfg = tiny();
        let mut buf = Vec::new();
        write_to(&mut buf, &cfg, &vec![0.0; cfg.num_params()], LLMC_MAGIC).unwrap();
        assert!(!read_from(&buf[..]).unwrap().native);
    }

    #[test]
    fn rejects_bad_input() {
        let cfg = tiny();
        let mut buf = Vec::new();
        write_to(&mut buf, &cfg, &vec![0.0; cfg.num_params()], NATIVE_MAGIC).unwrap();
        let mut bad = buf.clone();
        bad[0] ^= 1;
        assert!(matches!(read_from(&bad[..]), Err(CheckpointError::BadMagic(_))));
        assert!(matches!(read_from(&buf[..buf.len() - 1]), Err(CheckpointError::Truncated { .. })));
        let mut bad = buf.clone();
        bad[4 * 6..4 * 7].copy_from_slice(&5i32.to_le_bytes());
        assert!(matches!(read_from(&bad[..]), Err(CheckpointError::BadDims(_))));
        let mut big = buf.clone();
        big[4 * 6..4 * 7].copy_from_slice(&(1i32 << 20).to_le_bytes());
        assert!(matches!(read_from(&big[..]), Err(CheckpointError::TooLarge(_))));
        assert!(read_from(&buf[..100]).is_err());
    }
}
