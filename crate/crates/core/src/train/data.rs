//! Byte-level corpora and random training windows.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

pub const BYTE_VOCAB: usize = 256;

/// Reads a file as byte tokens. Empty files are an error.
pub fn tokenize_bytes(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    if bytes.is_empty() {
        return Err(Error::EmptyCorpus(path.to_path_buf()));
    }
    Ok(encode(&bytes))
}

pub fn encode(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize).collect()
}

/// Inverse of [`encode`]. Panics on tokens outside the byte range.
pub fn decode(tokens: &[usize]) -> Vec<u8> {
    tokens
        .iter()
        .map(|&t| u8::try_from(t).expect("byte token"))
        .collect()
}

/// `batch` windows of `len` inputs, each paired with the following-token targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch: usize,
    pub len: usize,
}

/// Windows with uniformly random starts; `targets[b][t] = inputs[b][t + 1]`.
pub fn sample_batch(
    tokens: &[usize],
    len: usize,
    batch: usize,
    rng: &mut impl Rng,
) -> Result<Batch> {
    if len == 0 || batch == 0 {
        return Err(Error::Config(
            "context length and batch size must be positive".into(),
        ));
    }
    if tokens.len() < len + 1 {
        return Err(Error::Config(format!(
            "corpus of {} tokens is shorter than context length {} + 1",
            tokens.len(),
            len
        )));
    }
    let last_start = tokens.len() - len - 1;
    let mut inputs = Vec::with_capacity(batch * len);
    let mut targets = Vec::with_capacity(batch * len);
    for _ in 0..batch {
        let s = rng.gen_range(0..=last_start);
        inputs.extend_from_slice(&tokens[s..s + len]);
        targets.extend_from_slice(&tokens[s + 1..s + len + 1]);
    }
    Ok(Batch {
        inputs,
        targets,
        batch,
        len,
    })
}

/// Consecutive non-overlapping windows covering as much of `tokens` as fits.
pub fn sequential_windows(tokens: &[usize], len: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    let mut out = Vec::new();
    let mut s = 0;
    while s + len < tokens.len() {
        out.push((
            tokens[s..s + len].to_vec(),
            tokens[s + 1..s + len + 1].to_vec(),
        ));
        s += len;
    }
    out
}
