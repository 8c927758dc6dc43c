//! Single-file checkpoints: one line of JSON manifest, then little-endian
//! array payloads in manifest order.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};

pub const FORMAT: &str = "moemamba-checkpoint-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the payload section.
    pub offset: usize,
}

/// Trainer state needed to continue a run exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: usize,
    pub ema_loss: Option<f64>,
    pub initial_loss: Option<f64>,
    pub diverge_count: usize,
    /// Position of the data stream, as a decimal string (it is a `u128`).
    pub data_rng_word_pos: String,
    pub adam_t: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config: TrainConfig,
    pub state: TrainState,
    pub arrays: Vec<ArrayEntry>,
}

pub struct Checkpoint<T> {
    pub manifest: Manifest,
    pub arrays: Vec<Tensor<T>>,
}

impl<T: Element> Checkpoint<T> {
    pub fn new(config: TrainConfig, state: TrainState, named: Vec<(String, Tensor<T>)>) -> Self {
        let mut offset = 0;
        let mut entries = Vec::with_capacity(named.len());
        let mut arrays = Vec::with_capacity(named.len());
        for (name, t) in named {
            entries.push(ArrayEntry {
                name,
                dtype: T::DTYPE,
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.numel() * T::DTYPE.size_of();
            arrays.push(t);
        }
        Checkpoint {
            manifest: Manifest {
                format: FORMAT.into(),
                config,
                state,
                arrays: entries,
            },
            arrays,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            serde_json::to_writer(&mut f, &self.manifest)?;
            f.write_all(b"\n")?;
            let mut buf = Vec::new();
            for a in &self.arrays {
                buf.clear();
                for &v in a.data() {
                    v.write_le(&mut buf);
                }
                f.write_all(&buf)?;
            }
            f.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let manifest = read_manifest_from(&mut r)?;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        let size = T::DTYPE.size_of();
        let mut arrays = Vec::with_capacity(manifest.arrays.len());
        for e in &manifest.arrays {
            if e.dtype != T::DTYPE {
                return Err(Error::Checkpoint(format!(
                    "array {} is {}, expected {}",
                    e.name,
                    e.dtype.name(),
                    T::DTYPE.name()
                )));
            }
            let n: usize = e.shape.iter().product();
            let end = e.offset + n * size;
            let bytes = payload.get(e.offset..end).ok_or_else(|| {
                Error::Checkpoint(format!("array {} runs past the end of the file", e.name))
            })?;
            let data = bytes.chunks_exact(size).map(T::read_le).collect();
            arrays.push(
                Tensor::new(e.shape.clone(), data)
                    .map_err(|err| Error::Checkpoint(err.to_string()))?,
            );
        }
        Ok(Checkpoint { manifest, arrays })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.manifest
            .arrays
            .iter()
            .position(|e| e.name == name)
            .map(|i| &self.arrays[i])
    }
}

fn read_manifest_from(r: &mut impl BufRead) -> Result<Manifest> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    let manifest: Manifest = serde_json::from_str(line.trim_end())
        .map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
    if manifest.format != FORMAT {
        return Err(Error::Checkpoint(format!(
            "unknown format {:?}",
            manifest.format
        )));
    }
    Ok(manifest)
}

/// Reads only the manifest line, e.g. to pick the element type before loading.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    read_manifest_from(&mut BufReader::new(std::fs::File::open(path)?))
}
