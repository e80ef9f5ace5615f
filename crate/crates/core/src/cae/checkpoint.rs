//! Checkpoint files.
//!
//! Layout: one line of JSON
//! `{"format":"slicelab-cae","version":1,"config":{..},"parameter_count":N}`
//! terminated by `\n`, followed by exactly `N` little-endian IEEE-754 64-bit
//! floats in canonical tensor order (see [`CaeParams`]).

use std::fs;
use std::io::{self, BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ArchConfig, Cae, CaeError, CaeParams};
use crate::scalar::Scalar;

const FORMAT: &str = "slicelab-cae";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad checkpoint header: {0}")]
    BadHeader(String),
    #[error("checkpoint holds {found} parameters, architecture needs {expected}")]
    ParameterCount { expected: usize, found: usize },
    #[error(transparent)]
    Model(#[from] CaeError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: ArchConfig,
    parameter_count: usize,
}

pub fn write_checkpoint<T: Scalar, W: Write>(model: &Cae<T>, mut out: W) -> Result<(), CheckpointError> {
    let flat = model.params().to_flat();
    let header = Header {
        format: FORMAT.into(),
        version: 1,
        config: model.config().clone(),
        parameter_count: flat.len(),
    };
    let line = serde_json::to_string(&header).map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
    out.write_all(line.as_bytes())?;
    out.write_all(b"\n")?;
    let mut blob = Vec::with_capacity(8 * flat.len());
    for v in flat {
        blob.extend_from_slice(&v.as_f64().to_le_bytes());
    }
    out.write_all(&blob)?;
    Ok(())
}

pub fn read_checkpoint<T: Scalar, R: BufRead>(mut input: R) -> Result<Cae<T>, CheckpointError> {
    let mut line = String::new();
    input.read_line(&mut line)?;
    let header: Header =
        serde_json::from_str(line.trim_end()).map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
    if header.format != FORMAT || header.version != 1 {
        return Err(CheckpointError::BadHeader(format!("{} v{}", header.format, header.version)));
    }
    header.config.validate()?;
    let mut params = CaeParams::<T>::zeros(&header.config);
    if params.len() != header.parameter_count {
        return Err(CheckpointError::ParameterCount { expected: params.len(), found: header.parameter_count });
    }
    let mut blob = Vec::new();
    input.read_to_end(&mut blob)?;
    if blob.len() != 8 * header.parameter_count {
        return Err(CheckpointError::ParameterCount { expected: header.parameter_count, found: blob.len() / 8 });
    }
    let flat: Vec<T> = blob
        .chunks_exact(8)
        .map(|b| T::lit(f64::from_le_bytes(b.try_into().expect("8-byte chunk"))))
        .collect();
    params.assign_flat(&flat)?;
    Ok(Cae::from_params(header.config, params)?)
}

pub fn save_checkpoint<T: Scalar>(model: &Cae<T>, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let file = fs::File::create(path)?;
    let mut w = io::BufWriter::new(file);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Cae<T>, CheckpointError> {
    read_checkpoint(io::BufReader::new(fs::File::open(path)?))
}
