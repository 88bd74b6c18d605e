//! Single-file checkpoints.
//!
//! Layout: an 8-byte little-endian header length, a JSON header
//! `{config, params: [{name, offset, shape}]}`, then every parameter as
//! little-endian `f32`. Offsets are in bytes from the start of the data
//! section.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::model::{Model, ModelConfig, ModelError};

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    params: Vec<ParamEntry>,
}

/// Decoded checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Vec<(String, Tensor)>,
}

pub fn write_checkpoint<W: Write>(model: &Model, mut out: W) -> Result<(), CheckpointError> {
    let mut offset = 0;
    let mut entries = Vec::new();
    for (_, name, t) in model.params().iter() {
        entries.push(ParamEntry {
            name: name.to_string(),
            offset,
            shape: t.shape().to_vec(),
        });
        offset += 4 * t.len();
    }
    let header = Header {
        config: model.config().clone(),
        params: entries,
    };
    let json = serde_json::to_vec(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    let mut data = Vec::with_capacity(offset);
    for (_, _, t) in model.params().iter() {
        for &v in t.data() {
            data.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out.write_all(&data)?;
    Ok(())
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Checkpoint, CheckpointError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < 8 {
        return Err(CheckpointError::Truncated);
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = &bytes[8..];
    if body.len() < hlen {
        return Err(CheckpointError::Truncated);
    }
    let header: Header = serde_json::from_slice(&body[..hlen])
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    let data = &body[hlen..];
    let mut params = Vec::with_capacity(header.params.len());
    for p in header.params {
        let n: usize = p.shape.iter().product();
        let end = p.offset + 4 * n;
        if end > data.len() {
            return Err(CheckpointError::Truncated);
        }
        let values = data[p.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        params.push((p.name, Tensor::new(p.shape, values)));
    }
    Ok(Checkpoint {
        config: header.config,
        params,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    read_checkpoint(fs::File::open(path)?)
}

impl Checkpoint {
    /// Rebuilds the model; every parameter must be present with the exact
    /// registered shape, and no extra parameters are allowed.
    pub fn into_model(self) -> Result<Model, CheckpointError> {
        let mut model = Model::new(self.config, 0)?;
        if self.params.len() != model.params().len() {
            return Err(CheckpointError::Mismatch(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                model.params().len()
            )));
        }
        for (name, tensor) in self.params {
            let id = model
                .params()
                .id(&name)
                .ok_or_else(|| CheckpointError::Mismatch(format!("unknown parameter {name}")))?;
            let slot = model.params_mut().get_mut(id);
            if slot.shape() != tensor.shape() {
                return Err(CheckpointError::Mismatch(format!(
                    "{name}: shape {:?} vs {:?}",
                    tensor.shape(),
                    slot.shape()
                )));
            }
            *slot = tensor;
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_f32_values() {
        let model = Model::new(ModelConfig::toy(), 3).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&model, &mut buf).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap().into_model().unwrap();
        assert_eq!(back.config(), model.config());
        for ((_, n1, a), (_, n2, b)) in model.params().iter().zip(back.params().iter()) {
            assert_eq!(n1, n2);
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
        // f32-exact parameters survive unchanged, so a second save is identical
        let mut again = Vec::new();
        write_checkpoint(&back, &mut again).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn header_layout() {
        let model = Model::new(ModelConfig::toy(), 0).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&model, &mut buf).unwrap();
        let hlen = u64::from_le_bytes(buf[..8].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&buf[8..8 + hlen]).unwrap();
        let params = header["params"].as_array().unwrap();
        assert_eq!(params.len(), model.params().len());
        assert_eq!(params[0]["offset"], 0);
        assert_eq!(buf.len() - 8 - hlen, 4 * model.params().numel());
    }

    #[test]
    fn mismatch_and_truncation_are_errors() {
        let model = Model::new(ModelConfig::toy(), 0).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&model, &mut buf).unwrap();
        assert!(matches!(
            read_checkpoint(&buf[..buf.len() - 4]),
            Err(CheckpointError::Truncated)
        ));
        let mut ck = read_checkpoint(buf.as_slice()).unwrap();
        ck.params.pop();
        assert!(matches!(ck.into_model(), Err(CheckpointError::Mismatch(_))));
        let mut ck = read_checkpoint(buf.as_slice()).unwrap();
        ck.params[0].1 = Tensor::zeros(&[1]);
        assert!(matches!(ck.into_model(), Err(CheckpointError::Mismatch(_))));
    }
}
