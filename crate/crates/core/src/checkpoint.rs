//! Model checkpoints: an 8-byte magic, a little-endian u64 header length, a
//! JSON header (config, seed, tensor names and shapes), then every tensor's
//! values as little-endian f64 in header order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::Matrix;

pub const MAGIC: &[u8; 8] = b"MOMOECK1";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    init_seed: u64,
    tensors: Vec<TensorEntry>,
}

pub fn write_checkpoint(model: &Model, mut w: impl Write) -> Result<()> {
    let named = model.named_tensors();
    let header = Header {
        config: model.config().clone(),
        init_seed: model.config().init_seed,
        tensors: named
            .iter()
            .map(|(name, m, trainable)| TensorEntry {
                name: name.clone(),
                rows: m.rows(),
                cols: m.cols(),
                trainable: *trainable,
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    for (_, m, _) in &named {
        for v in m.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(mut r: impl Read) -> Result<Model> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Input("not a checkpoint file (bad magic)".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut header)?;
    let header: Header = serde_json::from_slice(&header)?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut buf = [0u8; 8];
    for t in &header.tensors {
        let mut data = Vec::with_capacity(t.rows * t.cols);
        for _ in 0..t.rows * t.cols {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        tensors.push(Matrix::from_vec(t.rows, t.cols, data)?);
    }
    Model::from_tensors(header.config, tensors)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    write_checkpoint(model, std::io::BufWriter::new(std::fs::File::create(path)?))
}

pub fn load(path: &Path) -> Result<Model> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}
