//! Binary model checkpoint: magic, format version, a JSON header with the
//! schema, config, column state, layer widths and loss trace, then the
//! denoiser parameters as little-endian `f64`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mlp::Mlp;
use super::{ColumnState, DiffusionConfig, GenerativeModel};
use crate::cohort::Schema;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TSDM";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    schema: Schema,
    config: DiffusionConfig,
    column_state: Vec<ColumnState>,
    widths: Vec<usize>,
    train_loss_trace: Vec<f64>,
}

pub fn write_model<W: Write>(model: &GenerativeModel, mut w: W) -> Result<()> {
    let header = Header {
        schema: model.schema.clone(),
        config: model.config.clone(),
        column_state: model.column_state.clone(),
        widths: model.denoiser.widths(),
        train_loss_trace: model.train_loss_trace.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let params = model.denoiser.flatten();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for p in params {
        w.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_model<R: Read>(mut r: R) -> Result<GenerativeModel> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a model checkpoint".into()));
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v)?;
    let version = u32::from_le_bytes(v);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let len = read_u64(&mut r)? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    let count = read_u64(&mut r)? as usize;
    let mut params = Vec::with_capacity(count);
    let mut b = [0u8; 8];
    for _ in 0..count {
        r.read_exact(&mut b)?;
        params.push(f64::from_le_bytes(b));
    }
    let denoiser = Mlp::from_flat(&header.widths, &params)
        .ok_or_else(|| Error::Checkpoint("parameter count does not match the layer widths".into()))?;
    if header.column_state.len() != header.schema.len() {
        return Err(Error::Checkpoint("column state does not cover the schema".into()));
    }
    Ok(GenerativeModel {
        schema: header.schema,
        column_state: header.column_state,
        config: header.config,
        denoiser,
        train_loss_trace: header.train_loss_trace,
    })
}

pub fn save_model(model: &GenerativeModel, path: impl AsRef<Path>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_model(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<GenerativeModel> {
    read_model(std::io::BufReader::new(std::fs::File::open(path)?))
}
