//! Versioned binary checkpoints: all four parameter groups, momentum
//! buffers, counters and the config hash. Loading refuses checkpoints whose
//! hash differs from the caller's resolved configuration.

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::TrainState;
use crate::error::{Error, Result};
use crate::model::{ModelBundle, ModelConfig, PARAM_NAMES};

const MAGIC: &[u8; 8] = b"CBSWRCP1";

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    model: ModelConfig,
    clusters: usize,
}

fn write_u32(out: &mut impl Write, v: u32) -> Result<()> {
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(out: &mut impl Write, v: u64) -> Result<()> {
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_tensor(out: &mut impl Write, name: &str, tensor: &ArrayD<f64>) -> Result<()> {
    write_u32(out, name.len() as u32)?;
    out.write_all(name.as_bytes())?;
    write_u32(out, tensor.ndim() as u32)?;
    for &d in tensor.shape() {
        write_u64(out, d as u64)?;
    }
    for &v in tensor.iter() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let slice = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<(String, ArrayD<f64>)> {
        let name_len = self.u32()? as usize;
        let name = String::from_utf8(self.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid tensor name".into()))?;
        let ndim = self.u32()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(self.u64()? as usize);
        }
        let len: usize = dims.iter().product();
        let bytes = self.take(len * 8)?;
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let tensor = ArrayD::from_shape_vec(IxDyn(&dims), values)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok((name, tensor))
    }
}

/// Serialize the full training state. The byte stream is a pure function of
/// the state and hash, so identical runs produce identical files.
pub fn save_checkpoint(path: &Path, state: &TrainState, config_hash: u64) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(MAGIC)?;
    write_u64(&mut out, config_hash)?;
    let meta = serde_json::to_vec(&ModelMeta {
        model: state.model.config.clone(),
        clusters: state.model.clusters,
    })?;
    write_u32(&mut out, meta.len() as u32)?;
    out.write_all(&meta)?;
    write_u64(&mut out, state.epoch)?;
    write_u64(&mut out, state.steps)?;
    write_u64(&mut out, state.skipped_samples_total)?;

    let views = state.model.param_views();
    write_u32(&mut out, views.len() as u32)?;
    for (name, view) in PARAM_NAMES.iter().zip(&views) {
        write_tensor(&mut out, name, &view.to_owned())?;
    }
    for (name, vel) in PARAM_NAMES.iter().zip(&state.velocity) {
        write_tensor(&mut out, &format!("velocity.{name}"), vel)?;
    }
    out.flush()?;
    Ok(())
}

/// Deserialize a checkpoint, returning the state and its stored config hash.
pub fn load_checkpoint(path: &Path) -> Result<(TrainState, u64)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    let mut r = Reader { data: &bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let config_hash = r.u64()?;
    let meta_len = r.u32()? as usize;
    let meta: ModelMeta = serde_json::from_slice(r.take(meta_len)?)?;
    let epoch = r.u64()?;
    let steps = r.u64()?;
    let skipped = r.u64()?;

    let mut model = ModelBundle::init(&meta.model, meta.clusters, 0)?;
    let count = r.u32()? as usize;
    if count != PARAM_NAMES.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {count} parameter tensors, expected {}",
            PARAM_NAMES.len()
        )));
    }
    {
        let mut views = model.param_views_mut();
        for (expected, view) in PARAM_NAMES.iter().zip(views.iter_mut()) {
            let (name, tensor) = r.tensor()?;
            if name != *expected {
                return Err(Error::Checkpoint(format!(
                    "unexpected tensor {name}, expected {expected}"
                )));
            }
            if tensor.shape() != view.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, model expects {:?}",
                    tensor.shape(),
                    view.shape()
                )));
            }
            view.assign(&tensor);
        }
    }
    let mut velocity = Vec::with_capacity(PARAM_NAMES.len());
    for expected in PARAM_NAMES.iter() {
        let (name, tensor) = r.tensor()?;
        if name != format!("velocity.{expected}") {
            return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
        }
        velocity.push(tensor);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after checkpoint payload".into()));
    }
    Ok((
        TrainState { model, velocity, epoch, steps, skipped_samples_total: skipped },
        config_hash,
    ))
}

/// Load and refuse the checkpoint when its config hash differs.
pub fn load_checkpoint_checked(path: &Path, expected_hash: u64) -> Result<TrainState> {
    let (state, hash) = load_checkpoint(path)?;
    if hash != expected_hash {
        return Err(Error::Checkpoint(format!(
            "config hash mismatch: checkpoint {hash:#018x}, resolved config {expected_hash:#018x}"
        )));
    }
    Ok(state)
}
