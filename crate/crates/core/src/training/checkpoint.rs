use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype as StDtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use super::{Adam, Trainer};
use crate::config::RunConfig;
use crate::error::{Error, Result};

/// Metadata key holding the JSON header of a checkpoint.
pub const CHECKPOINT_METADATA_KEY: &str = "emodiff";

const PARAM: &str = "param/";
const MOMENT1: &str = "adam_m/";
const MOMENT2: &str = "adam_v/";

#[derive(Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    step: u64,
    adam_t: u64,
    rng_seed: Vec<u8>,
    rng_stream: u64,
    /// Decimal string; JSON numbers cannot hold it exactly.
    rng_word_pos: String,
}

fn bytes_of(t: &Tensor) -> Result<(StDtype, Vec<u8>)> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => (
            StDtype::F32,
            flat.to_vec1::<f32>()?.iter().flat_map(|x| x.to_le_bytes()).collect(),
        ),
        DType::F64 => (
            StDtype::F64,
            flat.to_vec1::<f64>()?.iter().flat_map(|x| x.to_le_bytes()).collect(),
        ),
        other => return Err(Error::Invalid(format!("cannot store {other:?} tensors"))),
    })
}

fn tensor_of(view: &TensorView<'_>, dtype: DType) -> Result<Tensor> {
    let dev = &candle_core::Device::Cpu;
    let data = view.data();
    let t = match view.dtype() {
        StDtype::F32 => {
            let v: Vec<f32> = data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Tensor::from_vec(v, view.shape(), dev)?
        }
        StDtype::F64 => {
            let v: Vec<f64> = data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Tensor::from_vec(v, view.shape(), dev)?
        }
        other => return Err(Error::Invalid(format!("unsupported stored dtype {other:?}"))),
    };
    Ok(t.to_dtype(dtype)?)
}

/// Writes parameters, optimizer moments, step counter, rng position and the
/// full run config into one safetensors file.
pub fn save_checkpoint(trainer: &Trainer, path: &Path) -> Result<()> {
    let mut owned: Vec<(String, StDtype, Vec<usize>, Vec<u8>)> = Vec::new();
    let mut push = |name: String, t: &Tensor| -> Result<()> {
        let (dt, bytes) = bytes_of(t)?;
        owned.push((name, dt, t.dims().to_vec(), bytes));
        Ok(())
    };
    for (name, var) in trainer.model.store.vars() {
        push(format!("{PARAM}{name}"), var.as_tensor())?;
    }
    for (name, m) in &trainer.optimizer.m {
        push(format!("{MOMENT1}{name}"), m)?;
    }
    for (name, v) in &trainer.optimizer.v {
        push(format!("{MOMENT2}{name}"), v)?;
    }
    let views = owned
        .iter()
        .map(|(n, dt, shape, bytes)| Ok((n.clone(), TensorView::new(*dt, shape.clone(), bytes)?)))
        .collect::<std::result::Result<Vec<_>, safetensors::SafeTensorError>>()
        .map_err(|e| Error::Checkpoint {
            path: path.into(),
            reason: e.to_string(),
        })?;
    let header = Header {
        config: trainer.model.config.clone(),
        step: trainer.step,
        adam_t: trainer.optimizer.t,
        rng_seed: trainer.rng.get_seed().to_vec(),
        rng_stream: trainer.rng.get_stream(),
        rng_word_pos: trainer.rng.get_word_pos().to_string(),
    };
    let meta = HashMap::from([(CHECKPOINT_METADATA_KEY.to_string(), serde_json::to_string(&header)?)]);
    let bytes = safetensors::serialize(views, Some(meta)).map_err(|e| Error::Checkpoint {
        path: path.into(),
        reason: e.to_string(),
    })?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Restores a trainer exactly as it was saved.
pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    let bad = |reason: String| Error::Checkpoint {
        path: path.into(),
        reason,
    };
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
    let header_json = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(CHECKPOINT_METADATA_KEY))
        .ok_or_else(|| bad("missing run header".into()))?;
    let header: Header = serde_json::from_str(header_json).map_err(|e| bad(e.to_string()))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| bad(e.to_string()))?;

    let mut trainer = Trainer::new(&header.config)?;
    let dtype = trainer.model.dtype();
    let vars = trainer.model.store.vars();
    for (name, var) in &vars {
        let view = st
            .tensor(&format!("{PARAM}{name}"))
            .map_err(|_| bad(format!("parameter {name} is missing")))?;
        if view.shape() != var.dims() {
            return Err(bad(format!(
                "parameter {name} has shape {:?}, the model expects {:?}",
                view.shape(),
                var.dims()
            )));
        }
        var.set(&tensor_of(&view, dtype)?)?;
    }
    let mut opt = Adam {
        t: header.adam_t,
        ..trainer.optimizer.clone()
    };
    for (name, view) in st.tensors() {
        if let Some(n) = name.strip_prefix(MOMENT1) {
            opt.m.insert(n.to_string(), tensor_of(&view, dtype)?);
        } else if let Some(n) = name.strip_prefix(MOMENT2) {
            opt.v.insert(n.to_string(), tensor_of(&view, dtype)?);
        } else if !name.starts_with(PARAM) {
            return Err(bad(format!("unexpected entry {name}")));
        }
    }
    let seed: [u8; 32] = header
        .rng_seed
        .as_slice()
        .try_into()
        .map_err(|_| bad("rng seed must be 32 bytes".into()))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(header.rng_stream);
    rng.set_word_pos(header.rng_word_pos.parse().map_err(|_| bad("bad rng position".into()))?);
    trainer.optimizer = opt;
    trainer.rng = rng;
    trainer.step = header.step;
    Ok(trainer)
}

/// First difference between two model configurations as
/// `field: checkpoint X, config Y`.
pub fn model_config_mismatch(checkpoint: &RunConfig, config: &RunConfig) -> Option<String> {
    let a = serde_json::to_value(&checkpoint.model).ok()?;
    let b = serde_json::to_value(&config.model).ok()?;
    let (a, b) = (a.as_object()?, b.as_object()?);
    a.iter().find_map(|(k, va)| {
        let vb = b.get(k)?;
        (va != vb).then(|| format!("model.{k}: checkpoint {va}, config {vb}"))
    })
}
