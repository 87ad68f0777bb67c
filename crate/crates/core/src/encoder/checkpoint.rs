//! Checkpoint directory: `manifest.json` plus one f64 `TNSR` file per
//! parameter and per batch-norm running statistic.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::EncoderState;
use super::{EncoderConfig, EncoderError};
use crate::io::tensor::{read_tensor, write_tensor, Tensor, TensorData};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    config: EncoderConfig,
    adam_step: u64,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

fn running_names(slot: usize) -> [String; 2] {
    [format!("running{slot}.mean"), format!("running{slot}.var")]
}

pub fn save_checkpoint(state: &EncoderState, dir: impl AsRef<Path>) -> Result<(), EncoderError> {
    let dir = dir.as_ref();
    let fail = |e: std::io::Error| EncoderError::Checkpoint(format!("{}: {e}", dir.display()));
    fs::create_dir_all(dir).map_err(fail)?;
    let mut tensors = Vec::new();
    let mut put = |name: String, shape: Vec<usize>, value: &[f64]| -> Result<(), EncoderError> {
        let file = format!("{:03}_{name}.tnsr", tensors.len());
        // rank-4 conv weights are stored flattened to [out, rest]
        let stored = if shape.len() > 3 { vec![shape[0], shape[1..].iter().product()] } else { shape.clone() };
        write_tensor(dir.join(&file), &Tensor::new(stored, TensorData::F64(value.to_vec()))?)?;
        tensors.push(Entry { name, shape, file });
        Ok(())
    };
    for p in &state.params {
        put(p.name.clone(), p.shape.clone(), &p.value)?;
    }
    for (slot, rs) in state.running.iter().enumerate() {
        let [m, v] = running_names(slot);
        put(m, vec![rs.mean.len()], &rs.mean)?;
        put(v, vec![rs.var.len()], &rs.var)?;
    }
    let manifest =
        Manifest { version: CHECKPOINT_VERSION, config: state.config().clone(), adam_step: state.adam.step, tensors };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| EncoderError::Checkpoint(e.to_string()))?;
    crate::io::atomic_write(&dir.join("manifest.json"), text.as_bytes())
        .map_err(|e| EncoderError::Checkpoint(e.to_string()))
}

/// Restores weights and running statistics. Optimizer moments are not
/// stored; a loaded state resumes with fresh moments.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<EncoderState, EncoderError> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join("manifest.json"))
        .map_err(|e| EncoderError::Checkpoint(format!("{}: {e}", dir.display())))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| EncoderError::Checkpoint(e.to_string()))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(EncoderError::Checkpoint(format!("unsupported version {}", manifest.version)));
    }
    let mut state = EncoderState::new(manifest.config, 0)?;
    state.adam.step = manifest.adam_step;
    let mut filled = 0usize;
    for e in &manifest.tensors {
        let t = read_tensor(dir.join(&e.file))?;
        let TensorData::F64(value) = t.into_data() else {
            return Err(EncoderError::Checkpoint(format!("{}: expected f64 data", e.file)));
        };
        let expected: usize = e.shape.iter().product();
        if value.len() != expected {
            return Err(EncoderError::Checkpoint(format!(
                "{}: {} values for shape {:?}",
                e.name,
                value.len(),
                e.shape
            )));
        }
        if let Some(p) = state.param_mut(&e.name) {
            if p.shape != e.shape {
                return Err(EncoderError::Checkpoint(format!("{}: shape {:?} vs {:?}", e.name, e.shape, p.shape)));
            }
            p.value = value;
            filled += 1;
            continue;
        }
        let slot = (0..state.running.len()).find(|&s| running_names(s).contains(&e.name));
        let Some(slot) = slot else {
            return Err(EncoderError::Checkpoint(format!("unknown tensor {}", e.name)));
        };
        let rs = &mut state.running[slot];
        let target = if e.name.ends_with(".mean") { &mut rs.mean } else { &mut rs.var };
        if target.len() != value.len() {
            return Err(EncoderError::Checkpoint(format!("{}: length {}", e.name, value.len())));
        }
        *target = value;
        filled += 1;
    }
    if filled != state.params.len() + 2 * state.running.len() {
        return Err(EncoderError::Checkpoint(format!("manifest lists {filled} of the required tensors")));
    }
    Ok(state)
}
