//! Checkpoint directories: a JSON index plus one raw float32 file per array.
//!
//! ```text
//! <dir>/index.json
//! <dir>/param.<name>.f32
//! <dir>/opt<k>.<name>.f32      optimizer moment buffers
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::optim::{Optimizer, OptimizerConfig};
use crate::rawio::{read_f32le, read_json, write_dir_atomic, write_f32le, write_json};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

pub const FORMAT: &str = "lidnet-checkpoint-v1";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub format: String,
    pub dtype: String,
    pub step: u64,
    pub params: Vec<ArrayEntry>,
    pub optimizer: Option<OptimizerConfig>,
    pub optimizer_step: u64,
    pub optimizer_slots: Vec<Vec<ArrayEntry>>,
    /// Free-form description of the owning network (architecture, role).
    pub meta: serde_json::Value,
}

/// A loaded checkpoint, stored in single precision.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub step: u64,
    pub params: ParamSet<f32>,
    pub optimizer: Option<Optimizer<f32>>,
    pub meta: serde_json::Value,
}

pub fn save<T: Scalar>(
    dir: &Path,
    params: &ParamSet<T>,
    optimizer: Option<&Optimizer<T>>,
    step: u64,
    meta: serde_json::Value,
) -> Result<()> {
    write_dir_atomic(dir, |tmp| {
        let mut entries = Vec::new();
        for (name, t) in params.names().iter().zip(params.tensors()) {
            let file = format!("param.{name}.f32");
            let data: Vec<f32> = t.data().iter().map(|v| v.as_f64() as f32).collect();
            write_f32le(&tmp.join(&file), &data)?;
            entries.push(ArrayEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                file,
            });
        }
        let mut slot_entries = Vec::new();
        if let Some(opt) = optimizer {
            for (k, slot) in opt.slots().iter().enumerate() {
                let mut es = Vec::new();
                for (name, t) in params.names().iter().zip(slot) {
                    let file = format!("opt{k}.{name}.f32");
                    let data: Vec<f32> = t.data().iter().map(|v| v.as_f64() as f32).collect();
                    write_f32le(&tmp.join(&file), &data)?;
                    es.push(ArrayEntry {
                        name: name.clone(),
                        shape: t.shape().to_vec(),
                        file,
                    });
                }
                slot_entries.push(es);
            }
        }
        let index = CheckpointIndex {
            format: FORMAT.into(),
            dtype: "f32le".into(),
            step,
            params: entries,
            optimizer: optimizer.map(|o| o.config),
            optimizer_step: optimizer.map_or(0, |o| o.steps_taken()),
            optimizer_slots: slot_entries,
            meta: meta.clone(),
        };
        write_json(&tmp.join("index.json"), &index)
    })
}

fn read_array(dir: &Path, e: &ArrayEntry) -> Result<Tensor<f32>> {
    let data = read_f32le(&dir.join(&e.file), numel(&e.shape))?;
    Ok(Tensor::from_vec(&e.shape, data))
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let index_path = dir.join("index.json");
    if !index_path.exists() {
        return Err(Error::io(
            &index_path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "missing checkpoint index"),
        ));
    }
    let index: CheckpointIndex = read_json(&index_path)?;
    if index.format != FORMAT || index.dtype != "f32le" {
        return Err(Error::Format {
            path: index_path,
            msg: format!("unsupported format {} / dtype {}", index.format, index.dtype),
        });
    }
    let mut params = ParamSet::new();
    for e in &index.params {
        params.push(e.name.clone(), read_array(dir, e)?);
    }
    let optimizer = match index.optimizer {
        Some(cfg) => {
            let mut opt = Optimizer::new(cfg, &params);
            let mut slots = Vec::new();
            for es in &index.optimizer_slots {
                slots.push(es.iter().map(|e| read_array(dir, e)).collect::<Result<Vec<_>>>()?);
            }
            opt.restore(index.optimizer_step, slots);
            Some(opt)
        }
        None => None,
    };
    Ok(Checkpoint {
        step: index.step,
        params,
        optimizer,
        meta: index.meta,
    })
}

impl Checkpoint {
    /// Copies stored values into `target`, requiring identical names and shapes.
    pub fn restore_into<T: Scalar>(&self, target: &mut ParamSet<T>) -> Result<()> {
        if target.names() != self.params.names() {
            return Err(Error::Validation(
                "checkpoint parameter names do not match the network".into(),
            ));
        }
        for (dst, src) in target.tensors_mut().iter_mut().zip(self.params.tensors()) {
            if dst.shape() != src.shape() {
                return Err(Error::Validation(format!(
                    "checkpoint shape {:?} does not match network shape {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src.cast();
        }
        Ok(())
    }
}
