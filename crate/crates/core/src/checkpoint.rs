//! On-disk checkpoints: one directory per network holding an LTA1 file per
//! parameter tensor and a `meta.json`.
//!
//! ```text
//! <dir>/checkpoints.json          config + full loss history
//! <dir>/losses.csv
//! <dir>/gen_<i>/<network>/meta.json
//! <dir>/gen_<i>/<network>/<param>.lta
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ArchDims, Architecture, ModelParams};
use crate::tensor::{read_tensor, write_tensor, StoredTensor};
use crate::trainer::{write_losses_csv, CheckpointSet, GenerationCheckpoint, ILConfig, LossRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsMeta {
    pub architecture: Architecture,
    pub dims: ArchDims,
    pub generation: usize,
    pub parameters: Vec<String>,
    pub loss_history: Vec<LossRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SetIndex {
    config: ILConfig,
    generations: usize,
    losses: Vec<LossRecord>,
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn save_params(
    params: &ModelParams,
    dir: impl AsRef<Path>,
    generation: usize,
    loss_history: &[LossRecord],
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, (shape, data)) in &params.tensors {
        write_tensor(
            &StoredTensor::from_f64(shape.clone(), data)?,
            dir.join(format!("{name}.lta")),
        )?;
    }
    let meta = ParamsMeta {
        architecture: params.architecture,
        dims: params.dims,
        generation,
        parameters: params.tensors.keys().cloned().collect(),
        loss_history: loss_history.to_vec(),
    };
    write_json(&meta, &dir.join("meta.json"))
}

pub fn load_params(dir: impl AsRef<Path>) -> Result<(ModelParams, ParamsMeta)> {
    let dir = dir.as_ref();
    let meta: ParamsMeta = read_json(&dir.join("meta.json"))?;
    let mut tensors = BTreeMap::new();
    for name in &meta.parameters {
        let t = read_tensor(dir.join(format!("{name}.lta")))?;
        tensors.insert(name.clone(), (t.shape.clone(), t.to_f64()));
    }
    let params = ModelParams {
        architecture: meta.architecture,
        dims: meta.dims,
        tensors,
    };
    params.validate()?;
    Ok((params, meta))
}

impl CheckpointSet {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for g in &self.generations {
            let history: Vec<LossRecord> = self
                .losses
                .iter()
                .filter(|r| r.generation == g.generation)
                .cloned()
                .collect();
            let gdir = dir.join(format!("gen_{}", g.generation));
            save_params(&g.student, gdir.join("student"), g.generation, &history)?;
            save_params(&g.decoder, gdir.join("decoder"), g.generation, &history)?;
            save_params(
                &g.classifier,
                gdir.join("classifier"),
                g.generation,
                &history,
            )?;
        }
        write_losses_csv(&self.losses, dir.join("losses.csv"))?;
        write_json(
            &SetIndex {
                config: self.config.clone(),
                generations: self.generations.len(),
                losses: self.losses.clone(),
            },
            &dir.join("checkpoints.json"),
        )
    }

    /// Parameters come back rounded to `f32`, as stored.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let index: SetIndex = read_json(&dir.join("checkpoints.json"))?;
        let mut generations = Vec::with_capacity(index.generations);
        for g in 0..index.generations {
            let gdir = dir.join(format!("gen_{g}"));
            let (student, _) = load_params(gdir.join("student"))?;
            let (decoder, _) = load_params(gdir.join("decoder"))?;
            let (classifier, _) = load_params(gdir.join("classifier"))?;
            generations.push(GenerationCheckpoint {
                generation: g,
                student,
                decoder,
                classifier,
            });
        }
        Ok(CheckpointSet {
            config: index.config,
            generations,
            losses: index.losses,
        })
    }
}
