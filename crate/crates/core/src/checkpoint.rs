//! `HSTC` checkpoint: deep-model weights, normalization, provenance and an
//! optional stage-2 ensemble, all little-endian.
//!
//! ```text
//! "HSTC" u32 version
//! str    metadata JSON (config, dims, seed, sensors, norm, provenance)
//! u64    tensor count, then per tensor: str name, u32 rank, u64 dims, f64 data
//! u8     ensemble flag; when 1:
//!   "ENSM" u8 mode, f64 base, f64 shrinkage, f64 α, str schema JSON,
//!   u64 tree count, per tree: u64 seed, u64 node count, then preorder
//!   records (u32 feature, f64 threshold, u32 left, u32 right, f64 value),
//!   f64 importance per feature
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{read_file, Reader, Writer};
use crate::diffnum::{ParamStore, Tensor};
use crate::ensemble::{EnsembleMode, EnsembleModel, FeatureSchema, Tree, TreeNode};
use crate::error::{Error, Result};
use crate::hybrid::{HybridModel, ModelConfig, ModelDims};
use crate::preprocess::NormStats;

const MAGIC: &[u8; 4] = b"HSTC";
const ENSEMBLE_MAGIC: &[u8; 4] = b"ENSM";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    config: ModelConfig,
    dims: ModelDims,
    seed: u64,
    sensor_ids: Vec<String>,
    norm: Option<NormStats>,
    provenance: String,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: HybridModel,
    pub ensemble: Option<EnsembleModel>,
}

pub fn encode_checkpoint(model: &HybridModel, ensemble: Option<&EnsembleModel>) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    let meta = Metadata {
        config: model.config,
        dims: model.dims,
        seed: model.seed,
        sensor_ids: model.sensor_ids.clone(),
        norm: model.norm.clone(),
        provenance: model.provenance.clone(),
    };
    w.str(&serde_json::to_string(&meta).expect("metadata serializes"));
    w.u64(model.store.len() as u64);
    for (name, t) in model.store.names().iter().zip(model.store.tensors()) {
        w.str(name);
        w.u32(t.shape().len() as u32);
        t.shape().iter().for_each(|&d| w.u64(d as u64));
        t.data().iter().for_each(|&v| w.f64(v));
    }
    match ensemble {
        None => w.u8(0),
        Some(e) => {
            e.validate()?;
            w.u8(1);
            w.bytes(ENSEMBLE_MAGIC);
            w.u8(match e.mode {
                EnsembleMode::RandomForest => 0,
                EnsembleMode::GradientBoosted => 1,
            });
            w.f64(e.base);
            w.f64(e.shrinkage);
            w.f64(e.alpha);
            w.str(&serde_json::to_string(&e.schema).expect("schema serializes"));
            w.u64(e.trees.len() as u64);
            for (tree, &seed) in e.trees.iter().zip(&e.seeds) {
                w.u64(seed);
                w.u64(tree.nodes.len() as u64);
                for n in &tree.nodes {
                    w.u32(n.feature);
                    w.f64(n.threshold);
                    w.u32(n.left);
                    w.u32(n.right);
                    w.f64(n.value);
                }
            }
            e.importance.iter().for_each(|&v| w.f64(v));
        }
    }
    Ok(w.buf)
}

pub fn store_checkpoint(path: &Path, model: &HybridModel, ensemble: Option<&EnsembleModel>) -> Result<()> {
    let bytes = encode_checkpoint(model, ensemble)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn json<T: for<'de> Deserialize<'de>>(text: &str, what: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Corrupt(format!("checkpoint {what}: {e}")))
}

fn decode_ensemble(r: &mut Reader<'_>) -> Result<EnsembleModel> {
    r.magic(ENSEMBLE_MAGIC)?;
    let mode = match r.u8()? {
        0 => EnsembleMode::RandomForest,
        1 => EnsembleMode::GradientBoosted,
        m => return Err(Error::Corrupt(format!("unknown ensemble mode {m}"))),
    };
    let base = r.f64()?;
    let shrinkage = r.f64()?;
    let alpha = r.f64()?;
    let schema: FeatureSchema = json(&r.str()?, "feature schema")?;
    let count = r.u64()?;
    let n_trees = r.len(16, count)?;
    let mut trees = Vec::with_capacity(n_trees);
    let mut seeds = Vec::with_capacity(n_trees);
    for _ in 0..n_trees {
        seeds.push(r.u64()?);
        let count = r.u64()?;
        let n = r.len(28, count)?;
        let mut nodes = Vec::with_capacity(n);
        for _ in 0..n {
            nodes.push(TreeNode {
                feature: r.u32()?,
                threshold: r.f64()?,
                left: r.u32()?,
                right: r.u32()?,
                value: r.f64()?,
            });
        }
        trees.push(Tree { nodes });
    }
    let importance = r.f64s(schema.len())?;
    let model = EnsembleModel {
        mode,
        trees,
        base,
        shrinkage,
        schema,
        alpha,
        seeds,
        importance,
    };
    model.validate()?;
    Ok(model)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes, "checkpoint");
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Incompatible(format!(
            "checkpoint version {version}, expected {VERSION}"
        )));
    }
    let meta: Metadata = json(&r.str()?, "metadata")?;
    let count = r.u64()?;
    let n = r.len(8, count)?;
    let mut store = ParamStore::new();
    for _ in 0..n {
        let name = r.str()?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let size = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let size = size.ok_or_else(|| Error::Corrupt(format!("tensor {name} is too large")))?;
        let data = r.f64s(size)?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Corrupt(format!("tensor {name} holds non-finite values")));
        }
        store
            .add(name, Tensor::new(shape, data)?)
            .map_err(|e| Error::Corrupt(e.to_string()))?;
    }
    let ensemble = match r.u8()? {
        0 => None,
        1 => Some(decode_ensemble(&mut r)?),
        f => return Err(Error::Corrupt(format!("bad ensemble flag {f}"))),
    };
    r.finish()?;
    let model = HybridModel::from_store(
        meta.config,
        meta.dims,
        meta.seed,
        store,
        meta.sensor_ids,
        meta.norm,
        meta.provenance,
    )?;
    Ok(Checkpoint { model, ensemble })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_file(path)?)
}
