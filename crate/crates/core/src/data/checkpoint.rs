//! Checkpoint envelope: configuration, parameters, optimizer state, running
//! similarity statistics, and the epoch counter, serialized as one JSON
//! document with deterministic key order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::Error;
use crate::fusion::SimStats;
use crate::nn::AdamState;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::Result;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamRecord {
    pub t: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub config: RunConfig,
    pub params: BTreeMap<String, ParamRecord>,
    pub adam_state: AdamRecord,
    pub sim_stats: SimStats,
    /// Number of completed epochs.
    pub epoch: usize,
}

/// Capture the complete training state. Values are widened to `f64`, which
/// is lossless for both supported precisions.
pub fn snapshot<S: Scalar>(
    config: &RunConfig,
    store: &ParamStore<S>,
    adam: &AdamState,
    sim_stats: &SimStats,
    epoch: usize,
) -> Checkpoint {
    let mut params = BTreeMap::new();
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for (idx, (_, p)) in store.iter().enumerate() {
        params.insert(
            p.name.clone(),
            ParamRecord {
                rows: p.rows,
                cols: p.cols,
                data: p.data.iter().map(|x| x.f64()).collect(),
            },
        );
        m.insert(p.name.clone(), adam.m[idx].clone());
        v.insert(p.name.clone(), adam.v[idx].clone());
    }
    Checkpoint {
        version: FORMAT_VERSION,
        config: config.clone(),
        params,
        adam_state: AdamRecord { t: adam.t, m, v },
        sim_stats: sim_stats.clone(),
        epoch,
    }
}

pub fn save(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let text = serde_json::to_string(checkpoint)
        .map_err(|e| Error::validation(path, format!("cannot serialize checkpoint: {e}")))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    // Check the format version before insisting on the full schema, so a
    // checkpoint from a different format fails with a version message
    // rather than an arbitrary parse error.
    #[derive(Deserialize)]
    struct Probe {
        version: Option<u32>,
    }
    let probe: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
    let probe: Probe = serde_json::from_value(serde_json::Value::Object(
        probe
            .as_object()
            .cloned()
            .ok_or_else(|| Error::parse(path, "checkpoint is not a JSON object"))?
            .into_iter()
            .filter(|(k, _)| k == "version")
            .collect(),
    ))
    .map_err(|e| Error::parse(path, e.to_string()))?;
    match probe.version {
        None => return Err(Error::parse(path, "missing format version")),
        Some(v) if v != FORMAT_VERSION => {
            return Err(Error::IncompatibleVersion { found: v, expected: FORMAT_VERSION })
        }
        Some(_) => {}
    }
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
}

/// Overwrite a freshly constructed parameter store and optimizer with the
/// checkpoint's state. The parameter sets must agree exactly in names and
/// shapes.
pub fn apply<S: Scalar>(
    checkpoint: &Checkpoint,
    store: &mut ParamStore<S>,
    adam: &mut AdamState,
) -> Result<()> {
    let store_names: Vec<String> = store.iter().map(|(_, p)| p.name.clone()).collect();
    for name in checkpoint.params.keys() {
        if !store_names.iter().any(|n| n == name) {
            return Err(Error::contract(format!(
                "checkpoint parameter '{name}' does not exist in this model"
            )));
        }
    }
    for (idx, name) in store_names.iter().enumerate() {
        let record = checkpoint.params.get(name).ok_or_else(|| {
            Error::contract(format!("checkpoint is missing parameter '{name}'"))
        })?;
        let id = store.find(name).expect("name from store");
        let (rows, cols) = store.shape(id).pair();
        if (record.rows, record.cols) != (rows, cols) || record.data.len() != rows * cols {
            return Err(Error::contract(format!(
                "checkpoint parameter '{name}' has shape {}x{} ({} values), model expects {rows}x{cols}",
                record.rows,
                record.cols,
                record.data.len()
            )));
        }
        for (slot, &value) in store.data_mut(id).iter_mut().zip(&record.data) {
            *slot = S::of(value);
        }
        let m = checkpoint.adam_state.m.get(name).ok_or_else(|| {
            Error::contract(format!("checkpoint is missing optimizer state for '{name}'"))
        })?;
        let v = checkpoint.adam_state.v.get(name).ok_or_else(|| {
            Error::contract(format!("checkpoint is missing optimizer state for '{name}'"))
        })?;
        if m.len() != rows * cols || v.len() != rows * cols {
            return Err(Error::contract(format!(
                "optimizer state for '{name}' has {} / {} values, expected {}",
                m.len(),
                v.len(),
                rows * cols
            )));
        }
        adam.m[idx].copy_from_slice(m);
        adam.v[idx].copy_from_slice(v);
    }
    adam.t = checkpoint.adam_state.t;
    Ok(())
}
