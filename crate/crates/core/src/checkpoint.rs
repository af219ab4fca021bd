//! Checkpoint directories: one DAT1 file per parameter tensor and per
//! optimizer history tensor, plus a `manifest.json` holding the network spec
//! and optimizer scalars.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::RawTensor;
use crate::network::{Layer, Network, NetworkSpec};
use crate::optim::SgdState;
use crate::tensor::WeightTensor;

pub const FORMAT: &str = "dam-checkpoint-1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    file: String,
    dims: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: String,
    spec: NetworkSpec,
    optimizer: OptimizerScalars,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OptimizerScalars {
    mu: f64,
    gamma: f64,
    schedule: crate::optim::Schedule,
    iter: u64,
    decays: u32,
    best_score: Option<f64>,
    stale_evals: u32,
    finished: bool,
}

/// Writes `net` and `opt` into `dir`, creating it if needed.
pub fn save(
    dir: impl AsRef<Path>,
    net: &Network,
    opt: &SgdState,
    score: Option<f64>,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::new();
    let mut write = |name: String, raw: RawTensor| -> Result<()> {
        let file = format!("{name}.dat1");
        raw.save(dir.join(&file))?;
        tensors.push(TensorEntry {
            name,
            file,
            dims: raw.dims.clone(),
        });
        Ok(())
    };
    for (k, conv) in net.convs().enumerate() {
        write(format!("conv{k}_weights"), RawTensor::from(&conv.weights))?;
        write(
            format!("conv{k}_bias"),
            RawTensor::from_f64(vec![conv.bias.len()], &conv.bias)?,
        )?;
    }
    for (k, delta) in opt.prev_delta.iter().enumerate() {
        write(
            format!("momentum{k}"),
            RawTensor::from_f64(vec![delta.len()], delta)?,
        )?;
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        spec: net.spec().clone(),
        optimizer: OptimizerScalars {
            mu: opt.mu,
            gamma: opt.gamma,
            schedule: opt.schedule,
            iter: opt.iter,
            decays: opt.decays,
            best_score: opt.best_score,
            stale_evals: opt.stale_evals,
            finished: opt.finished,
        },
        score,
        tensors,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(())
}

/// A restored checkpoint.
pub struct Loaded {
    pub network: Network,
    pub optimizer: SgdState,
    pub score: Option<f64>,
}

pub fn load(dir: impl AsRef<Path>) -> Result<Loaded> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT {
        return Err(Error::Format(format!(
            "unsupported checkpoint format {:?}",
            manifest.format
        )));
    }
    let read = |name: &str| -> Result<RawTensor> {
        let entry = manifest
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name}")))?;
        let raw = RawTensor::load(dir.join(&entry.file))?;
        if raw.dims != entry.dims {
            return Err(Error::Format(format!(
                "{name}: manifest says {:?}, file holds {:?}",
                entry.dims, raw.dims
            )));
        }
        Ok(raw)
    };

    let mut network = Network::build(&manifest.spec, 0)?;
    let mut k = 0;
    for layer in network.layers_mut() {
        let Layer::Conv { conv, .. } = layer else {
            continue;
        };
        let weights = WeightTensor::try_from(read(&format!("conv{k}_weights"))?)?;
        if weights.values().len() != conv.weights.values().len()
            || weights.in_channels() != conv.in_channels()
            || weights.out_channels() != conv.out_channels()
        {
            return Err(Error::Format(format!(
                "conv{k}: stored weights do not match the layer described in the manifest"
            )));
        }
        let bias = read(&format!("conv{k}_bias"))?.to_f64();
        if bias.len() != conv.bias.len() {
            return Err(Error::Format(format!("conv{k}: bias length mismatch")));
        }
        conv.weights = weights;
        conv.bias = bias;
        k += 1;
    }

    let o = manifest.optimizer;
    let shapes = network.param_shapes();
    let mut optimizer = SgdState::new(o.mu, o.gamma, o.schedule, &shapes)?;
    for (i, delta) in optimizer.prev_delta.iter_mut().enumerate() {
        let stored = read(&format!("momentum{i}"))?.to_f64();
        if stored.len() != delta.len() {
            return Err(Error::Format(format!("momentum{i}: length mismatch")));
        }
        *delta = stored;
    }
    optimizer.iter = o.iter;
    optimizer.decays = o.decays;
    optimizer.best_score = o.best_score;
    optimizer.stale_evals = o.stale_evals;
    optimizer.finished = o.finished;
    Ok(Loaded {
        network,
        optimizer,
        score: manifest.score,
    })
}
