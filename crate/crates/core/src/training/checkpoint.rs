//! Single-file checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then every array as raw little-endian `f32` in header order.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{Moments, Optimizer, OptimizerKind};
use super::TrainConfig;
use crate::model::{DenoiserModel, Head, ModelState, NamedArray, UNetConfig};
use crate::schedule::ScheduleSpec;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"N2MCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArrayIndex {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OptimizerHeader {
    kind: OptimizerKind,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    steps: BTreeMap<String, u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model: UNetConfig,
    heads: Vec<Head>,
    schedule: ScheduleSpec,
    train: TrainConfig,
    epoch: usize,
    step: u64,
    best_val_loss: Option<f64>,
    optimizer: Option<OptimizerHeader>,
    arrays: Vec<ArrayIndex>,
}

/// Everything needed to rebuild a model and resume its optimization.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: UNetConfig,
    pub heads: Vec<Head>,
    pub schedule: ScheduleSpec,
    pub train: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer updates.
    pub step: u64,
    pub best_val_loss: Option<f64>,
    pub model: ModelState,
    pub optimizer: Option<Optimizer>,
}

impl Checkpoint {
    /// Rebuilds the model described by this checkpoint with its stored weights.
    pub fn build_model(&self) -> Result<DenoiserModel<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = DenoiserModel::build(&self.model_config, &self.heads, &mut rng)?;
        model.load_state(&self.model)?;
        Ok(model)
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut arrays: Vec<(&str, String, Vec<usize>, &[f32])> = Vec::new();
        for a in &self.model.arrays {
            arrays.push(("model", a.name.clone(), a.shape.clone(), &a.data));
        }
        let optimizer = self.optimizer.as_ref().map(|opt| {
            for (name, mo) in &opt.state {
                arrays.push(("m", name.clone(), vec![mo.m.len()], &mo.m));
                arrays.push(("v", name.clone(), vec![mo.v.len()], &mo.v));
            }
            OptimizerHeader {
                kind: opt.kind,
                beta1: opt.beta1,
                beta2: opt.beta2,
                eps: opt.eps,
                weight_decay: opt.weight_decay,
                steps: opt.state.iter().map(|(k, m)| (k.clone(), m.steps)).collect(),
            }
        });
        let header = Header {
            format_version: FORMAT_VERSION,
            model: self.model_config.clone(),
            heads: self.heads.clone(),
            schedule: self.schedule.clone(),
            train: self.train.clone(),
            epoch: self.epoch,
            step: self.step,
            best_val_loss: self.best_val_loss,
            optimizer,
            arrays: arrays
                .iter()
                .map(|(group, name, shape, _)| ArrayIndex {
                    name: format!("{group}/{name}"),
                    shape: shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;

        let tmp = path.with_extension("tmp");
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(&tmp, e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&json).map_err(io)?;
        for (_, _, _, data) in &arrays {
            for v in data.iter() {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        let file = w.into_inner().map_err(|e| Error::io(&tmp, e.into_error()))?;
        file.sync_all().map_err(io)?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;

        let mut offset = 20 + hlen;
        let mut model = ModelState::default();
        let mut moments: BTreeMap<String, (Vec<f32>, Vec<f32>)> = BTreeMap::new();
        for a in &header.arrays {
            let n: usize = a.shape.iter().product();
            let raw = bytes
                .get(offset..offset + 4 * n)
                .ok_or_else(|| bad(&format!("truncated array {}", a.name)))?;
            offset += 4 * n;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let (group, name) = a.name.split_once('/').ok_or_else(|| bad("malformed array name"))?;
            match group {
                "model" => model.arrays.push(NamedArray {
                    name: name.to_string(),
                    shape: a.shape.clone(),
                    data,
                }),
                "m" => moments.entry(name.to_string()).or_default().0 = data,
                "v" => moments.entry(name.to_string()).or_default().1 = data,
                _ => return Err(bad(&format!("unknown array group {group}"))),
            }
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after arrays"));
        }
        let optimizer = header.optimizer.map(|h| Optimizer {
            kind: h.kind,
            beta1: h.beta1,
            beta2: h.beta2,
            eps: h.eps,
            weight_decay: h.weight_decay,
            state: moments
                .into_iter()
                .map(|(name, (m, v))| {
                    let steps = h.steps.get(&name).copied().unwrap_or(0);
                    (name, Moments { m, v, steps })
                })
                .collect(),
        });
        Ok(Self {
            model_config: header.model,
            heads: header.heads,
            schedule: header.schedule,
            train: header.train,
            epoch: header.epoch,
            step: header.step,
            best_val_loss: header.best_val_loss,
            model,
            optimizer,
        })
    }
}
