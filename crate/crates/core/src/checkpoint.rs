//! Checkpoint directory: `manifest.json`, `tensors.bin` and, for resumable
//! runs, `optimizer.bin`.
//!
//! `tensors.bin` holds each tensor as u32 name length, name bytes, u32 rank,
//! u32 extents, then row-major little-endian f32 data, in manifest order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Cvae, Mode};
use crate::tensor::{ParameterSet, Tensor};
use crate::trainer::{ByteReader, TrainingSchedule};
use crate::transformer::ModelConfig;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSOR_FILE: &str = "tensors.bin";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub mode: Mode,
    pub model: ModelConfig,
    /// Vocabulary file the token ids refer to, as given at training time.
    pub vocabulary: Option<String>,
    pub step: u64,
    #[serde(default)]
    pub schedule: Option<TrainingSchedule>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Cvae<f32>,
    pub step: u64,
    pub vocabulary: Option<String>,
    pub schedule: Option<TrainingSchedule>,
    /// Serialized optimizer state, if saved.
    pub optimizer: Option<Vec<u8>>,
}

pub fn encode_tensors(params: &ParameterSet<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 * params.numel() + 64 * params.len());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn decode_tensors(bytes: &[u8]) -> Result<ParameterSet<f32>> {
    let mut r = ByteReader { bytes, pos: 0 };
    let mut params = ParameterSet::new();
    while r.pos < bytes.len() {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Data("tensor payload: name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        params.insert(name, Tensor::new(shape, data)?)?;
    }
    Ok(params)
}

impl Checkpoint {
    pub fn manifest(&self) -> Manifest {
        Manifest {
            format_version: FORMAT_VERSION,
            mode: self.model.mode,
            model: self.model.config.clone(),
            vocabulary: self.vocabulary.clone(),
            step: self.step,
            schedule: self.schedule.clone(),
            tensors: self
                .model
                .params
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, bytes: &[u8]| {
            let p = dir.join(name);
            std::fs::write(&p, bytes).map_err(|e| Error::io(p, e))
        };
        write(TENSOR_FILE, &encode_tensors(&self.model.params))?;
        match &self.optimizer {
            Some(state) => write(OPTIMIZER_FILE, state)?,
            None => {
                let p = dir.join(OPTIMIZER_FILE);
                if p.exists() {
                    std::fs::remove_file(&p).map_err(|e| Error::io(p, e))?;
                }
            }
        }
        let mut manifest = serde_json::to_string_pretty(&self.manifest())?;
        manifest.push('\n');
        write(MANIFEST_FILE, manifest.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<Vec<u8>> {
            let p: PathBuf = dir.join(name);
            std::fs::read(&p).map_err(|e| Error::io(p, e))
        };
        let manifest: Manifest = serde_json::from_slice(&read(MANIFEST_FILE)?)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint format version {}",
                manifest.format_version
            )));
        }
        manifest.model.validate()?;
        let params = decode_tensors(&read(TENSOR_FILE)?)?;
        let listed: Vec<(&str, &[usize])> = manifest
            .tensors
            .iter()
            .map(|e| (e.name.as_str(), e.shape.as_slice()))
            .collect();
        let stored: Vec<(&str, &[usize])> = params.iter().map(|(n, t)| (n.as_str(), t.shape())).collect();
        if listed != stored {
            return Err(Error::Data("tensor payload does not match the manifest".into()));
        }
        let reference = Cvae::init(manifest.model.clone(), manifest.mode, 0)?;
        let expected: Vec<(&str, &[usize])> = reference.params.iter().map(|(n, t)| (n.as_str(), t.shape())).collect();
        if expected != stored {
            return Err(Error::Data(
                "checkpoint tensors do not match the model configuration".into(),
            ));
        }
        let optimizer = match std::fs::read(dir.join(OPTIMIZER_FILE)) {
            Ok(b) => Some(b),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(Error::io(dir.join(OPTIMIZER_FILE), e)),
        };
        Ok(Checkpoint {
            model: Cvae {
                config: manifest.model,
                mode: manifest.mode,
                params,
            },
            step: manifest.step,
            vocabulary: manifest.vocabulary,
            schedule: manifest.schedule,
            optimizer,
        })
    }
}
