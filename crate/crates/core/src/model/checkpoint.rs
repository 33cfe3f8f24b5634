//! Checkpoint file: `BNET`, `u32` format version, the alphabet as a
//! length-prefixed UTF-8 string, a `u32` tensor count, then each tensor as
//! `(name, u32 rank, u32 dims.., f64 data..)`. Everything little-endian.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{Architecture, BnLayer, ModelParams, ParamId};
use crate::ctc::ByteReader;
use crate::error::{Error, Result};
use crate::numeric::Alphabet;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BNET";
pub const CHECKPOINT_VERSION: u32 = 1;

const RUNNING: [(&str, usize, bool); 4] = [
    ("bn1.running_mean", 1, true),
    ("bn1.running_var", 1, false),
    ("bn2.running_mean", 2, true),
    ("bn2.running_var", 2, false),
];

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    put_str(out, name);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl ModelParams {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut out, &self.alphabet.to_string());
        out.extend_from_slice(&((ParamId::ALL.len() + RUNNING.len()) as u32).to_le_bytes());
        for id in ParamId::ALL {
            put_tensor(&mut out, id.name(), &self.param_shape(id), self.param(id));
        }
        for (name, layer, is_mean) in RUNNING {
            let bn = if layer == 1 { &self.bn1 } else { &self.bn2 };
            let data = if is_mean { &bn.running_mean } else { &bn.running_var };
            put_tensor(&mut out, name, &[data.len()], data);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("missing BNET magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let alphabet = Alphabet::parse(&r.string()?)?;
        let count = r.u32()? as usize;
        let mut tensors: HashMap<String, (Vec<usize>, Vec<f64>)> = HashMap::new();
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            tensors.insert(name, (shape, data));
        }
        if !r.is_done() {
            return Err(Error::Format("trailing bytes in checkpoint".into()));
        }

        let shape_of = |name: &str| -> Result<&Vec<usize>> {
            tensors
                .get(name)
                .map(|t| &t.0)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))
        };
        let w1 = shape_of(ParamId::Conv1Weight.name())?;
        let w2 = shape_of(ParamId::Conv2Weight.name())?;
        let fc = shape_of(ParamId::FcWeight.name())?;
        let (conv1, conv2) = (w1.first().copied().unwrap_or(0), w2.first().copied().unwrap_or(0));
        let fc_in = fc.get(1).copied().unwrap_or(0);
        let side = if conv2 == 0 {
            0
        } else {
            ((fc_in / conv2) as f64).sqrt().round() as usize
        };
        let arch = Architecture {
            input: side * 4,
            conv1,
            conv2,
        };
        arch.validate()?;

        let mut params = ModelParams {
            arch,
            conv1_weight: Vec::new(),
            conv1_bias: Vec::new(),
            bn1: BnLayer::new(conv1),
            conv2_weight: Vec::new(),
            conv2_bias: Vec::new(),
            bn2: BnLayer::new(conv2),
            fc_weight: Vec::new(),
            fc_bias: Vec::new(),
            alphabet,
        };
        for id in ParamId::ALL {
            let (shape, data) = tensors
                .remove(id.name())
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {}", id.name())))?;
            if shape != params.param_shape(id) {
                return Err(Error::Format(format!(
                    "tensor {} has shape {shape:?}, expected {:?}",
                    id.name(),
                    params.param_shape(id)
                )));
            }
            match id {
                ParamId::Conv1Weight => params.conv1_weight = data,
                ParamId::Conv1Bias => params.conv1_bias = data,
                ParamId::Bn1Gamma => params.bn1.gamma = data,
                ParamId::Bn1Beta => params.bn1.beta = data,
                ParamId::Conv2Weight => params.conv2_weight = data,
                ParamId::Conv2Bias => params.conv2_bias = data,
                ParamId::Bn2Gamma => params.bn2.gamma = data,
                ParamId::Bn2Beta => params.bn2.beta = data,
                ParamId::FcWeight => params.fc_weight = data,
                ParamId::FcBias => params.fc_bias = data,
            }
        }
        for (name, layer, is_mean) in RUNNING {
            let bn = if layer == 1 { &mut params.bn1 } else { &mut params.bn2 };
            let (shape, data) = tensors
                .remove(name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))?;
            if shape != [bn.channels()] {
                return Err(Error::Format(format!("tensor {name} has shape {shape:?}")));
            }
            if is_mean {
                bn.running_mean = data;
            } else {
                bn.running_var = data;
            }
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Format(format!("unexpected tensor {extra}")));
        }
        if !params.all_finite() {
            return Err(Error::Format("checkpoint holds non-finite values".into()));
        }
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
