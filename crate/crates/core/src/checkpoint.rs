//! Versioned model container.
//!
//! Layout (little-endian): magic `MCKP`; `u32` version; `u64` header length
//! followed by the model spec as UTF-8 text; `u32` array count; then per
//! array a `u32` name length, the name, a `u8` dtype tag (0 = f32,
//! 1 = f64, 2 = u64), a `u64` element count and the raw elements.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::autodiff::{ActivationField, BatchNormState};
use crate::optim::Adam;
use crate::unet::{ModelSpec, ParameterStore, SpecError, UNet};

pub const MAGIC: &[u8; 4] = b"MCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("unknown dtype tag {0}")]
    Dtype(u8),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("checkpoint spec differs from the model's:\n expected {expected:?}\n found {found:?}")]
    SpecMismatch { expected: Box<ModelSpec>, found: Box<ModelSpec> },
    #[error("array {0} missing from checkpoint")]
    Missing(String),
    #[error("array {name} has {got} elements of the wrong kind or count (expected {expected})")]
    ArrayShape { name: String, expected: usize, got: usize },
    #[error("checkpoint I/O: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
enum Array {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
}

impl Array {
    fn len(&self) -> usize {
        match self {
            Array::F32(v) => v.len(),
            Array::F64(v) => v.len(),
            Array::U64(v) => v.len(),
        }
    }
}

/// A model and, optionally, the optimizer state it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: UNet<f32>,
    pub optimizer: Option<Adam<f32>>,
}

fn encode(spec: &ModelSpec, arrays: &[(String, Array)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let header = spec.to_text();
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, a) in arrays {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let tag: u8 = match a {
            Array::F32(_) => 0,
            Array::F64(_) => 1,
            Array::U64(_) => 2,
        };
        out.push(tag);
        out.extend_from_slice(&(a.len() as u64).to_le_bytes());
        match a {
            Array::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Array::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Array::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn decode(bytes: &[u8]) -> Result<(ModelSpec, Vec<(String, Array)>), CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let hlen = r.u64("header length")? as usize;
    let header = std::str::from_utf8(r.take(hlen, "header")?).map_err(|e| SpecError::Parse(e.to_string()))?;
    let spec = ModelSpec::from_text(header)?;
    let count = r.u32("array count")?;
    let mut arrays = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let nlen = r.u32("name length")? as usize;
        let name = String::from_utf8_lossy(r.take(nlen, "name")?).into_owned();
        let tag = r.take(1, "dtype")?[0];
        let n = r.u64("element count")? as usize;
        let width = match tag {
            0 => 4,
            1 | 2 => 8,
            t => return Err(CheckpointError::Dtype(t)),
        };
        let raw = r.take(n.checked_mul(width).ok_or(CheckpointError::Truncated("payload"))?, "payload")?;
        let a = match tag {
            0 => Array::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            1 => Array::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            _ => Array::U64(raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect()),
        };
        arrays.push((name, a));
    }
    Ok((spec, arrays))
}

pub fn encode_checkpoint(model: &UNet<f32>, optimizer: Option<&Adam<f32>>) -> Vec<u8> {
    let mut arrays = vec![("meta.seed".to_string(), Array::U64(vec![model.params.seed]))];
    for (name, v) in model.params.names.iter().zip(&model.params.values) {
        arrays.push((format!("param.{name}"), Array::F32(v.values.clone())));
    }
    for (name, st) in &model.batch_norm {
        arrays.push((format!("bn.{name}.running_mean"), Array::F64(st.running_mean.clone())));
        arrays.push((format!("bn.{name}.running_var"), Array::F64(st.running_var.clone())));
        arrays.push((format!("bn.{name}.config"), Array::F64(vec![st.momentum, st.eps])));
        arrays.push((format!("bn.{name}.initialized"), Array::U64(vec![st.initialized as u64])));
    }
    if let Some(opt) = optimizer {
        arrays.push(("adam.hyper".into(), Array::F64(vec![opt.learning_rate, opt.beta1, opt.beta2, opt.eps])));
        arrays.push(("adam.step".into(), Array::U64(vec![opt.step])));
        for (i, name) in model.params.names.iter().enumerate() {
            arrays.push((format!("adam.m.{name}"), Array::F32(opt.m[i].clone())));
            arrays.push((format!("adam.v.{name}"), Array::F32(opt.v[i].clone())));
        }
    }
    encode(&model.spec, &arrays)
}

pub fn save_checkpoint(model: &UNet<f32>, optimizer: Option<&Adam<f32>>, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, encode_checkpoint(model, optimizer))?;
    Ok(())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let (spec, arrays) = decode(bytes)?;
    let find = |name: &str| arrays.iter().find(|(n, _)| n == name).map(|(_, a)| a);
    let get = |name: String, n: usize| -> Result<&Array, CheckpointError> {
        let a = find(&name).ok_or_else(|| CheckpointError::Missing(name.clone()))?;
        if a.len() != n {
            return Err(CheckpointError::ArrayShape { name, expected: n, got: a.len() });
        }
        Ok(a)
    };
    let f32s = |name: String, n: usize| -> Result<Vec<f32>, CheckpointError> {
        match get(name.clone(), n)? {
            Array::F32(v) => Ok(v.clone()),
            a => Err(CheckpointError::ArrayShape { name, expected: n, got: a.len() }),
        }
    };
    let f64s = |name: String, n: usize| -> Result<Vec<f64>, CheckpointError> {
        match get(name.clone(), n)? {
            Array::F64(v) => Ok(v.clone()),
            a => Err(CheckpointError::ArrayShape { name, expected: n, got: a.len() }),
        }
    };
    let u64s = |name: String, n: usize| -> Result<Vec<u64>, CheckpointError> {
        match get(name.clone(), n)? {
            Array::U64(v) => Ok(v.clone()),
            a => Err(CheckpointError::ArrayShape { name, expected: n, got: a.len() }),
        }
    };
    spec.validate()?;
    let seed = u64s("meta.seed".into(), 1)?[0];
    let layout = spec.parameter_layout();
    let mut names = Vec::new();
    let mut values = Vec::new();
    for p in &layout {
        values.push(ActivationField::new(p.shape, f32s(format!("param.{}", p.name), p.shape.len())?));
        names.push(p.name.clone());
    }
    let mut batch_norm = Vec::new();
    for (name, c) in spec.batch_norm_layout() {
        let cfg = f64s(format!("bn.{name}.config"), 2)?;
        let st = BatchNormState {
            running_mean: f64s(format!("bn.{name}.running_mean"), c)?,
            running_var: f64s(format!("bn.{name}.running_var"), c)?,
            initialized: u64s(format!("bn.{name}.initialized"), 1)?[0] != 0,
            momentum: cfg[0],
            eps: cfg[1],
        };
        batch_norm.push((name, st));
    }
    let optimizer = if find("adam.step").is_some() {
        let h = f64s("adam.hyper".into(), 4)?;
        let mut m = Vec::new();
        let mut v = Vec::new();
        for p in &layout {
            m.push(f32s(format!("adam.m.{}", p.name), p.shape.len())?);
            v.push(f32s(format!("adam.v.{}", p.name), p.shape.len())?);
        }
        Some(Adam { learning_rate: h[0], beta1: h[1], beta2: h[2], eps: h[3], step: u64s("adam.step".into(), 1)?[0], m, v })
    } else {
        None
    };
    let model = UNet { spec, params: ParameterStore { names, values, seed }, batch_norm };
    Ok(Checkpoint { model, optimizer })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    decode_checkpoint(&fs::read(path)?)
}

/// Loads `path` over `model`, refusing checkpoints built for another spec.
pub fn load_into(model: &mut UNet<f32>, path: &Path) -> Result<Option<Adam<f32>>, CheckpointError> {
    let ck = load_checkpoint(path)?;
    if ck.model.spec != model.spec {
        return Err(CheckpointError::SpecMismatch { expected: Box::new(model.spec), found: Box::new(ck.model.spec) });
    }
    *model = ck.model;
    Ok(ck.optimizer)
}
