//! Named-tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MCNC" | version u32 | count u32 |
//!   count × ( name_len u32 | name utf-8 | dtype u8 | rank u32 | dims u64… | payload )
//! ```
//!
//! dtype 0 is `f32`, 1 is `f64`. Entries keep their insertion order so a
//! save → load → save cycle reproduces the file byte for byte.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use mcnet_core::optim::{Adam, AdamConfig};
use mcnet_core::{DType, MCNetModel, ModelConfig, ParamStore, Real, Tensor};

use crate::error::{AppError, Result};

pub const MAGIC: &[u8; 4] = b"MCNC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(t) => t.shape(),
            TensorData::F64(t) => t.shape(),
        }
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => TensorData::F32(t.cast()),
            DType::F64 => TensorData::F64(t.cast()),
        }
    }

    /// The tensor at precision `T`; fails if the stored precision differs.
    pub fn to_tensor<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        if self.dtype() != T::DTYPE {
            return Err(AppError::data(format!(
                "tensor {name} is stored as {:?}, expected {:?}",
                self.dtype(),
                T::DTYPE
            )));
        }
        Ok(match self {
            TensorData::F32(t) => t.cast(),
            TensorData::F64(t) => t.cast(),
        })
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        match self {
            TensorData::F32(t) => t.cast(),
            TensorData::F64(t) => t.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, TensorData)>,
    index: HashMap<String, usize>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, data: TensorData) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(AppError::data(format!("checkpoint entry {name} appears twice")));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), data));
        Ok(())
    }

    pub fn insert_scalar(&mut self, name: &str, v: f64) -> Result<()> {
        self.insert(name, TensorData::F64(Tensor::scalar(v)))
    }

    pub fn get(&self, name: &str) -> Option<&TensorData> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn require(&self, name: &str) -> Result<&TensorData> {
        self.get(name).ok_or_else(|| AppError::data(format!("checkpoint has no entry {name}")))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let t = self.require(name)?.to_f64();
        if t.numel() != 1 {
            return Err(AppError::data(format!("checkpoint entry {name} is not a scalar")));
        }
        Ok(t.data()[0])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TensorData)> {
        self.entries.iter().map(|(n, d)| (n.as_str(), d))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, data) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(data.dtype().tag());
            out.extend_from_slice(&(data.shape().len() as u32).to_le_bytes());
            for &d in data.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match data {
                TensorData::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                TensorData::F64(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(AppError::data("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(AppError::data(format!("unsupported checkpoint version {version} (expected {VERSION})")));
        }
        let count = r.u32()?;
        let mut ck = Checkpoint::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| AppError::data("checkpoint entry name is not UTF-8"))?
                .to_string();
            let tag = r.take(1)?[0];
            let dtype =
                DType::from_tag(tag).ok_or_else(|| AppError::data(format!("entry {name}: unknown dtype tag {tag}")))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            let mut numel: usize = 1;
            for _ in 0..rank {
                let d = r.u64()?;
                let d = usize::try_from(d)
                    .ok()
                    .filter(|&d| d > 0)
                    .ok_or_else(|| AppError::data(format!("entry {name}: invalid dimension {d}")))?;
                numel = numel
                    .checked_mul(d)
                    .filter(|n| n.checked_mul(dtype.size()).is_some())
                    .ok_or_else(|| AppError::data(format!("entry {name}: dimensions overflow")))?;
                shape.push(d);
            }
            let payload = r.take(numel * dtype.size())?;
            let data = match dtype {
                DType::F32 => TensorData::F32(Tensor::new(
                    &shape,
                    payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
                )?),
                DType::F64 => TensorData::F64(Tensor::new(
                    &shape,
                    payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
                )?),
            };
            ck.insert(&name, data)?;
        }
        if r.pos != bytes.len() {
            return Err(AppError::data("trailing bytes after the last checkpoint entry"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // write-then-rename keeps an existing checkpoint intact on failure
        let tmp = path.with_extension("partial");
        fs::write(&tmp, self.to_bytes()).map_err(|e| AppError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| AppError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| AppError::io(path, e))?;
        Checkpoint::from_bytes(&bytes).map_err(|e| match e {
            AppError::Data(m) => AppError::Data(format!("{}: {m}", path.display())),
            e => e,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| AppError::data("checkpoint is truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

// ---------------------------------------------------------------------------
// Model state
// ---------------------------------------------------------------------------

const CONFIG_PREFIX: &str = "config.";

fn config_entries(c: &ModelConfig) -> Vec<(&'static str, Vec<f64>)> {
    let b = |v: bool| if v { 1.0 } else { 0.0 };
    let widths = |w: &[usize]| w.iter().map(|&x| x as f64).collect();
    vec![
        ("image_size", vec![c.image_size as f64]),
        ("keypoints", vec![c.num_keypoints as f64]),
        ("levels", vec![c.num_levels as f64]),
        ("base_channels", vec![c.base_channels as f64]),
        ("memory", vec![c.memory_channels as f64, c.memory_height as f64, c.memory_width as f64]),
        ("n_kernels", vec![c.n_kernels as f64]),
        ("pe_levels", vec![c.pe_levels as f64]),
        ("attention_scaling", vec![b(c.attention_scaling)]),
        ("query_bias", vec![b(c.query_bias)]),
        ("demod_eps", vec![c.demod_eps]),
        ("motion_size", vec![c.motion_size as f64]),
        ("temperature", vec![c.temperature]),
        ("sigma", vec![c.sigma]),
        ("detector_widths", widths(&c.detector_widths)),
        ("dense_widths", widths(&c.dense_widths)),
        ("occlusion", vec![b(c.occlusion)]),
    ]
}

fn read_config(ck: &Checkpoint) -> Result<ModelConfig> {
    let get =
        |key: &str| -> Result<Vec<f64>> { Ok(ck.require(&format!("{CONFIG_PREFIX}{key}"))?.to_f64().into_data()) };
    let one = |key: &str| -> Result<f64> {
        let v = get(key)?;
        v.first().copied().ok_or_else(|| AppError::data(format!("config entry {key} is empty")))
    };
    let count = |key: &str| -> Result<usize> {
        let v = one(key)?;
        if v >= 0.0 && v.fract() == 0.0 && v < 1e12 {
            Ok(v as usize)
        } else {
            Err(AppError::data(format!("config entry {key} = {v} is not a count")))
        }
    };
    let counts = |key: &str| -> Result<Vec<usize>> { get(key).map(|v| v.iter().map(|&x| x as usize).collect()) };
    let mem = counts("memory")?;
    if mem.len() != 3 {
        return Err(AppError::data("config entry memory must hold channels, height, width"));
    }
    let cfg = ModelConfig {
        image_size: count("image_size")?,
        num_keypoints: count("keypoints")?,
        num_levels: count("levels")?,
        base_channels: count("base_channels")?,
        memory_channels: mem[0],
        memory_height: mem[1],
        memory_width: mem[2],
        n_kernels: count("n_kernels")?,
        pe_levels: count("pe_levels")?,
        attention_scaling: one("attention_scaling")? != 0.0,
        query_bias: one("query_bias")? != 0.0,
        demod_eps: one("demod_eps")?,
        motion_size: count("motion_size")?,
        temperature: one("temperature")?,
        sigma: one("sigma")?,
        detector_widths: counts("detector_widths")?,
        dense_widths: counts("dense_widths")?,
        occlusion: one("occlusion")? != 0.0,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Parameters, optimizer moments and progress of a training run.
pub struct TrainState<T: Real> {
    pub model: MCNetModel,
    pub store: ParamStore<T>,
    pub adam: Adam<T>,
    pub step: u64,
}

pub fn params_to_checkpoint<T: Real>(ck: &mut Checkpoint, store: &ParamStore<T>) -> Result<()> {
    for (_, name, t) in store.iter() {
        ck.insert(name, TensorData::from_tensor(t))?;
    }
    Ok(())
}

/// Overwrites every parameter of `store` from `ck`. Missing tensors and
/// shape mismatches are errors naming the tensor.
pub fn load_params<T: Real>(ck: &Checkpoint, store: &mut ParamStore<T>) -> Result<()> {
    let names: Vec<String> = store.iter().map(|(_, n, _)| n.to_string()).collect();
    for name in names {
        let t = ck.require(&name)?.to_tensor::<T>(&name)?;
        store.set(&name, t)?;
    }
    Ok(())
}

pub fn state_to_checkpoint<T: Real>(state: &TrainState<T>) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new();
    for (key, v) in config_entries(&state.model.config) {
        ck.insert(&format!("{CONFIG_PREFIX}{key}"), TensorData::F64(Tensor::new(&[v.len()], v)?))?;
    }
    params_to_checkpoint(&mut ck, &state.store)?;
    let a = &state.adam;
    ck.insert(
        "adam.hyper",
        TensorData::F64(Tensor::new(&[4], vec![a.config.lr, a.config.beta1, a.config.beta2, a.config.eps])?),
    )?;
    ck.insert_scalar("adam.t", a.t as f64)?;
    for (id, name, _) in state.store.iter() {
        ck.insert(&format!("adam.m.{name}"), TensorData::from_tensor(&a.m[id.index()]))?;
        ck.insert(&format!("adam.v.{name}"), TensorData::from_tensor(&a.v[id.index()]))?;
    }
    ck.insert_scalar("train.step", state.step as f64)?;
    Ok(ck)
}

/// Precision of the parameters stored in `ck`.
pub fn stored_precision(ck: &Checkpoint) -> Result<DType> {
    ck.require("memory.bank").map(TensorData::dtype)
}

pub fn config_from_checkpoint(ck: &Checkpoint) -> Result<ModelConfig> {
    read_config(ck)
}

/// Rebuilds the model and its parameters, ignoring training state.
pub fn model_from_checkpoint<T: Real>(ck: &Checkpoint) -> Result<(MCNetModel, ParamStore<T>)> {
    let config = read_config(ck)?;
    let (model, mut store) = MCNetModel::init::<T>(&config, 0)?;
    load_params(ck, &mut store)?;
    Ok((model, store))
}

/// Rebuilds the model, parameters, optimizer and step counter.
pub fn state_from_checkpoint<T: Real>(ck: &Checkpoint) -> Result<TrainState<T>> {
    let (model, store) = model_from_checkpoint::<T>(ck)?;
    let h = ck.require("adam.hyper")?.to_f64();
    let &[lr, beta1, beta2, eps] = h.data() else {
        return Err(AppError::data("adam.hyper must hold 4 values"));
    };
    let mut adam = Adam::new(&store, AdamConfig { lr, beta1, beta2, eps });
    adam.t = ck.scalar("adam.t")? as u64;
    for (id, name, p) in store.iter() {
        for (prefix, slot) in [("m", &mut adam.m), ("v", &mut adam.v)] {
            let key = format!("adam.{prefix}.{name}");
            let t = ck.require(&key)?.to_tensor::<T>(&key)?;
            if t.shape() != p.shape() {
                return Err(AppError::data(format!("{key} has shape {:?}, expected {:?}", t.shape(), p.shape())));
            }
            slot[id.index()] = t;
        }
    }
    let step = ck.scalar("train.step")? as u64;
    Ok(TrainState { model, store, adam, step })
}
