//! Checkpoint container, version 1 (little-endian):
//!
//! ```text
//! magic     8 bytes "STEMCKPT"
//! version   u16
//! meta_len  u32, meta (JSON: model config, dtype, step, optimizer step, train config)
//! has_rng   u8; if 1: seed 32 bytes, stream u64, word_pos u128
//! n_arrays  u32
//! per array: name (u16 len + utf-8), ndim u8, dims u32 x ndim, values (dtype, row-major)
//! ```
//!
//! Optimizer moments are stored as arrays named `adam.m/<param>` and
//! `adam.v/<param>`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AnyModel, DType, Model, ModelConfig, Params, Scalar};
use crate::error::{Error, Result};
use crate::format::{Reader, Writer};
use crate::optim::AdamState;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"STEMCKPT";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub dtype: DType,
    pub step: u64,
    pub optimizer_step: Option<u64>,
    #[serde(default)]
    pub train_config: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint<F> {
    pub model: Model<F>,
    pub step: u64,
    pub optimizer: Option<AdamState<F>>,
    pub rng: Option<RngState>,
    pub train_config: Option<serde_json::Value>,
}

impl<F: Scalar> ModelCheckpoint<F> {
    pub fn from_model(model: Model<F>) -> Self {
        Self {
            model,
            step: 0,
            optimizer: None,
            rng: None,
            train_config: None,
        }
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            model: self.model.config.clone(),
            dtype: F::DTYPE,
            step: self.step,
            optimizer_step: self.optimizer.as_ref().map(|o| o.t),
            train_config: self.train_config.clone(),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta())?;
        let mut arrays: Vec<(String, Vec<usize>, Vec<F>)> = Vec::new();
        let mut push = |prefix: &str, p: &Params<F>| {
            for (name, t) in p.tensors() {
                arrays.push((
                    format!("{prefix}{name}"),
                    t.shape().to_vec(),
                    t.iter().copied().collect(),
                ));
            }
        };
        push("", &self.model.params);
        if let Some(opt) = &self.optimizer {
            push("adam.m/", &opt.m);
            push("adam.v/", &opt.v);
        }
        let mut w = Writer::new(Vec::new());
        (|| -> std::io::Result<()> {
            w.bytes(CHECKPOINT_MAGIC)?;
            w.u16(CHECKPOINT_VERSION)?;
            w.u32(meta.len() as u32)?;
            w.bytes(&meta)?;
            match &self.rng {
                None => w.u8(0)?,
                Some(r) => {
                    w.u8(1)?;
                    w.bytes(&r.seed)?;
                    w.u64(r.stream)?;
                    w.u128(r.word_pos)?;
                }
            }
            w.u32(arrays.len() as u32)?;
            for (name, shape, values) in &arrays {
                w.str16(name)?;
                w.u8(shape.len() as u8)?;
                for &d in shape {
                    w.u32(d as u32)?;
                }
                w.bytes(&F::to_le_bytes_vec(values))?;
            }
            Ok(())
        })()?;
        Ok(w.into_inner())
    }

    /// Decodes a checkpoint, converting values if it was stored in another
    /// precision.
    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader::new(bytes);
        r.expect_magic(CHECKPOINT_MAGIC)?;
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?).map_err(|e| e.to_string())?;
        meta.model.validate().map_err(|e| e.to_string())?;
        let rng = match r.u8()? {
            0 => None,
            1 => Some(RngState {
                seed: r.take(32)?.try_into().unwrap(),
                stream: r.u64()?,
                word_pos: r.u128()?,
            }),
            other => return Err(format!("bad rng flag {other}")),
        };
        let width = match meta.dtype {
            DType::F32 => 4,
            DType::F64 => 8,
        };
        let n_arrays = r.u32()? as usize;
        let mut arrays: HashMap<String, (Vec<usize>, &[u8])> = HashMap::with_capacity(n_arrays);
        for _ in 0..n_arrays {
            let name = r.str16()?;
            let ndim = r.u8()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let count: usize = shape.iter().product();
            let raw = r.take(count * width)?;
            arrays.insert(name, (shape, raw));
        }
        r.finish()?;

        let fill = |prefix: &str, target: &mut Params<F>| -> std::result::Result<(), String> {
            for (name, mut t) in target.tensors_mut() {
                let key = format!("{prefix}{name}");
                let (shape, raw) = arrays.get(&key).ok_or_else(|| format!("missing array {key}"))?;
                if shape.as_slice() != t.shape() {
                    return Err(format!("shape mismatch for {key}: {shape:?} vs {:?}", t.shape()));
                }
                for (dst, chunk) in t.iter_mut().zip(raw.chunks_exact(width)) {
                    *dst = match meta.dtype {
                        DType::F32 if F::DTYPE == DType::F32 => F::from_le_chunk(chunk),
                        DType::F64 if F::DTYPE == DType::F64 => F::from_le_chunk(chunk),
                        DType::F32 => F::from_f64(f32::from_le_bytes(chunk.try_into().unwrap()) as f64).unwrap(),
                        DType::F64 => F::from_f64(f64::from_le_bytes(chunk.try_into().unwrap())).unwrap(),
                    };
                }
            }
            Ok(())
        };
        let mut params = Params::<F>::zeros(&meta.model);
        fill("", &mut params)?;
        if !params.all_finite() {
            return Err("non-finite parameter".into());
        }
        let optimizer = match meta.optimizer_step {
            None => None,
            Some(t) => {
                let mut m = Params::<F>::zeros(&meta.model);
                let mut v = Params::<F>::zeros(&meta.model);
                fill("adam.m/", &mut m)?;
                fill("adam.v/", &mut v)?;
                Some(AdamState { m, v, t })
            }
        };
        Ok(Self {
            model: Model {
                config: meta.model,
                params,
            },
            step: meta.step,
            optimizer,
            rng,
            train_config: meta.train_config,
        })
    }
}

pub fn write_checkpoint<F: Scalar>(path: impl AsRef<Path>, ckpt: &ModelCheckpoint<F>) -> Result<()> {
    fs::write(path, ckpt.encode()?)?;
    Ok(())
}

pub fn read_checkpoint<F: Scalar>(path: impl AsRef<Path>) -> Result<ModelCheckpoint<F>> {
    let path = path.as_ref();
    ModelCheckpoint::decode(&fs::read(path)?).map_err(|msg| Error::format(path, msg))
}

/// Loads the model at the precision it was stored in.
pub fn read_model(path: impl AsRef<Path>) -> Result<AnyModel> {
    let path = path.as_ref();
    Ok(match read_checkpoint_meta(path)?.dtype {
        DType::F32 => AnyModel::F32(read_checkpoint::<f32>(path)?.model),
        DType::F64 => AnyModel::F64(read_checkpoint::<f64>(path)?.model),
    })
}

/// Reads only the metadata block (config, dtype, step).
pub fn read_checkpoint_meta(path: impl AsRef<Path>) -> Result<CheckpointMeta> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let mut r = Reader::new(&bytes);
    let parse = |r: &mut Reader<'_>| -> std::result::Result<CheckpointMeta, String> {
        r.expect_magic(CHECKPOINT_MAGIC)?;
        let _version = r.u16()?;
        let len = r.u32()? as usize;
        serde_json::from_slice(r.take(len)?).map_err(|e| e.to_string())
    };
    parse(&mut r).map_err(|msg| Error::format(path, msg))
}
