//! Binary checkpoints of every learnable tensor.
//!
//! Little-endian layout:
//!
//! ```text
//! "LVLC"  u32 version  u32 tensor_count
//! per tensor: u32 name_len, name, u8 dtype (0 = f32, 1 = f64), u32 rank, u64 dims[rank], payload
//! u32 echo_len, echo (flat JSON: model config fields, "pooling_mode", "step")
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, PoolingMode};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{DType, Float, Tensor};

pub const MAGIC: &[u8; 4] = b"LVLC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    #[serde(flatten)]
    pub model: ModelConfig,
    pub pooling_mode: PoolingMode,
    pub step: u64,
}

/// A model restored from disk together with the step it was saved at.
#[derive(Debug, Clone)]
pub struct Loaded<F> {
    pub model: Model<F>,
    pub step: u64,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn encode<F: Float>(model: &Model<F>, step: u64) -> Result<Vec<u8>> {
    let store = &model.params;
    let mut out = Vec::with_capacity(store.num_scalars() * F::DTYPE.size() + 64 * store.len());
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, store.len() as u32);
    for id in store.ids() {
        let name = store.name(id).as_bytes();
        let t = store.get(id);
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name);
        out.push(F::DTYPE as u8);
        put_u32(&mut out, t.rank() as u32);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    let echo = serde_json::to_vec(&ConfigEcho { model: model.config.clone(), pooling_mode: model.pooling_mode, step })?;
    put_u32(&mut out, echo.len() as u32);
    out.extend_from_slice(&echo);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format(format!("truncated file while reading {what} at byte {}", self.pos))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

fn read_values<F: Float>(bytes: &[u8], dtype: DType) -> Vec<F> {
    match dtype {
        DType::F32 => bytes.chunks_exact(4).map(|c| F::from_f64(f32::read_le(c) as f64)).collect(),
        DType::F64 => bytes.chunks_exact(8).map(|c| F::from_f64(f64::read_le(c))).collect(),
    }
}

/// Rebuild a model from checkpoint bytes. Tensors stored in the other
/// precision are converted.
pub fn decode<F: Float>(bytes: &[u8]) -> Result<Loaded<F>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("version {version}, expected {VERSION}")));
    }
    let count = r.u32("tensor count")? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let code = r.take(1, "dtype")?[0];
        let dtype = DType::from_code(code).ok_or_else(|| Error::Format(format!("unknown dtype code {code}")))?;
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank).map(|_| r.u64("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes_len = n
            .and_then(|n| n.checked_mul(dtype.size()))
            .ok_or_else(|| Error::Format(format!("{name}: dims overflow")))?;
        let data = read_values::<F>(r.take(bytes_len, &name)?, dtype);
        records.push((name, Tensor::new(shape, data)?));
    }
    let echo_len = r.u32("config length")? as usize;
    let echo: ConfigEcho = serde_json::from_slice(r.take(echo_len, "config")?)
        .map_err(|e| Error::Format(format!("config echo: {e}")))?;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let mut model = Model::<F>::new(echo.model, 0)?;
    model.pooling_mode = echo.pooling_mode;
    let mut seen = vec![false; model.params.len()];
    for (name, t) in records {
        let id = model.params.id(&name).ok_or(Error::UnknownTensor(name))?;
        if std::mem::replace(&mut seen[id.index()], true) {
            return Err(Error::Format(format!("duplicate tensor {}", model.params.name(id))));
        }
        model.params.set(id, t)?;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        let id = model.params.ids().nth(i).expect("index in range");
        return Err(Error::Format(format!("missing tensor {}", model.params.name(id))));
    }
    Ok(Loaded { model, step: echo.step })
}

pub fn save_checkpoint<F: Float>(model: &Model<F>, step: u64, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode(model, step)?)?;
    Ok(())
}

pub fn load_checkpoint<F: Float>(path: impl AsRef<Path>) -> Result<Loaded<F>> {
    decode(&std::fs::read(path)?)
}
