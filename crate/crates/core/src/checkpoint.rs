//! Binary model checkpoints.
//!
//! Layout: magic `RTDK`, u32-le version (= 1), u32-le tensor count, then per
//! tensor a u16-le name length, the UTF-8 name, a u8 rank, rank u32-le
//! extents, and the payload. The first entry is named `__config__` and carries
//! the model configuration as UTF-8 JSON in a rank-1 byte tensor; every other
//! entry stores row-major f32-le values. Values are quantized to f32 on save
//! and widened back on load, so a save/load round trip is idempotent.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Parameters};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"RTDK";
const VERSION: u32 = 1;
const CONFIG_NAME: &str = "__config__";

/// f32 round-trip applied to every value, matching what a save/load pair does.
pub fn quantize_params(params: &Parameters) -> Parameters {
    let mut out = Parameters::new();
    for (name, t) in params.iter() {
        let data: Vec<f64> = t.data().iter().map(|&v| v as f32 as f64).collect();
        out.push(name, Tensor::from_vec(t.dims().to_vec(), data).expect("same shape"));
    }
    out
}

pub fn save_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let count = model.params.len() as u32 + 1;
    buf.extend_from_slice(&count.to_le_bytes());

    let config_json = serde_json::to_string(&model.config)?;
    write_header(&mut buf, CONFIG_NAME, &[config_json.len()]);
    buf.extend_from_slice(config_json.as_bytes());

    for (name, t) in model.params.iter() {
        write_header(&mut buf, name, t.dims());
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(buf)
}

fn write_header(buf: &mut Vec<u8>, name: &str, dims: &[usize]) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(dims.len() as u8);
    for &d in dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16_le(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32_le(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

pub fn load_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic, expected RTDK".into()));
    }
    let version = r.u32_le("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let count = r.u32_le("tensor count")? as usize;
    if count == 0 {
        return Err(Error::Checkpoint("no tensors".into()));
    }

    let mut config: Option<ModelConfig> = None;
    let mut params = Parameters::new();
    for _ in 0..count {
        let name_len = r.u16_le("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32_le("extent")? as usize);
        }
        let numel: usize = dims.iter().product();
        if name == CONFIG_NAME {
            if rank != 1 {
                return Err(Error::Checkpoint("config tensor must be rank 1".into()));
            }
            let raw = r.take(numel, "config payload")?;
            let json = std::str::from_utf8(raw)
                .map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
            config = Some(serde_json::from_str(json)?);
        } else {
            let raw = r.take(numel * 4, "tensor payload")?;
            let data: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let t = Tensor::from_vec(dims, data)
                .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
            params.push(name, t);
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    let config = config.ok_or_else(|| Error::Checkpoint("missing __config__ entry".into()))?;

    // The parameter set must be exactly what this configuration implies.
    let expected = Model::new(config.clone(), 0)?;
    if expected.params.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} parameters for this config, found {}",
            expected.params.len(),
            params.len()
        )));
    }
    for ((en, et), (fnm, ft)) in expected.params.iter().zip(params.iter()) {
        if en != fnm || et.dims() != ft.dims() {
            return Err(Error::Checkpoint(format!(
                "parameter mismatch: expected {en} {:?}, found {fnm} {:?}",
                et.dims(),
                ft.dims()
            )));
        }
    }
    Ok(Model { config, params })
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let bytes = save_bytes(model)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model> {
    let bytes = fs::read(path)?;
    load_bytes(&bytes)
}
