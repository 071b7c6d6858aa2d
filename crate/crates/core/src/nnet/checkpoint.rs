//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "PSONETCK"
//! version  u32
//! hlen     u32      length of the JSON header
//! header   hlen bytes of UTF-8 JSON
//! count    u32      number of tensors
//! count x {
//!   nlen   u32, name (nlen bytes UTF-8)
//!   ndim   u32, dims (ndim x u64)
//!   data   prod(dims) x f32
//! }
//! ```
//!
//! Tensors are written in name order, so equal checkpoints are byte-identical.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, ArrayViewD, IxDyn};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use super::model::{PsoNetParams, RegionalModel};
use super::{Encoder, ModelConfig};
use crate::error::{Error, Result};
use crate::pasi::{PerRegion, Region};

pub const MAGIC: &[u8; 8] = b"PSONETCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    /// Free-form JSON metadata. `model` holds the [`ModelConfig`].
    pub header: Map<String, Value>,
    pub tensors: BTreeMap<String, ArrayD<f32>>,
}

impl Checkpoint {
    pub fn from_params(params: &PsoNetParams<f32>) -> Self {
        let mut ckpt = Checkpoint::default();
        ckpt.set_meta("model", &params.config);
        ckpt.insert_params("", params);
        ckpt
    }

    /// Checkpoint holding only `encoder.*` tensors, usable as a pretrained encoder.
    pub fn from_encoder(encoder: &Encoder<f32>) -> Self {
        let mut ckpt = Checkpoint::default();
        ckpt.set_meta("base_width", &encoder.base_width());
        let region = Region::HeadNeck;
        let dummy = RegionalModel {
            region,
            encoder: encoder.clone(),
            embed: super::layers::Linear::zeros(0, 0),
            attention: super::model::AttentionParams {
                hidden: super::layers::Linear::zeros(0, 0),
                score: super::layers::Linear::zeros(0, 0),
            },
            head: super::layers::Linear::zeros(0, 0),
        };
        for (name, t) in dummy.named_tensors() {
            if name.starts_with("encoder.") {
                ckpt.tensors.insert(name.to_string(), t.to_owned());
            }
        }
        ckpt
    }

    pub fn set_meta<T: Serialize>(&mut self, key: &str, value: &T) {
        let v = serde_json::to_value(value).expect("metadata is serializable");
        self.header.insert(key.to_string(), v);
    }

    pub fn meta<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>> {
        match self.header.get(key) {
            None => Ok(None),
            Some(v) => serde_json::from_value(v.clone())
                .map(Some)
                .map_err(|e| Error::Checkpoint(format!("header field {key}: {e}"))),
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        self.meta("model")?
            .ok_or_else(|| Error::Checkpoint("header has no model config".into()))
    }

    /// Store every parameter of `params` as `<prefix>region.<code>.<name>`.
    pub fn insert_params(&mut self, prefix: &str, params: &PsoNetParams<f32>) {
        for (name, t) in params.named_tensors() {
            self.tensors.insert(format!("{prefix}{name}"), t.to_owned());
        }
    }

    /// Rebuild parameters stored under `prefix`, using the header config.
    pub fn params(&self, prefix: &str) -> Result<PsoNetParams<f32>> {
        let config = self.model_config()?;
        let mut regions = PerRegion::from_fn(|region| {
            RegionalModel::<f32>::init(region, &config, &mut rand::SeedableRng::seed_from_u64(0))
        });
        for (region, model) in regions.iter_mut() {
            self.fill(&format!("{prefix}region.{}.", region.code()), model, |_| {
                true
            })?;
        }
        Ok(PsoNetParams { config, regions })
    }

    /// Overwrite `params` in place from tensors under `prefix`.
    pub fn load_params_into(&self, prefix: &str, params: &mut PsoNetParams<f32>) -> Result<()> {
        for (region, model) in params.regions.iter_mut() {
            self.fill(&format!("{prefix}region.{}.", region.code()), model, |_| {
                true
            })?;
        }
        Ok(())
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.tensors.keys().any(|k| k.starts_with(prefix))
    }

    fn fill(
        &self,
        prefix: &str,
        model: &mut RegionalModel<f32>,
        keep: impl Fn(&str) -> bool,
    ) -> Result<()> {
        for (name, mut dst) in model.named_tensors_mut() {
            if !keep(name) {
                continue;
            }
            let full = format!("{prefix}{name}");
            let src = self
                .tensors
                .get(&full)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {full}")))?;
            if src.shape() != dst.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {full} has shape {:?}, model expects {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            dst.assign(src);
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e: std::io::Error| Error::Checkpoint(format!("write failed: {e}"));
        let header = serde_json::to_vec(&self.header).expect("header is valid JSON");
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&len_u32(header.len())?.to_le_bytes())
            .map_err(io)?;
        w.write_all(&header).map_err(io)?;
        w.write_all(&len_u32(self.tensors.len())?.to_le_bytes())
            .map_err(io)?;
        for (name, t) in &self.tensors {
            w.write_all(&len_u32(name.len())?.to_le_bytes())
                .map_err(io)?;
            w.write_all(name.as_bytes()).map_err(io)?;
            w.write_all(&len_u32(t.ndim())?.to_le_bytes()).map_err(io)?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
            }
            let mut buf = Vec::with_capacity(t.len() * 4);
            for v in t.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = read_u32(&mut r, "version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = read_u32(&mut r, "header length")? as usize;
        let mut header = vec![0u8; hlen];
        read_exact(&mut r, &mut header, "header")?;
        let header: Map<String, Value> = serde_json::from_slice(&header)
            .map_err(|e| Error::Checkpoint(format!("header is not a JSON object: {e}")))?;
        let count = read_u32(&mut r, "tensor count")?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let nlen = read_u32(&mut r, "name length")? as usize;
            let mut name = vec![0u8; nlen];
            read_exact(&mut r, &mut name, "tensor name")?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let ndim = read_u32(&mut r, &name)? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b, &name)?;
                dims.push(u64::from_le_bytes(b) as usize);
            }
            let len = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n <= (1 << 34))
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name} is implausibly large")))?;
            let mut raw = vec![0u8; len * 4];
            read_exact(&mut r, &mut raw, &name)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = ArrayD::from_shape_vec(IxDyn(&dims), data).expect("length matches dims");
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)
            .map_err(|e| Error::Checkpoint(e.to_string()))?
            != 0
        {
            return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn tensor(&self, name: &str) -> Option<ArrayViewD<'_, f32>> {
        self.tensors.get(name).map(|t| t.view())
    }
}

/// Overwrite the encoder of `model` from `<prefix>stem.*` / `<prefix>stageN.*` tensors.
pub fn load_encoder(ckpt: &Checkpoint, prefix: &str, model: &mut RegionalModel<f32>) -> Result<()> {
    let base = prefix.strip_suffix("encoder.").unwrap_or(prefix);
    ckpt.fill(base, model, |name| name.starts_with("encoder."))
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    ckpt.write_to(BufWriter::new(file))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::read_from(BufReader::new(file))
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("length {n} exceeds u32")))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint(format!("truncated while reading {what}")))
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}
