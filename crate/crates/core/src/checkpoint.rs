//! Versioned binary checkpoint container.
//!
//! Layout: 8-byte magic, u32 format version, a canonical key=value text
//! block describing the architecture config, then named parameter records
//! (name length + name + dtype + shape + raw little-endian values). All
//! integers are little-endian. Round trips are bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::models::{build_architecture, Architecture, ModelConfig, ParamStore};
use crate::tensor::{Dtype, Element, Tensor, TensorError};

const MAGIC: &[u8; 8] = b"DTXCKPT\0";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn format_err(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Format(msg.into())
}

/// Serializes the config map as sorted `key=value` lines.
fn config_block(kv: &BTreeMap<String, String>) -> Result<Vec<u8>, CheckpointError> {
    let mut out = Vec::new();
    for (k, v) in kv {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(format_err(format!("config entry '{k}' contains reserved characters")));
        }
        out.extend_from_slice(k.as_bytes());
        out.push(b'=');
        out.extend_from_slice(v.as_bytes());
        out.push(b'\n');
    }
    Ok(out)
}

fn parse_config_block(bytes: &[u8]) -> Result<BTreeMap<String, String>, CheckpointError> {
    let text = std::str::from_utf8(bytes).map_err(|_| format_err("config block is not UTF-8"))?;
    let mut kv = BTreeMap::new();
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format_err(format!("bad config line '{line}'")))?;
        kv.insert(k.to_string(), v.to_string());
    }
    Ok(kv)
}

pub fn save<T: Element>(
    path: &Path,
    config: &ModelConfig,
    store: &ParamStore<T>,
) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());

    let block = config_block(&config.to_kv())?;
    buf.extend_from_slice(&(block.len() as u64).to_le_bytes());
    buf.extend_from_slice(&block);

    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for entry in store.iter() {
        let name = entry.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(T::DTYPE.tag());
        let shape = entry.tensor.shape();
        buf.push(shape.len() as u8);
        for &ext in shape {
            buf.extend_from_slice(&(ext as u64).to_le_bytes());
        }
        for &v in entry.tensor.data() {
            v.write_le(&mut buf);
        }
    }

    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// A checkpoint read back without model reconstruction.
pub struct RawCheckpoint<T: Element> {
    pub config: BTreeMap<String, String>,
    pub params: Vec<(String, Tensor<T>)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.at + n > self.bytes.len() {
            return Err(format_err("unexpected end of file"));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
}

pub fn load_raw<T: Element>(path: &Path) -> Result<RawCheckpoint<T>, CheckpointError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader { bytes: &bytes, at: 0 };

    if r.take(8)? != MAGIC {
        return Err(format_err("bad magic (not a checkpoint file)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format_err(format!("unsupported format version {version}")));
    }
    let block_len = r.u64()? as usize;
    let config = parse_config_block(r.take(block_len)?)?;

    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| format_err("parameter name is not UTF-8"))?
            .to_string();
        let dtype_tag = r.u8()?;
        let dtype = Dtype::from_tag(dtype_tag)
            .ok_or_else(|| format_err(format!("unknown dtype tag {dtype_tag}")))?;
        if dtype != T::DTYPE {
            return Err(format_err(format!(
                "parameter '{name}' is {dtype}, expected {}",
                T::DTYPE
            )));
        }
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * T::DTYPE.size_bytes())?;
        let data: Vec<T> = raw
            .chunks(T::DTYPE.size_bytes())
            .map(|c| T::read_le(c))
            .collect();
        params.push((name, Tensor::from_vec(shape, data)?));
    }
    if r.at != bytes.len() {
        return Err(format_err("trailing bytes after last parameter record"));
    }
    Ok(RawCheckpoint { config, params })
}

/// Rebuilds the architecture from the stored config and fills its parameters.
/// The stored parameter set must match the freshly built one exactly (same
/// names, same shapes).
pub fn load_model<T: Element>(path: &Path) -> Result<Box<dyn Architecture<T>>, CheckpointError> {
    let raw = load_raw::<T>(path)?;
    let cfg = ModelConfig::from_kv(&raw.config)?;
    let mut model = build_architecture::<T>(&cfg, 0)?;
    let store = model.params_mut();
    if raw.params.len() != store.len() {
        return Err(format_err(format!(
            "checkpoint has {} parameters, model expects {}",
            raw.params.len(),
            store.len()
        )));
    }
    for (name, tensor) in raw.params {
        let id = store
            .index_of(&name)
            .ok_or_else(|| format_err(format!("unexpected parameter '{name}'")))?;
        let entry = store.entry_mut(id);
        if entry.tensor.shape() != tensor.shape() {
            return Err(format_err(format!(
                "parameter '{name}': stored shape {:?} vs model shape {:?}",
                tensor.shape(),
                entry.tensor.shape()
            )));
        }
        entry.tensor.data_mut().copy_from_slice(tensor.data());
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ArchTag, BackboneConfig};

    fn small_cfg(arch: ArchTag) -> ModelConfig {
        let mut cfg = ModelConfig::new(arch, 3);
        cfg.backbone = BackboneConfig::tiny();
        cfg.n_codewords = 2;
        cfg.deepten_codewords = 3;
        cfg.reduce_dim = 3;
        cfg.embed_dim = 4;
        cfg
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = small_cfg(ArchTag::Dep);
        let model = build_architecture::<f32>(&cfg, 42).unwrap();
        save(&path, &cfg, model.params()).unwrap();
        let first = fs::read(&path).unwrap();

        let reloaded = load_model::<f32>(&path).unwrap();
        for (a, b) in model.params().iter().zip(reloaded.params().iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tensor.shape(), b.tensor.shape());
            let bits_equal = a
                .tensor
                .data()
                .iter()
                .zip(b.tensor.data())
                .all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(bits_equal, "{} changed across round trip", a.name);
        }

        let path2 = dir.path().join("model2.ckpt");
        save(&path2, &cfg, reloaded.params()).unwrap();
        assert_eq!(first, fs::read(&path2).unwrap());
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = small_cfg(ArchTag::Baseline);
        let model = build_architecture::<f64>(&cfg, 1).unwrap();
        save(&path, &cfg, model.params()).unwrap();
        assert!(matches!(load_raw::<f32>(&path), Err(CheckpointError::Format(_))));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = small_cfg(ArchTag::Baseline);
        let model = build_architecture::<f32>(&cfg, 1).unwrap();
        save(&path, &cfg, model.params()).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load_raw::<f32>(&path).is_err());
    }

    #[test]
    fn garbage_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"NOTACKPTxxxxxxxxxxxx").unwrap();
        assert!(matches!(load_raw::<f32>(&path), Err(CheckpointError::Format(_))));
    }
}
