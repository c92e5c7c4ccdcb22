//! Checkpoint directory: named parameter tensors, a JSON sidecar and the
//! optimizer moments.
//!
//! Tensor files hold `QPCK`, a `u16` version and a `u32` entry count, then per
//! entry a `u32` name length, the UTF-8 name, a `u32` rank, `u64` dims and the
//! little-endian `f64` payload.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::optim::AdamW;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const MAGIC: [u8; 4] = *b"QPCK";
pub const VERSION: u16 = 1;
pub const MODEL_FILE: &str = "model.qpck";
pub const OPTIMIZER_FILE: &str = "optimizer.qpck";
pub const SIDECAR_FILE: &str = "model.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Optimizer steps taken so far.
    pub step: u64,
    pub epoch: usize,
    pub config: serde_json::Value,
}

pub fn encode_tensors(entries: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated {
            path: self.path.to_path_buf(),
            expected: self.pos.saturating_add(n),
            found: self.bytes.len(),
        })?;
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

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint { name: path.display().to_string(), reason: reason.into() }
}

pub fn decode_tensors(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0, path };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(corrupt(path, format!("bad magic bytes {magic:?}")));
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
    if version != VERSION {
        return Err(corrupt(path, format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| corrupt(path, "parameter name is not UTF-8"))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| corrupt(path, format!("{name}: shape overflows")))?;
        let payload = r.take(n.checked_mul(8).ok_or_else(|| corrupt(path, format!("{name}: shape overflows")))?)?;
        let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(corrupt(path, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn store_entries(store: &ParamStore) -> Vec<(String, Tensor)> {
    store.iter().map(|p| (p.name.clone(), p.value.clone())).collect()
}

/// Writes parameters, sidecar and (if given) optimizer state into `dir`.
pub fn save_checkpoint(dir: &Path, store: &ParamStore, opt: Option<&AdamW>, meta: &CheckpointMeta) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join(MODEL_FILE), &encode_tensors(&store_entries(store)))?;
    let sidecar = serde_json::to_vec_pretty(meta).map_err(|e| Error::Json { path: dir.join(SIDECAR_FILE), source: e })?;
    write_file(&dir.join(SIDECAR_FILE), &sidecar)?;
    if let Some(opt) = opt {
        let mut entries = Vec::new();
        for ((p, m), v) in store.iter().zip(&opt.m).zip(&opt.v) {
            entries.push((format!("m/{}", p.name), m.clone()));
            entries.push((format!("v/{}", p.name), v.clone()));
        }
        entries.push(("step".into(), Tensor::scalar(opt.step as f64)));
        write_file(&dir.join(OPTIMIZER_FILE), &encode_tensors(&entries))?;
    }
    Ok(())
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join(SIDECAR_FILE);
    serde_json::from_slice(&read_file(&path)?).map_err(|e| Error::Json { path, source: e })
}

/// Loads parameter values into `store`, rejecting missing names and shape
/// mismatches by name.
pub fn load_params(dir: &Path, store: &mut ParamStore) -> Result<()> {
    let path: PathBuf = dir.join(MODEL_FILE);
    let entries = decode_tensors(&read_file(&path)?, &path)?;
    store.load_from(&entries)
}

/// Restores optimizer moments and step count for the parameters in `store`.
pub fn load_optimizer(dir: &Path, store: &ParamStore, opt: &mut AdamW) -> Result<()> {
    let path = dir.join(OPTIMIZER_FILE);
    let entries = decode_tensors(&read_file(&path)?, &path)?;
    let find = |name: &str, shape: &[usize]| -> Result<Tensor> {
        let t = entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::Checkpoint { name: name.into(), reason: "missing".into() })?;
        if t.shape() != shape {
            return Err(Error::Checkpoint {
                name: name.into(),
                reason: format!("shape {:?} does not match model shape {shape:?}", t.shape()),
            });
        }
        Ok(t)
    };
    let mut m = Vec::new();
    let mut v = Vec::new();
    for p in store.iter() {
        m.push(find(&format!("m/{}", p.name), p.value.shape())?);
        v.push(find(&format!("v/{}", p.name), p.value.shape())?);
    }
    let step = find("step", Tensor::scalar(0.0).shape())?.item();
    opt.m = m;
    opt.v = v;
    opt.step = step as u64;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::optim::AdamWConfig;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("layer.w", Tensor::matrix(2, 3, vec![1.0, -2.5, 3.0, 1e-300, f64::MAX, -0.0]).unwrap()).unwrap();
        s.add("b", Tensor::vector(vec![0.125])).unwrap();
        s
    }

    #[test]
    fn byte_round_trip() {
        let entries = store_entries(&store());
        let bytes = encode_tensors(&entries);
        let back = decode_tensors(&bytes, Path::new("x")).unwrap();
        assert_eq!(encode_tensors(&back), bytes);
        assert_eq!(back[0].0, "layer.w");
        assert!(decode_tensors(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_tensors(&bad, Path::new("x")).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn directory_round_trip_and_shape_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let s = store();
        let mut opt = AdamW::new(&s, AdamWConfig::default());
        opt.step = 7;
        opt.m[1] = Tensor::vector(vec![0.5]);
        let meta = CheckpointMeta { step: 7, epoch: 2, config: serde_json::json!({"L": 2}) };
        save_checkpoint(dir.path(), &s, Some(&opt), &meta).unwrap();
        assert_eq!(read_meta(dir.path()).unwrap(), meta);

        let mut fresh = store();
        for p in fresh.iter_mut() {
            p.value.data_mut().fill(0.0);
        }
        load_params(dir.path(), &mut fresh).unwrap();
        assert_eq!(encode_tensors(&store_entries(&fresh)), encode_tensors(&store_entries(&s)));

        let mut opt2 = AdamW::new(&s, AdamWConfig::default());
        load_optimizer(dir.path(), &s, &mut opt2).unwrap();
        assert_eq!(opt2.step, 7);
        assert_eq!(opt2.m[1].data(), &[0.5]);

        let mut other = ParamStore::new();
        other.add("layer.w", Tensor::zeros(&[3, 2])).unwrap();
        other.add("b", Tensor::zeros(&[1])).unwrap();
        let err = load_params(dir.path(), &mut other).unwrap_err();
        assert!(err.to_string().contains("layer.w"), "{err}");
    }
}
