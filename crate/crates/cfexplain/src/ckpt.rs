//! Single-file checkpoint container shared by all trainable artifacts.
//!
//! Layout: 8-byte magic, u64 LE metadata length, JSON metadata, u32 LE tensor
//! count, then per tensor: u32 LE name length, name bytes, u8 dtype (0 = f32,
//! 1 = f64), u8 rank, u64 LE dims, raw little-endian element data. Writes are
//! atomic (temp file + rename) so a crashed run never leaves a half-written
//! checkpoint behind.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::ArrayD;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CFXCKPT1";

/// One named parameter array. All tensors are stored little-endian row-major.
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    F32(ArrayD<f32>),
    F64(ArrayD<f64>),
}

impl Tensor {
    fn dtype_tag(&self) -> u8 {
        match self {
            Tensor::F32(_) => 0,
            Tensor::F64(_) => 1,
        }
    }

    fn shape(&self) -> &[usize] {
        match self {
            Tensor::F32(a) => a.shape(),
            Tensor::F64(a) => a.shape(),
        }
    }
}

/// In-memory checkpoint: free-form JSON metadata plus named tensors.
/// Tensor order on disk is the sorted name order, so byte output is a pure
/// function of content.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Checkpoint { meta, tensors: BTreeMap::new() }
    }

    pub fn insert_f32(&mut self, name: &str, value: ArrayD<f32>) {
        self.tensors.insert(name.to_string(), Tensor::F32(value));
    }

    pub fn insert_f64(&mut self, name: &str, value: ArrayD<f64>) {
        self.tensors.insert(name.to_string(), Tensor::F64(value));
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn tensor_f32(&self, name: &str) -> Result<&ArrayD<f32>> {
        match self.tensors.get(name) {
            Some(Tensor::F32(a)) => Ok(a),
            Some(Tensor::F64(_)) => {
                Err(Error::Checkpoint(format!("tensor '{name}' is f64, expected f32")))
            }
            None => Err(Error::Checkpoint(format!("missing tensor '{name}'"))),
        }
    }

    pub fn tensor_f64(&self, name: &str) -> Result<&ArrayD<f64>> {
        match self.tensors.get(name) {
            Some(Tensor::F64(a)) => Ok(a),
            Some(Tensor::F32(_)) => {
                Err(Error::Checkpoint(format!("tensor '{name}' is f32, expected f64")))
            }
            None => Err(Error::Checkpoint(format!("missing tensor '{name}'"))),
        }
    }

    /// Typed accessor for a metadata field stored under `meta[key]`.
    pub fn meta_field<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata field '{key}'")))?;
        serde_json::from_value(v.clone())
            .map_err(|e| Error::Checkpoint(format!("metadata field '{key}': {e}")))
    }

    /// Serialize to the container byte format.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::with_capacity(meta.len() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, tensor) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(tensor.dtype_tag());
            out.push(tensor.shape().len() as u8);
            for &d in tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match tensor {
                Tensor::F32(a) => {
                    for v in a.iter() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Tensor::F64(a) => {
                    for v in a.iter() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint("bad magic: not a checkpoint file".into()));
        }
        let meta_len = r.u64()? as usize;
        let meta_bytes = r.take(meta_len)?;
        let meta: serde_json::Value = serde_json::from_slice(meta_bytes)
            .map_err(|e| Error::Checkpoint(format!("metadata is not valid JSON: {e}")))?;
        let n_tensors = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..n_tensors {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = r.u8()?;
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            let mut numel = 1usize;
            for _ in 0..rank {
                let d = r.u64()? as usize;
                numel = numel
                    .checked_mul(d)
                    .ok_or_else(|| Error::Checkpoint("tensor shape overflows".into()))?;
                shape.push(d);
            }
            let tensor = match dtype {
                0 => {
                    let raw = r.take(numel * 4)?;
                    let data: Vec<f32> = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect();
                    Tensor::F32(ArrayD::from_shape_vec(shape, data).map_err(|e| {
                        Error::Checkpoint(format!("tensor '{name}' shape error: {e}"))
                    })?)
                }
                1 => {
                    let raw = r.take(numel * 8)?;
                    let data: Vec<f64> = raw
                        .chunks_exact(8)
                        .map(|c| {
                            f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]])
                        })
                        .collect();
                    Tensor::F64(ArrayD::from_shape_vec(shape, data).map_err(|e| {
                        Error::Checkpoint(format!("tensor '{name}' shape error: {e}"))
                    })?)
                }
                other => {
                    return Err(Error::Checkpoint(format!(
                        "tensor '{name}' has unknown dtype tag {other}"
                    )))
                }
            };
            tensors.insert(name, tensor);
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingArtifact(format!("checkpoint not found: {}", path.display()))
            } else {
                Error::Io(e)
            }
        })?;
        Self::from_bytes(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
    }
}

/// Write `bytes` to `path` via a sibling temp file and rename, so readers
/// never observe a partially written file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp-write");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Hex SHA-256 of a file's bytes; the compatibility digest stored by
/// downstream checkpoints.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact(format!("file not found: {}", path.display()))
        } else {
            Error::Io(e)
        }
    })?;
    Ok(hex_sha256(&bytes))
}

pub fn hex_sha256(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    fn sample_ckpt() -> Checkpoint {
        let mut c = Checkpoint::new(serde_json::json!({
            "kind": "test", "seed": 7, "nested": {"a": [1, 2, 3]}
        }));
        c.insert_f32(
            "w",
            ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1.0, -2.5, 3.25, 0.0, 1e-7, -4.0])
                .unwrap(),
        );
        c.insert_f64("b", ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.1, -0.2, 1e-300]).unwrap());
        c
    }

    #[test]
    fn roundtrip_bytes() {
        let c = sample_ckpt();
        let bytes = c.to_bytes().unwrap();
        let d = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn roundtrip_file_and_digest_stability() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.ckpt");
        let c = sample_ckpt();
        c.write(&path).unwrap();
        let d = Checkpoint::read(&path).unwrap();
        assert_eq!(c, d);
        // identical content writes identical bytes, so digests agree
        let path2 = dir.path().join("test2.ckpt");
        d.write(&path2).unwrap();
        assert_eq!(file_sha256(&path).unwrap(), file_sha256(&path2).unwrap());
        assert!(!dir.path().join("test.ckpt.tmp-write").exists());
    }

    #[test]
    fn missing_file_is_missing_artifact() {
        let err = Checkpoint::read(Path::new("/nonexistent/x.ckpt")).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact(_)), "{err}");
    }

    #[test]
    fn truncated_and_corrupt_rejected() {
        let bytes = sample_ckpt().to_bytes().unwrap();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }

    #[test]
    fn typed_accessors() {
        let c = sample_ckpt();
        assert_eq!(c.tensor_f32("w").unwrap().shape(), &[2, 3]);
        assert!(c.tensor_f32("b").is_err());
        assert!(c.tensor_f64("w").is_err());
        assert!(c.tensor_f32("nope").is_err());
        let seed: u64 = c.meta_field("seed").unwrap();
        assert_eq!(seed, 7);
        assert!(c.meta_field::<u64>("absent").is_err());
    }

    #[test]
    fn sha256_known_vector() {
        // sha256("abc"), standard test vector
        assert_eq!(
            hex_sha256(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
