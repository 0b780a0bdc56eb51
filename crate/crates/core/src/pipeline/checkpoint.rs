//! `.fgck` archives: self-describing named tensors plus JSON metadata.
//!
//! Layout: magic `FGCK`, `u32` format version, `u64` header length, the JSON
//! header, then every tensor as little-endian `f64` in header order. All
//! integers are little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::numcore::{Matrix, Mlp};
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"FGCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    fingerprint: String,
    tensors: Vec<TensorInfo>,
    meta: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub fingerprint: String,
    pub meta: Value,
    pub tensors: Vec<(TensorInfo, Vec<f64>)>,
}

impl Checkpoint {
    pub fn new(kind: &str, fingerprint: &str, meta: Value) -> Self {
        Self {
            kind: kind.to_string(),
            fingerprint: fingerprint.to_string(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, shape: Vec<usize>, data: &[T]) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push((
            TensorInfo {
                name: name.into(),
                shape,
            },
            data.iter().map(|v| v.as_f64()).collect(),
        ));
    }

    pub fn push_matrix<T: Scalar>(&mut self, name: impl Into<String>, m: &Matrix<T>) {
        self.push(name, vec![m.rows(), m.cols()], m.as_slice());
    }

    /// Stores every layer as `<prefix>.<k>.weights` / `<prefix>.<k>.bias`.
    pub fn push_mlp<T: Scalar>(&mut self, prefix: &str, net: &Mlp<T>) {
        for (k, layer) in net.layers.iter().enumerate() {
            self.push_matrix(format!("{prefix}.{k}.weights"), &layer.weights);
            self.push(format!("{prefix}.{k}.bias"), vec![layer.bias.len()], &layer.bias);
        }
    }

    pub fn tensor(&self, name: &str) -> Result<(&[usize], &[f64])> {
        self.tensors
            .iter()
            .find(|(info, _)| info.name == name)
            .map(|(info, data)| (info.shape.as_slice(), data.as_slice()))
            .ok_or_else(|| Error::validation(format!("checkpoint {} has no tensor {name}", self.kind)))
    }

    pub fn matrix<T: Scalar>(&self, name: &str) -> Result<Matrix<T>> {
        let (shape, data) = self.tensor(name)?;
        match shape {
            [r, c] => Matrix::from_vec(*r, *c, data.iter().map(|&v| T::of(v)).collect()),
            _ => Err(Error::shape(format!("tensor {name} rank"), 2, shape.len())),
        }
    }

    pub fn vector<T: Scalar>(&self, name: &str) -> Result<Vec<T>> {
        let (shape, data) = self.tensor(name)?;
        if shape.len() != 1 {
            return Err(Error::shape(format!("tensor {name} rank"), 1, shape.len()));
        }
        Ok(data.iter().map(|&v| T::of(v)).collect())
    }

    /// Overwrites the parameters of `net` from `<prefix>.*` tensors, checking every shape.
    pub fn load_mlp_into<T: Scalar>(&self, prefix: &str, net: &mut Mlp<T>) -> Result<()> {
        for (k, layer) in net.layers.iter_mut().enumerate() {
            let w = self.matrix::<T>(&format!("{prefix}.{k}.weights"))?;
            if w.shape() != layer.weights.shape() {
                return Err(Error::shape(
                    format!("{prefix}.{k}.weights"),
                    format!("{:?}", layer.weights.shape()),
                    format!("{:?}", w.shape()),
                ));
            }
            let b = self.vector::<T>(&format!("{prefix}.{k}.bias"))?;
            if b.len() != layer.bias.len() {
                return Err(Error::shape(format!("{prefix}.{k}.bias"), layer.bias.len(), b.len()));
            }
            layer.weights = w;
            layer.bias = b;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind.clone(),
            fingerprint: self.fingerprint.clone(),
            tensors: self.tensors.iter().map(|(i, _)| i.clone()).collect(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let payload: usize = self.tensors.iter().map(|(_, d)| d.len() * 8).sum();
        let mut out = Vec::with_capacity(16 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, data) in &self.tensors {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            path: origin.to_string(),
            reason,
        };
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not an FGCK checkpoint".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if body.len() < len {
            return Err(bad("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&body[..len]).map_err(|e| bad(format!("header: {e}")))?;
        let mut rest = &body[len..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for info in header.tensors {
            let n: usize = info.shape.iter().product();
            if rest.len() < n * 8 {
                return Err(bad(format!("truncated tensor {}", info.name)));
            }
            let data = rest[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            rest = &rest[n * 8..];
            tensors.push((info, data));
        }
        if !rest.is_empty() {
            return Err(bad(format!("{} trailing bytes", rest.len())));
        }
        Ok(Self {
            kind: header.kind,
            fingerprint: header.fingerprint,
            meta: header.meta,
            tensors,
        })
    }

    /// Writes through a temporary file so a crash never leaves a half-written archive.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("fgck.tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&self.to_bytes()?)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, &path.display().to_string())
    }
}
