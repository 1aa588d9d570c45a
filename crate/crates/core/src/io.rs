//! The `KPT1` tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"KPT1" | manifest length: u64 | manifest: UTF-8 JSON | payload
//! ```
//!
//! The manifest lists every tensor with its name, role, dtype, shape and byte
//! offset into the payload. Tensors are stored row-major and back to back;
//! the payload must be covered exactly, with no gaps, overlaps or trailing
//! bytes. Kronecker sums are stored as groups: factor `i` of group `g` is the
//! triple `g.i.A`, `g.i.B`, `g.i.s`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::kron::{FactorPair, KroneckerSum};
use crate::linalg::DenseMatrix;

pub const MAGIC: &[u8; 4] = b"KPT1";
const HEADER_LEN: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    #[serde(rename = "dense")]
    Dense,
    #[serde(rename = "kron_factor_A")]
    KronFactorA,
    #[serde(rename = "kron_factor_B")]
    KronFactorB,
    #[serde(rename = "scalar")]
    Scalar,
    #[serde(rename = "bias")]
    Bias,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F64,
    F32,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    role: Role,
    dtype: Dtype,
    shape: Vec<usize>,
    offset: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    group: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    factor: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

/// One named tensor held at f64 in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub role: Role,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub group: Option<String>,
    pub factor: Option<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    fn element_count(shape: &[usize]) -> Option<usize> {
        shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
    }

    pub fn to_matrix(&self) -> Result<DenseMatrix> {
        let (r, c) = match self.shape.as_slice() {
            [r, c] => (*r, *c),
            [n] => (*n, 1),
            [] => (1, 1),
            _ => {
                return Err(FormatError::Tensor {
                    name: self.name.clone(),
                    reason: format!("shape {:?} is not a matrix", self.shape),
                }
                .into())
            }
        };
        DenseMatrix::new(r, c, self.data.clone())
    }
}

/// In-memory contents of a `KPT1` file. Tensor order is preserved on write.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub metadata: BTreeMap<String, String>,
    tensors: Vec<Tensor>,
}

fn scales_key(group: &str) -> String {
    format!("{group}.scales")
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn push(&mut self, tensor: Tensor) -> Result<()> {
        if self.tensors.iter().any(|t| t.name == tensor.name) {
            return Err(Error::Argument(format!("duplicate tensor name `{}`", tensor.name)));
        }
        if Tensor::element_count(&tensor.shape) != Some(tensor.data.len()) {
            return Err(Error::Dimension(format!(
                "tensor `{}` has shape {:?} but {} values",
                tensor.name,
                tensor.shape,
                tensor.data.len()
            )));
        }
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn push_matrix(&mut self, name: &str, m: &DenseMatrix, dtype: Dtype) -> Result<()> {
        self.push(Tensor {
            name: name.to_string(),
            role: Role::Dense,
            dtype,
            shape: vec![m.rows(), m.cols()],
            group: None,
            factor: None,
            data: m.as_slice().to_vec(),
        })
    }

    /// A 1-D tensor with the given role (`Dense` or `Bias`).
    pub fn push_vector(&mut self, name: &str, role: Role, v: &[f64], dtype: Dtype) -> Result<()> {
        self.push(Tensor {
            name: name.to_string(),
            role,
            dtype,
            shape: vec![v.len()],
            group: None,
            factor: None,
            data: v.to_vec(),
        })
    }

    pub fn push_kron_sum(&mut self, group: &str, sum: &KroneckerSum, dtype: Dtype) -> Result<()> {
        for (i, f) in sum.factors().iter().enumerate() {
            let member = |suffix: &str, role: Role, shape: Vec<usize>, data: Vec<f64>| Tensor {
                name: format!("{group}.{i}.{suffix}"),
                role,
                dtype,
                shape,
                group: Some(group.to_string()),
                factor: Some(i),
                data,
            };
            self.push(member("A", Role::KronFactorA, vec![f.a().rows(), f.a().cols()], f.a().as_slice().to_vec()))?;
            self.push(member("B", Role::KronFactorB, vec![f.b().rows(), f.b().cols()], f.b().as_slice().to_vec()))?;
            self.push(member("s", Role::Scalar, vec![], vec![f.scale()]))?;
        }
        if !sum.learnable_scales() {
            self.metadata.insert(scales_key(group), "absorbed".into());
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| FormatError::MissingTensor(name.to_string()).into())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.iter().any(|t| t.name == name)
    }

    pub fn matrix(&self, name: &str) -> Result<DenseMatrix> {
        self.get(name)?.to_matrix()
    }

    pub fn vector(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.get(name)?.data.clone())
    }

    /// Names of all Kronecker groups, in first-appearance order.
    pub fn kron_groups(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for t in &self.tensors {
            if let Some(g) = &t.group {
                if !out.contains(g) {
                    out.push(g.clone());
                }
            }
        }
        out
    }

    pub fn kron_sum(&self, group: &str) -> Result<KroneckerSum> {
        let mut factors = Vec::new();
        for i in 0.. {
            let a_name = format!("{group}.{i}.A");
            if !self.contains(&a_name) {
                break;
            }
            let a = self.matrix(&a_name)?;
            let b = self.matrix(&format!("{group}.{i}.B"))?;
            let s = self.get(&format!("{group}.{i}.s"))?.data[0];
            factors.push(FactorPair::new(s, a, b)?);
        }
        if factors.is_empty() {
            return Err(FormatError::MissingTensor(format!("{group}.0.A")).into());
        }
        let mut sum = KroneckerSum::new(factors)?;
        if self.metadata.get(&scales_key(group)).map(String::as_str) == Some("absorbed") {
            sum.set_learnable_scales(false);
        }
        Ok(sum)
    }

    /// Serialized bytes; identical containers produce identical bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0usize;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            entries.push(TensorEntry {
                name: t.name.clone(),
                role: t.role,
                dtype: t.dtype,
                shape: t.shape.clone(),
                offset,
                group: t.group.clone(),
                factor: t.factor,
            });
            offset += t.data.len() * t.dtype.size();
        }
        let manifest = Manifest {
            version: 1,
            metadata: self.metadata.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| Error::Data(e.to_string()))?;
        let mut out = Vec::with_capacity(HEADER_LEN + json.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            match t.dtype {
                Dtype::F64 => t.data.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Dtype::F32 => t.data.iter().for_each(|x| out.extend_from_slice(&(*x as f32).to_le_bytes())),
            }
        }
        Ok(out)
    }

    /// Parses and fully validates a container; nothing is returned on any error.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(FormatError::BadMagic(bytes[..bytes.len().min(4)].to_vec()).into());
        }
        if bytes.len() < HEADER_LEN {
            return Err(FormatError::Truncated("header shorter than 12 bytes".into()).into());
        }
        let manifest_len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes"));
        let manifest_end = usize::try_from(manifest_len)
            .ok()
            .and_then(|l| l.checked_add(HEADER_LEN))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| {
                FormatError::Truncated(format!(
                    "manifest claims {manifest_len} bytes, file has {}",
                    bytes.len() - HEADER_LEN
                ))
            })?;
        let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..manifest_end])
            .map_err(|e| FormatError::Manifest(e.to_string()))?;
        if manifest.version != 1 {
            return Err(FormatError::Manifest(format!("unsupported version {}", manifest.version)).into());
        }
        let payload = &bytes[manifest_end..];

        let mut spans: Vec<(usize, usize, &str)> = Vec::with_capacity(manifest.tensors.len());
        let mut seen = HashMap::new();
        for e in &manifest.tensors {
            if seen.insert(e.name.as_str(), ()).is_some() {
                return Err(FormatError::Manifest(format!("duplicate tensor `{}`", e.name)).into());
            }
            let count = Tensor::element_count(&e.shape).ok_or_else(|| FormatError::Tensor {
                name: e.name.clone(),
                reason: "shape overflows".into(),
            })?;
            let end = count
                .checked_mul(e.dtype.size())
                .and_then(|n| n.checked_add(e.offset))
                .filter(|&end| end <= payload.len())
                .ok_or_else(|| FormatError::OutOfBounds {
                    name: e.name.clone(),
                    start: e.offset,
                    end: e.offset.saturating_add(count.saturating_mul(e.dtype.size())),
                    payload: payload.len(),
                })?;
            match e.role {
                Role::Scalar if count != 1 => {
                    return Err(FormatError::Tensor {
                        name: e.name.clone(),
                        reason: format!("scalar has {count} elements"),
                    }
                    .into())
                }
                Role::KronFactorA | Role::KronFactorB | Role::Scalar if e.group.is_none() || e.factor.is_none() => {
                    return Err(FormatError::Tensor {
                        name: e.name.clone(),
                        reason: "Kronecker member without group and factor index".into(),
                    }
                    .into())
                }
                _ => {}
            }
            spans.push((e.offset, end, e.name.as_str()));
        }
        spans.sort();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(FormatError::Overlap(w[0].2.to_string(), w[1].2.to_string()).into());
            }
        }
        let covered: usize = spans.iter().map(|(s, e, _)| e - s).sum();
        if covered != payload.len() {
            return Err(FormatError::TrailingBytes(payload.len() - covered).into());
        }
        check_pairing(&manifest.tensors)?;

        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            let count = Tensor::element_count(&e.shape).expect("validated above");
            let raw = &payload[e.offset..e.offset + count * e.dtype.size()];
            let data: Vec<f64> = match e.dtype {
                Dtype::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
                Dtype::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
            };
            if data.iter().any(|x| !x.is_finite()) {
                return Err(FormatError::Tensor {
                    name: e.name,
                    reason: "contains non-finite values".into(),
                }
                .into());
            }
            tensors.push(Tensor {
                name: e.name,
                role: e.role,
                dtype: e.dtype,
                shape: e.shape,
                group: e.group,
                factor: e.factor,
                data,
            });
        }
        Ok(Self {
            metadata: manifest.metadata,
            tensors,
        })
    }

    /// Writes atomically: a temporary file in the target directory is renamed into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(&bytes)?;
        tmp.as_file().sync_all()?;
        tmp.persist(path).map_err(|e| Error::Io(e.error))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn check_pairing(entries: &[TensorEntry]) -> Result<()> {
    let mut members: BTreeMap<(&str, usize), [bool; 3]> = BTreeMap::new();
    for e in entries {
        let slot = match e.role {
            Role::KronFactorA => 0,
            Role::KronFactorB => 1,
            Role::Scalar => 2,
            _ => continue,
        };
        let key = (e.group.as_deref().unwrap_or(""), e.factor.unwrap_or(0));
        members.entry(key).or_default()[slot] = true;
    }
    for ((group, factor), present) in members {
        for (slot, what) in ["A factor", "B factor", "scalar"].into_iter().enumerate() {
            if !present[slot] {
                return Err(FormatError::Unpaired {
                    group: group.to_string(),
                    factor,
                    missing: what,
                }
                .into());
            }
        }
    }
    Ok(())
}

/// Name under which standalone matrices and sums are stored.
pub const DEFAULT_TENSOR: &str = "W";

/// Something a `KPT1` file can hold on its own.
#[derive(Debug, Clone, PartialEq)]
pub enum Stored {
    Matrix(DenseMatrix),
    Sum(KroneckerSum),
}

pub fn save_matrix(path: impl AsRef<Path>, m: &DenseMatrix, dtype: Dtype) -> Result<()> {
    let mut c = Container::new();
    c.push_matrix(DEFAULT_TENSOR, m, dtype)?;
    c.save(path)
}

pub fn save_kron_sum(path: impl AsRef<Path>, sum: &KroneckerSum, dtype: Dtype) -> Result<()> {
    let mut c = Container::new();
    c.push_kron_sum(DEFAULT_TENSOR, sum, dtype)?;
    c.save(path)
}

/// Loads a file written by [`save_matrix`] or [`save_kron_sum`].
///
/// Files holding several tensors resolve to the tensor or group named `W`,
/// falling back to the first dense tensor or group.
pub fn load(path: impl AsRef<Path>) -> Result<Stored> {
    let c = Container::load(path)?;
    stored_from(&c, None)
}

/// Resolves a standalone matrix or sum from a container, optionally by name.
pub fn stored_from(c: &Container, name: Option<&str>) -> Result<Stored> {
    if let Some(name) = name {
        if c.contains(name) {
            return Ok(Stored::Matrix(c.matrix(name)?));
        }
        return Ok(Stored::Sum(c.kron_sum(name)?));
    }
    if c.contains(DEFAULT_TENSOR) {
        return Ok(Stored::Matrix(c.matrix(DEFAULT_TENSOR)?));
    }
    let groups = c.kron_groups();
    if groups.iter().any(|g| g == DEFAULT_TENSOR) {
        return Ok(Stored::Sum(c.kron_sum(DEFAULT_TENSOR)?));
    }
    if let Some(t) = c.tensors().iter().find(|t| t.role == Role::Dense && t.shape.len() == 2) {
        return Ok(Stored::Matrix(t.to_matrix()?));
    }
    match groups.first() {
        Some(g) => Ok(Stored::Sum(c.kron_sum(g)?)),
        None => Err(FormatError::MissingTensor(DEFAULT_TENSOR.into()).into()),
    }
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    match load(path)? {
        Stored::Matrix(m) => Ok(m),
        Stored::Sum(_) => Err(Error::Data("file holds a Kronecker sum, not a dense matrix".into())),
    }
}

pub fn load_kron_sum(path: impl AsRef<Path>) -> Result<KroneckerSum> {
    match load(path)? {
        Stored::Sum(s) => Ok(s),
        Stored::Matrix(_) => Err(Error::Data("file holds a dense matrix, not a Kronecker sum".into())),
    }
}

/// Entry of the plain external-weights manifest (`manifest.json`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawTensorEntry {
    pub name: String,
    /// File name relative to the directory; raw little-endian f32, row-major.
    pub file: String,
    pub shape: Vec<usize>,
    /// Store the transpose of a 2-D tensor (e.g. `in x out` layers into `out x in`).
    #[serde(default)]
    pub transpose: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawManifest {
    pub tensors: Vec<RawTensorEntry>,
}

/// Reads a directory of raw f32 tensors described by `manifest.json`.
///
/// 2-D tensors become `dense`; 1-D tensors whose name ends in `bias` become
/// `bias`, other 1-D tensors `dense`. Values keep dtype f32.
pub fn import_raw_directory(dir: impl AsRef<Path>) -> Result<Container> {
    let dir = dir.as_ref();
    let manifest: RawManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)
        .map_err(|e| FormatError::Manifest(e.to_string()))?;
    let mut c = Container::new();
    for e in manifest.tensors {
        let bytes = fs::read(dir.join(&e.file))?;
        let count = Tensor::element_count(&e.shape).ok_or_else(|| FormatError::Tensor {
            name: e.name.clone(),
            reason: "shape overflows".into(),
        })?;
        if bytes.len() != count * 4 {
            return Err(FormatError::Tensor {
                name: e.name.clone(),
                reason: format!("expected {} bytes, file has {}", count * 4, bytes.len()),
            }
            .into());
        }
        let mut data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        let mut shape = e.shape.clone();
        if e.transpose {
            let [r, cols] = e.shape[..] else {
                return Err(FormatError::Tensor {
                    name: e.name.clone(),
                    reason: "only 2-D tensors can be transposed".into(),
                }
                .into());
            };
            data = DenseMatrix::new(r, cols, data)?.transpose().into_vec();
            shape = vec![cols, r];
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(FormatError::Tensor {
                name: e.name,
                reason: "contains non-finite values".into(),
            }
            .into());
        }
        let role = if shape.len() == 1 && e.name.ends_with("bias") {
            Role::Bias
        } else {
            Role::Dense
        };
        c.push(Tensor {
            name: e.name,
            role,
            dtype: Dtype::F32,
            shape,
            group: None,
            factor: None,
            data,
        })?;
    }
    Ok(c)
}
