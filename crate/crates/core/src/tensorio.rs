//! Binary tensor files and dataset manifests.
//!
//! Tensor layout (all multi-byte values little-endian):
//!
//! | offset | size      | content                               |
//! |--------|-----------|---------------------------------------|
//! | 0      | 4         | magic `FTEN`                          |
//! | 4      | 1         | format version, always 1              |
//! | 5      | 1         | dtype code: 1 = f32, 2 = f64          |
//! | 6      | 1         | rank, 1 to 4                          |
//! | 7      | 1         | reserved, 0                           |
//! | 8      | 8 × rank  | dimensions as u64                     |
//! | ...    | ...       | row-major payload                     |
//!
//! A manifest is a JSON document naming one feature tensor per class plus
//! the classifier weights and optional bias. Relative paths resolve against
//! the manifest's directory.

use std::collections::BTreeSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{ClassFeatures, Dataset, FeatureBlock};
use crate::head::{ClassifierHead, HeadError};

pub const MAGIC: [u8; 4] = *b"FTEN";
pub const FORMAT_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 8;
pub const MAX_RANK: usize = 4;

/// Values below `-NEGATIVE_TOLERANCE` fail strict non-negativity checks.
pub const NEGATIVE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("not a tensor file (magic bytes {0:02x?})")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("unsupported rank {0}, expected 1 to {MAX_RANK}")]
    BadRank(usize),
    #[error("shape {shape:?} describes {expected} values but {actual} are present")]
    ShapeMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("truncated tensor file: {needed} bytes required, {found} available")]
    TruncatedFile { needed: usize, found: usize },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, TensorError> {
        match code {
            1 => Ok(DType::F32),
            2 => Ok(DType::F64),
            other => Err(TensorError::UnsupportedDtype(other)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A dense row-major tensor of rank 1 to 4.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    shape: Vec<usize>,
    data: TensorData,
}

fn check_shape(shape: &[usize], actual: usize) -> Result<(), TensorError> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(TensorError::BadRank(shape.len()));
    }
    let expected = shape
        .iter()
        .try_fold(1usize, |acc, &d| if d == 0 { None } else { acc.checked_mul(d) });
    match expected {
        Some(expected) if expected == actual => Ok(()),
        Some(expected) => Err(TensorError::ShapeMismatch {
            shape: shape.to_vec(),
            expected,
            actual,
        }),
        None => Err(TensorError::ShapeMismatch {
            shape: shape.to_vec(),
            expected: 0,
            actual,
        }),
    }
}

impl TensorFile {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self, TensorError> {
        check_shape(&shape, data.len())?;
        Ok(Self { shape, data })
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        Self::new(shape, TensorData::F32(data))
    }

    pub fn from_f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(shape, TensorData::F64(data))
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    /// Values widened to f64.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let dtype = self.dtype();
        let mut out =
            Vec::with_capacity(HEADER_LEN + 8 * self.rank() + dtype.size() * self.len());
        out.extend_from_slice(&MAGIC);
        out.push(FORMAT_VERSION);
        out.push(dtype.code());
        out.push(self.rank() as u8);
        out.push(0);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, TensorError> {
        if bytes.len() < HEADER_LEN {
            if bytes.len() >= 4 && bytes[..4] != MAGIC {
                return Err(TensorError::BadMagic(bytes[..4].try_into().unwrap()));
            }
            return Err(TensorError::TruncatedFile {
                needed: HEADER_LEN,
                found: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(TensorError::BadMagic(magic));
        }
        if bytes[4] != FORMAT_VERSION {
            return Err(TensorError::UnsupportedVersion(bytes[4]));
        }
        let dtype = DType::from_code(bytes[5])?;
        let rank = bytes[6] as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(TensorError::BadRank(rank));
        }

        let dims_end = HEADER_LEN + 8 * rank;
        if bytes.len() < dims_end {
            return Err(TensorError::TruncatedFile {
                needed: dims_end,
                found: bytes.len(),
            });
        }
        let mut shape = Vec::with_capacity(rank);
        for chunk in bytes[HEADER_LEN..dims_end].chunks_exact(8) {
            let d = u64::from_le_bytes(chunk.try_into().unwrap());
            let d = usize::try_from(d).map_err(|_| TensorError::ShapeMismatch {
                shape: shape.clone(),
                expected: usize::MAX,
                actual: 0,
            })?;
            shape.push(d);
        }

        let payload = &bytes[dims_end..];
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| if d == 0 { None } else { acc.checked_mul(d) })
            .ok_or_else(|| TensorError::ShapeMismatch {
                shape: shape.clone(),
                expected: 0,
                actual: payload.len() / dtype.size(),
            })?;
        let needed = count
            .checked_mul(dtype.size())
            .ok_or(TensorError::TruncatedFile {
                needed: usize::MAX,
                found: payload.len(),
            })?;
        if payload.len() < needed {
            return Err(TensorError::TruncatedFile {
                needed: dims_end + needed,
                found: bytes.len(),
            });
        }
        if payload.len() > needed {
            return Err(TensorError::ShapeMismatch {
                shape,
                expected: count,
                actual: payload.len() / dtype.size(),
            });
        }

        let data = match dtype {
            DType::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        Ok(Self { shape, data })
    }
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<TensorFile, TensorError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| TensorError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    TensorFile::decode(&bytes)
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &TensorFile) -> Result<(), TensorError> {
    let path = path.as_ref();
    fs::write(path, tensor.encode()).map_err(|source| TensorError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub label: usize,
    pub name: String,
    pub features: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub classes: Vec<ClassEntry>,
    pub weights: PathBuf,
    #[serde(default)]
    pub bias: Option<PathBuf>,
    #[serde(default)]
    pub meta: serde_json::Map<String, serde_json::Value>,
}

/// How negative feature values are treated at load time.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum NonNegativity {
    /// Values below `-NEGATIVE_TOLERANCE` are an error; the rest clamp to 0.
    #[default]
    Strict,
    /// Every negative value clamps to 0 with a logged warning.
    Lenient,
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: invalid manifest JSON: {source}", path.display())]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{}: {source}", path.display())]
    Tensor { path: PathBuf, source: TensorError },
    #[error("manifest lists no classes")]
    NoClasses,
    #[error("duplicate class label {0}")]
    DuplicateLabel(usize),
    #[error("class label {label} outside [0, {classes})")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("class {label}: negative feature value {value} at flat offset {offset}")]
    NegativeFeature {
        label: usize,
        offset: usize,
        value: f64,
    },
    #[error("class {label}: non-finite feature value at flat offset {offset}")]
    NonFiniteFeature { label: usize, offset: usize },
    #[error(transparent)]
    Head(#[from] HeadError),
}

/// A manifest with every tensor read and validated.
#[derive(Debug, Clone)]
pub struct LoadedManifest {
    pub manifest: Manifest,
    pub dataset: Dataset,
    pub head: ClassifierHead,
    /// Number of negative values clamped to zero.
    pub clamped: usize,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn read_at(path: PathBuf) -> Result<TensorFile, ManifestError> {
    read_tensor(&path).map_err(|source| ManifestError::Tensor { path, source })
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest, ManifestError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| ManifestError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_manifest(path: impl AsRef<Path>, manifest: &Manifest) -> Result<(), ManifestError> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(path, text).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a manifest and every tensor it names, then checks labels, shapes and
/// feature signs.
pub fn load_manifest(
    path: impl AsRef<Path>,
    mode: NonNegativity,
) -> Result<LoadedManifest, ManifestError> {
    let path = path.as_ref();
    let manifest = read_manifest(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let c = manifest.classes.len();
    if c == 0 {
        return Err(ManifestError::NoClasses);
    }

    let mut seen = BTreeSet::new();
    for entry in &manifest.classes {
        if !seen.insert(entry.label) {
            return Err(ManifestError::DuplicateLabel(entry.label));
        }
    }
    if let Some(&label) = seen.iter().find(|&&l| l >= c) {
        return Err(ManifestError::LabelOutOfRange { label, classes: c });
    }

    let weights = read_at(resolve(base, &manifest.weights))?;
    if weights.rank() != 2 {
        return Err(ManifestError::DimMismatch(format!(
            "weights must be rank 2 (classes × features), got shape {:?}",
            weights.shape()
        )));
    }
    let (wc, m) = (weights.shape()[0], weights.shape()[1]);
    if wc != c {
        return Err(ManifestError::DimMismatch(format!(
            "weights have {wc} rows but the manifest lists {c} classes"
        )));
    }
    let bias = match &manifest.bias {
        Some(p) => {
            let b = read_at(resolve(base, p))?;
            if b.shape() != [c] {
                return Err(ManifestError::DimMismatch(format!(
                    "bias shape {:?}, expected [{c}]",
                    b.shape()
                )));
            }
            Some(b.to_f64_vec())
        }
        None => None,
    };
    let head = ClassifierHead::new(c, m, weights.to_f64_vec(), bias)?;

    let mut entries: Vec<&ClassEntry> = manifest.classes.iter().collect();
    entries.sort_by_key(|e| e.label);

    let mut trailing: Option<Vec<usize>> = None;
    let mut classes = Vec::with_capacity(c);
    let mut clamped = 0;
    for entry in entries {
        let tensor = read_at(resolve(base, &entry.features))?;
        let shape = tensor.shape().to_vec();
        if shape.len() != 2 && shape.len() != 4 {
            return Err(ManifestError::DimMismatch(format!(
                "class {}: features must be rank 2 or 4, got shape {shape:?}",
                entry.label
            )));
        }
        match &trailing {
            Some(t) if t[..] != shape[1..] => {
                return Err(ManifestError::DimMismatch(format!(
                    "class {}: trailing dims {:?} differ from {:?}",
                    entry.label,
                    &shape[1..],
                    t
                )))
            }
            None => trailing = Some(shape[1..].to_vec()),
            _ => {}
        }
        if shape[1] != m {
            return Err(ManifestError::DimMismatch(format!(
                "class {}: features have width {} but weights expect {m}",
                entry.label, shape[1]
            )));
        }

        let mut data = tensor.to_f64_vec();
        for (offset, v) in data.iter_mut().enumerate() {
            if !v.is_finite() {
                return Err(ManifestError::NonFiniteFeature {
                    label: entry.label,
                    offset,
                });
            }
            if *v < 0.0 {
                if mode == NonNegativity::Strict && *v < -NEGATIVE_TOLERANCE {
                    return Err(ManifestError::NegativeFeature {
                        label: entry.label,
                        offset,
                        value: *v,
                    });
                }
                *v = 0.0;
                clamped += 1;
            }
        }
        let (h, w) = if shape.len() == 4 {
            (shape[2], shape[3])
        } else {
            (1, 1)
        };
        let block = FeatureBlock::new(shape[0], m, h, w, data)
            .expect("shape already validated by the tensor reader");
        classes.push(ClassFeatures {
            label: entry.label,
            name: entry.name.clone(),
            block,
        });
    }
    if clamped > 0 && mode == NonNegativity::Lenient {
        log::warn!("{}: clamped {clamped} negative feature values to 0", path.display());
    }

    let dataset = Dataset::new(m, classes).map_err(ManifestError::DimMismatch)?;
    Ok(LoadedManifest {
        manifest,
        dataset,
        head,
        clamped,
    })
}

/// Writes a dataset and head as f32 tensors plus a manifest under `dir`.
pub fn save_bundle(
    dir: impl AsRef<Path>,
    dataset: &Dataset,
    head: &ClassifierHead,
    meta: serde_json::Map<String, serde_json::Value>,
) -> Result<Manifest, ManifestError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| ManifestError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let write = |name: &str, t: TensorFile| -> Result<PathBuf, ManifestError> {
        let p = dir.join(name);
        write_tensor(&p, &t).map_err(|source| ManifestError::Tensor { path: p, source })?;
        Ok(PathBuf::from(name))
    };
    let to_f32 = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();

    let mut classes = Vec::with_capacity(dataset.classes().len());
    for class in dataset.classes() {
        let b = &class.block;
        let shape = if b.is_spatial() {
            vec![b.len(), b.width(), b.map_height(), b.map_width()]
        } else {
            vec![b.len(), b.width()]
        };
        let t = TensorFile::from_f32(shape, to_f32(b.raw()))
            .map_err(|source| ManifestError::Tensor {
                path: dir.to_path_buf(),
                source,
            })?;
        let features = write(&format!("class_{:04}.ften", class.label), t)?;
        classes.push(ClassEntry {
            label: class.label,
            name: class.name.clone(),
            features,
        });
    }
    let weights = write(
        "weights.ften",
        TensorFile::from_f32(vec![head.classes(), head.width()], to_f32(head.weights()))
            .expect("head dims are consistent"),
    )?;
    let bias = match head.bias() {
        Some(b) => Some(write(
            "bias.ften",
            TensorFile::from_f32(vec![b.len()], to_f32(b)).expect("bias dims are consistent"),
        )?),
        None => None,
    };
    let manifest = Manifest {
        classes,
        weights,
        bias,
        meta,
    };
    write_manifest(dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}
