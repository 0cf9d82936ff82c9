//! Dense and decomposed classifier heads.
//!
//! A [`ClassifierHead`] is the final fully connected layer, `c × m` weights
//! plus an optional bias. A [`DecomposedHead`] keeps, for each class, only the
//! weights at that class's influential indices, so class `i`'s logit is a
//! `k`-term dot product that never touches the other classes' features.
//!
//! All dot products accumulate in f64 in ascending feature-index order. With
//! every index selected, decomposed logits are therefore bit-identical to the
//! dense ones.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::influence::InfluenceMap;
use crate::tensorio::{read_tensor, write_tensor, TensorError, TensorFile};

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("influence map has no entry for class {0}")]
    MissingClass(usize),
    #[error("non-finite input")]
    NonFiniteInput,
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(z: &[f64]) -> Result<Vec<f64>, HeadError> {
    if z.iter().any(|x| !x.is_finite()) {
        return Err(HeadError::NonFiniteInput);
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = z.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    Ok(exp.into_iter().map(|e| e / sum).collect())
}

/// `log(Σ exp z)`, stable for large magnitudes.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + z.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: usize,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl Prediction {
    fn from_logits(logits: Vec<f64>) -> Result<Self, HeadError> {
        let probabilities = softmax(&logits)?;
        Ok(Self {
            label: argmax(&logits),
            logits,
            probabilities,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    c: usize,
    m: usize,
    weights: Vec<f64>,
    bias: Option<Vec<f64>>,
}

impl ClassifierHead {
    /// `weights` is row-major `c × m`; row `i` produces the logit of label `i`.
    pub fn new(c: usize, m: usize, weights: Vec<f64>, bias: Option<Vec<f64>>) -> Result<Self, HeadError> {
        if c == 0 || m == 0 || weights.len() != c * m {
            return Err(HeadError::DimMismatch(format!(
                "{} weights for a {c} × {m} head",
                weights.len()
            )));
        }
        if let Some(b) = &bias {
            if b.len() != c {
                return Err(HeadError::DimMismatch(format!(
                    "bias has {} entries for {c} classes",
                    b.len()
                )));
            }
        }
        Ok(Self { c, m, weights, bias })
    }

    pub fn classes(&self) -> usize {
        self.c
    }

    pub fn width(&self) -> usize {
        self.m
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.m..(i + 1) * self.m]
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    fn check_input(&self, x: &[f64]) -> Result<(), HeadError> {
        if x.len() != self.m {
            return Err(HeadError::DimMismatch(format!(
                "input has {} features, head expects {}",
                x.len(),
                self.m
            )));
        }
        Ok(())
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>, HeadError> {
        self.check_input(x)?;
        Ok((0..self.c)
            .map(|i| {
                let mut acc = 0.0;
                for (w, v) in self.row(i).iter().zip(x) {
                    acc += w * v;
                }
                acc + self.bias.as_ref().map_or(0.0, |b| b[i])
            })
            .collect())
    }

    pub fn predict_label(&self, x: &[f64]) -> Result<usize, HeadError> {
        Ok(argmax(&self.logits(x)?))
    }

    pub fn predict(&self, x: &[f64]) -> Result<Prediction, HeadError> {
        Prediction::from_logits(self.logits(x)?)
    }
}

/// One class's subspace: selected indices in selection order and the
/// matching weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSubspace {
    indices: Vec<usize>,
    weights: Vec<f64>,
    // positions into `indices`, sorted by feature index
    order: Vec<usize>,
}

impl ClassSubspace {
    fn new(indices: Vec<usize>, weights: Vec<f64>) -> Self {
        let mut order: Vec<usize> = (0..indices.len()).collect();
        order.sort_by_key(|&t| indices[t]);
        Self {
            indices,
            weights,
            order,
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Dot product with the selected components of `x`, in ascending
    /// feature-index order.
    pub fn dot(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for &t in &self.order {
            acc += self.weights[t] * x[self.indices[t]];
        }
        acc
    }
}

/// Per-class truncations of a dense head.
#[derive(Debug, Clone, PartialEq)]
pub struct DecomposedHead {
    m: usize,
    k2: usize,
    classes: Vec<ClassSubspace>,
    bias: Option<Vec<f64>>,
}

/// Truncates every class row of `head` to its indices in `imap`.
pub fn decompose(head: &ClassifierHead, imap: &InfluenceMap) -> Result<DecomposedHead, HeadError> {
    if imap.m != head.m {
        return Err(HeadError::DimMismatch(format!(
            "influence map width {} vs head width {}",
            imap.m, head.m
        )));
    }
    let mut parts = Vec::with_capacity(head.c);
    for i in 0..head.c {
        let indices = imap.get(i).ok_or(HeadError::MissingClass(i))?.to_vec();
        let row = head.row(i);
        let weights = indices.iter().map(|&j| row[j]).collect();
        parts.push((indices, weights));
    }
    let mut d = DecomposedHead::from_parts(head.m, parts, head.bias.clone())?;
    d.k2 = imap.k2;
    Ok(d)
}

impl DecomposedHead {
    pub fn from_parts(
        m: usize,
        parts: Vec<(Vec<usize>, Vec<f64>)>,
        bias: Option<Vec<f64>>,
    ) -> Result<Self, HeadError> {
        if parts.is_empty() {
            return Err(HeadError::DimMismatch("no classes".into()));
        }
        if let Some(b) = &bias {
            if b.len() != parts.len() {
                return Err(HeadError::DimMismatch(format!(
                    "bias has {} entries for {} classes",
                    b.len(),
                    parts.len()
                )));
            }
        }
        let mut classes = Vec::with_capacity(parts.len());
        for (i, (indices, weights)) in parts.into_iter().enumerate() {
            if indices.len() != weights.len() {
                return Err(HeadError::DimMismatch(format!(
                    "class {i}: {} indices but {} weights",
                    indices.len(),
                    weights.len()
                )));
            }
            if let Some(&j) = indices.iter().find(|&&j| j >= m) {
                return Err(HeadError::DimMismatch(format!(
                    "class {i}: index {j} outside [0, {m})"
                )));
            }
            classes.push(ClassSubspace::new(indices, weights));
        }
        let k2 = classes.iter().map(ClassSubspace::len).max().unwrap_or(0);
        Ok(Self {
            m,
            k2,
            classes,
            bias,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes.len()
    }

    pub fn width(&self) -> usize {
        self.m
    }

    /// Selection width the head was built with.
    pub fn k2(&self) -> usize {
        self.k2
    }

    pub fn subspace(&self, i: usize) -> &ClassSubspace {
        &self.classes[i]
    }

    pub fn subspaces(&self) -> &[ClassSubspace] {
        &self.classes
    }

    pub fn subspace_mut(&mut self, i: usize) -> &mut ClassSubspace {
        &mut self.classes[i]
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    pub fn bias_mut(&mut self) -> Option<&mut [f64]> {
        self.bias.as_deref_mut()
    }

    pub fn subspace_sizes(&self) -> Vec<usize> {
        self.classes.iter().map(ClassSubspace::len).collect()
    }

    /// Logit of class `i` alone.
    pub fn class_logit(&self, i: usize, x: &[f64]) -> f64 {
        self.classes[i].dot(x) + self.bias.as_ref().map_or(0.0, |b| b[i])
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>, HeadError> {
        if x.len() != self.m {
            return Err(HeadError::DimMismatch(format!(
                "input has {} features, head expects {}",
                x.len(),
                self.m
            )));
        }
        Ok((0..self.classes.len()).map(|i| self.class_logit(i, x)).collect())
    }

    pub fn predict_label(&self, x: &[f64]) -> Result<usize, HeadError> {
        Ok(argmax(&self.logits(x)?))
    }

    /// Prediction with softmax over the truncated logits.
    pub fn predict(&self, x: &[f64]) -> Result<Prediction, HeadError> {
        Prediction::from_logits(self.logits(x)?)
    }

    /// Writes `head.json`, `head_weights.ften` (all class weights
    /// concatenated in class order) and, with a bias, `head_bias.ften`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), HeadError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|source| HeadError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let meta = DecomposedMeta {
            m: self.m,
            c: self.classes.len(),
            k2: self.k2,
            classes: self
                .classes
                .iter()
                .enumerate()
                .map(|(label, s)| ClassMeta {
                    label,
                    indices: s.indices.clone(),
                })
                .collect(),
        };
        let path = dir.join(DECOMPOSED_META);
        let mut text = serde_json::to_string_pretty(&meta)?;
        text.push('\n');
        fs::write(&path, text).map_err(|source| HeadError::Io { path, source })?;

        let flat: Vec<f64> = self.classes.iter().flat_map(|s| s.weights.iter().copied()).collect();
        let n = flat.len().max(1);
        let flat = if flat.is_empty() { vec![0.0] } else { flat };
        write_tensor(dir.join(DECOMPOSED_WEIGHTS), &TensorFile::from_f64(vec![n], flat)?)?;
        if let Some(b) = &self.bias {
            write_tensor(dir.join(DECOMPOSED_BIAS), &TensorFile::from_f64(vec![b.len()], b.clone())?)?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, HeadError> {
        let dir = dir.as_ref();
        let path = dir.join(DECOMPOSED_META);
        let text = fs::read_to_string(&path).map_err(|source| HeadError::Io { path, source })?;
        let mut meta: DecomposedMeta = serde_json::from_str(&text)?;
        meta.classes.sort_by_key(|c| c.label);
        if meta.classes.len() != meta.c || meta.classes.iter().enumerate().any(|(i, c)| c.label != i) {
            return Err(HeadError::DimMismatch("class labels must be 0..c".into()));
        }
        let flat = read_tensor(dir.join(DECOMPOSED_WEIGHTS))?.to_f64_vec();
        let total: usize = meta.classes.iter().map(|c| c.indices.len()).sum();
        if flat.len() != total.max(1) {
            return Err(HeadError::DimMismatch(format!(
                "{} stored weights for {total} selected indices",
                flat.len()
            )));
        }
        let bias_path = dir.join(DECOMPOSED_BIAS);
        let bias = if bias_path.exists() {
            Some(read_tensor(bias_path)?.to_f64_vec())
        } else {
            None
        };
        let mut offset = 0;
        let parts = meta
            .classes
            .into_iter()
            .map(|c| {
                let w = flat[offset..offset + c.indices.len()].to_vec();
                offset += c.indices.len();
                (c.indices, w)
            })
            .collect();
        let mut head = Self::from_parts(meta.m, parts, bias)?;
        head.k2 = meta.k2;
        Ok(head)
    }
}

pub const DECOMPOSED_META: &str = "head.json";
pub const DECOMPOSED_WEIGHTS: &str = "head_weights.ften";
pub const DECOMPOSED_BIAS: &str = "head_bias.ften";

#[derive(Debug, Serialize, Deserialize)]
struct ClassMeta {
    label: usize,
    indices: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DecomposedMeta {
    m: usize,
    c: usize,
    k2: usize,
    classes: Vec<ClassMeta>,
}

/// Multiply counts of the dense and decomposed final layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub full_mults: usize,
    pub decomposed_mults: usize,
    pub ratio: f64,
}

pub fn cost_report(m: usize, c: usize, subspace_sizes: &[usize]) -> CostReport {
    let full_mults = m * c;
    let decomposed_mults = subspace_sizes.iter().sum();
    CostReport {
        full_mults,
        decomposed_mults,
        ratio: decomposed_mults as f64 / full_mults as f64,
    }
}
