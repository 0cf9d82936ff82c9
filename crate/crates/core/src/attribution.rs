//! Spatial attribution maps from selected channels of a final convolutional
//! feature map, written as binary PGM images.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error("no channels selected")]
    EmptyIndexSet,
    #[error("channel {index} outside [0, {m})")]
    IndexOutOfRange { index: usize, m: usize },
    #[error("target size {target:?} smaller than source {source_size:?}")]
    TargetTooSmall {
        target: (usize, usize),
        source_size: (usize, usize),
    },
    #[error("feature map has {found} values, expected {expected}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
}

/// What gets subtracted from the selected channels before averaging them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Centering {
    /// Each channel's own spatial mean.
    #[default]
    SpatialMean,
    /// The mean over all `m` channels at each position.
    CrossChannelMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    /// Row-major `target_size.0 × target_size.1` grid in `[0, 1]`.
    pub values: Vec<f64>,
    pub source_size: (usize, usize),
    pub target_size: (usize, usize),
    pub label: Option<usize>,
    pub indices: Vec<usize>,
}

impl AttributionMap {
    pub fn height(&self) -> usize {
        self.target_size.0
    }

    pub fn width(&self) -> usize {
        self.target_size.1
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.width() + c]
    }
}

/// Align-corners sample position of output coordinate `i` in a source axis
/// of length `src`, for an output axis of length `dst`.
fn source_coord(i: usize, src: usize, dst: usize) -> f64 {
    if dst <= 1 || src <= 1 {
        0.0
    } else {
        i as f64 * (src - 1) as f64 / (dst - 1) as f64
    }
}

/// Bilinear resize of a row-major `h × w` grid with corner pixels mapped to
/// corner pixels.
pub fn bilinear_upsample(grid: &[f64], h: usize, w: usize, th: usize, tw: usize) -> Vec<f64> {
    assert_eq!(grid.len(), h * w);
    let mut out = Vec::with_capacity(th * tw);
    for r in 0..th {
        let y = source_coord(r, h, th);
        let y0 = (y.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fy = y - y0 as f64;
        for c in 0..tw {
            let x = source_coord(c, w, tw);
            let x0 = (x.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let fx = x - x0 as f64;
            let top = grid[y0 * w + x0] * (1.0 - fx) + grid[y0 * w + x1] * fx;
            let bottom = grid[y1 * w + x0] * (1.0 - fx) + grid[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Mean of the selected channels after centering, before resizing.
pub fn raw_attribution(
    map: &[f64],
    m: usize,
    h: usize,
    w: usize,
    indices: &[usize],
    centering: Centering,
) -> Result<Vec<f64>, AttributionError> {
    if map.len() != m * h * w {
        return Err(AttributionError::ShapeMismatch {
            expected: m * h * w,
            found: map.len(),
        });
    }
    if indices.is_empty() {
        return Err(AttributionError::EmptyIndexSet);
    }
    if let Some(&index) = indices.iter().find(|&&j| j >= m) {
        return Err(AttributionError::IndexOutOfRange { index, m });
    }
    let area = h * w;
    let channel = |j: usize| &map[j * area..(j + 1) * area];
    let mut raw = vec![0.0; area];
    match centering {
        Centering::SpatialMean => {
            for &j in indices {
                let ch = channel(j);
                let mean = ch.iter().sum::<f64>() / area as f64;
                raw.iter_mut().zip(ch).for_each(|(r, v)| *r += v - mean);
            }
        }
        Centering::CrossChannelMean => {
            let mut across = vec![0.0; area];
            for j in 0..m {
                across.iter_mut().zip(channel(j)).for_each(|(a, v)| *a += v);
            }
            for &j in indices {
                raw.iter_mut()
                    .zip(channel(j).iter().zip(&across))
                    .for_each(|(r, (v, a))| *r += v - a / m as f64);
            }
        }
    }
    let k = indices.len() as f64;
    raw.iter_mut().for_each(|r| *r /= k);
    Ok(raw)
}

/// Maps to `[0, 1]` by min-max scaling; a map whose range is negligible
/// relative to its magnitude becomes all 0.5.
pub fn normalize(values: &mut [f64]) {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let scale = lo.abs().max(hi.abs()).max(f64::MIN_POSITIVE);
    if !(hi - lo > 1e-12 * scale) {
        values.iter_mut().for_each(|v| *v = 0.5);
        return;
    }
    let range = hi - lo;
    values.iter_mut().for_each(|v| *v = ((*v - lo) / range).clamp(0.0, 1.0));
}

/// Attribution of one `m × h × w` feature map over `indices`, resized to
/// `target` and normalized to `[0, 1]`.
pub fn attribution_map(
    map: &[f64],
    m: usize,
    source: (usize, usize),
    indices: &[usize],
    target: (usize, usize),
    centering: Centering,
) -> Result<AttributionMap, AttributionError> {
    let (h, w) = source;
    if target.0 < h || target.1 < w {
        return Err(AttributionError::TargetTooSmall {
            target,
            source_size: source,
        });
    }
    let raw = raw_attribution(map, m, h, w, indices, centering)?;
    let mut values = bilinear_upsample(&raw, h, w, target.0, target.1);
    normalize(&mut values);
    Ok(AttributionMap {
        values,
        source_size: source,
        target_size: target,
        label: None,
        indices: indices.to_vec(),
    })
}

/// Quantizes `v ∈ [0, 1]` to `round(v · 255)`, halves rounding up.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn encode_pgm(map: &AttributionMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.width(), map.height()).into_bytes();
    out.extend(map.values.iter().map(|&v| quantize(v)));
    out
}

pub fn write_pgm(map: &AttributionMap, path: impl AsRef<Path>) -> Result<(), AttributionError> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(map)).map_err(|source| AttributionError::Io {
        path: path.to_path_buf(),
        source,
    })
}
