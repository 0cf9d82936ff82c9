//! In-memory feature collections.

use crate::influence::channel_l1;

/// `n` feature instances of width `m`, each either pooled (`h = w = 1`) or a
/// spatial `m × h × w` map, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBlock {
    n: usize,
    m: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl FeatureBlock {
    pub fn new(n: usize, m: usize, h: usize, w: usize, data: Vec<f64>) -> Option<Self> {
        if m == 0 || h == 0 || w == 0 || data.len() != n * m * h * w {
            return None;
        }
        Some(Self { n, m, h, w, data })
    }

    pub fn pooled(rows: &[Vec<f64>], m: usize) -> Option<Self> {
        if rows.iter().any(|r| r.len() != m) {
            return None;
        }
        Self::new(rows.len(), m, 1, 1, rows.concat())
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Feature width `m` (channel count).
    pub fn width(&self) -> usize {
        self.m
    }

    pub fn map_height(&self) -> usize {
        self.h
    }

    pub fn map_width(&self) -> usize {
        self.w
    }

    pub fn is_spatial(&self) -> bool {
        self.h * self.w > 1
    }

    pub fn raw(&self) -> &[f64] {
        &self.data
    }

    /// The `m × h × w` values of instance `i`.
    pub fn instance(&self, i: usize) -> &[f64] {
        let stride = self.m * self.h * self.w;
        &self.data[i * stride..(i + 1) * stride]
    }

    /// Per-channel ℓ₁ magnitudes of every instance; the ranking input.
    pub fn importance_rows(&self) -> Vec<Vec<f64>> {
        (0..self.n)
            .map(|i| channel_l1(self.instance(i), self.m, self.h, self.w))
            .collect()
    }

    /// Spatially average-pooled vectors of every instance; the head input.
    pub fn pooled_rows(&self) -> Vec<Vec<f64>> {
        let area = (self.h * self.w) as f64;
        (0..self.n)
            .map(|i| {
                let mut v = channel_l1(self.instance(i), self.m, self.h, self.w);
                if self.is_spatial() {
                    v.iter_mut().for_each(|x| *x /= area);
                }
                v
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassFeatures {
    pub label: usize,
    pub name: String,
    pub block: FeatureBlock,
}

/// Per-class feature blocks sharing one width, ordered by label.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    m: usize,
    classes: Vec<ClassFeatures>,
}

impl Dataset {
    pub fn new(m: usize, mut classes: Vec<ClassFeatures>) -> Result<Self, String> {
        classes.sort_by_key(|c| c.label);
        for w in classes.windows(2) {
            if w[0].label == w[1].label {
                return Err(format!("duplicate class label {}", w[0].label));
            }
        }
        if let Some(c) = classes.iter().find(|c| c.block.width() != m) {
            return Err(format!(
                "class {} has width {}, expected {m}",
                c.label,
                c.block.width()
            ));
        }
        Ok(Self { m, classes })
    }

    pub fn width(&self) -> usize {
        self.m
    }

    pub fn classes(&self) -> &[ClassFeatures] {
        &self.classes
    }

    pub fn class(&self, label: usize) -> Option<&ClassFeatures> {
        self.classes.iter().find(|c| c.label == label)
    }

    pub fn num_instances(&self) -> usize {
        self.classes.iter().map(|c| c.block.len()).sum()
    }

    /// `(label, importance rows)` per class, the input of influence extraction.
    pub fn importance_by_class(&self) -> Vec<(usize, Vec<Vec<f64>>)> {
        self.classes
            .iter()
            .map(|c| (c.label, c.block.importance_rows()))
            .collect()
    }

    /// Flattens to pooled rows with labels, in class order.
    pub fn labeled(&self) -> LabeledSet {
        let mut rows = Vec::with_capacity(self.num_instances());
        let mut labels = Vec::with_capacity(self.num_instances());
        for c in &self.classes {
            for row in c.block.pooled_rows() {
                rows.push(row);
                labels.push(c.label);
            }
        }
        LabeledSet {
            m: self.m,
            rows,
            labels,
        }
    }
}

/// Pooled feature vectors with their true labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    m: usize,
    rows: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(m: usize, rows: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self, String> {
        if rows.len() != labels.len() {
            return Err(format!("{} rows but {} labels", rows.len(), labels.len()));
        }
        if let Some(i) = rows.iter().position(|r| r.len() != m) {
            return Err(format!("row {i} has width {}, expected {m}", rows[i].len()));
        }
        Ok(Self { m, rows, labels })
    }

    pub fn width(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], usize)> {
        self.rows.iter().map(Vec::as_slice).zip(self.labels.iter().copied())
    }

    /// Subset by instance indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            m: self.m,
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Per-dimension mean and population standard deviation.
    pub fn moments(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.rows.len().max(1) as f64;
        let mut mean = vec![0.0; self.m];
        for row in &self.rows {
            mean.iter_mut().zip(row).for_each(|(a, x)| *a += x);
        }
        mean.iter_mut().for_each(|a| *a /= n);
        let mut var = vec![0.0; self.m];
        for row in &self.rows {
            var.iter_mut()
                .zip(row.iter().zip(&mean))
                .for_each(|(v, (x, mu))| *v += (x - mu) * (x - mu));
        }
        let std = var.into_iter().map(|v| (v / n).sqrt()).collect();
        (mean, std)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spatial_block_pools_by_mean() {
        // one instance, two channels of 2×2
        let b = FeatureBlock::new(1, 2, 2, 2, vec![1., 2., 3., 4., 0., 0., 0., 8.]).unwrap();
        assert_eq!(b.importance_rows(), vec![vec![10.0, 8.0]]);
        assert_eq!(b.pooled_rows(), vec![vec![2.5, 2.0]]);
    }

    #[test]
    fn pooled_block_is_identity() {
        let rows = vec![vec![1.0, 0.5], vec![0.0, 3.0]];
        let b = FeatureBlock::pooled(&rows, 2).unwrap();
        assert_eq!(b.pooled_rows(), rows);
        assert_eq!(b.importance_rows(), rows);
    }

    #[test]
    fn dataset_rejects_duplicates() {
        let b = FeatureBlock::pooled(&[vec![1.0]], 1).unwrap();
        let mk = |label| ClassFeatures {
            label,
            name: String::new(),
            block: b.clone(),
        };
        assert!(Dataset::new(1, vec![mk(0), mk(0)]).is_err());
        assert!(Dataset::new(1, vec![mk(1), mk(0)]).is_ok());
    }

    #[test]
    fn moments_of_constant_column() {
        let s = LabeledSet::new(2, vec![vec![1.0, 0.0], vec![1.0, 2.0]], vec![0, 1]).unwrap();
        let (mean, std) = s.moments();
        assert_eq!(mean, vec![1.0, 1.0]);
        assert_eq!(std, vec![0.0, 1.0]);
    }
}
