//! Influential feature extraction.
//!
//! For every class, each instance's features are ranked by ℓ₁ magnitude and
//! the top `k1` indices are pooled into a histogram. The `k2` most frequent
//! indices of that histogram form the class's influential set.
//!
//! Ranking is fully deterministic: equal values order by ascending index, and
//! histogram entries order by count, then summed magnitude, then index.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum InfluenceError {
    #[error("k = {k} exceeds feature width {m}")]
    KTooLarge { k: usize, m: usize },
    #[error("k must be positive")]
    ZeroK,
    #[error("class has no instances")]
    EmptyClass,
    #[error("instance {index} has width {found}, expected {expected}")]
    RaggedInstances {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("histogram supports {support} distinct indices, fewer than k2 = {k2}")]
    InsufficientSupport { support: usize, k2: usize },
    #[error("coverage target {0} outside (0, 1]")]
    BadCoverageTarget(f64),
    #[error("class {label}: {source}")]
    Class {
        label: usize,
        #[source]
        source: Box<InfluenceError>,
    },
}

/// Sums `|x|` over the `h × w` positions of each of the `m` channels in a
/// row-major `m × h × w` map. For pooled input (`h = w = 1`) this returns the
/// values unchanged up to sign.
pub fn channel_l1(map: &[f64], m: usize, h: usize, w: usize) -> Vec<f64> {
    assert_eq!(map.len(), m * h * w, "map size does not match m × h × w");
    let area = h * w;
    map.chunks_exact(area)
        .map(|ch| ch.iter().map(|x| x.abs()).sum())
        .collect()
}

fn by_value_desc(v: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b))
}

/// Indices of the `k` largest components, largest first, equal values by
/// ascending index.
pub fn topk_l1_indices(v: &[f64], k: usize) -> Result<Vec<usize>, InfluenceError> {
    if k > v.len() {
        return Err(InfluenceError::KTooLarge { k, m: v.len() });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let cmp = by_value_desc(v);
    let mut idx: Vec<usize> = (0..v.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, &cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(&cmp);
    Ok(idx)
}

/// Occurrence counts of each feature index across the top-`k1` sets of one
/// class's instances, along with the summed magnitude of those occurrences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexHistogram {
    pub k1: usize,
    pub num_instances: usize,
    pub counts: Vec<u64>,
    pub mass: Vec<f64>,
}

impl IndexHistogram {
    pub fn width(&self) -> usize {
        self.counts.len()
    }

    /// Number of indices with a nonzero count.
    pub fn support(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Every supported index ordered by (count desc, mass desc, index asc).
    /// Selecting `k2` indices takes a prefix of this list.
    pub fn ranked(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.counts.len()).filter(|&j| self.counts[j] > 0).collect();
        idx.sort_unstable_by(|&a, &b| {
            self.counts[b]
                .cmp(&self.counts[a])
                .then(self.mass[b].total_cmp(&self.mass[a]))
                .then(a.cmp(&b))
        });
        idx
    }
}

/// Builds the top-`k1` index histogram of one class.
pub fn aggregate_histogram<R: AsRef<[f64]>>(
    instances: &[R],
    k1: usize,
) -> Result<IndexHistogram, InfluenceError> {
    let first = instances.first().ok_or(InfluenceError::EmptyClass)?;
    let m = first.as_ref().len();
    let mut counts = vec![0u64; m];
    let mut mass = vec![0.0; m];
    for (index, inst) in instances.iter().enumerate() {
        let v = inst.as_ref();
        if v.len() != m {
            return Err(InfluenceError::RaggedInstances {
                index,
                expected: m,
                found: v.len(),
            });
        }
        for j in topk_l1_indices(v, k1)? {
            counts[j] += 1;
            mass[j] += v[j];
        }
    }
    Ok(IndexHistogram {
        k1,
        num_instances: instances.len(),
        counts,
        mass,
    })
}

/// The `k2` most frequent indices of a histogram.
pub fn select_influential(hist: &IndexHistogram, k2: usize) -> Result<Vec<usize>, InfluenceError> {
    let mut ranked = hist.ranked();
    if ranked.len() < k2 {
        return Err(InfluenceError::InsufficientSupport {
            support: ranked.len(),
            k2,
        });
    }
    ranked.truncate(k2);
    Ok(ranked)
}

/// Class label to ordered influential index list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfluenceMap {
    pub k1: usize,
    pub k2: usize,
    pub m: usize,
    pub classes: BTreeMap<usize, Vec<usize>>,
}

#[derive(Debug, Error)]
pub enum InfluenceMapError {
    #[error("class {label}: index list has {len} entries, expected {k2}")]
    WrongLength { label: usize, len: usize, k2: usize },
    #[error("class {label}: index {index} outside [0, {m})")]
    IndexOutOfRange { label: usize, index: usize, m: usize },
    #[error("class {label}: index {index} repeated")]
    Repeated { label: usize, index: usize },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl InfluenceMap {
    pub fn get(&self, label: usize) -> Option<&[usize]> {
        self.classes.get(&label).map(Vec::as_slice)
    }

    pub fn validate(&self) -> Result<(), InfluenceMapError> {
        for (&label, list) in &self.classes {
            if list.len() != self.k2 {
                return Err(InfluenceMapError::WrongLength {
                    label,
                    len: list.len(),
                    k2: self.k2,
                });
            }
            let mut seen = vec![false; self.m];
            for &index in list {
                if index >= self.m {
                    return Err(InfluenceMapError::IndexOutOfRange {
                        label,
                        index,
                        m: self.m,
                    });
                }
                if std::mem::replace(&mut seen[index], true) {
                    return Err(InfluenceMapError::Repeated { label, index });
                }
            }
        }
        Ok(())
    }

    /// Map that selects every index for each of `labels`.
    pub fn full(m: usize, labels: impl IntoIterator<Item = usize>) -> Self {
        Self {
            k1: m,
            k2: m,
            m,
            classes: labels.into_iter().map(|l| (l, (0..m).collect())).collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("influence map serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, InfluenceMapError> {
        let map: Self = serde_json::from_str(text)?;
        map.validate()?;
        Ok(map)
    }
}

fn map_classes<T: Send, F>(classes: &[(usize, Vec<Vec<f64>>)], f: F) -> Vec<(usize, T)>
where
    F: Fn(&[Vec<f64>]) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        classes.par_iter().map(|(l, rows)| (*l, f(rows))).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        classes.iter().map(|(l, rows)| (*l, f(rows))).collect()
    }
}

/// Per-class histograms, in the order of `classes`.
pub fn class_histograms(
    classes: &[(usize, Vec<Vec<f64>>)],
    k1: usize,
) -> Result<Vec<(usize, IndexHistogram)>, InfluenceError> {
    map_classes(classes, |rows| aggregate_histogram(rows, k1))
        .into_iter()
        .map(|(label, r)| {
            r.map(|h| (label, h)).map_err(|e| InfluenceError::Class {
                label,
                source: Box::new(e),
            })
        })
        .collect()
}

/// Runs the full extraction: ℓ₁ ranking, histogram, top-`k2` per class.
///
/// `classes` holds per-class importance rows (see
/// [`crate::FeatureBlock::importance_rows`]).
pub fn build_influence_map(
    classes: &[(usize, Vec<Vec<f64>>)],
    k1: usize,
    k2: usize,
) -> Result<InfluenceMap, InfluenceError> {
    let hists = class_histograms(classes, k1)?;
    influence_map_from_histograms(&hists, k1, k2)
}

pub fn influence_map_from_histograms(
    hists: &[(usize, IndexHistogram)],
    k1: usize,
    k2: usize,
) -> Result<InfluenceMap, InfluenceError> {
    let m = hists.first().map_or(0, |(_, h)| h.width());
    let mut out = BTreeMap::new();
    for (label, h) in hists {
        let sel = select_influential(h, k2).map_err(|e| InfluenceError::Class {
            label: *label,
            source: Box::new(e),
        })?;
        out.insert(*label, sel);
    }
    Ok(InfluenceMap {
        k1,
        k2,
        m,
        classes: out,
    })
}

/// Sorted-descending prefix sums; entry `k` is the mass of the top `k`
/// components and the last entry is the total.
fn sorted_prefix(v: &[f64]) -> Vec<f64> {
    let mut s: Vec<f64> = v.iter().map(|x| x.abs()).collect();
    s.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut prefix = Vec::with_capacity(s.len() + 1);
    let mut acc = 0.0;
    prefix.push(acc);
    for x in s {
        acc += x;
        prefix.push(acc);
    }
    prefix
}

fn coverage_from_prefix(prefix: &[f64], k: usize) -> f64 {
    let total = *prefix.last().unwrap();
    if total == 0.0 {
        1.0
    } else {
        prefix[k] / total
    }
}

/// Share of the total ℓ₁ mass held by the top `k` components. A zero vector
/// has coverage 1.
pub fn coverage_fraction(v: &[f64], k: usize) -> Result<f64, InfluenceError> {
    if k > v.len() {
        return Err(InfluenceError::KTooLarge { k, m: v.len() });
    }
    Ok(coverage_from_prefix(&sorted_prefix(v), k))
}

/// How per-instance coverages are aggregated before comparing to a target.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoverageMode {
    /// Mean coverage over every instance of every class.
    #[default]
    InstanceMean,
    /// Mean over classes of each class's mean instance coverage.
    ClassMean,
}

/// Smallest `k` whose aggregated coverage reaches `target`.
pub fn choose_k1_by_coverage(
    classes: &[(usize, Vec<Vec<f64>>)],
    target: f64,
    mode: CoverageMode,
) -> Result<usize, InfluenceError> {
    if !(target > 0.0 && target <= 1.0) {
        return Err(InfluenceError::BadCoverageTarget(target));
    }
    let m = classes
        .iter()
        .flat_map(|(_, rows)| rows.first())
        .map(Vec::len)
        .next()
        .ok_or(InfluenceError::EmptyClass)?;

    // per class: sum over instances of coverage at each k
    let mut class_sums: Vec<(usize, Vec<f64>)> = Vec::with_capacity(classes.len());
    for (_, rows) in classes {
        let mut sums = vec![0.0; m + 1];
        for (index, row) in rows.iter().enumerate() {
            if row.len() != m {
                return Err(InfluenceError::RaggedInstances {
                    index,
                    expected: m,
                    found: row.len(),
                });
            }
            let prefix = sorted_prefix(row);
            for (k, s) in sums.iter_mut().enumerate() {
                *s += coverage_from_prefix(&prefix, k);
            }
        }
        class_sums.push((rows.len(), sums));
    }

    let aggregate = |k: usize| -> f64 {
        match mode {
            CoverageMode::InstanceMean => {
                let n: usize = class_sums.iter().map(|(n, _)| n).sum();
                class_sums.iter().map(|(_, s)| s[k]).sum::<f64>() / n as f64
            }
            CoverageMode::ClassMean => {
                let nonempty: Vec<_> = class_sums.iter().filter(|(n, _)| *n > 0).collect();
                nonempty.iter().map(|(n, s)| s[k] / *n as f64).sum::<f64>()
                    / nonempty.len() as f64
            }
        }
    };
    Ok((1..=m).find(|&k| aggregate(k) >= target).unwrap_or(m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_l1_sums() {
        assert_eq!(channel_l1(&[0.0; 4], 1, 2, 2), vec![0.0]);
        assert_eq!(channel_l1(&[1.0, 2.0, 3.0, 4.0], 1, 2, 2), vec![10.0]);
        assert_eq!(channel_l1(&[1.5, 0.0, 2.0], 3, 1, 1), vec![1.5, 0.0, 2.0]);
    }

    #[test]
    fn topk_basics() {
        assert_eq!(topk_l1_indices(&[0.0, 0.0, 0.0, 7.0], 1).unwrap(), vec![3]);
        assert_eq!(topk_l1_indices(&[1.0, 1.0, 0.0], 1).unwrap(), vec![0]);
        assert_eq!(topk_l1_indices(&[1.0, 3.0, 3.0, 2.0], 4).unwrap(), vec![1, 2, 3, 0]);
        assert_eq!(
            topk_l1_indices(&[1.0], 2),
            Err(InfluenceError::KTooLarge { k: 2, m: 1 })
        );
    }

    #[test]
    fn zeros_fill_by_index() {
        assert_eq!(topk_l1_indices(&[0.0, 0.0, 5.0, 0.0], 3).unwrap(), vec![2, 0, 1]);
    }

    #[test]
    fn histogram_single_instance() {
        let h = aggregate_histogram(&[vec![5.0, 1.0, 3.0]], 2).unwrap();
        assert_eq!(h.counts, vec![1, 0, 1]);
        assert_eq!(h.mass, vec![5.0, 0.0, 3.0]);
        assert_eq!(h.total(), 2);
    }

    #[test]
    fn histogram_doubles_for_duplicates() {
        let one = aggregate_histogram(&[vec![5.0, 1.0, 3.0]], 2).unwrap();
        let two = aggregate_histogram(&[vec![5.0, 1.0, 3.0], vec![5.0, 1.0, 3.0]], 2).unwrap();
        let doubled: Vec<u64> = one.counts.iter().map(|c| c * 2).collect();
        assert_eq!(two.counts, doubled);
    }

    #[test]
    fn histogram_errors() {
        let empty: Vec<Vec<f64>> = vec![];
        assert_eq!(aggregate_histogram(&empty, 1), Err(InfluenceError::EmptyClass));
        assert!(matches!(
            aggregate_histogram(&[vec![1.0, 2.0], vec![1.0]], 1),
            Err(InfluenceError::RaggedInstances { index: 1, .. })
        ));
    }

    fn hist(counts: &[(usize, u64)], mass: &[(usize, f64)], m: usize) -> IndexHistogram {
        let mut h = IndexHistogram {
            k1: 1,
            num_instances: 1,
            counts: vec![0; m],
            mass: vec![0.0; m],
        };
        counts.iter().for_each(|&(j, c)| h.counts[j] = c);
        mass.iter().for_each(|&(j, x)| h.mass[j] = x);
        h
    }

    #[test]
    fn select_by_count() {
        let h = hist(&[(3, 10), (1, 5), (7, 2), (9, 2)], &[], 10);
        assert_eq!(select_influential(&h, 2).unwrap(), vec![3, 1]);
    }

    #[test]
    fn select_mass_tiebreak() {
        let h = hist(&[(4, 3), (6, 3)], &[(4, 1.0), (6, 9.0)], 8);
        assert_eq!(select_influential(&h, 1).unwrap(), vec![6]);
    }

    #[test]
    fn select_index_tiebreak() {
        let h = hist(&[(4, 3), (2, 3)], &[(4, 1.0), (2, 1.0)], 8);
        assert_eq!(select_influential(&h, 2).unwrap(), vec![2, 4]);
    }

    #[test]
    fn select_insufficient_support() {
        let h = hist(&[(0, 1)], &[], 4);
        assert_eq!(
            select_influential(&h, 2),
            Err(InfluenceError::InsufficientSupport { support: 1, k2: 2 })
        );
    }

    #[test]
    fn full_width_selects_everything() {
        let classes = vec![
            (0, vec![vec![1.0, 0.0, 2.0], vec![0.0, 0.0, 1.0]]),
            (1, vec![vec![0.0, 4.0, 0.0]]),
        ];
        let map = build_influence_map(&classes, 3, 3).unwrap();
        for list in map.classes.values() {
            let mut s = list.clone();
            s.sort();
            assert_eq!(s, vec![0, 1, 2]);
        }
    }

    #[test]
    fn class_errors_carry_label() {
        let classes = vec![(0, vec![vec![1.0, 2.0]]), (5, vec![])];
        match build_influence_map(&classes, 1, 1) {
            Err(InfluenceError::Class { label: 5, source }) => {
                assert_eq!(*source, InfluenceError::EmptyClass)
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn coverage_examples() {
        assert!((coverage_fraction(&[9.0, 1.0], 1).unwrap() - 0.9).abs() < 1e-15);
        assert_eq!(coverage_fraction(&[0.3, 0.1, 0.7], 3).unwrap(), 1.0);
        assert_eq!(coverage_fraction(&[0.0, 0.0], 0).unwrap(), 1.0);
        assert!(coverage_fraction(&[1.0], 2).is_err());
    }

    #[test]
    fn k1_by_coverage_examples() {
        let one_hot = vec![(0, vec![vec![0.0, 3.0, 0.0], vec![1.0, 0.0, 0.0]])];
        for t in [0.1, 0.5, 1.0] {
            assert_eq!(choose_k1_by_coverage(&one_hot, t, CoverageMode::InstanceMean).unwrap(), 1);
        }
        let uniform = vec![(0, vec![vec![1.0; 10]; 3])];
        assert_eq!(
            choose_k1_by_coverage(&uniform, 0.5, CoverageMode::InstanceMean).unwrap(),
            5
        );
        assert!(choose_k1_by_coverage(&uniform, 0.0, CoverageMode::InstanceMean).is_err());
        assert!(choose_k1_by_coverage(&uniform, 1.5, CoverageMode::ClassMean).is_err());
    }

    #[test]
    fn class_mean_weights_classes_equally() {
        // class 0: 3 one-hot instances (coverage 1 at k=1),
        // class 1: 1 uniform instance of width 4 (coverage 0.25 at k=1)
        let classes = vec![
            (0, vec![vec![1.0, 0.0, 0.0, 0.0]; 3]),
            (1, vec![vec![1.0; 4]]),
        ];
        // instance mean at k=1: (3 + 0.25) / 4 = 0.8125; class mean: 0.625
        assert_eq!(choose_k1_by_coverage(&classes, 0.8, CoverageMode::InstanceMean).unwrap(), 1);
        assert_eq!(choose_k1_by_coverage(&classes, 0.8, CoverageMode::ClassMean).unwrap(), 3);
    }

    #[test]
    fn influence_map_json_shape() {
        let map = InfluenceMap {
            k1: 2,
            k2: 1,
            m: 4,
            classes: [(0, vec![3]), (10, vec![1]), (2, vec![0])].into_iter().collect(),
        };
        let json = map.to_json();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["classes"]["10"], serde_json::json!([1]));
        assert_eq!(InfluenceMap::from_json(&json).unwrap(), map);
    }

    #[test]
    fn influence_map_validation() {
        let bad = r#"{"k1":1,"k2":2,"m":3,"classes":{"0":[1,1]}}"#;
        assert!(matches!(
            InfluenceMap::from_json(bad),
            Err(InfluenceMapError::Repeated { label: 0, index: 1 })
        ));
        let bad = r#"{"k1":1,"k2":1,"m":3,"classes":{"0":[3]}}"#;
        assert!(matches!(
            InfluenceMap::from_json(bad),
            Err(InfluenceMapError::IndexOutOfRange { .. })
        ));
    }
}
