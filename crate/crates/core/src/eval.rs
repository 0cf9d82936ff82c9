//! Accuracy of dense and decomposed heads, `(k1, k2)` sweeps, noise
//! ablations and overlap between class subspaces.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::LabeledSet;
use crate::head::{decompose, ClassifierHead, DecomposedHead, HeadError};
use crate::influence::{class_histograms, InfluenceError, InfluenceMap};
use crate::par::map_range;
use crate::planted::complement_sample;
use crate::rng::{stream_rng, streams};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("label {label} outside the head's {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("invalid grid: {0}")]
    BadGrid(String),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Influence(#[from] InfluenceError),
}

/// `A_d / A_f`, undefined when the dense head never predicts correctly.
pub fn relative_accuracy(decomposed: f64, full: f64) -> Option<f64> {
    (full > 0.0).then(|| decomposed / full)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "A_f")]
    pub full_accuracy: f64,
    #[serde(rename = "A_d")]
    pub decomposed_accuracy: f64,
    /// `None` when `A_f` is 0.
    #[serde(rename = "r_A")]
    pub relative_accuracy: Option<f64>,
    /// Decomposed-head accuracy per class label; `None` for absent labels.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub per_class_full_accuracy: Vec<Option<f64>>,
    pub n_instances: usize,
    pub k1: Option<usize>,
    pub k2: usize,
    pub seed: Option<u64>,
}

fn check_labels(data: &LabeledSet, classes: usize, m: usize) -> Result<(), EvalError> {
    if data.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    if data.width() != m {
        return Err(EvalError::DimMismatch(format!(
            "data width {} vs head width {m}",
            data.width()
        )));
    }
    if let Some(&label) = data.labels().iter().find(|&&l| l >= classes) {
        return Err(EvalError::LabelOutOfRange { label, classes });
    }
    Ok(())
}

fn per_class(hits: &[(usize, bool)], classes: usize) -> Vec<Option<f64>> {
    let mut total = vec![0usize; classes];
    let mut right = vec![0usize; classes];
    for &(y, ok) in hits {
        total[y] += 1;
        right[y] += ok as usize;
    }
    total
        .iter()
        .zip(&right)
        .map(|(&t, &r)| (t > 0).then(|| r as f64 / t as f64))
        .collect()
}

fn fraction(hits: &[(usize, bool)]) -> f64 {
    hits.iter().filter(|h| h.1).count() as f64 / hits.len() as f64
}

/// Top-1 accuracy of the dense and the decomposed head on the same data.
pub fn evaluate(
    data: &LabeledSet,
    head: &ClassifierHead,
    dhead: &DecomposedHead,
) -> Result<EvalReport, EvalError> {
    let c = head.classes();
    check_labels(data, c, head.width())?;
    if dhead.classes() != c || dhead.width() != head.width() {
        return Err(EvalError::DimMismatch(format!(
            "decomposed head is {} × {}, dense head {c} × {}",
            dhead.classes(),
            dhead.width(),
            head.width()
        )));
    }
    let rows = data.rows();
    let labels = data.labels();
    let outcomes = map_range(data.len(), |i| {
        let x = &rows[i];
        let y = labels[i];
        let full = head.predict_label(x).map(|p| p == y);
        let dec = dhead.predict_label(x).map(|p| p == y);
        full.and_then(|f| dec.map(|d| (f, d)))
    });
    let mut full = Vec::with_capacity(outcomes.len());
    let mut dec = Vec::with_capacity(outcomes.len());
    for (o, &y) in outcomes.into_iter().zip(labels) {
        let (f, d) = o?;
        full.push((y, f));
        dec.push((y, d));
    }
    let a_f = fraction(&full);
    let a_d = fraction(&dec);
    Ok(EvalReport {
        full_accuracy: a_f,
        decomposed_accuracy: a_d,
        relative_accuracy: relative_accuracy(a_d, a_f),
        per_class_accuracy: per_class(&dec, c),
        per_class_full_accuracy: per_class(&full, c),
        n_instances: data.len(),
        k1: None,
        k2: dhead.k2(),
        seed: None,
    })
}

/// Top-1 accuracy of the dense head alone.
pub fn full_accuracy(data: &LabeledSet, head: &ClassifierHead) -> Result<f64, EvalError> {
    check_labels(data, head.classes(), head.width())?;
    let rows = data.rows();
    let labels = data.labels();
    let hits = map_range(data.len(), |i| head.predict_label(&rows[i]).map(|p| p == labels[i]));
    let mut right = 0usize;
    for h in hits {
        right += h? as usize;
    }
    Ok(right as f64 / data.len() as f64)
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("-".to_owned(), |x| format!("{x:.6}"));
        let mut rows = vec![
            vec!["k1".to_owned(), self.k1.map_or("-".into(), |k| k.to_string())],
            vec!["k2".to_owned(), self.k2.to_string()],
            vec!["instances".to_owned(), self.n_instances.to_string()],
            vec!["A_d".to_owned(), fmt(Some(self.decomposed_accuracy))],
            vec!["A_f".to_owned(), fmt(Some(self.full_accuracy))],
            vec!["r_A".to_owned(), fmt(self.relative_accuracy)],
        ];
        let mut out = render_table(&["metric", "value"], &rows);
        rows.clear();
        for (label, (d, f)) in self
            .per_class_accuracy
            .iter()
            .zip(&self.per_class_full_accuracy)
            .enumerate()
        {
            rows.push(vec![label.to_string(), fmt(*d), fmt(*f)]);
        }
        out.push('\n');
        out.push_str(&render_table(&["class", "A_d", "A_f"], &rows));
        out
    }
}

/// Left-aligned text table with two-space column gaps.
pub fn render_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let mut line = |cells: &mut dyn Iterator<Item = &str>| {
        let mut s = String::new();
        for (i, (cell, w)) in cells.zip(&widths).enumerate() {
            if i > 0 {
                s.push_str("  ");
            }
            let _ = write!(s, "{cell:<w$}");
        }
        out.push_str(s.trim_end());
        out.push('\n');
    };
    line(&mut header.iter().copied());
    for row in rows {
        line(&mut row.iter().map(String::as_str));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum CellOutcome {
    Evaluated { report: EvalReport },
    Skipped { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub k1: usize,
    pub k2: usize,
    #[serde(flatten)]
    pub outcome: CellOutcome,
}

impl SweepCell {
    pub fn report(&self) -> Option<&EvalReport> {
        match &self.outcome {
            CellOutcome::Evaluated { report } => Some(report),
            CellOutcome::Skipped { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub k1_grid: Vec<usize>,
    pub k2_grid: Vec<usize>,
    /// Row-major: all `k2` values for the first `k1`, then the next `k1`.
    pub cells: Vec<SweepCell>,
}

fn check_grid(name: &str, grid: &[usize], m: usize) -> Result<(), EvalError> {
    if grid.is_empty() {
        return Err(EvalError::BadGrid(format!("{name} grid is empty")));
    }
    if let Some(&k) = grid.iter().find(|&&k| k == 0 || k > m) {
        return Err(EvalError::BadGrid(format!("{name} = {k} outside [1, {m}]")));
    }
    Ok(())
}

/// Evaluates every `(k1, k2)` pair. Influence sets are extracted from
/// `train` (per-class importance rows) and accuracy is measured on `data`.
/// A cell is skipped when some class's histogram supports fewer than `k2`
/// indices.
pub fn sweep(
    train: &[(usize, Vec<Vec<f64>>)],
    data: &LabeledSet,
    head: &ClassifierHead,
    k1_grid: &[usize],
    k2_grid: &[usize],
) -> Result<SweepGrid, EvalError> {
    let m = head.width();
    check_grid("k1", k1_grid, m)?;
    check_grid("k2", k2_grid, m)?;
    let mut cells = Vec::with_capacity(k1_grid.len() * k2_grid.len());
    for &k1 in k1_grid {
        let hists = class_histograms(train, k1)?;
        let ranked: Vec<(usize, Vec<usize>)> =
            hists.iter().map(|(l, h)| (*l, h.ranked())).collect();
        for &k2 in k2_grid {
            if let Some((label, r)) = ranked.iter().find(|(_, r)| r.len() < k2) {
                cells.push(SweepCell {
                    k1,
                    k2,
                    outcome: CellOutcome::Skipped {
                        reason: format!(
                            "class {label} histogram supports {} indices, fewer than k2",
                            r.len()
                        ),
                    },
                });
                continue;
            }
            let imap = InfluenceMap {
                k1,
                k2,
                m,
                classes: ranked.iter().map(|(l, r)| (*l, r[..k2].to_vec())).collect(),
            };
            let dhead = decompose(head, &imap)?;
            let mut report = evaluate(data, head, &dhead)?;
            report.k1 = Some(k1);
            cells.push(SweepCell {
                k1,
                k2,
                outcome: CellOutcome::Evaluated { report },
            });
        }
    }
    Ok(SweepGrid {
        k1_grid: k1_grid.to_vec(),
        k2_grid: k2_grid.to_vec(),
        cells,
    })
}

impl SweepGrid {
    pub fn cell(&self, k1: usize, k2: usize) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.k1 == k1 && c.k2 == k2)
    }

    /// `k1,k2,A_d,A_f,r_A`, one row per cell; skipped cells have empty
    /// metric fields.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k1,k2,A_d,A_f,r_A\n");
        for cell in &self.cells {
            match cell.report() {
                Some(r) => {
                    let ra = r.relative_accuracy.map_or(String::new(), |x| x.to_string());
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{}",
                        cell.k1, cell.k2, r.decomposed_accuracy, r.full_accuracy, ra
                    );
                }
                None => {
                    let _ = writeln!(out, "{},{},,,", cell.k1, cell.k2);
                }
            }
        }
        out
    }

    /// Matrix of `r_A` with `k1` down the rows and `k2` across.
    pub fn to_table(&self) -> String {
        let mut header = vec!["k1\\k2".to_owned()];
        header.extend(self.k2_grid.iter().map(|k| k.to_string()));
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        let rows: Vec<Vec<String>> = self
            .cells
            .chunks(self.k2_grid.len())
            .zip(&self.k1_grid)
            .map(|(row, k1)| {
                let mut r = vec![k1.to_string()];
                r.extend(row.iter().map(|c| match c.report() {
                    Some(rep) => rep
                        .relative_accuracy
                        .map_or("-".to_owned(), |x| format!("{x:.4}")),
                    None => "skip".to_owned(),
                }));
                r
            })
            .collect();
        render_table(&header, &rows)
    }
}

/// Replacement distribution for ablated features. Every draw is truncated
/// at zero by rejection, matching the sign of post-ReLU features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NoiseModel {
    /// Per-dimension `N(mean_j, std_j)` fitted to training features.
    Fitted { mean: Vec<f64>, std: Vec<f64> },
    /// `N(0, 1)` for every dimension.
    Unit,
    /// Constant zero (zeroing ablation).
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Fitted,
    Unit,
    Zero,
}

const MAX_REJECTIONS: usize = 256;

fn truncated_normal<R: Rng>(mean: f64, std: f64, rng: &mut R) -> f64 {
    if std <= 0.0 {
        return mean.max(0.0);
    }
    for _ in 0..MAX_REJECTIONS {
        let z: f64 = rng.sample(StandardNormal);
        let v = mean + std * z;
        if v >= 0.0 {
            return v;
        }
    }
    0.0
}

impl NoiseModel {
    pub fn fitted(train: &LabeledSet) -> Self {
        let (mean, std) = train.moments();
        NoiseModel::Fitted { mean, std }
    }

    pub fn kind(&self) -> NoiseKind {
        match self {
            NoiseModel::Fitted { .. } => NoiseKind::Fitted,
            NoiseModel::Unit => NoiseKind::Unit,
            NoiseModel::Zero => NoiseKind::Zero,
        }
    }

    pub fn draw<R: Rng>(&self, dim: usize, rng: &mut R) -> f64 {
        match self {
            NoiseModel::Fitted { mean, std } => truncated_normal(mean[dim], std[dim], rng),
            NoiseModel::Unit => truncated_normal(0.0, 1.0, rng),
            NoiseModel::Zero => 0.0,
        }
    }
}

/// Which features get replaced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationTarget {
    /// The influential indices.
    Influential,
    /// A seeded uniform sample, of equal size, from the other indices.
    Complement,
}

/// Whose influential set defines the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationScope {
    /// The set of each instance's true label.
    TrueLabel,
    /// The union of every class's set.
    Union,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub target: AblationTarget,
    pub scope: AblationScope,
    pub noise: NoiseKind,
    pub seed: u64,
    pub n_instances: usize,
    pub baseline_accuracy: f64,
    pub ablated_accuracy: f64,
    /// `baseline_accuracy - ablated_accuracy`.
    pub drop: f64,
    /// Replaced features per instance, averaged.
    pub mean_replaced: f64,
}

/// Replacement index sets, one per class label (identical under
/// [`AblationScope::Union`]).
pub fn replacement_sets(
    imap: &InfluenceMap,
    classes: usize,
    target: AblationTarget,
    scope: AblationScope,
    seed: u64,
) -> Result<Vec<Vec<usize>>, EvalError> {
    let m = imap.m;
    let set_of = |y: usize| imap.get(y).ok_or(HeadError::MissingClass(y));
    match scope {
        AblationScope::TrueLabel => (0..classes)
            .map(|y| {
                let set = set_of(y)?;
                Ok(match target {
                    AblationTarget::Influential => {
                        let mut s = set.to_vec();
                        s.sort_unstable();
                        s
                    }
                    AblationTarget::Complement => {
                        let mut rng = stream_rng(seed, streams::COMPLEMENT + y as u64);
                        complement_sample(m, set, set.len(), &mut rng)
                    }
                })
            })
            .collect(),
        AblationScope::Union => {
            let mut union = vec![false; m];
            for y in 0..classes {
                set_of(y)?.iter().for_each(|&j| union[j] = true);
            }
            let union: Vec<usize> = (0..m).filter(|&j| union[j]).collect();
            let set = match target {
                AblationTarget::Influential => union,
                AblationTarget::Complement => {
                    let mut rng = stream_rng(seed, streams::COMPLEMENT + (1 << 32));
                    complement_sample(m, &union, union.len(), &mut rng)
                }
            };
            Ok(vec![set; classes])
        }
    }
}

/// Replaces the target features of every instance with noise and measures
/// the dense head's accuracy on the perturbed data. Instance `i` draws from
/// its own stream keyed by `(seed, i)`.
pub fn ablate_noise(
    data: &LabeledSet,
    head: &ClassifierHead,
    imap: &InfluenceMap,
    target: AblationTarget,
    scope: AblationScope,
    noise: &NoiseModel,
    seed: u64,
) -> Result<AblationReport, EvalError> {
    let c = head.classes();
    check_labels(data, c, head.width())?;
    if imap.m != head.width() {
        return Err(EvalError::DimMismatch(format!(
            "influence map width {} vs head width {}",
            imap.m,
            head.width()
        )));
    }
    if let NoiseModel::Fitted { mean, std } = noise {
        if mean.len() != imap.m || std.len() != imap.m {
            return Err(EvalError::DimMismatch("noise model width".into()));
        }
    }
    let sets = replacement_sets(imap, c, target, scope, seed)?;
    let baseline = full_accuracy(data, head)?;
    let rows = data.rows();
    let labels = data.labels();
    let hits = map_range(data.len(), |i| {
        let y = labels[i];
        let mut x = rows[i].clone();
        let mut rng = stream_rng(seed, streams::NOISE + i as u64);
        for &j in &sets[y] {
            x[j] = noise.draw(j, &mut rng);
        }
        head.predict_label(&x).map(|p| p == y)
    });
    let mut right = 0usize;
    for h in hits {
        right += h? as usize;
    }
    let ablated = right as f64 / data.len() as f64;
    let replaced: usize = labels.iter().map(|&y| sets[y].len()).sum();
    Ok(AblationReport {
        target,
        scope,
        noise: noise.kind(),
        seed,
        n_instances: data.len(),
        baseline_accuracy: baseline,
        ablated_accuracy: ablated,
        drop: baseline - ablated,
        mean_replaced: replaced as f64 / data.len() as f64,
    })
}

/// Text table in the layout of an ablation summary: original accuracy, then
/// accuracy with each target replaced.
pub fn ablation_table(reports: &[AblationReport]) -> String {
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                format!("{:?}", r.scope).to_lowercase(),
                format!("{:?}", r.target).to_lowercase(),
                format!("{:?}", r.noise).to_lowercase(),
                format!("{:.4}", r.baseline_accuracy),
                format!("{:.4}", r.ablated_accuracy),
                format!("{:.4}", r.drop),
            ]
        })
        .collect();
    render_table(&["scope", "target", "noise", "original", "ablated", "drop"], &rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapMatrix {
    pub labels: Vec<usize>,
    pub intersection: Vec<Vec<usize>>,
    pub jaccard: Vec<Vec<f64>>,
    /// Mean Jaccard index over distinct class pairs; 0 with fewer than two
    /// classes.
    pub mean_offdiag_jaccard: f64,
}

/// Pairwise intersection sizes and Jaccard indices of the class sets.
pub fn overlap(imap: &InfluenceMap) -> OverlapMatrix {
    let labels: Vec<usize> = imap.classes.keys().copied().collect();
    let masks: Vec<Vec<bool>> = imap
        .classes
        .values()
        .map(|set| {
            let mut mask = vec![false; imap.m];
            set.iter().filter(|&&j| j < imap.m).for_each(|&j| mask[j] = true);
            mask
        })
        .collect();
    let sizes: Vec<usize> = masks.iter().map(|s| s.iter().filter(|&&b| b).count()).collect();
    let n = labels.len();
    let mut intersection = vec![vec![0; n]; n];
    let mut jaccard = vec![vec![0.0; n]; n];
    let mut sum = 0.0;
    for a in 0..n {
        for b in 0..n {
            let inter = masks[a].iter().zip(&masks[b]).filter(|(x, y)| **x && **y).count();
            let union = sizes[a] + sizes[b] - inter;
            intersection[a][b] = inter;
            jaccard[a][b] = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
            if a < b {
                sum += jaccard[a][b];
            }
        }
    }
    let pairs = n * n.saturating_sub(1) / 2;
    OverlapMatrix {
        labels,
        intersection,
        jaccard,
        mean_offdiag_jaccard: if pairs == 0 { 0.0 } else { sum / pairs as f64 },
    }
}

impl OverlapMatrix {
    pub fn to_table(&self) -> String {
        let mut header = vec!["class".to_owned()];
        header.extend(self.labels.iter().map(|l| l.to_string()));
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        let rows: Vec<Vec<String>> = self
            .labels
            .iter()
            .zip(&self.intersection)
            .map(|(l, row)| {
                let mut r = vec![l.to_string()];
                r.extend(row.iter().map(|x| x.to_string()));
                r
            })
            .collect();
        let mut out = render_table(&header, &rows);
        let _ = writeln!(out, "\nmean off-diagonal Jaccard: {:.6}", self.mean_offdiag_jaccard);
        out
    }
}
