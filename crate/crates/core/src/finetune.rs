//! Retraining of a decomposed head on cached features.
//!
//! The objective is the mean cross-entropy of the decomposed softmax plus an
//! L2 penalty on the weights (biases are not penalized). It is convex in the
//! head's parameters, so plain gradient descent with a step below `1/L`
//! decreases it monotonically.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::LabeledSet;
use crate::head::{log_sum_exp, softmax, DecomposedHead, HeadError};
use crate::rng::{stream_rng, streams};

#[derive(Debug, Error)]
pub enum FitError {
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("label {label} outside the head's {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("loss became non-finite in epoch {epoch}")]
    DivergenceDetected {
        epoch: usize,
        /// Parameters after the last epoch that ended with a finite loss.
        last_finite: Box<DecomposedHead>,
        history: Vec<EpochRecord>,
    },
    #[error(transparent)]
    Head(#[from] HeadError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Instances per step; 0 means full batch.
    pub batch_size: usize,
    pub l2_penalty: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 10,
            batch_size: 0,
            l2_penalty: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), FitError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(FitError::BadConfig("learning_rate must be positive".into()));
        }
        if !(self.l2_penalty >= 0.0 && self.l2_penalty.is_finite()) {
            return Err(FitError::BadConfig("l2_penalty must be ≥ 0".into()));
        }
        Ok(())
    }
}

/// Gradients shaped like the head's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: Vec<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

impl Gradient {
    pub fn norm_squared(&self) -> f64 {
        let w: f64 = self.weights.iter().flatten().map(|g| g * g).sum();
        let b: f64 = self.bias.iter().flatten().map(|g| g * g).sum();
        w + b
    }
}

fn check(dhead: &DecomposedHead, data: &LabeledSet) -> Result<(), FitError> {
    if data.is_empty() {
        return Err(FitError::EmptyDataset);
    }
    if data.width() != dhead.width() {
        return Err(HeadError::DimMismatch(format!(
            "data width {} vs head width {}",
            data.width(),
            dhead.width()
        ))
        .into());
    }
    let classes = dhead.classes();
    if let Some(&label) = data.labels().iter().find(|&&l| l >= classes) {
        return Err(FitError::LabelOutOfRange { label, classes });
    }
    Ok(())
}

fn penalty(dhead: &DecomposedHead, l2: f64) -> f64 {
    if l2 == 0.0 {
        return 0.0;
    }
    let sq: f64 = dhead
        .subspaces()
        .iter()
        .flat_map(|s| s.weights())
        .map(|w| w * w)
        .sum();
    0.5 * l2 * sq
}

/// Objective value without the gradient.
pub fn loss(dhead: &DecomposedHead, data: &LabeledSet, l2: f64) -> Result<f64, FitError> {
    check(dhead, data)?;
    let mut ce = 0.0;
    for (x, y) in data.iter() {
        let z = dhead.logits(x)?;
        ce += log_sum_exp(&z) - z[y];
    }
    Ok(ce / data.len() as f64 + penalty(dhead, l2))
}

/// Objective value and its gradient over `data`.
pub fn loss_and_grad(
    dhead: &DecomposedHead,
    data: &LabeledSet,
    l2: f64,
) -> Result<(f64, Gradient), FitError> {
    check(dhead, data)?;
    let c = dhead.classes();
    let mut gw: Vec<Vec<f64>> = dhead.subspaces().iter().map(|s| vec![0.0; s.len()]).collect();
    let mut gb = vec![0.0; c];
    let mut ce = 0.0;
    for (x, y) in data.iter() {
        let z = dhead.logits(x)?;
        ce += log_sum_exp(&z) - z[y];
        let p = softmax(&z)?;
        for (i, pi) in p.into_iter().enumerate() {
            let r = pi - if i == y { 1.0 } else { 0.0 };
            let s = dhead.subspace(i);
            for (g, &j) in gw[i].iter_mut().zip(s.indices()) {
                *g += r * x[j];
            }
            gb[i] += r;
        }
    }
    let n = data.len() as f64;
    for (gi, s) in gw.iter_mut().zip(dhead.subspaces()) {
        for (g, w) in gi.iter_mut().zip(s.weights()) {
            *g = *g / n + l2 * w;
        }
    }
    let bias = dhead.bias().map(|_| gb.into_iter().map(|g| g / n).collect());
    Ok((
        ce / n + penalty(dhead, l2),
        Gradient { weights: gw, bias },
    ))
}

/// `head ← head − lr · grad`.
pub fn apply_step(dhead: &mut DecomposedHead, grad: &Gradient, lr: f64) {
    for (i, g) in grad.weights.iter().enumerate() {
        for (w, d) in dhead.subspace_mut(i).weights_mut().iter_mut().zip(g) {
            *w -= lr * d;
        }
    }
    if let (Some(b), Some(g)) = (dhead.bias_mut(), &grad.bias) {
        b.iter_mut().zip(g).for_each(|(b, d)| *b -= lr * d);
    }
}

const POWER_ITERATIONS: usize = 200;

/// Largest eigenvalue of a symmetric positive semidefinite matrix by power
/// iteration, returned as the final Rayleigh quotient.
fn top_eigenvalue(gram: &[Vec<f64>]) -> f64 {
    let n = gram.len();
    if n == 0 {
        return 0.0;
    }
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut lambda = 0.0;
    for _ in 0..POWER_ITERATIONS {
        let w: Vec<f64> = gram
            .iter()
            .map(|row| row.iter().zip(&v).map(|(a, b)| a * b).sum())
            .collect();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        v = w.into_iter().map(|x| x / norm).collect();
    }
    lambda
}

/// Estimated Lipschitz constant of the objective's gradient.
///
/// The softmax cross-entropy Hessian with respect to the logits is bounded
/// by `I/2`, and the logits of different classes read disjoint parameter
/// blocks, so `L ≤ ½ · maxᵢ λmax(Gᵢ) + l2` where `Gᵢ` is the mean outer
/// product of `[x[Jᵢ], 1]` (the `1` only with a bias).
pub fn smoothness_estimate(dhead: &DecomposedHead, data: &LabeledSet, l2: f64) -> Result<f64, FitError> {
    check(dhead, data)?;
    let with_bias = dhead.bias().is_some();
    let n = data.len() as f64;
    let mut worst: f64 = 0.0;
    for s in dhead.subspaces() {
        let dim = s.len() + with_bias as usize;
        let mut gram = vec![vec![0.0; dim]; dim];
        for (x, _) in data.iter() {
            let mut a: Vec<f64> = s.indices().iter().map(|&j| x[j]).collect();
            if with_bias {
                a.push(1.0);
            }
            for (r, ar) in gram.iter_mut().zip(&a) {
                for (g, ac) in r.iter_mut().zip(&a) {
                    *g += ar * ac;
                }
            }
        }
        gram.iter_mut().flatten().for_each(|g| *g /= n);
        worst = worst.max(top_eigenvalue(&gram));
    }
    Ok(0.5 * worst + l2)
}

/// Halves `initial` until it is at most `1 / L̂` and one full-batch step
/// from `dhead` satisfies the sufficient-decrease condition
/// `f(w − lr·g) ≤ f(w) − (lr/2)·‖g‖²`.
pub fn halving_learning_rate(
    dhead: &DecomposedHead,
    data: &LabeledSet,
    l2: f64,
    initial: f64,
) -> Result<f64, FitError> {
    if !(initial > 0.0 && initial.is_finite()) {
        return Err(FitError::BadConfig("initial learning rate must be positive".into()));
    }
    let bound = smoothness_estimate(dhead, data, l2)?;
    let (f0, g) = loss_and_grad(dhead, data, l2)?;
    let gg = g.norm_squared();
    let mut lr = initial;
    for _ in 0..64 {
        if bound * lr <= 1.0 {
            let mut trial = dhead.clone();
            apply_step(&mut trial, &g, lr);
            let f1 = loss(&trial, data, l2)?;
            if f1 <= f0 - 0.5 * lr * gg {
                return Ok(lr);
            }
        }
        lr *= 0.5;
    }
    Ok(lr)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Objective over the whole training set at the end of the epoch.
    pub loss: f64,
    /// Decomposed-head accuracy on the holdout set, when one was given.
    pub holdout_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub head: DecomposedHead,
    pub history: Vec<EpochRecord>,
}

fn accuracy(dhead: &DecomposedHead, data: &LabeledSet) -> Result<f64, FitError> {
    let mut right = 0usize;
    for (x, y) in data.iter() {
        right += (dhead.predict_label(x)? == y) as usize;
    }
    Ok(right as f64 / data.len().max(1) as f64)
}

/// Gradient descent on the decomposed head's weights and bias. Index sets are
/// left untouched.
pub fn fit(
    dhead: &DecomposedHead,
    train: &LabeledSet,
    config: &TrainConfig,
    holdout: Option<&LabeledSet>,
) -> Result<FitOutcome, FitError> {
    config.validate()?;
    check(dhead, train)?;
    if let Some(h) = holdout {
        check(dhead, h)?;
    }
    let mut head = dhead.clone();
    let mut history = Vec::with_capacity(config.epochs);
    let n = train.len();
    let full_batch = config.batch_size == 0 || config.batch_size >= n;
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 1..=config.epochs {
        let before = head.clone();
        if full_batch {
            let (_, g) = loss_and_grad(&head, train, config.l2_penalty)?;
            apply_step(&mut head, &g, config.learning_rate);
        } else {
            let mut rng = stream_rng(config.seed, streams::SHUFFLE + epoch as u64);
            order.shuffle(&mut rng);
            for chunk in order.chunks(config.batch_size) {
                let batch = train.select(chunk);
                let (_, g) = loss_and_grad(&head, &batch, config.l2_penalty)?;
                apply_step(&mut head, &g, config.learning_rate);
            }
        }
        let value = loss(&head, train, config.l2_penalty);
        let value = match value {
            Ok(v) if v.is_finite() => v,
            Ok(_) | Err(FitError::Head(HeadError::NonFiniteInput)) => {
                return Err(FitError::DivergenceDetected {
                    epoch,
                    last_finite: Box::new(before),
                    history,
                })
            }
            Err(e) => return Err(e),
        };
        let holdout_accuracy = holdout.map(|h| accuracy(&head, h)).transpose()?;
        history.push(EpochRecord {
            epoch,
            loss: value,
            holdout_accuracy,
        });
    }
    Ok(FitOutcome { head, history })
}

/// `epoch,loss,A_d_holdout` rows.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,loss,A_d_holdout\n");
    for r in history {
        let acc = r.holdout_accuracy.map_or(String::new(), |a| a.to_string());
        out.push_str(&format!("{},{},{}\n", r.epoch, r.loss, acc));
    }
    out
}
