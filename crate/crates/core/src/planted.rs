//! Synthetic features with known influential indices.
//!
//! Each class owns `planted_per_class` disjoint coordinates. Instances of a
//! class draw those coordinates from `|N(signal_mean, 1)|` and every other
//! coordinate from `|N(noise_mean, 0.5²)|`. The matching head puts weight 1
//! on a class's planted coordinates and small uniform weights elsewhere, so
//! both the extraction result and the head's accuracy are known up front.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{ClassFeatures, Dataset, FeatureBlock};
use crate::head::ClassifierHead;
use crate::rng::{stream_rng, streams};

pub const SIGNAL_STD: f64 = 1.0;
pub const NOISE_STD: f64 = 0.5;
/// Off-planted head weights are drawn from `U(-OFF_WEIGHT, OFF_WEIGHT)`.
pub const OFF_WEIGHT: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSpec {
    pub classes: usize,
    pub width: usize,
    pub planted_per_class: usize,
    pub n_per_class: usize,
    pub signal_mean: f64,
    pub noise_mean: f64,
    pub seed: u64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            width: 32,
            planted_per_class: 3,
            n_per_class: 200,
            signal_mean: 5.0,
            noise_mean: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("invalid planted spec: {0}")]
pub struct SpecInvalid(pub String);

impl PlantedSpec {
    pub fn validate(&self) -> Result<(), SpecInvalid> {
        let bad = |s: &str| Err(SpecInvalid(s.to_owned()));
        if self.classes == 0 || self.width == 0 || self.planted_per_class == 0 {
            return bad("classes, width and planted_per_class must be positive");
        }
        if self.classes * self.planted_per_class > self.width {
            return bad("classes × planted_per_class exceeds width");
        }
        if !(self.noise_mean >= 0.0) || !self.signal_mean.is_finite() {
            return bad("noise_mean must be ≥ 0 and signal_mean finite");
        }
        if self.signal_mean < self.noise_mean {
            return bad("signal_mean must be at least noise_mean");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PlantedData {
    pub spec: PlantedSpec,
    /// Sorted planted indices of each class.
    pub planted: Vec<Vec<usize>>,
    pub head: ClassifierHead,
    /// `spec.n_per_class` instances per class.
    pub train: Dataset,
}

pub fn generate_planted(spec: &PlantedSpec) -> Result<PlantedData, SpecInvalid> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, streams::PLANTED);
    let mut perm: Vec<usize> = (0..spec.width).collect();
    perm.shuffle(&mut rng);
    let planted: Vec<Vec<usize>> = perm
        .chunks(spec.planted_per_class)
        .take(spec.classes)
        .map(|chunk| {
            let mut v = chunk.to_vec();
            v.sort_unstable();
            v
        })
        .collect();

    let off = Uniform::new(-OFF_WEIGHT, OFF_WEIGHT).expect("valid range");
    let mut weights = vec![0.0; spec.classes * spec.width];
    for (i, set) in planted.iter().enumerate() {
        let row = &mut weights[i * spec.width..(i + 1) * spec.width];
        for w in row.iter_mut() {
            *w = off.sample(&mut rng);
        }
        for &j in set {
            row[j] = 1.0;
        }
    }
    let head = ClassifierHead::new(spec.classes, spec.width, weights, None)
        .expect("dimensions are consistent");

    let mut data = PlantedData {
        spec: spec.clone(),
        planted,
        head,
        train: Dataset::new(spec.width, vec![]).expect("empty dataset"),
    };
    data.train = data.sample(spec.n_per_class, 0);
    Ok(data)
}

impl PlantedData {
    /// Draws `n_per_class` fresh instances per class. `split` selects an
    /// independent random stream; split 0 is the training set.
    pub fn sample(&self, n_per_class: usize, split: u64) -> Dataset {
        let spec = &self.spec;
        let signal = Normal::new(spec.signal_mean, SIGNAL_STD).expect("finite mean");
        let noise = Normal::new(spec.noise_mean, NOISE_STD).expect("finite mean");
        let classes = self
            .planted
            .iter()
            .enumerate()
            .map(|(label, set)| {
                let stream = streams::PLANTED + 1 + ((split << 24) | label as u64);
                let mut rng = stream_rng(spec.seed, stream);
                let mut is_planted = vec![false; spec.width];
                set.iter().for_each(|&j| is_planted[j] = true);
                let mut values = Vec::with_capacity(n_per_class * spec.width);
                for _ in 0..n_per_class {
                    for &p in &is_planted {
                        let x: f64 = if p {
                            signal.sample(&mut rng)
                        } else {
                            noise.sample(&mut rng)
                        };
                        values.push(x.abs());
                    }
                }
                ClassFeatures {
                    label,
                    name: format!("class{label}"),
                    block: FeatureBlock::new(n_per_class, spec.width, 1, 1, values)
                        .expect("dimensions are consistent"),
                }
            })
            .collect();
        Dataset::new(spec.width, classes).expect("labels are distinct")
    }
}

/// Draws a uniform sample of `count` indices from `[0, m)` minus `exclude`,
/// sorted ascending. Returns the whole complement if it is smaller than
/// `count`.
pub fn complement_sample<R: Rng>(m: usize, exclude: &[usize], count: usize, rng: &mut R) -> Vec<usize> {
    let mut excluded = vec![false; m];
    exclude.iter().filter(|&&j| j < m).for_each(|&j| excluded[j] = true);
    let pool: Vec<usize> = (0..m).filter(|&j| !excluded[j]).collect();
    let mut picked: Vec<usize> = pool
        .choose_multiple(rng, count.min(pool.len()))
        .copied()
        .collect();
    picked.sort_unstable();
    picked
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planted_sets_are_disjoint() {
        let d = generate_planted(&PlantedSpec::default()).unwrap();
        let mut all: Vec<usize> = d.planted.concat();
        assert_eq!(all.len(), 12);
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 12);
        assert_eq!(d.train.num_instances(), 800);
        assert!(d.train.classes().iter().all(|c| c.block.raw().iter().all(|&x| x >= 0.0)));
    }

    #[test]
    fn generation_is_seeded() {
        let a = generate_planted(&PlantedSpec::default()).unwrap();
        let b = generate_planted(&PlantedSpec::default()).unwrap();
        assert_eq!(a.train, b.train);
        let c = generate_planted(&PlantedSpec { seed: 1, ..Default::default() }).unwrap();
        assert_ne!(a.train, c.train);
        assert_ne!(a.sample(10, 1), a.sample(10, 2));
    }

    #[test]
    fn invalid_specs() {
        let s = PlantedSpec { classes: 11, ..Default::default() };
        assert!(generate_planted(&s).is_err());
        let s = PlantedSpec { signal_mean: 0.0, noise_mean: 1.0, ..Default::default() };
        assert!(generate_planted(&s).is_err());
        let s = PlantedSpec { noise_mean: -1.0, signal_mean: 1.0, ..Default::default() };
        assert!(generate_planted(&s).is_err());
    }

    #[test]
    fn complement_excludes() {
        let mut rng = stream_rng(0, 0);
        let s = complement_sample(10, &[0, 1, 2], 4, &mut rng);
        assert_eq!(s.len(), 4);
        assert!(s.iter().all(|&j| j >= 3));
        assert_eq!(complement_sample(4, &[0, 1, 2], 5, &mut rng), vec![3]);
    }
}
