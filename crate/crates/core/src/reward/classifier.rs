//! Logistic realism classifiers for corpus labeling.

use rand::seq::SliceRandom;
use std::path::Path;

use super::{Embedding, Standardizer};
use crate::error::{invalid, Error, Result};
use crate::rng::stream;
use crate::tensor::{read_checkpoint, write_checkpoint, Tensor};

/// Labeling threshold for the real-photograph analog corpus.
pub const THRESHOLD_REAL: f64 = 0.2;
/// Labeling threshold for the generated-material analog corpus.
pub const THRESHOLD_GENERATED: f64 = 0.4;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch: 64,
            epochs: 200,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RealismClassifier {
    pub standardizer: Standardizer,
    pub weights: Vec<f64>,
    pub bias: f64,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl RealismClassifier {
    pub fn logit(&self, f: &[f64]) -> f64 {
        self.bias + self.weights.iter().zip(self.standardizer.apply(f)).map(|(w, z)| w * z).sum::<f64>()
    }

    /// Probability of the realistic class; strictly inside `(0, 1)` for
    /// finite logits of moderate size.
    pub fn probability(&self, f: &[f64]) -> f64 {
        sigmoid(self.logit(f))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_checkpoint(
            path,
            &[
                ("clf.w".into(), Tensor::from_slice(&self.weights)),
                ("clf.b".into(), Tensor::scalar(self.bias)),
                ("clf.mean".into(), Tensor::from_slice(&self.standardizer.mean)),
                ("clf.std".into(), Tensor::from_slice(&self.standardizer.std)),
            ],
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let entries = read_checkpoint(path)?;
        let get = |name: &str| {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.data().to_vec())
                .ok_or_else(|| Error::Format(format!("classifier checkpoint missing {name}")))
        };
        Ok(Self {
            weights: get("clf.w")?,
            bias: get("clf.b")?[0],
            standardizer: Standardizer {
                mean: get("clf.mean")?,
                std: get("clf.std")?,
            },
        })
    }
}

/// Minibatch gradient descent on binary cross-entropy.
pub fn train_classifier(features: &[Embedding], labels: &[bool], cfg: &ClassifierConfig) -> Result<RealismClassifier> {
    if features.len() != labels.len() || features.is_empty() {
        return invalid("classifier training needs matching non-empty features and labels");
    }
    if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return invalid("classifier training subset contains a single class");
    }
    let standardizer = Standardizer::fit(features);
    let z: Vec<Vec<f64>> = features.iter().map(|f| standardizer.apply(f)).collect();
    let mut clf = RealismClassifier {
        weights: vec![0.0; z[0].len()],
        bias: 0.0,
        standardizer,
    };
    let mut order: Vec<usize> = (0..z.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut stream(cfg.seed, &[0xc1f, epoch as u64]));
        for chunk in order.chunks(cfg.batch.max(1)) {
            let m = chunk.len() as f64;
            let mut gw = vec![0.0; clf.weights.len()];
            let mut gb = 0.0;
            for &i in chunk {
                let p = sigmoid(clf.bias + clf.weights.iter().zip(&z[i]).map(|(w, v)| w * v).sum::<f64>());
                let err = (p - if labels[i] { 1.0 } else { 0.0 }) / m;
                for (g, v) in gw.iter_mut().zip(&z[i]) {
                    *g += err * v;
                }
                gb += err;
            }
            for (w, g) in clf.weights.iter_mut().zip(&gw) {
                *w -= cfg.lr * g;
            }
            clf.bias -= cfg.lr * gb;
        }
    }
    if !clf.bias.is_finite() || clf.weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::NonFinite("classifier weights".into()));
    }
    Ok(clf)
}

/// `score >= threshold`.
pub fn apply_threshold(scores: &[f64], threshold: f64) -> Vec<bool> {
    scores.iter().map(|&s| s >= threshold).collect()
}

/// Probability that a random positive outranks a random negative, ties
/// counted as one half.
pub fn auc(positive: &[f64], negative: &[f64]) -> Result<f64> {
    if positive.is_empty() || negative.is_empty() {
        return invalid("AUC needs both classes");
    }
    let mut all: Vec<(f64, bool)> = positive.iter().map(|&s| (s, true)).chain(negative.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // rank-sum with average ranks for ties
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += all[i..=j].iter().filter(|e| e.1).count() as f64 * avg;
        i = j + 1;
    }
    let (np, nn) = (positive.len() as f64, negative.len() as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clusters() -> (Vec<Embedding>, Vec<bool>) {
        let mut f = Vec::new();
        let mut l = Vec::new();
        for i in 0..200 {
            let j = (i as f64 * 1.3).sin() * 0.3;
            let pos = i % 2 == 0;
            let c = if pos { 1.0 } else { -1.0 };
            f.push(vec![c + j, j * 0.5, 0.1 * c - j]);
            l.push(pos);
        }
        (f, l)
    }

    #[test]
    fn separable_clusters_reach_full_accuracy() {
        let (f, l) = clusters();
        let clf = train_classifier(&f, &l, &ClassifierConfig::default()).unwrap();
        let pred = apply_threshold(&f.iter().map(|x| clf.probability(x)).collect::<Vec<_>>(), 0.5);
        assert_eq!(pred, l);
        assert!(f.iter().all(|x| {
            let p = clf.probability(x);
            p > 0.0 && p < 1.0
        }));
    }

    #[test]
    fn single_class_fails() {
        let (f, _) = clusters();
        assert!(train_classifier(&f, &vec![true; f.len()], &ClassifierConfig::default()).is_err());
    }

    #[test]
    fn threshold_boundary_is_inclusive() {
        assert_eq!(apply_threshold(&[0.4, 0.39999, 0.2], THRESHOLD_GENERATED), vec![true, false, false]);
        assert_eq!(apply_threshold(&[0.2], THRESHOLD_REAL), vec![true]);
        assert_eq!((THRESHOLD_REAL, THRESHOLD_GENERATED), (0.2, 0.4));
    }

    #[test]
    fn decision_invariant_to_logit_scaling() {
        let (f, l) = clusters();
        let clf = train_classifier(&f, &l, &ClassifierConfig::default()).unwrap();
        let mut scaled = clf.clone();
        scaled.weights.iter_mut().for_each(|w| *w *= 3.7);
        scaled.bias *= 3.7;
        for x in &f {
            assert_eq!(clf.logit(x) >= 0.0, scaled.logit(x) >= 0.0);
        }
    }

    #[test]
    fn auc_values() {
        assert_eq!(auc(&[3.0, 4.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(auc(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 0.0);
        assert_eq!(auc(&[1.0], &[1.0]).unwrap(), 0.5);
        assert_eq!(auc(&[1.0, 3.0], &[2.0]).unwrap(), 0.5);
    }

    #[test]
    fn save_load_roundtrip() {
        let (f, l) = clusters();
        let clf = train_classifier(
            &f,
            &l,
            &ClassifierConfig {
                epochs: 5,
                ..Default::default()
            },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("clf.ckpt");
        clf.save(&p).unwrap();
        assert_eq!(RealismClassifier::load(&p).unwrap(), clf);
    }
}
