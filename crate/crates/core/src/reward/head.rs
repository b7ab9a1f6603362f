//! Linear realism head `r(I) = w . z(I) + b`, with `z` the standardized
//! embedding, trained on binary labels with an MSE term plus a penalty on
//! score differences between feature-space nearest neighbours.

use rand::seq::SliceRandom;
use std::f64::consts::PI;
use std::path::Path;

use super::{Embedding, Standardizer};
use crate::error::{invalid, Error, Result};
use crate::rng::stream;
use crate::tensor::{read_checkpoint, write_checkpoint, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct RewardHead {
    pub standardizer: Standardizer,
    pub weights: Vec<f64>,
    pub bias: f64,
    /// `(min, max)` raw scores used by [`RewardHead::normalized`].
    pub bounds: Option<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadTrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub lambda_mse: f64,
    pub lambda_tv: f64,
    pub k: usize,
    pub seed: u64,
}

impl Default for HeadTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch: 64,
            epochs: 200,
            lambda_mse: 1.0,
            lambda_tv: 100.0,
            k: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    /// Mean minibatch loss per epoch.
    pub epoch_loss: Vec<f64>,
}

impl RewardHead {
    pub fn raw(&self, f: &[f64]) -> f64 {
        self.bias + dot(&self.weights, &self.standardizer.apply(f))
    }

    pub fn normalized(&self, f: &[f64]) -> Result<f64> {
        let bounds = self.bounds.ok_or_else(|| Error::Invalid("reward head has no normalization bounds".into()))?;
        normalize_score(self.raw(f), bounds)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let (lo, hi) = self.bounds.unwrap_or((f64::NAN, f64::NAN));
        write_checkpoint(
            path,
            &[
                ("head.w".into(), Tensor::from_slice(&self.weights)),
                ("head.b".into(), Tensor::scalar(self.bias)),
                ("head.mean".into(), Tensor::from_slice(&self.standardizer.mean)),
                ("head.std".into(), Tensor::from_slice(&self.standardizer.std)),
                ("head.bounds".into(), Tensor::from_slice(&[lo, hi])),
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
                .ok_or_else(|| Error::Format(format!("reward head checkpoint missing {name}")))
        };
        let b = get("head.bounds")?;
        Ok(Self {
            weights: get("head.w")?,
            bias: get("head.b")?[0],
            standardizer: Standardizer {
                mean: get("head.mean")?,
                std: get("head.std")?,
            },
            bounds: if b[0].is_nan() { None } else { Some((b[0], b[1])) },
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// For each sample, its `k` most cosine-similar other samples (ties by
/// index). Returns `(i, j)` pairs in sample order.
pub fn knn_pairs(features: &[&[f64]], k: usize) -> Vec<(usize, usize)> {
    let n = features.len();
    let k = k.min(n.saturating_sub(1));
    let norms: Vec<f64> = features.iter().map(|f| dot(f, f).sqrt().max(1e-300)).collect();
    let mut pairs = Vec::with_capacity(n * k);
    for i in 0..n {
        let mut sims: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (dot(features[i], features[j]) / (norms[i] * norms[j]), j))
            .collect();
        sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        pairs.extend(sims.iter().take(k).map(|&(_, j)| (i, j)));
    }
    pairs
}

/// `lambda_mse * mean (r_i - l_i)^2 + lambda_tv * mean_{(i,j)} (r_i - r_j)^2`
/// over the k-nearest-neighbour pairs, together with `dL/dr`.
/// The smoothness term is zero for batches of fewer than two samples.
pub fn reward_loss(scores: &[f64], labels: &[f64], features: &[&[f64]], k: usize, lambda_mse: f64, lambda_tv: f64) -> Result<(f64, Vec<f64>)> {
    let n = scores.len();
    if n == 0 || labels.len() != n || features.len() != n {
        return invalid(format!(
            "reward_loss needs matching non-empty batches ({n} scores, {} labels, {} features)",
            labels.len(),
            features.len()
        ));
    }
    let mut grad = vec![0.0; n];
    let mut mse = 0.0;
    for i in 0..n {
        let d = scores[i] - labels[i];
        mse += d * d;
        grad[i] += lambda_mse * 2.0 * d / n as f64;
    }
    mse /= n as f64;
    let mut tv = 0.0;
    if n >= 2 && lambda_tv != 0.0 && k > 0 {
        let pairs = knn_pairs(features, k);
        let m = pairs.len() as f64;
        for (i, j) in pairs {
            let d = scores[i] - scores[j];
            tv += d * d;
            grad[i] += lambda_tv * 2.0 * d / m;
            grad[j] -= lambda_tv * 2.0 * d / m;
        }
        tv /= m;
    }
    Ok((lambda_mse * mse + lambda_tv * tv, grad))
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Minibatch Adam on the MSE + TV objective from a zero head. The learning
/// rate starts at `cfg.lr` and follows a cosine decay to zero, so the head
/// settles at the minimiser instead of hovering around it.
pub fn train_reward_head(features: &[Embedding], labels: &[f64], cfg: &HeadTrainConfig) -> Result<(RewardHead, TrainLog)> {
    let n = features.len();
    if n == 0 || labels.len() != n {
        return invalid("reward head training needs matching non-empty features and labels");
    }
    if cfg.batch == 0 {
        return invalid("batch size must be positive");
    }
    let standardizer = Standardizer::fit(features);
    let z: Vec<Vec<f64>> = features.iter().map(|f| standardizer.apply(f)).collect();
    let d = z[0].len();
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    // Adam moments; the bias occupies slot `d`
    let (mut m, mut v) = (vec![0.0; d + 1], vec![0.0; d + 1]);
    let mut t = 0i32;
    let total_steps = cfg.epochs * n.div_ceil(cfg.batch);
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(cfg.seed, &[0x4ead, epoch as u64]));
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch) {
            let scores: Vec<f64> = chunk.iter().map(|&i| b + dot(&w, &z[i])).collect();
            let lab: Vec<f64> = chunk.iter().map(|&i| labels[i]).collect();
            let feats: Vec<&[f64]> = chunk.iter().map(|&i| features[i].as_slice()).collect();
            let (loss, g) = reward_loss(&scores, &lab, &feats, cfg.k, cfg.lambda_mse, cfg.lambda_tv)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("reward loss at epoch {epoch}")));
            }
            let mut grad = vec![0.0; d + 1];
            for (&i, gi) in chunk.iter().zip(&g) {
                for (gj, zj) in grad.iter_mut().zip(&z[i]) {
                    *gj += gi * zj;
                }
                grad[d] += gi;
            }
            t += 1;
            let progress = (t - 1) as f64 / total_steps as f64;
            let lr = cfg.lr * 0.5 * (1.0 + (PI * progress).cos());
            let (c1, c2) = (1.0 - ADAM_BETA1.powi(t), 1.0 - ADAM_BETA2.powi(t));
            for j in 0..=d {
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * grad[j];
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * grad[j] * grad[j];
                let step = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
                if j < d {
                    w[j] -= step;
                } else {
                    b -= step;
                }
            }
            total += loss;
            batches += 1;
        }
        log.epoch_loss.push(total / batches as f64);
    }
    Ok((
        RewardHead {
            standardizer,
            weights: w,
            bias: b,
            bounds: None,
        },
        log,
    ))
}

/// Linear-interpolated percentile, `p` in `[0, 100]`.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() || !(0.0..=100.0).contains(&p) {
        return invalid("percentile needs values and p in [0, 100]");
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = p / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// Normalization bounds as the 0.5th and 99.5th percentiles of raw scores.
pub fn score_bounds(raw: &[f64]) -> Result<(f64, f64)> {
    let bounds = (percentile(raw, 0.5)?, percentile(raw, 99.5)?);
    if !(bounds.1 > bounds.0) {
        return invalid(format!("degenerate score bounds {bounds:?}"));
    }
    Ok(bounds)
}

/// `(raw - min) / (max - min)`, not clamped.
pub fn normalize_score(raw: f64, bounds: (f64, f64)) -> Result<f64> {
    let (lo, hi) = bounds;
    if !(hi > lo) {
        return invalid(format!("normalization needs max > min, got {bounds:?}"));
    }
    Ok((raw - lo) / (hi - lo))
}
