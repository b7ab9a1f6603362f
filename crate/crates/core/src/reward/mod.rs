//! Image realism scoring: a fixed feature embedding, a linear reward head
//! trained with a neighbour-smoothness penalty, and the logistic
//! classifiers used to label corpora.

mod classifier;
mod features;
mod head;

pub use classifier::{apply_threshold, auc, train_classifier, ClassifierConfig, RealismClassifier, THRESHOLD_GENERATED, THRESHOLD_REAL};
pub use features::{extract_features, generate_projection, projection, raw_features, Embedding, EMBED_DIM, PROJECTION_SEED, RAW_DIM};
pub use head::{knn_pairs, normalize_score, percentile, reward_loss, score_bounds, train_reward_head, HeadTrainConfig, RewardHead, TrainLog};

/// Per-dimension mean and standard deviation over a sample of embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(xs: &[Embedding]) -> Self {
        let d = xs.first().map_or(0, |x| x.len());
        let n = xs.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for x in xs {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for x in xs {
            for ((s, v), m) in var.iter_mut().zip(x).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let std = var.into_iter().map(|v| v.sqrt().max(1e-8)).collect();
        Self { mean, std }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }
}
