//! Brute-force oracles shared by the integration suites. None of these call
//! into the crate's numeric kernels.

#![allow(dead_code)]

use aminet::model::{AmiNet, ModelConfig};
use aminet::FeatureMap;
use ndarray::Array3;
use rand::Rng;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

/// Squared Euclidean distance first, cosine distance second, then the product.
pub fn combined_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut sq = 0.0;
    for (x, y) in a.iter().zip(b) {
        sq += (x - y) * (x - y);
    }
    let cos_dist = 1.0 - cosine(a, b);
    sq * cos_dist
}

/// `(cluster, distance)` per token, scanning clusters in order and keeping the first minimum.
pub fn assign(clusters: &[Vec<f64>], tokens: &[Vec<f64>]) -> Vec<(usize, f64)> {
    tokens
        .iter()
        .map(|t| {
            let mut best = (0, combined_distance(&clusters[0], t));
            for (i, c) in clusters.iter().enumerate().skip(1) {
                let d = combined_distance(c, t);
                if d < best.1 {
                    best = (i, d);
                }
            }
            best
        })
        .collect()
}

pub fn boundaries(assignment: &[(usize, f64)], clusters: usize, lambda: f64) -> Vec<Option<f64>> {
    (0..clusters)
        .map(|i| {
            let ds: Vec<f64> = assignment.iter().filter(|a| a.0 == i).map(|a| a.1).collect();
            if ds.is_empty() {
                return None;
            }
            let n = ds.len() as f64;
            let mean = ds.iter().sum::<f64>() / n;
            let var = ds.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
            Some(mean + lambda * var.sqrt())
        })
        .collect()
}

pub fn clustering_loss(clusters: &[Vec<f64>], assignment: &[(usize, f64)], intra: f64, inter: f64) -> f64 {
    let within: f64 = assignment.iter().map(|a| a.1).sum();
    let mut between = 0.0;
    for a in clusters {
        for b in clusters {
            between += combined_distance(a, b);
        }
    }
    intra * within - inter * between
}

/// Rows are spatial locations, columns channels.
pub fn reconstruction_loss(pred: &[Vec<f64>], target: &[Vec<f64>], w_mse: f64, w_cos: f64) -> f64 {
    let mut se = 0.0;
    let mut count = 0usize;
    for (p, t) in pred.iter().zip(target) {
        for (a, b) in p.iter().zip(t) {
            se += (a - b) * (a - b);
            count += 1;
        }
    }
    let cos_term: f64 = pred.iter().zip(target).map(|(p, t)| 1.0 - cosine(p, t)).sum::<f64>() / pred.len() as f64;
    w_mse * se / count as f64 + w_cos * cos_term
}

pub fn anomaly_score(pred: &[f64], target: &[f64]) -> f64 {
    let diff: Vec<f64> = pred.iter().zip(target).map(|(a, b)| a - b).collect();
    norm(&diff) * (1.0 - cosine(pred, target))
}

/// Probability that a random positive outranks a random negative, ties counting one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Sweeps every distinct score as a `score >= t` threshold, highest first.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> f64 {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let positives = labels.iter().filter(|&&l| l).count() as f64;
    let (mut ap, mut prev_recall) = (0.0, 0.0);
    for t in thresholds {
        let (mut tp, mut predicted) = (0.0, 0.0);
        for (s, &l) in scores.iter().zip(labels) {
            if *s >= t {
                predicted += 1.0;
                if l {
                    tp += 1.0;
                }
            }
        }
        let recall = tp / positives;
        ap += (recall - prev_recall) * tp / predicted;
        prev_recall = recall;
    }
    ap
}

pub fn random_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn random_feature(rng: &mut impl Rng, h: usize, w: usize, c: usize) -> FeatureMap {
    FeatureMap::new(Array3::from_shape_fn((h, w, c), |_| rng.random_range(-1.0f32..1.0)))
}

/// 4×4×3 features, 2×2 patches: four tokens of width eight, two clusters, one block each.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        patch: 2,
        dim: 8,
        clusters: 2,
        inpaint_depth: 1,
        sem_depth: 1,
        lambda: 0.5,
        heads: 2,
        feature_height: 4,
        feature_width: 4,
        feature_channels: 3,
        jitter: false,
    }
}

pub fn micro_model(seed: u64) -> AmiNet {
    AmiNet::new(micro_config(), seed).unwrap()
}
