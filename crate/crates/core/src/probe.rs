//! Lightweight classifiers used to measure what embeddings and mels encode.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0f64, 0f64, 0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (*x as f64, *y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    ab / (aa.sqrt() * bb.sqrt())
}

fn sq_dist(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - y).powi(2)).sum()
}

/// Class-mean classifier.
#[derive(Debug, Clone)]
pub struct NearestCentroid {
    centroids: Vec<Option<Vec<f64>>>,
}

impl NearestCentroid {
    pub fn fit(features: &[Vec<f32>], labels: &[usize], n_classes: usize) -> Result<Self> {
        if features.is_empty() || features.len() != labels.len() {
            return Err(Error::invalid("nearest-centroid: empty or mismatched data"));
        }
        let dim = features[0].len();
        let mut sums = vec![vec![0f64; dim]; n_classes];
        let mut counts = vec![0usize; n_classes];
        for (x, &y) in features.iter().zip(labels) {
            if y >= n_classes {
                return Err(Error::invalid(format!("label {y} >= {n_classes}")));
            }
            counts[y] += 1;
            for (s, v) in sums[y].iter_mut().zip(x) {
                *s += *v as f64;
            }
        }
        let centroids = sums
            .into_iter()
            .zip(counts)
            .map(|(s, c)| {
                (c > 0).then(|| s.into_iter().map(|v| v / c as f64).collect())
            })
            .collect();
        Ok(Self { centroids })
    }

    /// Mean of class `k`, if it had any training members.
    pub fn centroid(&self, k: usize) -> Option<&[f64]> {
        self.centroids.get(k)?.as_deref()
    }

    pub fn predict(&self, x: &[f32]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (k, c) in self.centroids.iter().enumerate() {
            if let Some(c) = c {
                let d = sq_dist(x, c);
                if d < best.0 {
                    best = (d, k);
                }
            }
        }
        best.1
    }

    pub fn accuracy(&self, features: &[Vec<f32>], labels: &[usize]) -> f64 {
        let hits = features
            .iter()
            .zip(labels)
            .filter(|(x, &y)| self.predict(x) == y)
            .count();
        hits as f64 / features.len().max(1) as f64
    }
}

/// Multinomial logistic regression on standardized features.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl LinearProbe {
    pub fn fit(
        features: &[Vec<f32>],
        labels: &[usize],
        n_classes: usize,
        epochs: usize,
        seed: u64,
    ) -> Result<Self> {
        if features.is_empty() || features.len() != labels.len() {
            return Err(Error::invalid("linear probe: empty or mismatched data"));
        }
        let dim = features[0].len();
        let n = features.len() as f64;
        let mut mean = vec![0f64; dim];
        for x in features {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += *v as f64 / n;
            }
        }
        let mut scale = vec![0f64; dim];
        for x in features {
            for ((s, v), m) in scale.iter_mut().zip(x).zip(&mean) {
                *s += (*v as f64 - m).powi(2) / n;
            }
        }
        for s in scale.iter_mut() {
            *s = 1.0 / (s.sqrt() + 1e-6);
        }
        let xs: Vec<Vec<f64>> = features
            .iter()
            .map(|x| {
                x.iter()
                    .zip(&mean)
                    .zip(&scale)
                    .map(|((v, m), s)| (*v as f64 - m) * s)
                    .collect()
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights: Vec<Vec<f64>> = (0..n_classes)
            .map(|_| {
                (0..dim)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        0.01 * z
                    })
                    .collect()
            })
            .collect();
        let mut bias = vec![0f64; n_classes];
        let lr = 0.1;
        let l2 = 1e-3;
        for _ in 0..epochs {
            let mut gw = vec![vec![0f64; dim]; n_classes];
            let mut gb = vec![0f64; n_classes];
            for (x, &y) in xs.iter().zip(labels) {
                let p = softmax_scores(&weights, &bias, x);
                for k in 0..n_classes {
                    let d = p[k] - if k == y { 1.0 } else { 0.0 };
                    gb[k] += d / n;
                    for (g, v) in gw[k].iter_mut().zip(x) {
                        *g += d * v / n;
                    }
                }
            }
            for k in 0..n_classes {
                bias[k] -= lr * gb[k];
                for (w, g) in weights[k].iter_mut().zip(&gw[k]) {
                    *w -= lr * (g + l2 * *w);
                }
            }
        }
        Ok(Self {
            mean,
            scale,
            weights,
            bias,
        })
    }

    pub fn predict(&self, x: &[f32]) -> usize {
        let xs: Vec<f64> = x
            .iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (*v as f64 - m) * s)
            .collect();
        let p = softmax_scores(&self.weights, &self.bias, &xs);
        p.iter()
            .enumerate()
            .fold((0, f64::MIN), |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc })
            .0
    }

    pub fn accuracy(&self, features: &[Vec<f32>], labels: &[usize]) -> f64 {
        let hits = features
            .iter()
            .zip(labels)
            .filter(|(x, &y)| self.predict(x) == y)
            .count();
        hits as f64 / features.len().max(1) as f64
    }
}

fn softmax_scores(w: &[Vec<f64>], b: &[f64], x: &[f64]) -> Vec<f64> {
    let logits: Vec<f64> = w
        .iter()
        .zip(b)
        .map(|(wk, bk)| bk + wk.iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
        .collect();
    let max = logits.iter().cloned().fold(f64::MIN, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}
