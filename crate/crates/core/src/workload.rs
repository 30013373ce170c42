//! Local training workload: multinomial logistic regression trained with
//! mini-batch SGD on synthetic Gaussian blobs, plus the cost model that maps
//! it onto simulated steps and update payload sizes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{derive_seed, SimRng};

/// Cost of one forward-only (evaluation) batch relative to a training step.
pub const FORWARD_COST_RATIO: f64 = 1.0 / 3.0;

/// Bytes per serialized parameter (32-bit little-endian floats).
pub const BYTES_PER_PARAM: u64 = 4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorkloadError {
    #[error("client has no training data")]
    EmptyClientData,
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("invalid workload setting `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
}

/// Weights `[num_classes x num_features]` (row-major) and one bias per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    num_classes: usize,
    num_features: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(num_classes: usize, num_features: usize) -> Self {
        Self {
            num_classes,
            num_features,
            weights: vec![0.0; num_classes * num_features],
            bias: vec![0.0; num_classes],
        }
    }

    pub fn from_parts(
        num_classes: usize,
        num_features: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self, WorkloadError> {
        if weights.len() != num_classes * num_features || bias.len() != num_classes {
            return Err(WorkloadError::ShapeMismatch {
                expected: format!("{num_classes}x{num_features} + {num_classes}"),
                got: format!("{} + {}", weights.len(), bias.len()),
            });
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(WorkloadError::InvalidConfig {
                field: "params",
                reason: "non-finite entry".into(),
            });
        }
        Ok(Self {
            num_classes,
            num_features,
            weights,
            bias,
        })
    }

    /// Small random initialization.
    pub fn random(num_classes: usize, num_features: usize, scale: f64, seed: u64) -> Self {
        let mut rng = SimRng::seed_from_u64(seed);
        let weights = (0..num_classes * num_features)
            .map(|_| scale * rng.standard_normal())
            .collect();
        let bias = (0..num_classes).map(|_| scale * rng.standard_normal()).collect();
        Self {
            num_classes,
            num_features,
            weights,
            bias,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.num_classes == other.num_classes && self.num_features == other.num_features
    }

    pub fn shape(&self) -> String {
        format!("{}x{}", self.num_classes, self.num_features)
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// All parameters, weights first, then biases.
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(&self.bias)
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.iter_mut().chain(self.bias.iter_mut())
    }

    /// 32-bit little-endian serialization, weights then biases.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
    }

    fn logits(&self, x: &[f64], out: &mut [f64]) {
        for (c, z) in out.iter_mut().enumerate() {
            let row = &self.weights[c * self.num_features..(c + 1) * self.num_features];
            *z = self.bias[c] + dot(row, x);
        }
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let mut z = vec![0.0; self.num_classes];
        self.logits(x, &mut z);
        argmax(&z)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    acc.iter().sum::<f64>() + tail
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// In-place softmax; returns log-sum-exp.
fn softmax(z: &mut [f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
    m + sum.ln()
}

/// Row-major features with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    num_classes: usize,
    num_features: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        num_classes: usize,
        num_features: usize,
        features: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self, WorkloadError> {
        if features.len() != labels.len() * num_features {
            return Err(WorkloadError::ShapeMismatch {
                expected: format!("{} x {num_features} features", labels.len()),
                got: format!("{} values", features.len()),
            });
        }
        if labels.iter().any(|&l| l >= num_classes) {
            return Err(WorkloadError::InvalidConfig {
                field: "labels",
                reason: format!("label outside 0..{num_classes}"),
            });
        }
        Ok(Self {
            num_classes,
            num_features,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.features[i * self.num_features..(i + 1) * self.num_features]
    }

    /// Copies the given rows, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut features = Vec::with_capacity(indices.len() * self.num_features);
        for &i in indices {
            features.extend_from_slice(self.sample(i));
        }
        Self {
            num_classes: self.num_classes,
            num_features: self.num_features,
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Concatenation of several datasets with the same shape.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a Dataset>) -> Option<Self> {
        let mut iter = parts.into_iter();
        let mut out = iter.next()?.clone();
        for p in iter {
            if p.num_features != out.num_features || p.num_classes != out.num_classes {
                return None;
            }
            out.features.extend_from_slice(&p.features);
            out.labels.extend_from_slice(&p.labels);
        }
        Some(out)
    }
}

/// Parameters of the Gaussian-blob generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub num_features: usize,
    pub samples_per_class: usize,
    pub test_samples_per_class: usize,
    /// Distance of each class mean from the origin; each class gets its own axis.
    pub mean_separation: f64,
    pub noise_std: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            num_features: 90,
            samples_per_class: 6_000,
            test_samples_per_class: 500,
            mean_separation: 5.0,
            noise_std: 1.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |field, reason: &str| {
            Err(WorkloadError::InvalidConfig {
                field,
                reason: reason.into(),
            })
        };
        if self.num_classes == 0 {
            return bad("num_classes", "must be >= 1");
        }
        if self.num_features == 0 {
            return bad("num_features", "must be >= 1");
        }
        if self.samples_per_class == 0 {
            return bad("samples_per_class", "must be >= 1");
        }
        if !(self.mean_separation.is_finite() && self.mean_separation >= 0.0) {
            return bad("mean_separation", "must be finite and >= 0");
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return bad("noise_std", "must be finite and >= 0");
        }
        Ok(())
    }

    /// Class mean: `mean_separation` along axis `class mod num_features`.
    pub fn class_mean(&self, class: usize) -> Vec<f64> {
        let mut mu = vec![0.0; self.num_features];
        mu[class % self.num_features] = self.mean_separation;
        mu
    }

    /// `per_class * num_classes` samples with labels cycling `0, 1, .., K-1, 0, ..`.
    pub fn generate(&self, per_class: usize, seed: u64) -> Dataset {
        let labels: Vec<usize> = (0..per_class * self.num_classes)
            .map(|i| i % self.num_classes)
            .collect();
        self.generate_for_labels(labels, seed)
    }

    /// One blob sample per entry of `labels`, drawn in order. Labels must be
    /// below `num_classes`.
    pub fn generate_for_labels(&self, labels: Vec<usize>, seed: u64) -> Dataset {
        let mut rng = SimRng::seed_from_u64(seed);
        let means: Vec<Vec<f64>> = (0..self.num_classes).map(|c| self.class_mean(c)).collect();
        let mut features = Vec::with_capacity(labels.len() * self.num_features);
        for &c in &labels {
            features.extend(means[c].iter().map(|m| m + self.noise_std * rng.standard_normal()));
        }
        Dataset {
            num_classes: self.num_classes,
            num_features: self.num_features,
            features,
            labels,
        }
    }

    /// Training and held-out test sets from independent streams of `seed`.
    pub fn generate_train_test(&self, seed: u64) -> (Dataset, Dataset) {
        (
            self.generate(self.samples_per_class, Self::train_seed(seed)),
            self.generate(self.test_samples_per_class, Self::test_seed(seed)),
        )
    }

    pub fn train_seed(seed: u64) -> u64 {
        derive_seed(seed, &[0x0074_7261_696e])
    }

    pub fn test_seed(seed: u64) -> u64 {
        derive_seed(seed, &[0x7465_7374])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            local_epochs: 10,
            batch_size: 32,
            learning_rate: 0.05,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.batch_size == 0 {
            return Err(WorkloadError::InvalidConfig {
                field: "batch_size",
                reason: "must be >= 1".into(),
            });
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(WorkloadError::InvalidConfig {
                field: "learning_rate",
                reason: "must be finite and >= 0".into(),
            });
        }
        Ok(())
    }

    pub fn steps_for(&self, n: usize) -> u64 {
        (self.local_epochs * n.div_ceil(self.batch_size)) as u64
    }
}

/// Mean softmax cross-entropy over `rows` and its gradient (same layout as the params).
pub fn loss_and_gradient(params: &ModelParams, data: &Dataset, rows: &[usize]) -> (f64, ModelParams) {
    let mut grad = ModelParams::zeros(params.num_classes, params.num_features);
    let mut z = vec![0.0; params.num_classes];
    let loss = accumulate_gradient(params, data, rows, &mut z, &mut grad);
    (loss, grad)
}

fn accumulate_gradient(
    params: &ModelParams,
    data: &Dataset,
    rows: &[usize],
    z: &mut [f64],
    grad: &mut ModelParams,
) -> f64 {
    let f = params.num_features;
    let inv = 1.0 / rows.len() as f64;
    let mut loss = 0.0;
    for &i in rows {
        let x = data.sample(i);
        let y = data.labels[i];
        params.logits(x, z);
        let target_logit = z[y];
        let lse = softmax(z);
        loss += lse - target_logit;
        z[y] -= 1.0;
        for (c, &d) in z.iter().enumerate() {
            let g = d * inv;
            grad.bias[c] += g;
            for (w, &xj) in grad.weights[c * f..(c + 1) * f].iter_mut().zip(x) {
                *w += g * xj;
            }
        }
    }
    loss * inv
}

/// Mean cross-entropy over the whole dataset.
pub fn mean_loss(params: &ModelParams, data: &Dataset) -> f64 {
    let rows: Vec<usize> = (0..data.len()).collect();
    loss_and_gradient(params, data, &rows).0
}

/// Mini-batch SGD for `cfg.local_epochs` epochs, reshuffling every epoch.
/// Returns the trained parameters and the number of SGD steps taken.
pub fn local_train(
    params: &ModelParams,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(ModelParams, u64), WorkloadError> {
    if data.is_empty() {
        return Err(WorkloadError::EmptyClientData);
    }
    cfg.validate()?;
    if params.num_classes != data.num_classes || params.num_features != data.num_features {
        return Err(WorkloadError::ShapeMismatch {
            expected: params.shape(),
            got: format!("{}x{}", data.num_classes, data.num_features),
        });
    }
    let mut rng = SimRng::seed_from_u64(cfg.seed);
    let mut current = params.clone();
    let mut grad = ModelParams::zeros(params.num_classes, params.num_features);
    let mut z = vec![0.0; params.num_classes];
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut steps = 0u64;
    for _ in 0..cfg.local_epochs {
        rng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            accumulate_gradient(&current, data, batch, &mut z, &mut grad);
            for (w, g) in current.iter_mut().zip(grad.iter()) {
                *w -= cfg.learning_rate * g;
            }
            steps += 1;
        }
    }
    Ok((current, steps))
}

/// Fraction of samples whose argmax prediction equals the label.
pub fn evaluate(params: &ModelParams, data: &Dataset) -> Result<f64, WorkloadError> {
    if data.is_empty() {
        return Err(WorkloadError::EmptyClientData);
    }
    let correct = (0..data.len())
        .filter(|&i| params.predict(data.sample(i)) == data.labels[i])
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Size of one serialized model update.
pub fn update_payload_bytes(params: &ModelParams) -> u64 {
    params.num_params() as u64 * BYTES_PER_PARAM
}

/// Evaluation cost of `n` samples in training-step equivalents.
pub fn eval_step_equivalents(n: usize, batch_size: usize) -> f64 {
    n.div_ceil(batch_size.max(1)) as f64 * FORWARD_COST_RATIO
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec(classes: usize, features: usize, per_class: usize, sep: f64) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: classes,
            num_features: features,
            samples_per_class: per_class,
            test_samples_per_class: per_class,
            mean_separation: sep,
            noise_std: 1.0,
        }
    }

    #[test]
    fn zero_learning_rate_leaves_params_untouched() {
        let data = tiny_spec(3, 4, 10, 3.0).generate(10, 1);
        let p = ModelParams::random(3, 4, 0.1, 2);
        let cfg = TrainConfig {
            local_epochs: 2,
            batch_size: 4,
            learning_rate: 0.0,
            seed: 3,
        };
        let (out, steps) = local_train(&p, &data, &cfg).unwrap();
        assert_eq!(out, p);
        assert_eq!(steps, 2 * 30usize.div_ceil(4) as u64);
    }

    #[test]
    fn single_sample_step_matches_finite_difference_gradient() {
        let data = tiny_spec(3, 5, 1, 2.0).generate(1, 4).subset(&[1]);
        let p = ModelParams::random(3, 5, 0.3, 5);
        let lr = 0.1;
        let cfg = TrainConfig {
            local_epochs: 1,
            batch_size: 1,
            learning_rate: lr,
            seed: 0,
        };
        let (after, steps) = local_train(&p, &data, &cfg).unwrap();
        assert_eq!(steps, 1);

        let eps = 1e-5;
        let fd: Vec<f64> = (0..p.num_params())
            .map(|k| {
                let bump = |delta: f64| {
                    let mut q = p.clone();
                    *q.iter_mut().nth(k).unwrap() += delta;
                    mean_loss(&q, &data)
                };
                (bump(eps) - bump(-eps)) / (2.0 * eps)
            })
            .collect();
        for ((new, old), g) in after.iter().zip(p.iter()).zip(&fd) {
            let expected = old - lr * g;
            let err = (new - expected).abs() / expected.abs().max(1e-3);
            assert!(err < 1e-4, "new {new} expected {expected}");
        }
    }

    #[test]
    fn two_separated_classes_train_to_high_accuracy() {
        let spec = tiny_spec(2, 8, 200, 5.0);
        let data = spec.generate(200, 6);
        let cfg = TrainConfig {
            local_epochs: 5,
            batch_size: 16,
            learning_rate: 0.1,
            seed: 1,
        };
        let (p, _) = local_train(&ModelParams::zeros(2, 8), &data, &cfg).unwrap();
        assert!(evaluate(&p, &data).unwrap() >= 0.99);
    }

    #[test]
    fn mean_classifier_is_perfect_on_noiseless_blobs() {
        let mut spec = tiny_spec(4, 6, 5, 3.0);
        spec.noise_std = 0.0;
        let data = spec.generate(5, 0);
        let mut w = Vec::new();
        for c in 0..4 {
            w.extend(spec.class_mean(c));
        }
        let p = ModelParams::from_parts(4, 6, w, vec![0.0; 4]).unwrap();
        assert_eq!(evaluate(&p, &data).unwrap(), 1.0);
    }

    #[test]
    fn random_params_score_near_chance() {
        let mut accs = Vec::new();
        for seed in 0..10 {
            let mut rng = SimRng::seed_from_u64(100 + seed);
            let n = 2000;
            let features = (0..n * 8).map(|_| rng.standard_normal()).collect();
            let labels = (0..n).map(|_| rng.index(10)).collect();
            let data = Dataset::new(10, 8, features, labels).unwrap();
            let p = ModelParams::random(10, 8, 1.0, 200 + seed);
            accs.push(evaluate(&p, &data).unwrap());
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((mean - 0.1).abs() <= 0.05, "mean accuracy {mean}");
    }

    #[test]
    fn empty_data_rejected() {
        let data = Dataset::new(2, 3, vec![], vec![]).unwrap();
        let p = ModelParams::zeros(2, 3);
        assert_eq!(evaluate(&p, &data), Err(WorkloadError::EmptyClientData));
        assert_eq!(
            local_train(&p, &data, &TrainConfig::default()),
            Err(WorkloadError::EmptyClientData)
        );
    }

    #[test]
    fn payload_sizes() {
        assert_eq!(update_payload_bytes(&ModelParams::zeros(10, 90)), 3640);
        assert_eq!(update_payload_bytes(&ModelParams::zeros(1, 1)), 8);
        let p = ModelParams::random(10, 90, 1.0, 0);
        assert_eq!(p.to_le_bytes().len() as u64, update_payload_bytes(&p));
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let spec = tiny_spec(3, 6, 50, 4.0);
        for seed in 0..10 {
            let data = spec.generate(50, seed);
            let p0 = ModelParams::random(3, 6, 0.5, seed + 100);
            let cfg = TrainConfig {
                local_epochs: 2,
                batch_size: 8,
                learning_rate: 0.01,
                seed,
            };
            let (a, _) = local_train(&p0, &data, &cfg).unwrap();
            let (b, _) = local_train(&p0, &data, &cfg).unwrap();
            assert_eq!(a, b);
            assert!(mean_loss(&a, &data) <= mean_loss(&p0, &data));
        }
    }
}
