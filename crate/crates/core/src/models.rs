//! From-scratch classifiers: a one-hidden-layer ReLU MLP (target, shadow and
//! distilled models) and binary logistic regression (the shadow attack's
//! final classifier).
//!
//! Both are trained with plain minibatch SGD. The minibatch gradient is the
//! *sum* of per-example gradients, so the learning rate applies per example.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{argmax, softmax_slice, LogitVector, SeededRng};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            learning_rate: 0.01,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::param("epochs must be >= 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::param(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size must be >= 1"));
        }
        Ok(())
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

/// Weights of a `d -> h -> k` network with one ReLU hidden layer.
///
/// `w1` is `h x d` and `w2` is `k x h`, both row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub input_dim: usize,
    pub hidden: usize,
    pub classes: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl MlpParams {
    pub fn zeros(input_dim: usize, hidden: usize, classes: usize) -> Self {
        Self {
            input_dim,
            hidden,
            classes,
            w1: vec![0.0; hidden * input_dim],
            b1: vec![0.0; hidden],
            w2: vec![0.0; classes * hidden],
            b2: vec![0.0; classes],
        }
    }

    /// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for every weight and bias.
    pub fn init(input_dim: usize, hidden: usize, classes: usize, rng: &mut SeededRng) -> Result<Self> {
        if input_dim == 0 || hidden == 0 || classes < 2 {
            return Err(Error::param(format!(
                "invalid architecture {input_dim} -> {hidden} -> {classes}"
            )));
        }
        let mut p = Self::zeros(input_dim, hidden, classes);
        let b1 = 1.0 / (input_dim as f64).sqrt();
        let b2 = 1.0 / (hidden as f64).sqrt();
        for w in p.w1.iter_mut().chain(p.b1.iter_mut()) {
            *w = rng.random_range(-b1..=b1);
        }
        for w in p.w2.iter_mut().chain(p.b2.iter_mut()) {
            *w = rng.random_range(-b2..=b2);
        }
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let (d, h, k) = (self.input_dim, self.hidden, self.classes);
        if d == 0 || h == 0 || k < 2 {
            return Err(Error::input(format!("invalid architecture {d} -> {h} -> {k}")));
        }
        if self.w1.len() != h * d || self.b1.len() != h || self.w2.len() != k * h || self.b2.len() != k {
            return Err(Error::input("parameter shapes do not match the architecture"));
        }
        if self.to_flat().iter().any(|w| !w.is_finite()) {
            return Err(Error::input("parameters contain non-finite values"));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// All parameters in `w1, b1, w2, b2` order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        v.extend_from_slice(&self.w1);
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(&self.w2);
        v.extend_from_slice(&self.b2);
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "flat parameter length");
        let mut rest = flat;
        for part in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            let (head, tail) = rest.split_at(part.len());
            part.copy_from_slice(head);
            rest = tail;
        }
    }

    fn check_features(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.input_dim {
            return Err(Error::input(format!(
                "expected {} features, got {}",
                self.input_dim,
                features.len()
            )));
        }
        Ok(())
    }

    /// Returns `(pre-activation, logits)`.
    fn forward_raw(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d = self.input_dim;
        let pre: Vec<f64> = (0..self.hidden)
            .map(|j| {
                let row = &self.w1[j * d..(j + 1) * d];
                self.b1[j] + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>()
            })
            .collect();
        let h = self.hidden;
        let logits = (0..self.classes)
            .map(|c| {
                let row = &self.w2[c * h..(c + 1) * h];
                self.b2[c] + row.iter().zip(&pre).map(|(w, a)| w * a.max(0.0)).sum::<f64>()
            })
            .collect();
        (pre, logits)
    }

    pub fn predict_logits(&self, features: &[f64]) -> Result<LogitVector> {
        self.check_features(features)?;
        let (_, logits) = self.forward_raw(features);
        LogitVector::new(logits)
    }

    /// Cross-entropy against a (possibly soft) target distribution, and its
    /// gradient with respect to every parameter, packed as an `MlpParams`.
    pub fn loss_and_gradient(&self, features: &[f64], target: &[f64]) -> Result<(f64, MlpParams)> {
        self.check_features(features)?;
        if target.len() != self.classes {
            return Err(Error::input(format!(
                "target has {} entries, expected {}",
                target.len(),
                self.classes
            )));
        }
        let mut grad = MlpParams::zeros(self.input_dim, self.hidden, self.classes);
        let loss = self.accumulate_gradient(features, target, &mut grad);
        Ok((loss, grad))
    }

    fn accumulate_gradient(&self, x: &[f64], target: &[f64], grad: &mut MlpParams) -> f64 {
        let (d, h) = (self.input_dim, self.hidden);
        let (pre, logits) = self.forward_raw(x);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let log_sum = sum.ln() + max;
        let loss: f64 = target
            .iter()
            .zip(&logits)
            .filter(|(t, _)| **t != 0.0)
            .map(|(t, z)| t * (log_sum - z))
            .sum();

        let mut dhidden = vec![0.0; h];
        for c in 0..self.classes {
            let dz = exps[c] / sum - target[c];
            grad.b2[c] += dz;
            for j in 0..h {
                let act = pre[j].max(0.0);
                grad.w2[c * h + j] += dz * act;
                dhidden[j] += dz * self.w2[c * h + j];
            }
        }
        for j in 0..h {
            if pre[j] <= 0.0 {
                continue;
            }
            let da = dhidden[j];
            grad.b1[j] += da;
            for (g, xi) in grad.w1[j * d..(j + 1) * d].iter_mut().zip(x) {
                *g += da * xi;
            }
        }
        loss
    }
}

pub fn one_hot(label: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    v[label] = 1.0;
    v
}

/// Trains an MLP on hard labels.
pub fn train_mlp(train: &Dataset, cfg: &TrainConfig, hidden_width: usize) -> Result<MlpParams> {
    let k = train.num_classes();
    let features: Vec<&[f64]> = train.examples().iter().map(|e| e.features.as_slice()).collect();
    let targets: Vec<Vec<f64>> = train.examples().iter().map(|e| one_hot(e.label, k)).collect();
    train_mlp_soft(&features, &targets, k, cfg, hidden_width)
}

/// Trains an MLP against arbitrary target distributions (used for
/// distillation; hard labels are the one-hot special case).
pub fn train_mlp_soft(
    features: &[&[f64]],
    targets: &[Vec<f64>],
    classes: usize,
    cfg: &TrainConfig,
    hidden_width: usize,
) -> Result<MlpParams> {
    cfg.validate()?;
    if features.is_empty() {
        return Err(Error::input("training set is empty"));
    }
    if features.len() != targets.len() {
        return Err(Error::input("features and targets differ in length"));
    }
    let d = features[0].len();
    if let Some(i) = features.iter().position(|f| f.len() != d) {
        return Err(Error::input(format!("example {i} has inconsistent feature length")));
    }
    if let Some(i) = targets.iter().position(|t| t.len() != classes) {
        return Err(Error::input(format!("target {i} has wrong length")));
    }

    let mut params = MlpParams::init(d, hidden_width, classes, &mut SeededRng::new(cfg.seed, 0))?;
    let mut shuffle_rng = SeededRng::new(cfg.seed, 1);
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut grad = MlpParams::zeros(d, hidden_width, classes);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grad.set_flat(&vec![0.0; grad.num_params()]);
            for &i in batch {
                epoch_loss += params.accumulate_gradient(features[i], &targets[i], &mut grad);
            }
            sgd_step(&mut params, &grad, cfg.learning_rate);
        }
        if !epoch_loss.is_finite() || params.to_flat().iter().any(|w| !w.is_finite()) {
            return Err(Error::TrainingDiverged { epoch });
        }
    }
    Ok(params)
}

fn sgd_step(params: &mut MlpParams, grad: &MlpParams, lr: f64) {
    for (w, g) in [
        (&mut params.w1, &grad.w1),
        (&mut params.b1, &grad.b1),
        (&mut params.w2, &grad.w2),
        (&mut params.b2, &grad.b2),
    ] {
        for (wi, gi) in w.iter_mut().zip(g) {
            *wi -= lr * gi;
        }
    }
}

/// Fraction of examples whose argmax logit (lowest index on ties) is the label.
pub fn model_accuracy(params: &MlpParams, eval_set: &Dataset) -> Result<f64> {
    let mut correct = 0usize;
    for ex in eval_set.examples() {
        let logits = params.predict_logits(&ex.features)?;
        if argmax(logits.as_slice()) == ex.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / eval_set.len() as f64)
}

/// Softmax probabilities of the model at temperature 1.
pub fn predict_probs(params: &MlpParams, features: &[f64]) -> Result<crate::numerics::ProbVector> {
    let logits = params.predict_logits(features)?;
    softmax_slice(logits.as_slice(), 1.0)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary logistic regression over standardized features. The
/// standardization statistics are part of the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRegParams {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
}

impl LogRegParams {
    /// All-zero weights with identity standardization; scores 0.5 everywhere.
    pub fn zeros(dim: usize) -> Self {
        Self {
            weights: vec![0.0; dim],
            bias: 0.0,
            feature_mean: vec![0.0; dim],
            feature_std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.weights.len();
        if self.feature_mean.len() != d || self.feature_std.len() != d {
            return Err(Error::input("logistic regression parameter shapes disagree"));
        }
        let finite = self
            .weights
            .iter()
            .chain(&self.feature_mean)
            .chain(&self.feature_std)
            .chain(std::iter::once(&self.bias))
            .all(|v| v.is_finite());
        if !finite || self.feature_std.iter().any(|s| *s <= 0.0) {
            return Err(Error::input("logistic regression parameters are not finite/positive"));
        }
        Ok(())
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.feature_mean)
            .zip(&self.feature_std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    fn margin_standardized(&self, xs: &[f64]) -> f64 {
        self.bias + self.weights.iter().zip(xs).map(|(w, x)| w * x).sum::<f64>()
    }

    /// `sigmoid(w . standardize(x) + b)`.
    pub fn score(&self, features: &[f64]) -> Result<f64> {
        if features.len() != self.dim() {
            return Err(Error::input(format!(
                "expected {} features, got {}",
                self.dim(),
                features.len()
            )));
        }
        Ok(sigmoid(self.margin_standardized(&self.standardize(features))))
    }

    /// Binary cross-entropy of one example and its gradient with respect to
    /// `(weights, bias)`; the standardization is held fixed.
    pub fn loss_and_gradient(&self, features: &[f64], label: bool) -> Result<(f64, Vec<f64>, f64)> {
        if features.len() != self.dim() {
            return Err(Error::input("feature length mismatch"));
        }
        let xs = self.standardize(features);
        let m = self.margin_standardized(&xs);
        let y = if label { 1.0 } else { 0.0 };
        let loss = bce_from_margin(m, label);
        let dm = sigmoid(m) - y;
        Ok((loss, xs.iter().map(|x| dm * x).collect(), dm))
    }
}

/// Binary cross-entropy of a margin: `softplus(-m)` for positives,
/// `softplus(m)` for negatives. Written without the `softplus(m) - y m`
/// cancellation, which loses all precision once `|m|` is large.
fn bce_from_margin(m: f64, label: bool) -> f64 {
    let s = if label { -m } else { m };
    s.max(0.0) + (-s.abs()).exp().ln_1p()
}

/// SGD on binary cross-entropy. Labels: `true` = positive class.
pub fn train_logreg(features: &[Vec<f64>], labels: &[bool], cfg: &TrainConfig) -> Result<LogRegParams> {
    cfg.validate()?;
    if features.len() != labels.len() {
        return Err(Error::input("features and labels differ in length"));
    }
    if !labels.iter().any(|&l| l) {
        return Err(Error::DegenerateLabels("negatives"));
    }
    if labels.iter().all(|&l| l) {
        return Err(Error::DegenerateLabels("positives"));
    }
    let d = features[0].len();
    if d == 0 || features.iter().any(|f| f.len() != d) {
        return Err(Error::input("inconsistent feature length"));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::input("non-finite feature"));
    }

    let n = features.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| features.iter().map(|f| f[j]).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..d)
        .map(|j| {
            let var = features.iter().map(|f| (f[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if var > 0.0 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let mut params = LogRegParams {
        weights: vec![0.0; d],
        bias: 0.0,
        feature_mean: mean,
        feature_std: std,
    };
    let standardized: Vec<Vec<f64>> = features.iter().map(|f| params.standardize(f)).collect();

    let mut rng = SeededRng::new(cfg.seed, 1);
    let mut order: Vec<usize> = (0..features.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            for &i in batch {
                let m = params.margin_standardized(&standardized[i]);
                let y = if labels[i] { 1.0 } else { 0.0 };
                epoch_loss += bce_from_margin(m, labels[i]);
                let dm = sigmoid(m) - y;
                for (g, x) in gw.iter_mut().zip(&standardized[i]) {
                    *g += dm * x;
                }
                gb += dm;
            }
            for (w, g) in params.weights.iter_mut().zip(&gw) {
                *w -= cfg.learning_rate * g;
            }
            params.bias -= cfg.learning_rate * gb;
        }
        if !epoch_loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
    }
    Ok(params)
}
