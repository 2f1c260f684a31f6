//! Scalar and vector primitives shared by every other module.
//!
//! All logarithms are natural logarithms. Randomness comes exclusively from
//! [`SeededRng`], a counter-addressed ChaCha stream, so per-sample work can be
//! scheduled on any number of threads without changing its results.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities at or below this value are floored when taking `-ln p`.
pub const LOSS_FLOOR: f64 = 1e-12;

/// Tolerance on the sum of a probability vector.
pub const PROB_SUM_TOLERANCE: f64 = 1e-9;

/// Unnormalized model scores for one query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(logits: Vec<f64>) -> Result<Self> {
        if logits.len() < 2 {
            return Err(Error::input(format!(
                "logit vector needs at least 2 entries, got {}",
                logits.len()
            )));
        }
        if let Some(i) = logits.iter().position(|z| !z.is_finite()) {
            return Err(Error::input(format!(
                "logit {i} is not finite ({})",
                logits[i]
            )));
        }
        Ok(Self(logits))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for LogitVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<LogitVector> for Vec<f64> {
    fn from(v: LogitVector) -> Self {
        v.0
    }
}

/// A discrete distribution over `k >= 2` classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::input(format!(
                "probability vector needs at least 2 entries, got {}",
                probs.len()
            )));
        }
        if let Some(i) = probs.iter().position(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::input(format!(
                "probability {i} is negative or not finite ({})",
                probs[i]
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
            return Err(Error::input(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(Self(probs))
    }

    pub fn uniform(k: usize) -> Result<Self> {
        Self::new(vec![1.0 / k as f64; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, class: usize) -> Option<f64> {
        self.0.get(class).copied()
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    /// The two largest entries, in descending order.
    pub fn top_two(&self) -> (f64, f64) {
        let mut first = f64::NEG_INFINITY;
        let mut second = f64::NEG_INFINITY;
        for &p in &self.0 {
            if p > first {
                second = first;
                first = p;
            } else if p > second {
                second = p;
            }
        }
        (first, second)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for ProbVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ProbVector> for Vec<f64> {
    fn from(v: ProbVector) -> Self {
        v.0
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Deterministic random stream addressed by `(master_seed, stream_id)`.
///
/// Two instances built from the same pair produce the same draw sequence, no
/// matter which thread owns them or what other streams have been consumed.
#[derive(Clone, Debug)]
pub struct SeededRng {
    master_seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(master_seed);
        inner.set_stream(stream_id);
        Self {
            master_seed,
            stream_id,
            inner,
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent child seed from a parent seed and a label.
pub fn derive_seed(parent: u64, label: u64) -> u64 {
    splitmix64(parent ^ splitmix64(label))
}

fn check_temperature(temperature: f64) -> Result<()> {
    if temperature.is_finite() && temperature > 0.0 {
        Ok(())
    } else {
        Err(Error::param(format!(
            "temperature must be finite and > 0, got {temperature}"
        )))
    }
}

/// Tempered softmax `exp(z_i / T) / sum_j exp(z_j / T)`.
pub fn softmax(z: &LogitVector, temperature: f64) -> Result<ProbVector> {
    softmax_slice(z.as_slice(), temperature)
}

pub(crate) fn softmax_slice(z: &[f64], temperature: f64) -> Result<ProbVector> {
    check_temperature(temperature)?;
    if let Some(i) = z.iter().position(|v| !v.is_finite()) {
        return Err(Error::input(format!("logit {i} is not finite ({})", z[i])));
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|&v| ((v - max) / temperature).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    ProbVector::new(out)
}

/// Shannon entropy in nats, with `0 ln 0 = 0`. Clamped into `[0, ln k]`.
pub fn shannon_entropy(p: &ProbVector) -> f64 {
    let h: f64 = -p
        .as_slice()
        .iter()
        .filter(|&&pi| pi > 0.0)
        .map(|&pi| pi * pi.ln())
        .sum::<f64>();
    h.clamp(0.0, (p.len() as f64).ln())
}

/// `D_KL(p || q)` in nats.
pub fn kl_divergence(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::input(format!(
            "KL divergence of vectors with lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    let mut total = 0.0;
    for (index, (&pi, &qi)) in p.as_slice().iter().zip(q.as_slice()).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(Error::DivergenceUndefined { index });
        }
        total += pi * (pi / qi).ln();
    }
    Ok(total.max(0.0))
}

/// One draw from `N(0, variance)`.
///
/// Always consumes exactly one standard-normal draw from `rng`, including when
/// `variance == 0`, so the stream position does not depend on the variance.
pub fn gaussian_sample(rng: &mut SeededRng, variance: f64) -> Result<f64> {
    if !(variance.is_finite() && variance >= 0.0) {
        return Err(Error::param(format!(
            "variance must be finite and >= 0, got {variance}"
        )));
    }
    let x: f64 = StandardNormal.sample(rng);
    if variance == 0.0 {
        Ok(0.0)
    } else {
        Ok(variance.sqrt() * x)
    }
}

/// `-ln p(label)`, with `p(label)` floored at [`LOSS_FLOOR`].
pub fn cross_entropy_loss(p: &ProbVector, true_label: usize) -> Result<f64> {
    let py = p.get(true_label).ok_or(Error::InvalidLabel {
        label: true_label,
        num_classes: p.len(),
    })?;
    Ok(-py.max(LOSS_FLOOR).ln())
}
