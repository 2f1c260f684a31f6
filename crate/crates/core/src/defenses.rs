//! Output-side defenses: adaptive (sensitivity-scaled) logit noise with
//! temperature smoothing, its fixed-variance counterpart, and an ensemble
//! defense that distills sub-models trained on overlapping data splits.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{predict_probs, train_mlp, train_mlp_soft, MlpParams, TrainConfig};
use crate::numerics::{
    derive_seed, gaussian_sample, shannon_entropy, softmax, softmax_slice, LogitVector, ProbVector, SeededRng,
};

/// Knobs of the adaptive noise defense.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynaNoiseConfig {
    /// Noise variance applied to a maximally uncertain query.
    pub base_variance: f64,
    /// How strongly confident queries amplify the variance.
    pub lambda_scale: f64,
    /// Softmax temperature used to re-normalize the perturbed logits.
    pub temperature: f64,
}

impl Default for DynaNoiseConfig {
    fn default() -> Self {
        Self {
            base_variance: 0.5,
            lambda_scale: 4.0,
            temperature: 2.0,
        }
    }
}

impl DynaNoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_variance.is_finite() && self.base_variance >= 0.0) {
            return Err(Error::param(format!(
                "base_variance must be >= 0, got {}",
                self.base_variance
            )));
        }
        if !(self.lambda_scale.is_finite() && self.lambda_scale >= 0.0) {
            return Err(Error::param(format!(
                "lambda_scale must be >= 0, got {}",
                self.lambda_scale
            )));
        }
        check_temperature(self.temperature)
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t.is_finite() && t > 0.0) {
        return Err(Error::param(format!("temperature must be > 0, got {t}")));
    }
    Ok(())
}

/// Smoothing needs `T > 1`; smaller temperatures are accepted but sharpen
/// the output instead.
pub fn temperature_warning(t: f64) -> Option<String> {
    (t > 0.0 && t <= 1.0).then(|| format!("temperature {t} <= 1 does not smooth the output distribution"))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StaticNoiseConfig {
    pub variance: f64,
    pub temperature: f64,
}

impl Default for StaticNoiseConfig {
    fn default() -> Self {
        Self {
            variance: 0.5,
            temperature: 2.0,
        }
    }
}

impl StaticNoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.variance.is_finite() && self.variance >= 0.0) {
            return Err(Error::param(format!("variance must be >= 0, got {}", self.variance)));
        }
        check_temperature(self.temperature)
    }
}

/// How risky a query is to answer, in `[0, 1]`: one minus the normalized
/// entropy of the clean prediction.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct SensitivityScore(f64);

impl SensitivityScore {
    pub fn new(value: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&value) {
            Ok(Self(value))
        } else {
            Err(Error::input(format!("sensitivity score {value} outside [0, 1]")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

pub fn sensitivity_score(z: &LogitVector) -> Result<SensitivityScore> {
    let p = softmax(z, 1.0)?;
    Ok(sensitivity_from_probs(&p))
}

pub fn sensitivity_from_probs(p: &ProbVector) -> SensitivityScore {
    let r = 1.0 - shannon_entropy(p) / (p.len() as f64).ln();
    // rounding in the entropy sum leaves ~1e-16 residue at the extremes
    let r = if r.abs() < SNAP { 0.0 } else if (1.0 - r).abs() < SNAP { 1.0 } else { r };
    SensitivityScore(r.clamp(0.0, 1.0))
}

const SNAP: f64 = 1e-12;

/// `base_variance * (1 + lambda_scale * r)`.
pub fn noise_variance(r: SensitivityScore, cfg: &DynaNoiseConfig) -> f64 {
    cfg.base_variance * (1.0 + cfg.lambda_scale * r.value())
}

fn perturb_and_smooth(z: &LogitVector, variance: f64, temperature: f64, rng: &mut SeededRng) -> Result<ProbVector> {
    let noisy = z
        .as_slice()
        .iter()
        .map(|&zi| Ok(zi + gaussian_sample(rng, variance)?))
        .collect::<Result<Vec<f64>>>()?;
    softmax_slice(&noisy, temperature)
}

/// Adds isotropic Gaussian noise scaled by the query's sensitivity to the
/// logits, then applies a tempered softmax. Consumes exactly `k` normal
/// draws from `rng`, in logit order.
pub fn dynanoise_transform(z: &LogitVector, cfg: &DynaNoiseConfig, rng: &mut SeededRng) -> Result<ProbVector> {
    cfg.validate()?;
    let variance = noise_variance(sensitivity_score(z)?, cfg);
    perturb_and_smooth(z, variance, cfg.temperature, rng)
}

/// The fixed-variance baseline: same noise and smoothing, no sensitivity term.
pub fn static_noise_transform(z: &LogitVector, cfg: &StaticNoiseConfig, rng: &mut SeededRng) -> Result<ProbVector> {
    cfg.validate()?;
    perturb_and_smooth(z, cfg.variance, cfg.temperature, rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelenaConfig {
    pub num_submodels: usize,
    pub partitions_per_sample: usize,
    pub submodel_train: TrainConfig,
    pub distill_train: TrainConfig,
}

impl Default for SelenaConfig {
    fn default() -> Self {
        Self {
            num_submodels: 5,
            partitions_per_sample: 2,
            submodel_train: TrainConfig::default(),
            distill_train: TrainConfig::default(),
        }
    }
}

impl SelenaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_submodels < 2 {
            return Err(Error::param("num_submodels must be >= 2"));
        }
        if self.partitions_per_sample == 0 || self.partitions_per_sample >= self.num_submodels {
            return Err(Error::param(format!(
                "partitions_per_sample must be in [1, {}), got {}",
                self.num_submodels, self.partitions_per_sample
            )));
        }
        self.submodel_train.validate()?;
        self.distill_train.validate()
    }
}

/// For each training sample, the sorted list of sub-models that must not
/// see it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionMap {
    pub num_submodels: usize,
    pub excluded_by: Vec<Vec<usize>>,
}

impl ExclusionMap {
    pub fn generate(num_samples: usize, num_submodels: usize, per_sample: usize, seed: u64) -> Self {
        let mut rng = SeededRng::new(seed, 0);
        let excluded_by = (0..num_samples)
            .map(|_| {
                let mut s = sample(&mut rng, num_submodels, per_sample).into_vec();
                s.sort_unstable();
                s
            })
            .collect();
        Self {
            num_submodels,
            excluded_by,
        }
    }

    /// Indices of the samples sub-model `m` trains on.
    pub fn training_indices(&self, m: usize) -> Vec<usize> {
        self.excluded_by
            .iter()
            .enumerate()
            .filter(|(_, ex)| !ex.contains(&m))
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelenaModel {
    pub distilled: MlpParams,
    pub submodels: Vec<MlpParams>,
    pub exclusions: ExclusionMap,
}

/// Split-AI training followed by self-distillation.
///
/// Each sample's soft label is the mean prediction of the sub-models that
/// excluded it; a fresh network is then fit to those soft labels.
pub fn selena_train(pool: &Dataset, cfg: &SelenaConfig, hidden_width: usize, seed: u64) -> Result<SelenaModel> {
    cfg.validate()?;
    if pool.len() < cfg.num_submodels {
        return Err(Error::param(format!(
            "pool of {} samples is smaller than num_submodels = {}",
            pool.len(),
            cfg.num_submodels
        )));
    }
    let exclusions = ExclusionMap::generate(
        pool.len(),
        cfg.num_submodels,
        cfg.partitions_per_sample,
        derive_seed(seed, 0),
    );

    let train_one = |m: usize| -> Result<MlpParams> {
        let idx = exclusions.training_indices(m);
        if idx.is_empty() {
            return Err(Error::Config(format!("sub-model {m} has an empty training set")));
        }
        let subset = pool.subset(&idx)?;
        let tc = cfg.submodel_train.with_seed(derive_seed(seed, 1 + m as u64));
        train_mlp(&subset, &tc, hidden_width)
    };
    #[cfg(feature = "parallel")]
    let submodels: Vec<MlpParams> = {
        use rayon::prelude::*;
        (0..cfg.num_submodels)
            .into_par_iter()
            .map(train_one)
            .collect::<Result<Vec<_>>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let submodels: Vec<MlpParams> = (0..cfg.num_submodels).map(train_one).collect::<Result<Vec<_>>>()?;

    let k = pool.num_classes();
    let mut soft_labels = Vec::with_capacity(pool.len());
    for (ex, excluders) in pool.examples().iter().zip(&exclusions.excluded_by) {
        let mut avg = vec![0.0; k];
        for &m in excluders {
            let p = predict_probs(&submodels[m], &ex.features)?;
            for (a, pi) in avg.iter_mut().zip(p.as_slice()) {
                *a += pi;
            }
        }
        for a in &mut avg {
            *a /= excluders.len() as f64;
        }
        soft_labels.push(avg);
    }
    let features: Vec<&[f64]> = pool.examples().iter().map(|e| e.features.as_slice()).collect();
    let tc = cfg.distill_train.with_seed(derive_seed(seed, u64::MAX));
    let distilled = train_mlp_soft(&features, &soft_labels, k, &tc, hidden_width)?;
    Ok(SelenaModel {
        distilled,
        submodels,
        exclusions,
    })
}

/// The deployed ensemble answers with the distilled model alone.
pub fn selena_inference(model: &SelenaModel, features: &[f64]) -> Result<ProbVector> {
    predict_probs(&model.distilled, features)
}

/// A defense condition evaluated by the harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DefenseKind {
    None,
    StaticNoise,
    #[serde(rename = "SELENA")]
    Selena,
    DynaNoise,
}

impl DefenseKind {
    pub const ALL: [DefenseKind; 4] = [
        DefenseKind::None,
        DefenseKind::StaticNoise,
        DefenseKind::Selena,
        DefenseKind::DynaNoise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DefenseKind::None => "None",
            DefenseKind::StaticNoise => "StaticNoise",
            DefenseKind::Selena => "SELENA",
            DefenseKind::DynaNoise => "DynaNoise",
        }
    }
}

impl fmt::Display for DefenseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DefenseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s.trim().chars().filter(|c| *c != '_' && *c != '-').collect();
        match norm.to_ascii_lowercase().as_str() {
            "none" => Ok(DefenseKind::None),
            "staticnoise" | "static" => Ok(DefenseKind::StaticNoise),
            "selena" => Ok(DefenseKind::Selena),
            "dynanoise" => Ok(DefenseKind::DynaNoise),
            _ => Err(Error::param(format!(
                "unknown defense {s:?} (expected None, StaticNoise, SELENA or DynaNoise)"
            ))),
        }
    }
}
