//! Membership inference attacks: confidence threshold, loss threshold, and a
//! shadow-model attack with a logistic-regression decision rule.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Membership};
use crate::error::{Error, Result};
use crate::models::{model_accuracy, predict_probs, train_logreg, train_mlp, LogRegParams, TrainConfig};
use crate::numerics::{cross_entropy_loss, derive_seed, ProbVector, SeededRng};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackThresholds {
    /// Confidence threshold.
    pub tau: f64,
    /// Loss threshold.
    pub gamma: f64,
}

impl Default for AttackThresholds {
    fn default() -> Self {
        Self { tau: 0.9, gamma: 0.5 }
    }
}

impl AttackThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::param(format!("tau must be in (0, 1), got {}", self.tau)));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::param(format!("gamma must be > 0, got {}", self.gamma)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Confidence,
    Loss,
    Shadow,
}

impl AttackKind {
    pub const ALL: [AttackKind; 3] = [AttackKind::Confidence, AttackKind::Loss, AttackKind::Shadow];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Confidence => "confidence",
            AttackKind::Loss => "loss",
            AttackKind::Shadow => "shadow",
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "confidence" => Ok(AttackKind::Confidence),
            "loss" => Ok(AttackKind::Loss),
            "shadow" => Ok(AttackKind::Shadow),
            _ => Err(Error::param(format!("unknown attack {s:?}"))),
        }
    }
}

/// Member iff `max_i p_i > tau`.
pub fn confidence_attack(p: &ProbVector, tau: f64) -> Membership {
    if p.max() > tau {
        Membership::Member
    } else {
        Membership::Nonmember
    }
}

/// Member iff `-ln p(y) < gamma`.
pub fn loss_attack(p: &ProbVector, true_label: usize, gamma: f64) -> Result<Membership> {
    let loss = cross_entropy_loss(p, true_label)?;
    Ok(if loss < gamma {
        Membership::Member
    } else {
        Membership::Nonmember
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShadowFeatures {
    pub max_confidence: f64,
    pub ce_loss: f64,
    /// Top-1 minus top-2 probability.
    pub margin: f64,
}

impl ShadowFeatures {
    pub fn to_vec(self) -> Vec<f64> {
        vec![self.max_confidence, self.ce_loss, self.margin]
    }
}

pub fn extract_shadow_features(p: &ProbVector, true_label: usize) -> Result<ShadowFeatures> {
    let ce_loss = cross_entropy_loss(p, true_label)?;
    let (first, second) = p.top_two();
    Ok(ShadowFeatures {
        max_confidence: first,
        ce_loss,
        margin: (first - second).clamp(0.0, first),
    })
}

/// Member iff the classifier's score is strictly above 0.5.
pub fn shadow_attack(classifier: &LogRegParams, features: &ShadowFeatures) -> Result<Membership> {
    Ok(if classifier.score(&features.to_vec())? > 0.5 {
        Membership::Member
    } else {
        Membership::Nonmember
    })
}

/// The trained shadow attack plus diagnostics from training it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShadowAttackModel {
    pub classifier: LogRegParams,
    pub shadow_train_accuracy: f64,
    pub shadow_test_accuracy: f64,
    /// Accuracy of the classifier on the features it was trained on.
    pub classifier_accuracy: f64,
}

/// Trains a shadow copy of the target architecture on half of the pool, and
/// fits the attack classifier on its undefended outputs for both halves
/// (label 1 = member).
pub fn train_shadow_attack(
    shadow_pool: &Dataset,
    hidden_width: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ShadowAttackModel> {
    if shadow_pool.len() < 4 {
        return Err(Error::param(format!(
            "shadow pool needs at least 4 samples, got {}",
            shadow_pool.len()
        )));
    }
    let n = shadow_pool.len();
    let n_in = n / 2;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut SeededRng::new(derive_seed(seed, 0), 0));
    let shadow_in = shadow_pool.subset(&order[..n_in])?;
    let shadow_out = shadow_pool.subset(&order[n_in..])?;

    let shadow = train_mlp(&shadow_in, &cfg.with_seed(derive_seed(seed, 1)), hidden_width)?;

    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (set, is_member) in [(&shadow_in, true), (&shadow_out, false)] {
        for ex in set.examples() {
            let p = predict_probs(&shadow, &ex.features)?;
            features.push(extract_shadow_features(&p, ex.label)?.to_vec());
            labels.push(is_member);
        }
    }
    let classifier = train_logreg(&features, &labels, &cfg.with_seed(derive_seed(seed, 2)))?;
    let correct = features
        .iter()
        .zip(&labels)
        .filter(|(f, &l)| classifier.score(f).map(|s| (s > 0.5) == l).unwrap_or(false))
        .count();
    Ok(ShadowAttackModel {
        shadow_train_accuracy: model_accuracy(&shadow, &shadow_in)?,
        shadow_test_accuracy: model_accuracy(&shadow, &shadow_out)?,
        classifier_accuracy: correct as f64 / n as f64,
        classifier,
    })
}

/// One sample presented to the attack suite.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackSample {
    pub sample_id: String,
    pub probs: ProbVector,
    pub true_label: usize,
    pub membership: Membership,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackDecision {
    pub sample_id: String,
    pub attack: AttackKind,
    pub verdict: Membership,
    pub truth: Membership,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSuiteResult {
    pub decisions: Vec<AttackDecision>,
    /// Attack success rate per attack that was run, in [`AttackKind::ALL`] order.
    pub asr: Vec<(AttackKind, f64)>,
}

impl AttackSuiteResult {
    pub fn asr(&self, attack: AttackKind) -> Option<f64> {
        self.asr.iter().find(|(a, _)| *a == attack).map(|(_, v)| *v)
    }

    /// Writes `sample_id,attack,verdict,truth` rows.
    pub fn decisions_csv(&self) -> String {
        let mut out = String::from("sample_id,attack,verdict,truth\n");
        for d in &self.decisions {
            out.push_str(&format!("{},{},{},{}\n", d.sample_id, d.attack, d.verdict, d.truth));
        }
        out
    }

    /// Writes `attack,asr,correct,total` rows.
    pub fn asr_csv(&self) -> String {
        let mut out = String::from("attack,asr,correct,total\n");
        for (attack, asr) in &self.asr {
            let ds = self.decisions.iter().filter(|d| d.attack == *attack);
            let total = ds.clone().count();
            let correct = ds.filter(|d| d.verdict == d.truth).count();
            out.push_str(&format!("{attack},{asr},{correct},{total}\n"));
        }
        out
    }
}

/// Runs every attack on every sample. The shadow attack is skipped when no
/// classifier is given.
pub fn run_attack_suite(
    samples: &[AttackSample],
    thresholds: &AttackThresholds,
    classifier: Option<&LogRegParams>,
) -> Result<AttackSuiteResult> {
    thresholds.validate()?;
    if samples.is_empty() {
        return Err(Error::input("attack suite needs at least one sample"));
    }
    let mut decisions = Vec::with_capacity(samples.len() * 3);
    let mut correct = [0usize; 3];
    for s in samples {
        let mut verdicts = vec![
            (AttackKind::Confidence, confidence_attack(&s.probs, thresholds.tau)),
            (AttackKind::Loss, loss_attack(&s.probs, s.true_label, thresholds.gamma)?),
        ];
        if let Some(clf) = classifier {
            let f = extract_shadow_features(&s.probs, s.true_label)?;
            verdicts.push((AttackKind::Shadow, shadow_attack(clf, &f)?));
        }
        for (attack, verdict) in verdicts {
            if verdict == s.membership {
                correct[attack as usize] += 1;
            }
            decisions.push(AttackDecision {
                sample_id: s.sample_id.clone(),
                attack,
                verdict,
                truth: s.membership,
            });
        }
    }
    let n = samples.len() as f64;
    let asr = AttackKind::ALL
        .iter()
        .filter(|a| **a != AttackKind::Shadow || classifier.is_some())
        .map(|&a| (a, correct[a as usize] as f64 / n))
        .collect();
    Ok(AttackSuiteResult { decisions, asr })
}
