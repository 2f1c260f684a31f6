//! Seeded end-to-end experiments: data generation, target and shadow
//! training, per-condition defense + attack evaluation, MIDPUT, parameter
//! sweeps, and the per-sample overhead benchmark.
//!
//! Every random choice is drawn from a seed derived from the experiment's
//! master seed and a fixed label, and per-sample noise uses a stream indexed
//! by the sample's position. Results therefore do not depend on how work is
//! scheduled across threads. Condition seeds are keyed by the condition
//! itself, so adding or removing a condition leaves the others unchanged.

use std::fmt;
use std::fs;
use std::hint::black_box;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attacks::{run_attack_suite, train_shadow_attack, AttackKind, AttackSample, AttackThresholds, ShadowAttackModel};
use crate::data::{generate_blobs, split_target_shadow, BlobSpec, Dataset, LogitsRecord, Membership, SplitPlan};
use crate::defenses::{
    dynanoise_transform, selena_inference, selena_train, static_noise_transform, temperature_warning, DefenseKind,
    DynaNoiseConfig, SelenaConfig, SelenaModel, StaticNoiseConfig,
};
use crate::error::{Error, Result};
use crate::metrics::{
    compute_midput, eval_reports_csv, leakage_kl, midput_reports_csv, EvalReport, MidputReport, DEFAULT_LEAKAGE_BINS,
};
use crate::models::{model_accuracy, train_mlp, MlpParams, TrainConfig};
use crate::numerics::{derive_seed, softmax, LogitVector, ProbVector, SeededRng};

/// Everything needed to reproduce one experiment.
///
/// The `seed` fields inside `train` and `selena` are ignored: all seeds are
/// derived from the master `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: BlobSpec,
    /// Share of the data given to the target model (train + test).
    pub target_fraction: f64,
    /// Share of the target portion used for training (members).
    pub train_fraction: f64,
    pub hidden_width: usize,
    pub train: TrainConfig,
    pub dynanoise: DynaNoiseConfig,
    pub static_noise: StaticNoiseConfig,
    pub selena: SelenaConfig,
    pub thresholds: AttackThresholds,
    pub seed: u64,
    pub conditions: Vec<DefenseKind>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: BlobSpec::default(),
            target_fraction: 0.70,
            train_fraction: 0.5,
            hidden_width: 64,
            train: TrainConfig::default(),
            dynanoise: DynaNoiseConfig::default(),
            static_noise: StaticNoiseConfig::default(),
            selena: SelenaConfig::default(),
            thresholds: AttackThresholds::default(),
            seed: 42,
            conditions: DefenseKind::ALL.to_vec(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        if self.hidden_width == 0 {
            return Err(Error::param("hidden_width must be >= 1"));
        }
        self.train.validate()?;
        self.dynanoise.validate()?;
        self.static_noise.validate()?;
        self.selena.validate()?;
        self.thresholds.validate()?;
        if self.conditions.is_empty() {
            return Err(Error::param("at least one defense condition is required"));
        }
        for (i, c) in self.conditions.iter().enumerate() {
            if self.conditions[..i].contains(c) {
                return Err(Error::param(format!("condition {c} listed twice")));
            }
        }
        Ok(())
    }

    /// Parses a JSON config, naming the offending key on failure.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("at `{path}`: {}", e.into_inner()))
        })?;
        cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    fn warn_on_temperatures(&self) {
        let mut temps = Vec::new();
        if self.conditions.contains(&DefenseKind::DynaNoise) {
            temps.push(self.dynanoise.temperature);
        }
        if self.conditions.contains(&DefenseKind::StaticNoise) {
            temps.push(self.static_noise.temperature);
        }
        for w in temps.into_iter().filter_map(temperature_warning) {
            log::warn!("{w}");
        }
    }
}

mod seeds {
    pub const DATA: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const TARGET: u64 = 3;
    pub const SHADOW: u64 = 4;
    pub const CONDITION_BASE: u64 = 100;
}

fn condition_seed(master: u64, kind: DefenseKind) -> u64 {
    derive_seed(master, seeds::CONDITION_BASE + kind as u64)
}

/// Training-time diagnostics of one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub target_train_accuracy: f64,
    pub target_test_accuracy: f64,
    pub shadow_train_accuracy: f64,
    pub shadow_test_accuracy: f64,
    pub attack_classifier_accuracy: f64,
    pub members: usize,
    pub nonmembers: usize,
    pub shadow_pool: usize,
}

impl Diagnostics {
    pub fn generalization_gap(&self) -> f64 {
        self.target_train_accuracy - self.target_test_accuracy
    }
}

/// The condition-independent part of an experiment: data, split, target
/// model, shadow attack, and (when requested) the ensemble defense.
#[derive(Clone, Debug)]
pub struct PreparedExperiment {
    pub cfg: ExperimentConfig,
    pub dataset: Dataset,
    pub split: SplitPlan,
    pub target: MlpParams,
    pub shadow: ShadowAttackModel,
    pub selena: Option<SelenaModel>,
    pub diagnostics: Diagnostics,
    member_logits: Vec<LogitVector>,
    nonmember_logits: Vec<LogitVector>,
}

impl PreparedExperiment {
    /// Generates the dataset and split from the config, then trains.
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let dataset = generate_blobs(&cfg.data, derive_seed(cfg.seed, seeds::DATA))?;
        let split = split_target_shadow(
            &dataset,
            cfg.target_fraction,
            cfg.train_fraction,
            derive_seed(cfg.seed, seeds::SPLIT),
        )?;
        Self::with_data(cfg, dataset, split)
    }

    /// Trains on an existing dataset and split.
    pub fn with_data(cfg: &ExperimentConfig, dataset: Dataset, split: SplitPlan) -> Result<Self> {
        cfg.validate()?;
        cfg.warn_on_temperatures();
        split.check_partition(dataset.len())?;
        let members = dataset.subset(&split.target_train)?;
        let nonmembers = dataset.subset(&split.target_test)?;
        let pool = dataset.subset(&split.shadow_pool)?;

        let target = train_mlp(
            &members,
            &cfg.train.with_seed(derive_seed(cfg.seed, seeds::TARGET)),
            cfg.hidden_width,
        )?;
        let shadow = train_shadow_attack(&pool, cfg.hidden_width, &cfg.train, derive_seed(cfg.seed, seeds::SHADOW))?;
        let selena = if cfg.conditions.contains(&DefenseKind::Selena) {
            Some(selena_train(
                &members,
                &cfg.selena,
                cfg.hidden_width,
                condition_seed(cfg.seed, DefenseKind::Selena),
            )?)
        } else {
            None
        };

        let logits = |ds: &Dataset| -> Result<Vec<LogitVector>> {
            ds.examples().iter().map(|e| target.predict_logits(&e.features)).collect()
        };
        let member_logits = logits(&members)?;
        let nonmember_logits = logits(&nonmembers)?;
        let diagnostics = Diagnostics {
            target_train_accuracy: model_accuracy(&target, &members)?,
            target_test_accuracy: model_accuracy(&target, &nonmembers)?,
            shadow_train_accuracy: shadow.shadow_train_accuracy,
            shadow_test_accuracy: shadow.shadow_test_accuracy,
            attack_classifier_accuracy: shadow.classifier_accuracy,
            members: members.len(),
            nonmembers: nonmembers.len(),
            shadow_pool: pool.len(),
        };
        Ok(Self {
            cfg: cfg.clone(),
            dataset,
            split,
            target,
            shadow,
            selena,
            diagnostics,
            member_logits,
            nonmember_logits,
        })
    }

    /// Undefended target logits for members then non-members, in the
    /// interchange record form.
    pub fn logits_records(&self) -> Vec<LogitsRecord> {
        let members = self.split.target_train.iter().zip(&self.member_logits).map(|(i, z)| (i, z, Membership::Member));
        let nonmembers = self
            .split
            .target_test
            .iter()
            .zip(&self.nonmember_logits)
            .map(|(i, z)| (i, z, Membership::Nonmember));
        members
            .chain(nonmembers)
            .map(|(&i, z, membership)| LogitsRecord {
                sample_id: sample_id(i),
                membership,
                true_label: self.dataset.examples()[i].label,
                logits: z.clone(),
            })
            .collect()
    }

    fn sample_indices(&self) -> impl Iterator<Item = (usize, Membership)> + '_ {
        self.split
            .target_train
            .iter()
            .map(|&i| (i, Membership::Member))
            .chain(self.split.target_test.iter().map(|&i| (i, Membership::Nonmember)))
    }

    /// Output probabilities of the deployed model under `kind`, members first.
    fn condition_probs(
        &self,
        kind: DefenseKind,
        dynanoise: &DynaNoiseConfig,
        static_noise: &StaticNoiseConfig,
    ) -> Result<Vec<ProbVector>> {
        let seed = condition_seed(self.cfg.seed, kind);
        let logits: Vec<&LogitVector> = self.member_logits.iter().chain(&self.nonmember_logits).collect();
        let indices: Vec<usize> = self.sample_indices().map(|(i, _)| i).collect();
        let one = |ordinal: usize| -> Result<ProbVector> {
            let mut rng = SeededRng::new(seed, ordinal as u64);
            match kind {
                DefenseKind::None => softmax(logits[ordinal], 1.0),
                DefenseKind::StaticNoise => static_noise_transform(logits[ordinal], static_noise, &mut rng),
                DefenseKind::DynaNoise => dynanoise_transform(logits[ordinal], dynanoise, &mut rng),
                DefenseKind::Selena => {
                    let model = self
                        .selena
                        .as_ref()
                        .ok_or_else(|| Error::Config("SELENA model was not trained".into()))?;
                    selena_inference(model, &self.dataset.examples()[indices[ordinal]].features)
                }
            }
        };
        par_map(logits.len(), one)
    }

    /// Applies one defense condition and runs the attack suite against it.
    pub fn evaluate(&self, kind: DefenseKind) -> Result<ConditionOutcome> {
        self.evaluate_with(kind, &self.cfg.dynanoise, &self.cfg.static_noise)
    }

    pub fn evaluate_with(
        &self,
        kind: DefenseKind,
        dynanoise: &DynaNoiseConfig,
        static_noise: &StaticNoiseConfig,
    ) -> Result<ConditionOutcome> {
        let probs = self.condition_probs(kind, dynanoise, static_noise)?;
        let samples: Vec<AttackSample> = self
            .sample_indices()
            .zip(probs)
            .map(|((i, membership), probs)| AttackSample {
                sample_id: sample_id(i),
                probs,
                true_label: self.dataset.examples()[i].label,
                membership,
            })
            .collect();
        let nonmembers: Vec<&AttackSample> = samples.iter().filter(|s| !s.membership.is_member()).collect();
        let correct = nonmembers.iter().filter(|s| s.probs.argmax() == s.true_label).count();
        let test_accuracy = correct as f64 / nonmembers.len() as f64;

        let suite = run_attack_suite(&samples, &self.cfg.thresholds, Some(&self.shadow.classifier))?;
        let asr = |a| suite.asr(a).expect("all three attacks run");
        let report = EvalReport::new(
            kind.name(),
            test_accuracy,
            asr(AttackKind::Confidence),
            asr(AttackKind::Loss),
            asr(AttackKind::Shadow),
        )?;
        let (m, n): (Vec<_>, Vec<_>) = samples.iter().partition(|s| s.membership.is_member());
        let m: Vec<ProbVector> = m.into_iter().map(|s| s.probs.clone()).collect();
        let n: Vec<ProbVector> = n.into_iter().map(|s| s.probs.clone()).collect();
        let leakage = leakage_kl(&m, &n, DEFAULT_LEAKAGE_BINS)?;
        Ok(ConditionOutcome {
            report,
            leakage_kl: leakage,
            decisions_csv: suite.decisions_csv(),
        })
    }
}

fn sample_id(index: usize) -> String {
    format!("s{index}")
}

#[cfg(feature = "parallel")]
fn par_map<T: Send>(n: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_map<T: Send>(n: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    (0..n).map(f).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionOutcome {
    pub report: EvalReport,
    /// Max-confidence histogram KL between members and non-members.
    pub leakage_kl: f64,
    pub decisions_csv: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionFailure {
    pub defense: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakageEntry {
    pub defense: String,
    pub leakage_kl: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutcome {
    pub reports: Vec<EvalReport>,
    pub midputs: Vec<MidputReport>,
    pub failures: Vec<ConditionFailure>,
    pub leakage: Vec<LeakageEntry>,
    pub diagnostics: Diagnostics,
    #[serde(skip)]
    pub decisions: Vec<(DefenseKind, String)>,
}

impl PipelineOutcome {
    pub fn report(&self, kind: DefenseKind) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.defense == kind.name())
    }

    pub fn midput(&self, kind: DefenseKind) -> Option<&MidputReport> {
        self.midputs.iter().find(|m| m.defense == kind.name())
    }
}

/// Runs every configured condition on a prepared experiment. A failing
/// condition is recorded in `failures` without stopping the others.
pub fn evaluate_conditions(prepared: &PreparedExperiment) -> PipelineOutcome {
    let conditions = &prepared.cfg.conditions;
    let results: Vec<Result<ConditionOutcome>> = {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            conditions.par_iter().map(|&k| prepared.evaluate(k)).collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            conditions.iter().map(|&k| prepared.evaluate(k)).collect()
        }
    };

    let mut reports = Vec::new();
    let mut failures = Vec::new();
    let mut leakage = Vec::new();
    let mut decisions = Vec::new();
    for (&kind, result) in conditions.iter().zip(results) {
        match result {
            Ok(o) => {
                leakage.push(LeakageEntry {
                    defense: kind.name().into(),
                    leakage_kl: o.leakage_kl,
                });
                decisions.push((kind, o.decisions_csv));
                reports.push(o.report);
            }
            Err(e) => failures.push(ConditionFailure {
                defense: kind.name().into(),
                error: e.to_string(),
            }),
        }
    }

    let mut midputs = Vec::new();
    if let Some(base) = reports.iter().find(|r| r.is_baseline()) {
        for r in reports.iter().filter(|r| !r.is_baseline()) {
            match compute_midput(base, r) {
                Ok(m) => midputs.push(m),
                Err(e) => failures.push(ConditionFailure {
                    defense: r.defense.clone(),
                    error: e.to_string(),
                }),
            }
        }
    }
    PipelineOutcome {
        reports,
        midputs,
        failures,
        leakage,
        diagnostics: prepared.diagnostics.clone(),
        decisions,
    }
}

/// Full experiment: data, training, every condition, MIDPUT.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineOutcome> {
    let prepared = PreparedExperiment::new(cfg)?;
    Ok(evaluate_conditions(&prepared))
}

#[derive(Serialize)]
struct RunManifest<'a> {
    tool: &'static str,
    version: &'static str,
    seed: u64,
    config: &'a ExperimentConfig,
    conditions_completed: Vec<&'a str>,
    failures: &'a [ConditionFailure],
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::io(path, e))
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// Writes the report files of a pipeline run into `dir`.
pub fn write_run_outputs(dir: &Path, prepared: &PreparedExperiment, outcome: &PipelineOutcome) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(dir, "eval_report.csv", eval_reports_csv(&outcome.reports))?;
    write(dir, "eval_report.json", to_json(&outcome.reports)?)?;
    let rows: Vec<(EvalReport, MidputReport)> = outcome
        .midputs
        .iter()
        .filter_map(|m| {
            outcome
                .reports
                .iter()
                .find(|r| r.defense == m.defense)
                .map(|r| (r.clone(), m.clone()))
        })
        .collect();
    write(dir, "midput_report.csv", midput_reports_csv(&rows))?;
    write(dir, "midput_report.json", to_json(&outcome.midputs)?)?;
    write(dir, "diagnostics.json", to_json(&(&outcome.diagnostics, &outcome.leakage))?)?;
    for (kind, csv) in &outcome.decisions {
        write(dir, &format!("decisions_{}.csv", kind.name()), csv)?;
    }
    write(dir, "target_model.json", to_json(&prepared.target)?)?;
    write(dir, "attack_model.json", to_json(&prepared.shadow.classifier)?)?;
    crate::data::save_logits_file(
        &dir.join("target_logits.csv"),
        prepared.dataset.num_classes(),
        &prepared.logits_records(),
    )?;
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        seed: prepared.cfg.seed,
        config: &prepared.cfg,
        conditions_completed: outcome.reports.iter().map(|r| r.defense.as_str()).collect(),
        failures: &outcome.failures,
    };
    write(dir, "run_manifest.json", to_json(&manifest)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    BaseVariance,
    LambdaScale,
    Temperature,
}

impl SweepParameter {
    pub fn name(self) -> &'static str {
        match self {
            SweepParameter::BaseVariance => "base_variance",
            SweepParameter::LambdaScale => "lambda_scale",
            SweepParameter::Temperature => "temperature",
        }
    }

    /// The adaptive-noise config with this parameter set to `value`.
    pub fn apply(self, base: &DynaNoiseConfig, value: f64) -> DynaNoiseConfig {
        let mut c = *base;
        match self {
            SweepParameter::BaseVariance => c.base_variance = value,
            SweepParameter::LambdaScale => c.lambda_scale = value,
            SweepParameter::Temperature => c.temperature = value,
        }
        c
    }
}

impl fmt::Display for SweepParameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepParameter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "base_variance" | "variance" => Ok(SweepParameter::BaseVariance),
            "lambda_scale" | "lambda" => Ok(SweepParameter::LambdaScale),
            "temperature" => Ok(SweepParameter::Temperature),
            _ => Err(Error::param(format!(
                "unknown sweep parameter {s:?} (expected base_variance, lambda_scale or temperature)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
    pub base: ExperimentConfig,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::param("sweep needs at least one value"));
        }
        if self.values.windows(2).any(|w| w[1].partial_cmp(&w[0]) != Some(std::cmp::Ordering::Greater)) {
            return Err(Error::param("sweep values must be strictly increasing"));
        }
        for &v in &self.values {
            self.parameter.apply(&self.base.dynanoise, v).validate()?;
        }
        self.base.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub condition: String,
    pub metric: &'static str,
    pub measurement: f64,
}

pub const SWEEP_METRICS: [&str; 4] = ["test_accuracy", "asr_confidence", "asr_loss", "asr_shadow"];

/// Re-evaluates every condition with the adaptive-noise parameter set to
/// each value in turn. Data, models and seeds are shared across values.
pub fn run_sweep(spec: &SweepSpec) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    for w in spec
        .values
        .iter()
        .filter(|_| spec.parameter == SweepParameter::Temperature)
        .filter_map(|&t| temperature_warning(t))
    {
        log::warn!("{w}");
    }
    let prepared = PreparedExperiment::new(&spec.base)?;
    let points: Vec<Result<Vec<EvalReport>>> = {
        let point = |&value: &f64| -> Result<Vec<EvalReport>> {
            let dynanoise = spec.parameter.apply(&spec.base.dynanoise, value);
            spec.base
                .conditions
                .iter()
                .map(|&k| Ok(prepared.evaluate_with(k, &dynanoise, &spec.base.static_noise)?.report))
                .collect()
        };
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            spec.values.par_iter().map(point).collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            spec.values.iter().map(point).collect()
        }
    };
    let mut rows = Vec::new();
    for (&value, reports) in spec.values.iter().zip(points) {
        for r in reports? {
            let measurements = [r.test_accuracy, r.asr_confidence, r.asr_loss, r.asr_shadow];
            for (metric, measurement) in SWEEP_METRICS.into_iter().zip(measurements) {
                rows.push(SweepRow {
                    value,
                    condition: r.defense.clone(),
                    metric,
                    measurement,
                });
            }
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("value,condition,metric,measurement\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.value, r.condition, r.metric, r.measurement));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OverheadRow {
    pub k: usize,
    pub samples: usize,
    pub mean_seconds: f64,
}

/// Mean wall-clock time of one adaptive-noise transform for each output
/// width `k`. Logits are generated before timing starts.
pub fn overhead_benchmark(k_values: &[usize], samples_per_k: usize, cfg: &DynaNoiseConfig, seed: u64) -> Result<Vec<OverheadRow>> {
    if k_values.len() < 2 {
        return Err(Error::param("overhead benchmark needs at least 2 values of k"));
    }
    if k_values.windows(2).any(|w| w[1] <= w[0]) || k_values[0] < 2 {
        return Err(Error::param("k values must be >= 2 and strictly increasing"));
    }
    if samples_per_k == 0 {
        return Err(Error::param("samples_per_k must be >= 1"));
    }
    cfg.validate()?;
    let mut rows = Vec::with_capacity(k_values.len());
    for &k in k_values {
        let mut gen = SeededRng::new(derive_seed(seed, k as u64), 0);
        let inputs = (0..samples_per_k)
            .map(|_| {
                let z = (0..k)
                    .map(|_| crate::numerics::gaussian_sample(&mut gen, 4.0))
                    .collect::<Result<Vec<_>>>()?;
                LogitVector::new(z)
            })
            .collect::<Result<Vec<_>>>()?;
        // warm-up pass
        for (i, z) in inputs.iter().take(samples_per_k.min(64)).enumerate() {
            black_box(dynanoise_transform(z, cfg, &mut SeededRng::new(seed, i as u64))?);
        }
        let start = Instant::now();
        for (i, z) in inputs.iter().enumerate() {
            black_box(dynanoise_transform(black_box(z), cfg, &mut SeededRng::new(seed, i as u64))?);
        }
        let elapsed = start.elapsed().as_secs_f64();
        rows.push(OverheadRow {
            k,
            samples: samples_per_k,
            mean_seconds: (elapsed / samples_per_k as f64).max(f64::MIN_POSITIVE),
        });
    }
    Ok(rows)
}

pub fn overhead_csv(rows: &[OverheadRow]) -> String {
    let mut out = String::from("k,samples,mean_seconds\n");
    for r in rows {
        out.push_str(&format!("{},{},{:e}\n", r.k, r.samples, r.mean_seconds));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            data: BlobSpec {
                num_classes: 3,
                per_class: 40,
                feature_dim: 6,
                spread: 1.0,
            },
            hidden_width: 16,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn baseline_only_has_no_midput() {
        let cfg = ExperimentConfig {
            conditions: vec![DefenseKind::None],
            ..small()
        };
        let out = run_pipeline(&cfg).unwrap();
        assert_eq!(out.reports.len(), 1);
        assert!(out.midputs.is_empty());
        assert!(out.failures.is_empty());
    }

    #[test]
    fn identity_defense_matches_baseline() {
        let cfg = ExperimentConfig {
            conditions: vec![DefenseKind::None, DefenseKind::DynaNoise],
            dynanoise: DynaNoiseConfig {
                base_variance: 0.0,
                lambda_scale: 3.0,
                temperature: 1.0,
            },
            ..small()
        };
        let out = run_pipeline(&cfg).unwrap();
        let a = out.report(DefenseKind::None).unwrap();
        let b = out.report(DefenseKind::DynaNoise).unwrap();
        assert!((a.test_accuracy - b.test_accuracy).abs() <= 1e-9);
        assert!((a.asr_confidence - b.asr_confidence).abs() <= 1e-9);
        assert!((a.asr_loss - b.asr_loss).abs() <= 1e-9);
        assert!((a.asr_shadow - b.asr_shadow).abs() <= 1e-9);
    }

    #[test]
    fn baseline_unaffected_by_other_conditions() {
        let only = run_pipeline(&ExperimentConfig {
            conditions: vec![DefenseKind::None],
            ..small()
        })
        .unwrap();
        let all = run_pipeline(&small()).unwrap();
        assert_eq!(only.report(DefenseKind::None), all.report(DefenseKind::None));
        assert_eq!(all.reports.len(), 4);
        assert_eq!(all.midputs.len(), 3);
    }

    #[test]
    fn config_json_names_bad_key() {
        let err = ExperimentConfig::from_json(r#"{"dynanoise": {"base_variance": 0.1, "lambda": 2, "temperature": 2}}"#)
            .unwrap_err();
        assert!(err.to_string().contains("dynanoise"), "{err}");
        assert!(err.to_string().contains("lambda"), "{err}");
        let err = ExperimentConfig::from_json(r#"{"seed": "x"}"#).unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
        let err = ExperimentConfig::from_json(r#"{"conditions": []}"#).unwrap_err();
        assert!(err.is_usage());
        let cfg = ExperimentConfig::from_json(r#"{"conditions": ["None", "SELENA"]}"#).unwrap();
        assert_eq!(cfg.conditions, vec![DefenseKind::None, DefenseKind::Selena]);
    }

    #[test]
    fn sweep_shape_and_validation() {
        let spec = SweepSpec {
            parameter: SweepParameter::LambdaScale,
            values: vec![0.0, 2.0],
            base: ExperimentConfig {
                conditions: vec![DefenseKind::None, DefenseKind::DynaNoise],
                ..small()
            },
        };
        let rows = run_sweep(&spec).unwrap();
        assert_eq!(rows.len(), 2 * 2 * SWEEP_METRICS.len());
        let bad = SweepSpec {
            values: vec![2.0, 1.0],
            ..spec.clone()
        };
        assert!(run_sweep(&bad).is_err());
        let bad = SweepSpec {
            values: vec![],
            ..spec
        };
        assert!(run_sweep(&bad).is_err());
    }

    #[test]
    fn overhead_shape() {
        let rows = overhead_benchmark(&[4, 16], 50, &DynaNoiseConfig::default(), 1).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.mean_seconds > 0.0));
        assert!(overhead_benchmark(&[4], 10, &DynaNoiseConfig::default(), 1).is_err());
        assert!(overhead_benchmark(&[16, 4], 10, &DynaNoiseConfig::default(), 1).is_err());
    }
}
