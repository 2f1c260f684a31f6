//! Command-line front end. Every subcommand reads and writes plain files so
//! steps can be chained or fed outputs from other frameworks.
//!
//! Exit codes: 0 on success, 1 on runtime or I/O failure, 2 on usage or
//! configuration errors.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::attacks::{run_attack_suite, AttackSample, AttackThresholds};
use crate::data::{
    generate_blobs, read_score_file, save_probs_file, split_target_shadow, BlobSpec, Dataset, ProbsRecord, ScoreKind,
    SplitPlan,
};
use crate::defenses::{
    dynanoise_transform, static_noise_transform, temperature_warning, DefenseKind, DynaNoiseConfig, StaticNoiseConfig,
};
use crate::error::{Error, Result};
use crate::harness::{
    evaluate_conditions, overhead_benchmark, overhead_csv, run_sweep, sweep_csv, to_json, write_run_outputs,
    ExperimentConfig, PreparedExperiment, SweepParameter, SweepSpec,
};
use crate::metrics::{compute_midput, midput_reports_csv, parse_eval_reports_csv};
use crate::models::LogRegParams;
use crate::numerics::{softmax, SeededRng};

const SCORE_FILE_HELP: &str = "\
Score files (CSV): optional `# key=value` metadata lines, then the header
  sample_id,membership,true_label,logit_0,...,logit_{k-1}
(or prob_0..prob_{k-1} for probabilities). membership is `member` or
`nonmember`; true_label is a class index in [0, k). JSON lines with the same
keys are accepted too.";

#[derive(Debug, Parser)]
#[command(name = "mia-bench", version, about = "Membership inference attacks, output-noise defenses and privacy-utility reports")]
pub struct Cli {
    /// Worker threads for parallel stages. Never changes results.
    #[arg(long, global = true, env = "MIA_BENCH_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a Gaussian-blob dataset and its target/shadow split.
    #[command(after_help = "Writes dataset.csv (f_0..f_{d-1},label) and split.json (generator parameters, seed, index sets).")]
    GenData(GenDataArgs),
    /// Run the full experiment: train, defend, attack, report.
    #[command(after_help = "Writes eval_report.{csv,json}, midput_report.{csv,json}, run_manifest.json, \
diagnostics.json, decisions_<defense>.csv, target_model.json, attack_model.json and target_logits.csv.\n\n\
The config is JSON with optional keys: data {num_classes, per_class, feature_dim, spread}, \
target_fraction, train_fraction, hidden_width, train {epochs, learning_rate, batch_size}, \
dynanoise {base_variance, lambda_scale, temperature}, static_noise {variance, temperature}, \
selena {num_submodels, partitions_per_sample, submodel_train, distill_train}, \
thresholds {tau, gamma}, seed, conditions [None, StaticNoise, SELENA, DynaNoise].")]
    Run(RunArgs),
    /// Apply an output-noise defense to a logits file.
    #[command(after_help = SCORE_FILE_HELP)]
    Defend(DefendArgs),
    /// Run the threshold attacks (and the shadow attack, given a classifier) on a score file.
    #[command(after_help = SCORE_FILE_HELP)]
    Attack(AttackArgs),
    /// Compute MIDPUT from a baseline and a defended evaluation report.
    #[command(after_help = "Report CSVs need the columns defense,model,confidence,loss,shadow; \
the baseline row must be named None. Extra columns are ignored.")]
    Midput(MidputArgs),
    /// Sweep one adaptive-noise parameter.
    #[command(after_help = "Writes sweep_<param>.csv with columns value,condition,metric,measurement.")]
    Sweep(SweepArgs),
    /// Time the adaptive-noise transform for several output widths.
    #[command(after_help = "Writes overhead.csv with columns k,samples,mean_seconds.")]
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 200)]
    pub per_class: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 1.0)]
    pub spread: f64,
    #[arg(long, default_value_t = 0.70)]
    pub target_fraction: f64,
    #[arg(long, default_value_t = 0.5)]
    pub train_fraction: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Output directory.
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Experiment config (JSON). Defaults are used when omitted.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Directory written by `gen-data`; replaces the generated dataset.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated defense conditions to run.
    #[arg(long, value_delimiter = ',', value_parser = parse_defense)]
    pub conditions: Option<Vec<DefenseKind>>,
    /// Output directory.
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct DefendArgs {
    /// Logits file (CSV or JSON lines).
    #[arg(short, long)]
    pub input: PathBuf,
    /// DynaNoise, StaticNoise or None.
    #[arg(long, default_value = "DynaNoise", value_parser = parse_defense)]
    pub defense: DefenseKind,
    #[arg(long, default_value_t = DynaNoiseConfig::default().base_variance)]
    pub base_variance: f64,
    #[arg(long, default_value_t = DynaNoiseConfig::default().lambda_scale)]
    pub lambda_scale: f64,
    /// Noise variance of the static defense.
    #[arg(long, default_value_t = StaticNoiseConfig::default().variance)]
    pub variance: f64,
    #[arg(long, default_value_t = DynaNoiseConfig::default().temperature)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output probabilities file.
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    /// Probabilities or logits file; logits are passed through softmax.
    #[arg(short, long)]
    pub input: PathBuf,
    /// Shadow-attack classifier (attack_model.json from `run`).
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    #[arg(long, default_value_t = AttackThresholds::default().tau)]
    pub tau: f64,
    #[arg(long, default_value_t = AttackThresholds::default().gamma)]
    pub gamma: f64,
    /// Output directory for asr.csv and decisions.csv.
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct MidputArgs {
    #[arg(long)]
    pub baseline: PathBuf,
    #[arg(long)]
    pub defended: PathBuf,
    /// Also write the table to this CSV file.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// base_variance, lambda_scale or temperature.
    #[arg(long, value_parser = parse_sweep_param)]
    pub param: SweepParameter,
    /// Comma-separated, strictly increasing.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_delimiter = ',', value_parser = parse_defense)]
    pub conditions: Option<Vec<DefenseKind>>,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Comma-separated output widths, strictly increasing.
    #[arg(long, value_delimiter = ',', default_value = "10,100,1000")]
    pub k: Vec<usize>,
    #[arg(long, default_value_t = 2000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(short, long)]
    pub output: PathBuf,
}

fn parse_defense(s: &str) -> std::result::Result<DefenseKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_sweep_param(s: &str) -> std::result::Result<SweepParameter, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// What `gen-data` records next to the dataset so `run --data` can reuse it.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataManifest {
    pub blobs: BlobSpec,
    pub seed: u64,
    pub target_fraction: f64,
    pub train_fraction: f64,
    pub split: SplitPlan,
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    let threads = cli.threads;
    if threads == Some(0) {
        return Err(Error::param("--threads must be >= 1"));
    }
    with_threads(threads, move || dispatch(cli.command))
}

#[cfg(feature = "parallel")]
fn with_threads(threads: Option<usize>, f: impl FnOnce() -> Result<()> + Send) -> Result<()> {
    match threads {
        None => f(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(f),
    }
}

#[cfg(not(feature = "parallel"))]
fn with_threads(_threads: Option<usize>, f: impl FnOnce() -> Result<()> + Send) -> Result<()> {
    f()
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Run(a) => run_experiment(a),
        Command::Defend(a) => defend(a),
        Command::Attack(a) => attack(a),
        Command::Midput(a) => midput(a),
        Command::Sweep(a) => sweep(a),
        Command::Bench(a) => bench(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let blobs = BlobSpec {
        num_classes: a.classes,
        per_class: a.per_class,
        feature_dim: a.dim,
        spread: a.spread,
    };
    let dataset = generate_blobs(&blobs, a.seed)?;
    let split = split_target_shadow(&dataset, a.target_fraction, a.train_fraction, a.seed)?;
    create_dir(&a.output)?;
    dataset.save_csv(&a.output.join("dataset.csv"))?;
    let manifest = DataManifest {
        blobs,
        seed: a.seed,
        target_fraction: a.target_fraction,
        train_fraction: a.train_fraction,
        split,
    };
    write_file(&a.output.join("split.json"), to_json(&manifest)?)
}

fn load_config(path: Option<&Path>, seed: Option<u64>, conditions: Option<Vec<DefenseKind>>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(c) = conditions {
        cfg.conditions = c;
    }
    cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(cfg)
}

fn run_experiment(a: RunArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref(), a.seed, a.conditions)?;
    let prepared = match &a.data {
        None => PreparedExperiment::new(&cfg)?,
        Some(dir) => {
            let manifest_path = dir.join("split.json");
            let manifest: DataManifest = serde_json::from_str(&read_file(&manifest_path)?)?;
            let dataset = Dataset::load_csv(&dir.join("dataset.csv"), manifest.blobs.num_classes)?;
            cfg.data = manifest.blobs;
            cfg.target_fraction = manifest.target_fraction;
            cfg.train_fraction = manifest.train_fraction;
            PreparedExperiment::with_data(&cfg, dataset, manifest.split)?
        }
    };
    let outcome = evaluate_conditions(&prepared);
    write_run_outputs(&a.output, &prepared, &outcome)?;
    print!("{}", crate::metrics::eval_reports_csv(&outcome.reports));
    for f in &outcome.failures {
        eprintln!("condition {} failed: {}", f.defense, f.error);
    }
    if outcome.reports.is_empty() {
        return Err(Error::input("every condition failed"));
    }
    Ok(())
}

fn defend(a: DefendArgs) -> Result<()> {
    let file = read_score_file(&a.input)?;
    if file.kind != ScoreKind::Logits {
        return Err(Error::Schema {
            line: None,
            message: "defend expects a logits file (logit_i columns)".into(),
        });
    }
    let (k, records) = file.into_logits()?;
    let dyn_cfg = DynaNoiseConfig {
        base_variance: a.base_variance,
        lambda_scale: a.lambda_scale,
        temperature: a.temperature,
    };
    let static_cfg = StaticNoiseConfig {
        variance: a.variance,
        temperature: a.temperature,
    };
    let meta = match a.defense {
        DefenseKind::DynaNoise => {
            dyn_cfg.validate()?;
            format!(
                "defense={} base_variance={} lambda_scale={} temperature={} seed={}",
                a.defense, a.base_variance, a.lambda_scale, a.temperature, a.seed
            )
        }
        DefenseKind::StaticNoise => {
            static_cfg.validate()?;
            format!(
                "defense={} variance={} temperature={} seed={}",
                a.defense, a.variance, a.temperature, a.seed
            )
        }
        DefenseKind::None => format!("defense={}", a.defense),
        DefenseKind::Selena => {
            return Err(Error::param(
                "SELENA retrains the model and cannot be applied to a logits file; use `run`",
            ))
        }
    };
    if a.defense != DefenseKind::None {
        if let Some(w) = temperature_warning(a.temperature) {
            log::warn!("{w}");
        }
    }
    let out: Vec<ProbsRecord> = records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut rng = SeededRng::new(a.seed, i as u64);
            let probs = match a.defense {
                DefenseKind::DynaNoise => dynanoise_transform(&r.logits, &dyn_cfg, &mut rng)?,
                DefenseKind::StaticNoise => static_noise_transform(&r.logits, &static_cfg, &mut rng)?,
                _ => softmax(&r.logits, 1.0)?,
            };
            Ok(ProbsRecord {
                sample_id: r.sample_id.clone(),
                membership: r.membership,
                true_label: r.true_label,
                probs,
            })
        })
        .collect::<Result<_>>()?;
    save_probs_file(&a.output, k, &[meta], &out)
}

fn attack(a: AttackArgs) -> Result<()> {
    let thresholds = AttackThresholds {
        tau: a.tau,
        gamma: a.gamma,
    };
    thresholds.validate()?;
    let classifier: Option<LogRegParams> = match &a.classifier {
        None => None,
        Some(p) => {
            let c: LogRegParams = serde_json::from_str(&read_file(p)?)?;
            c.validate()?;
            Some(c)
        }
    };
    let file = read_score_file(&a.input)?;
    let samples: Vec<AttackSample> = match file.kind {
        ScoreKind::Probabilities => file
            .into_probs()?
            .1
            .into_iter()
            .map(|r| AttackSample {
                sample_id: r.sample_id,
                probs: r.probs,
                true_label: r.true_label,
                membership: r.membership,
            })
            .collect(),
        ScoreKind::Logits => file
            .into_logits()?
            .1
            .into_iter()
            .map(|r| {
                Ok(AttackSample {
                    probs: softmax(&r.logits, 1.0)?,
                    sample_id: r.sample_id,
                    true_label: r.true_label,
                    membership: r.membership,
                })
            })
            .collect::<Result<_>>()?,
    };
    let suite = run_attack_suite(&samples, &thresholds, classifier.as_ref())?;
    create_dir(&a.output)?;
    write_file(&a.output.join("asr.csv"), suite.asr_csv())?;
    write_file(&a.output.join("decisions.csv"), suite.decisions_csv())?;
    print!("{}", suite.asr_csv());
    Ok(())
}

fn midput(a: MidputArgs) -> Result<()> {
    let baseline = parse_eval_reports_csv(&read_file(&a.baseline)?)?;
    let base = baseline
        .iter()
        .find(|r| r.is_baseline())
        .ok_or_else(|| Error::input(format!("{}: no row with defense None", a.baseline.display())))?;
    let defended = parse_eval_reports_csv(&read_file(&a.defended)?)?;
    let rows = defended
        .into_iter()
        .filter(|r| !r.is_baseline())
        .map(|r| compute_midput(base, &r).map(|m| (r, m)))
        .collect::<Result<Vec<_>>>()?;
    if rows.is_empty() {
        return Err(Error::input(format!("{}: no defended rows", a.defended.display())));
    }
    let table = midput_reports_csv(&rows);
    if let Some(out) = &a.output {
        write_file(out, &table)?;
    }
    print!("{table}");
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let base = load_config(a.config.as_deref(), a.seed, a.conditions)?;
    let spec = SweepSpec {
        parameter: a.param,
        values: a.values,
        base,
    };
    spec.validate().map_err(|e| Error::Config(e.to_string()))?;
    let rows = run_sweep(&spec)?;
    create_dir(&a.output)?;
    write_file(&a.output.join(format!("sweep_{}.csv", spec.parameter)), sweep_csv(&rows))
}

fn bench(a: BenchArgs) -> Result<()> {
    let rows = overhead_benchmark(&a.k, a.samples, &DynaNoiseConfig::default(), a.seed)?;
    create_dir(&a.output)?;
    let table = overhead_csv(&rows);
    write_file(&a.output.join("overhead.csv"), &table)?;
    print!("{table}");
    Ok(())
}
