//! Synthetic datasets, the target/shadow split, and the logits interchange
//! format used to bring in outputs from external models.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{LogitVector, ProbVector, SeededRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub features: Vec<f64>,
    pub label: usize,
}

/// A non-empty labelled dataset with a fixed feature dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    examples: Vec<LabeledExample>,
    num_classes: usize,
    feature_dim: usize,
}

impl Dataset {
    pub fn new(examples: Vec<LabeledExample>, num_classes: usize, feature_dim: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::param(format!("num_classes must be >= 2, got {num_classes}")));
        }
        if feature_dim == 0 {
            return Err(Error::param("feature_dim must be >= 1"));
        }
        if examples.is_empty() {
            return Err(Error::input("dataset is empty"));
        }
        for (i, ex) in examples.iter().enumerate() {
            if ex.label >= num_classes {
                return Err(Error::InvalidLabel {
                    label: ex.label,
                    num_classes,
                });
            }
            if ex.features.len() != feature_dim {
                return Err(Error::input(format!(
                    "example {i} has {} features, expected {feature_dim}",
                    ex.features.len()
                )));
            }
            if ex.features.iter().any(|x| !x.is_finite()) {
                return Err(Error::input(format!("example {i} has a non-finite feature")));
            }
        }
        Ok(Self {
            examples,
            num_classes,
            feature_dim,
        })
    }

    pub fn examples(&self) -> &[LabeledExample] {
        &self.examples
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Copies out the examples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let examples = indices
            .iter()
            .map(|&i| {
                self.examples
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::input(format!("index {i} out of range for {} examples", self.len())))
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(examples, self.num_classes, self.feature_dim)
    }

    /// Writes `f_0,...,f_{d-1},label` rows.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let header: Vec<String> = (0..self.feature_dim)
            .map(|j| format!("f_{j}"))
            .chain(std::iter::once("label".to_string()))
            .collect();
        w.write_record(&header)?;
        for ex in &self.examples {
            let row: Vec<String> = ex
                .features
                .iter()
                .map(|x| format_float(*x))
                .chain(std::iter::once(ex.label.to_string()))
                .collect();
            w.write_record(&row)?;
        }
        write_bytes(path, finish(w)?)
    }

    pub fn load_csv(path: &Path, num_classes: usize) -> Result<Dataset> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut rdr = csv_reader(text.as_bytes());
        let header = rdr.headers()?.clone();
        let columns = header.len();
        if columns < 2 || header.get(columns - 1) != Some("label") {
            return Err(Error::Schema {
                line: Some(1),
                message: "header must be f_0,...,f_{d-1},label".into(),
            });
        }
        let feature_dim = columns - 1;
        let mut examples = Vec::new();
        for record in rdr.records() {
            let record = record?;
            let lineno = record_line(&record, 0);
            if record.len() != columns {
                return Err(Error::Schema {
                    line: Some(lineno),
                    message: format!("expected {columns} fields, got {}", record.len()),
                });
            }
            let features = record
                .iter()
                .take(feature_dim)
                .map(|f| parse_f64(f, lineno))
                .collect::<Result<Vec<_>>>()?;
            let label = record[feature_dim].trim().parse::<usize>().map_err(|e| Error::Parse {
                line: lineno,
                message: format!("label: {e}"),
            })?;
            examples.push(LabeledExample { features, label });
        }
        if examples.is_empty() {
            return Err(Error::Schema {
                line: None,
                message: "no records".into(),
            });
        }
        Dataset::new(examples, num_classes, feature_dim)
    }
}

/// Parameters of the Gaussian-blob generator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub feature_dim: usize,
    pub spread: f64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            per_class: 200,
            feature_dim: 16,
            spread: 1.0,
        }
    }
}

impl BlobSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::param("num_classes must be >= 2"));
        }
        if self.per_class == 0 {
            return Err(Error::param("per_class must be >= 1"));
        }
        if self.feature_dim == 0 {
            return Err(Error::param("feature_dim must be >= 1"));
        }
        if !(self.spread.is_finite() && self.spread > 0.0) {
            return Err(Error::param(format!("spread must be > 0, got {}", self.spread)));
        }
        Ok(())
    }

    /// Mean of class `c`: the coordinate axis `c mod d`, scaled by
    /// `1 + c div d` so that means stay distinct when `k > d`.
    pub fn class_mean(&self, class: usize) -> Vec<f64> {
        let mut mean = vec![0.0; self.feature_dim];
        mean[class % self.feature_dim] = 1.0 + (class / self.feature_dim) as f64;
        mean
    }
}

/// `k` isotropic Gaussian clusters, exactly `per_class` examples each,
/// emitted class by class.
pub fn generate_blobs(spec: &BlobSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = SeededRng::new(seed, 0);
    let mut examples = Vec::with_capacity(spec.num_classes * spec.per_class);
    for class in 0..spec.num_classes {
        let mean = spec.class_mean(class);
        for _ in 0..spec.per_class {
            let features = mean
                .iter()
                .map(|m| {
                    let x: f64 = StandardNormal.sample(&mut rng);
                    m + spec.spread * x
                })
                .collect();
            examples.push(LabeledExample { features, label: class });
        }
    }
    Dataset::new(examples, spec.num_classes, spec.feature_dim)
}

/// Disjoint index sets covering a dataset. `target_train` holds the target
/// model's members, `target_test` its non-members, and `shadow_pool` the
/// attacker's auxiliary data.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub target_train: Vec<usize>,
    pub target_test: Vec<usize>,
    pub shadow_pool: Vec<usize>,
    pub seed: u64,
}

impl SplitPlan {
    pub fn total(&self) -> usize {
        self.target_train.len() + self.target_test.len() + self.shadow_pool.len()
    }

    /// Checks that the three sets partition `0..n`.
    pub fn check_partition(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &i in self
            .target_train
            .iter()
            .chain(&self.target_test)
            .chain(&self.shadow_pool)
        {
            if i >= n {
                return Err(Error::input(format!("split index {i} out of range for {n} examples")));
            }
            if seen[i] {
                return Err(Error::input(format!("split index {i} assigned twice")));
            }
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::input(format!("split does not cover index {i}")));
        }
        Ok(())
    }
}

pub const DEFAULT_TARGET_FRACTION: f64 = 0.70;

/// Shuffles `0..n` under `seed`, then cuts it into target and shadow portions.
pub fn split_target_shadow(
    dataset: &Dataset,
    target_fraction: f64,
    train_fraction_within_target: f64,
    seed: u64,
) -> Result<SplitPlan> {
    split_indices(dataset.len(), target_fraction, train_fraction_within_target, seed)
}

pub fn split_indices(
    n: usize,
    target_fraction: f64,
    train_fraction_within_target: f64,
    seed: u64,
) -> Result<SplitPlan> {
    for (name, f) in [
        ("target_fraction", target_fraction),
        ("train_fraction", train_fraction_within_target),
    ] {
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::param(format!("{name} must be in (0, 1), got {f}")));
        }
    }
    let n_target = (n as f64 * target_fraction).round() as usize;
    let n_train = (n_target as f64 * train_fraction_within_target).round() as usize;
    if n_train == 0 || n_train >= n_target || n_target >= n {
        return Err(Error::param(format!(
            "split of {n} examples with fractions ({target_fraction}, {train_fraction_within_target}) leaves an empty set"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut SeededRng::new(seed, 0));
    Ok(SplitPlan {
        target_train: order[..n_train].to_vec(),
        target_test: order[n_train..n_target].to_vec(),
        shadow_pool: order[n_target..].to_vec(),
        seed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Membership {
    Member,
    Nonmember,
}

impl Membership {
    pub fn is_member(self) -> bool {
        self == Membership::Member
    }
}

impl fmt::Display for Membership {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Membership::Member => "member",
            Membership::Nonmember => "nonmember",
        })
    }
}

impl FromStr for Membership {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "member" => Ok(Membership::Member),
            "nonmember" => Ok(Membership::Nonmember),
            other => Err(format!("membership must be member or nonmember, got {other:?}")),
        }
    }
}

/// One sample's raw model outputs together with its membership ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitsRecord {
    pub sample_id: String,
    pub membership: Membership,
    pub true_label: usize,
    pub logits: LogitVector,
}

/// A defended output: like [`LogitsRecord`] but carrying probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbsRecord {
    pub sample_id: String,
    pub membership: Membership,
    pub true_label: usize,
    pub probs: ProbVector,
}

/// Whether the score columns of an interchange file hold logits or
/// probabilities (`logit_i` vs `prob_i` column names).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreKind {
    Logits,
    Probabilities,
}

impl ScoreKind {
    fn prefix(self) -> &'static str {
        match self {
            ScoreKind::Logits => "logit_",
            ScoreKind::Probabilities => "prob_",
        }
    }
}

/// A parsed interchange file before its score vectors are typed.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreFile {
    pub num_classes: usize,
    pub kind: ScoreKind,
    /// `# ...` lines preceding the header, without the leading `#`.
    pub metadata: Vec<String>,
    pub rows: Vec<ScoreRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRow {
    pub line: u64,
    pub sample_id: String,
    pub membership: Membership,
    pub true_label: usize,
    pub scores: Vec<f64>,
}

impl ScoreFile {
    pub fn into_logits(self) -> Result<(usize, Vec<LogitsRecord>)> {
        let k = self.num_classes;
        let records = self
            .rows
            .into_iter()
            .map(|r| {
                let logits = LogitVector::new(r.scores).map_err(|e| Error::Schema {
                    line: Some(r.line),
                    message: e.to_string(),
                })?;
                Ok(LogitsRecord {
                    sample_id: r.sample_id,
                    membership: r.membership,
                    true_label: r.true_label,
                    logits,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((k, records))
    }

    pub fn into_probs(self) -> Result<(usize, Vec<ProbsRecord>)> {
        let k = self.num_classes;
        let records = self
            .rows
            .into_iter()
            .map(|r| {
                let probs = ProbVector::new(r.scores).map_err(|e| Error::Schema {
                    line: Some(r.line),
                    message: e.to_string(),
                })?;
                Ok(ProbsRecord {
                    sample_id: r.sample_id,
                    membership: r.membership,
                    true_label: r.true_label,
                    probs,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((k, records))
    }
}

/// Loads a logits file (CSV or JSON lines) and returns the declared class
/// count with validated records.
pub fn load_logits_file(path: &Path) -> Result<(usize, Vec<LogitsRecord>)> {
    let file = read_score_file(path)?;
    if file.kind != ScoreKind::Logits {
        return Err(Error::Schema {
            line: None,
            message: "expected logit_i columns, found prob_i".into(),
        });
    }
    file.into_logits()
}

/// Loads either a logits or a probabilities file.
pub fn read_score_file(path: &Path) -> Result<ScoreFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_score_text(&text)
}

pub fn parse_score_text(text: &str) -> Result<ScoreFile> {
    let first = text
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty() && !l.starts_with('#'));
    match first {
        None => Err(Error::Schema {
            line: None,
            message: "no records".into(),
        }),
        Some(l) if l.starts_with('{') => parse_jsonl(text),
        Some(_) => parse_csv(text),
    }
}

fn parse_f64(field: &str, line: u64) -> Result<f64> {
    let v = field.trim().parse::<f64>().map_err(|e| Error::Parse {
        line,
        message: format!("{field:?}: {e}"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            line,
            message: format!("{field:?} is not finite"),
        });
    }
    Ok(v)
}

fn parse_score_header(fields: &[&str], line: u64) -> Result<(usize, ScoreKind)> {
    if fields.len() < 3 || fields[0] != "sample_id" || fields[1] != "membership" || fields[2] != "true_label" {
        return Err(Error::Schema {
            line: Some(line),
            message: "header must start with sample_id,membership,true_label".into(),
        });
    }
    let scores = &fields[3..];
    let kind = match scores.first() {
        Some(f) if f.starts_with("prob_") => ScoreKind::Probabilities,
        _ => ScoreKind::Logits,
    };
    for (i, name) in scores.iter().enumerate() {
        if *name != format!("{}{i}", kind.prefix()) {
            return Err(Error::Schema {
                line: Some(line),
                message: format!("column {} should be {}{i}, got {name:?}", i + 3, kind.prefix()),
            });
        }
    }
    if scores.len() < 2 {
        return Err(Error::Schema {
            line: Some(line),
            message: format!("need at least 2 score columns, got {}", scores.len()),
        });
    }
    Ok((scores.len(), kind))
}

fn finish_row(
    line: u64,
    sample_id: String,
    membership: &str,
    label: usize,
    scores: Vec<f64>,
    k: usize,
) -> Result<ScoreRow> {
    let membership = membership.parse::<Membership>().map_err(|message| Error::Parse { line, message })?;
    if label >= k {
        return Err(Error::Schema {
            line: Some(line),
            message: format!("true_label {label} out of range for k={k}"),
        });
    }
    Ok(ScoreRow {
        line,
        sample_id,
        membership,
        true_label: label,
        scores,
    })
}

fn parse_csv(text: &str) -> Result<ScoreFile> {
    // Leading `#` lines carry metadata; everything after them is plain CSV.
    let mut metadata = Vec::new();
    let mut offset = 0u64;
    let mut body = text;
    while let Some((line, rest)) = split_first_line(body) {
        let trimmed = line.trim();
        if let Some(meta) = trimmed.strip_prefix('#') {
            metadata.push(meta.trim().to_string());
        } else if !trimmed.is_empty() {
            break;
        }
        offset += 1;
        body = rest;
    }

    let mut rdr = csv_reader(body.as_bytes());
    let header: Vec<String> = rdr.headers()?.iter().map(|f| f.trim().to_string()).collect();
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let (k, kind) = parse_score_header(&header_refs, offset + 1)?;
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record_line(&record, offset);
        if record.len() != k + 3 {
            return Err(Error::Schema {
                line: Some(line),
                message: format!("expected {k} scores, got {}", record.len().saturating_sub(3)),
            });
        }
        let label = record[2].trim().parse::<usize>().map_err(|e| Error::Parse {
            line,
            message: format!("true_label {:?}: {e}", &record[2]),
        })?;
        let scores = record
            .iter()
            .skip(3)
            .map(|f| parse_f64(f, line))
            .collect::<Result<Vec<_>>>()?;
        rows.push(finish_row(line, record[0].trim().to_string(), &record[1], label, scores, k)?);
    }
    if rows.is_empty() {
        return Err(Error::Schema {
            line: None,
            message: "no records".into(),
        });
    }
    Ok(ScoreFile {
        num_classes: k,
        kind,
        metadata,
        rows,
    })
}

fn split_first_line(text: &str) -> Option<(&str, &str)> {
    if text.is_empty() {
        return None;
    }
    Some(match text.find('\n') {
        Some(i) => (&text[..i], &text[i + 1..]),
        None => (text, ""),
    })
}

/// Reader shared by every CSV input: header row, variable-length records
/// (so wrong row lengths get our own error with a line number), and blank
/// lines skipped.
pub(crate) fn csv_reader<R: std::io::Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .comment(Some(b'#'))
        .from_reader(input)
}

/// 1-based file line of a record read from text that started `offset`
/// lines into the file.
pub(crate) fn record_line(record: &csv::StringRecord, offset: u64) -> u64 {
    record.position().map_or(0, |p| p.line()) + offset
}

pub(crate) fn finish(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| Error::input(format!("csv writer: {e}")))
}

fn write_bytes(path: &Path, bytes: Vec<u8>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn parse_jsonl(text: &str) -> Result<ScoreFile> {
    let mut metadata = Vec::new();
    let mut declared: Option<(usize, ScoreKind)> = None;
    let mut rows = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i as u64 + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(meta) = trimmed.strip_prefix('#') {
            metadata.push(meta.trim().to_string());
            continue;
        }
        let obj: serde_json::Map<String, serde_json::Value> =
            serde_json::from_str(trimmed).map_err(|e| Error::Parse {
                line,
                message: e.to_string(),
            })?;
        let kind = if obj.contains_key("prob_0") {
            ScoreKind::Probabilities
        } else {
            ScoreKind::Logits
        };
        let mut scores = Vec::new();
        while let Some(v) = obj.get(&format!("{}{}", kind.prefix(), scores.len())) {
            let x = v.as_f64().filter(|x| x.is_finite()).ok_or_else(|| Error::Parse {
                line,
                message: format!("{}{} is not a finite number", kind.prefix(), scores.len()),
            })?;
            scores.push(x);
        }
        let expected_keys = 3 + scores.len();
        if obj.len() != expected_keys {
            return Err(Error::Schema {
                line: Some(line),
                message: format!(
                    "unexpected fields; need sample_id, membership, true_label, {}0..",
                    kind.prefix()
                ),
            });
        }
        match declared {
            None => {
                if scores.len() < 2 {
                    return Err(Error::Schema {
                        line: Some(line),
                        message: format!("need at least 2 scores, got {}", scores.len()),
                    });
                }
                declared = Some((scores.len(), kind));
            }
            Some((k, declared_kind)) => {
                if scores.len() != k || kind != declared_kind {
                    return Err(Error::Schema {
                        line: Some(line),
                        message: format!("expected {k} scores, got {}", scores.len()),
                    });
                }
            }
        }
        let field = |name: &str| {
            obj.get(name).ok_or_else(|| Error::Schema {
                line: Some(line),
                message: format!("missing field {name}"),
            })
        };
        let sample_id = match field("sample_id")? {
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        let membership = field("membership")?.as_str().ok_or_else(|| Error::Parse {
            line,
            message: "membership must be a string".into(),
        })?;
        let label = field("true_label")?.as_u64().ok_or_else(|| Error::Parse {
            line,
            message: "true_label must be a non-negative integer".into(),
        })? as usize;
        let (k, _) = declared.expect("declared above");
        rows.push(finish_row(line, sample_id, membership, label, scores, k)?);
    }
    let (num_classes, kind) = declared.ok_or_else(|| Error::Schema {
        line: None,
        message: "no records".into(),
    })?;
    Ok(ScoreFile {
        num_classes,
        kind,
        metadata,
        rows,
    })
}

/// Full-precision float formatting (17 significant digits, round-trips exactly).
pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_score_csv<'a>(
    path: &Path,
    k: usize,
    kind: ScoreKind,
    metadata: &[String],
    rows: impl Iterator<Item = (&'a str, Membership, usize, &'a [f64])>,
) -> Result<()> {
    let mut out = Vec::new();
    for m in metadata {
        writeln!(out, "# {m}").expect("write to vec");
    }
    let mut w = csv::Writer::from_writer(out);
    let header: Vec<String> = ["sample_id", "membership", "true_label"]
        .into_iter()
        .map(String::from)
        .chain((0..k).map(|i| format!("{}{i}", kind.prefix())))
        .collect();
    w.write_record(&header)?;
    for (n, (id, membership, label, scores)) in rows.enumerate() {
        if id.starts_with('#') || id.contains(['\n', '\r']) {
            return Err(Error::input(format!("record {n}: unsupported sample_id {id:?}")));
        }
        if scores.len() != k {
            return Err(Error::input(format!(
                "record {n} ({id}) has {} scores, expected {k}",
                scores.len()
            )));
        }
        if label >= k {
            return Err(Error::InvalidLabel { label, num_classes: k });
        }
        let row: Vec<String> = [id.to_string(), membership.to_string(), label.to_string()]
            .into_iter()
            .chain(scores.iter().map(|s| format_float(*s)))
            .collect();
        w.write_record(&row)?;
    }
    write_bytes(path, finish(w)?)
}

/// Writes the canonical CSV interchange format.
pub fn save_logits_file(path: &Path, k: usize, records: &[LogitsRecord]) -> Result<()> {
    write_score_csv(
        path,
        k,
        ScoreKind::Logits,
        &[],
        records
            .iter()
            .map(|r| (r.sample_id.as_str(), r.membership, r.true_label, r.logits.as_slice())),
    )
}

/// Writes defended outputs: `# <metadata>` lines, then the same layout as a
/// logits file with `prob_i` columns.
pub fn save_probs_file(path: &Path, k: usize, metadata: &[String], records: &[ProbsRecord]) -> Result<()> {
    write_score_csv(
        path,
        k,
        ScoreKind::Probabilities,
        metadata,
        records
            .iter()
            .map(|r| (r.sample_id.as_str(), r.membership, r.true_label, r.probs.as_slice())),
    )
}
