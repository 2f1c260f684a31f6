//! Evaluation reports, the MIDPUT privacy-utility metric, and a KL-based
//! leakage diagnostic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{kl_divergence, ProbVector};

/// Test accuracy and the three attack success rates for one defense condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub defense: String,
    pub test_accuracy: f64,
    pub asr_confidence: f64,
    pub asr_loss: f64,
    pub asr_shadow: f64,
}

impl EvalReport {
    pub fn new(
        defense: impl Into<String>,
        test_accuracy: f64,
        asr_confidence: f64,
        asr_loss: f64,
        asr_shadow: f64,
    ) -> Result<Self> {
        let r = Self {
            defense: defense.into(),
            test_accuracy,
            asr_confidence,
            asr_loss,
            asr_shadow,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("test_accuracy", self.test_accuracy),
            ("asr_confidence", self.asr_confidence),
            ("asr_loss", self.asr_loss),
            ("asr_shadow", self.asr_shadow),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::input(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if self.defense.is_empty() || self.defense.contains([',', '\n']) {
            return Err(Error::input(format!("invalid defense name {:?}", self.defense)));
        }
        Ok(())
    }

    pub fn is_baseline(&self) -> bool {
        self.defense.eq_ignore_ascii_case("none")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MidputReport {
    pub defense: String,
    pub delta_acc: f64,
    pub delta_conf: f64,
    pub delta_loss: f64,
    pub delta_shadow: f64,
    pub midput_c: f64,
    pub midput_l: f64,
    pub midput_s: f64,
    pub midput_overall: f64,
}

impl MidputReport {
    pub fn values(&self) -> [f64; 4] {
        [self.midput_c, self.midput_l, self.midput_s, self.midput_overall]
    }

    pub fn within_bounds(&self) -> bool {
        self.values().iter().all(|v| (-1.0..=1.0).contains(v))
    }
}

/// Compares a defended report against the undefended baseline.
///
/// Deltas are `baseline - defended`, so a defense that lowers attack success
/// has positive attack deltas and one that costs accuracy has a positive
/// accuracy delta. Each MIDPUT subtracts the accuracy delta from an attack
/// delta (or from their mean, for the overall value).
pub fn compute_midput(no_def: &EvalReport, defended: &EvalReport) -> Result<MidputReport> {
    no_def.validate()?;
    defended.validate()?;
    if !no_def.is_baseline() {
        return Err(Error::input(format!(
            "baseline report must be the None condition, got {:?}",
            no_def.defense
        )));
    }
    let delta_acc = no_def.test_accuracy - defended.test_accuracy;
    let delta_conf = no_def.asr_confidence - defended.asr_confidence;
    let delta_loss = no_def.asr_loss - defended.asr_loss;
    let delta_shadow = no_def.asr_shadow - defended.asr_shadow;
    let report = MidputReport {
        defense: defended.defense.clone(),
        delta_acc,
        delta_conf,
        delta_loss,
        delta_shadow,
        midput_c: delta_conf - delta_acc,
        midput_l: delta_loss - delta_acc,
        midput_s: delta_shadow - delta_acc,
        midput_overall: (delta_conf + delta_loss + delta_shadow) / 3.0 - delta_acc,
    };
    if !report.within_bounds() {
        log::warn!(
            "MIDPUT for {} falls outside [-1, 1]: {:?}",
            report.defense,
            report.values()
        );
    }
    Ok(report)
}

/// KL divergence between the max-confidence histograms of members and
/// non-members (`num_bins` equal-width bins on `[0, 1]`, +1 smoothing).
pub fn leakage_kl(member_probs: &[ProbVector], nonmember_probs: &[ProbVector], num_bins: usize) -> Result<f64> {
    if member_probs.is_empty() || nonmember_probs.is_empty() {
        return Err(Error::input("leakage_kl needs non-empty member and non-member sets"));
    }
    if num_bins < 2 {
        return Err(Error::param("num_bins must be >= 2"));
    }
    let hist = |probs: &[ProbVector]| -> Result<ProbVector> {
        let mut counts = vec![1.0; num_bins];
        for p in probs {
            let bin = ((p.max() * num_bins as f64) as usize).min(num_bins - 1);
            counts[bin] += 1.0;
        }
        let total: f64 = counts.iter().sum();
        ProbVector::new(counts.into_iter().map(|c| c / total).collect())
    };
    kl_divergence(&hist(member_probs)?, &hist(nonmember_probs)?)
}

pub const DEFAULT_LEAKAGE_BINS: usize = 20;

pub const EVAL_CSV_HEADER: &str = "defense,model,confidence,loss,shadow";
pub const MIDPUT_CSV_HEADER: &str =
    "defense,model,confidence,loss,shadow,midput_c,midput_l,midput_s,midput_overall";

pub fn eval_reports_csv(reports: &[EvalReport]) -> String {
    let mut out = format!("{EVAL_CSV_HEADER}\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.defense, r.test_accuracy, r.asr_confidence, r.asr_loss, r.asr_shadow
        ));
    }
    out
}

/// One row per defended condition, laid out like a results table: the
/// defended accuracy and ASRs followed by the four MIDPUT values.
pub fn midput_reports_csv(rows: &[(EvalReport, MidputReport)]) -> String {
    let mut out = format!("{MIDPUT_CSV_HEADER}\n");
    for (r, m) in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.defense,
            r.test_accuracy,
            r.asr_confidence,
            r.asr_loss,
            r.asr_shadow,
            m.midput_c,
            m.midput_l,
            m.midput_s,
            m.midput_overall
        ));
    }
    out
}

/// Reads eval reports from any CSV carrying at least the
/// `defense,model,confidence,loss,shadow` columns (extra columns ignored).
pub fn parse_eval_reports_csv(text: &str) -> Result<Vec<EvalReport>> {
    let mut rdr = crate::data::csv_reader(text.as_bytes());
    let cols: Vec<String> = rdr.headers()?.iter().map(|c| c.trim().to_string()).collect();
    let find = |name: &str| {
        cols.iter()
            .position(|c| c.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::Schema {
                line: Some(1),
                message: format!("missing column {name}"),
            })
    };
    let idx = [
        find("defense")?,
        find("model")?,
        find("confidence")?,
        find("loss")?,
        find("shadow")?,
    ];
    let mut reports = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let lineno = crate::data::record_line(&record, 0);
        if record.len() != cols.len() {
            return Err(Error::Schema {
                line: Some(lineno),
                message: format!("expected {} fields, got {}", cols.len(), record.len()),
            });
        }
        let num = |j: usize| {
            record[idx[j]].trim().parse::<f64>().map_err(|e| Error::Parse {
                line: lineno,
                message: format!("{}: {e}", cols[idx[j]]),
            })
        };
        let report = EvalReport {
            defense: record[idx[0]].trim().to_string(),
            test_accuracy: num(1)?,
            asr_confidence: num(2)?,
            asr_loss: num(3)?,
            asr_shadow: num(4)?,
        };
        report.validate().map_err(|e| Error::Schema {
            line: Some(lineno),
            message: e.to_string(),
        })?;
        reports.push(report);
    }
    if reports.is_empty() {
        return Err(Error::Schema {
            line: None,
            message: "no records".into(),
        });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(name: &str, v: [f64; 4]) -> EvalReport {
        EvalReport::new(name, v[0], v[1], v[2], v[3]).unwrap()
    }

    #[test]
    fn cifar_dynanoise_row() {
        let none = report("None", [0.8211, 0.6956, 0.7639, 0.7841]);
        let dyna = report("DynaNoise", [0.8156, 0.2785, 0.4221, 0.5334]);
        let m = compute_midput(&none, &dyna).unwrap();
        for (got, want) in m.values().iter().zip([0.4116, 0.3363, 0.2452, 0.3310]) {
            assert!((got - want).abs() <= 5e-4, "{got} vs {want}");
        }
    }

    #[test]
    fn imagenet_selena_row() {
        let none = report("None", [0.9165, 0.6489, 0.7177, 0.7612]);
        let selena = report("SELENA", [0.7085, 0.3893, 0.5355, 0.6817]);
        let m = compute_midput(&none, &selena).unwrap();
        for (got, want) in m.values().iter().zip([0.0516, -0.0258, -0.1285, -0.0342]) {
            assert!((got - want).abs() <= 5e-4, "{got} vs {want}");
        }
    }

    #[test]
    fn identical_reports_give_zero() {
        let none = report("None", [0.8, 0.6, 0.7, 0.65]);
        let same = EvalReport { defense: "Same".into(), ..none.clone() };
        let m = compute_midput(&none, &same).unwrap();
        assert_eq!(m.values(), [0.0; 4]);
    }

    #[test]
    fn baseline_must_be_none() {
        let a = report("SELENA", [0.8, 0.6, 0.7, 0.65]);
        assert!(matches!(compute_midput(&a, &a), Err(Error::InvalidInput(_))));
        assert!(EvalReport::new("x", 1.2, 0.5, 0.5, 0.5).is_err());
    }

    #[test]
    fn leakage_examples() {
        let probs: Vec<ProbVector> = [[0.9, 0.1], [0.6, 0.4], [0.55, 0.45]]
            .iter()
            .map(|p| ProbVector::new(p.to_vec()).unwrap())
            .collect();
        assert!(leakage_kl(&probs, &probs, 20).unwrap().abs() < 1e-12);

        // 100 one-hot members land in bin 19, 100 uniform non-members in bin 10.
        // Smoothed: P = 101/120 at bin 19, Q = 101/120 at bin 10, 1/120 elsewhere.
        // KL = (101/120) ln 101 + (1/120) ln(1/101) = (100/120) ln 101.
        let members = vec![ProbVector::new(vec![1.0, 0.0]).unwrap(); 100];
        let nonmembers = vec![ProbVector::new(vec![0.5, 0.5]).unwrap(); 100];
        let kl = leakage_kl(&members, &nonmembers, 20).unwrap();
        assert!((kl - (100.0 / 120.0) * 101f64.ln()).abs() < 1e-12);
        assert!(kl > 1.0);
        assert!(leakage_kl(&[], &nonmembers, 20).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let reports = vec![
            report("None", [0.8211, 0.6956, 0.7639, 0.7841]),
            report("DynaNoise", [0.8156, 0.2785, 0.4221, 0.5334]),
        ];
        let text = eval_reports_csv(&reports);
        assert_eq!(parse_eval_reports_csv(&text).unwrap(), reports);
        let m = compute_midput(&reports[0], &reports[1]).unwrap();
        let text = midput_reports_csv(&[(reports[1].clone(), m)]);
        assert_eq!(parse_eval_reports_csv(&text).unwrap(), vec![reports[1].clone()]);
        assert!(parse_eval_reports_csv("defense,model\n").is_err());
        assert!(parse_eval_reports_csv("").is_err());
    }
}
