//! WebAssembly bindings for the demo page in `www/`.
//!
//! Each export takes plain numbers and returns a JSON string; the work is
//! done by ordinary functions so it can be tested natively.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use mia_bench::defenses::{dynanoise_transform, noise_variance, sensitivity_score, DynaNoiseConfig};
use mia_bench::metrics::{compute_midput, EvalReport, MidputReport};
use mia_bench::numerics::{softmax, LogitVector, SeededRng};

#[derive(Debug, Serialize)]
pub struct DefendView {
    pub undefended: Vec<f64>,
    pub sensitivity: f64,
    pub variance: f64,
    /// One defended output per draw.
    pub draws: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    /// Share of draws whose top class matches the undefended top class.
    pub argmax_kept: f64,
}

pub fn defend_view(logits: Vec<f64>, cfg: DynaNoiseConfig, seed: u64, draws: usize) -> mia_bench::Result<DefendView> {
    let z = LogitVector::new(logits)?;
    let p = softmax(&z, 1.0)?;
    let r = sensitivity_score(&z)?;
    let outputs = (0..draws.max(1))
        .map(|i| dynanoise_transform(&z, &cfg, &mut SeededRng::new(seed, i as u64)))
        .collect::<mia_bench::Result<Vec<_>>>()?;
    let k = z.len();
    let mut mean = vec![0.0; k];
    for q in &outputs {
        for (m, v) in mean.iter_mut().zip(q.as_slice()) {
            *m += v / outputs.len() as f64;
        }
    }
    let kept = outputs.iter().filter(|q| q.argmax() == p.argmax()).count();
    Ok(DefendView {
        sensitivity: r.value(),
        variance: noise_variance(r, &cfg),
        argmax_kept: kept as f64 / outputs.len() as f64,
        undefended: p.into_inner(),
        draws: outputs.into_iter().map(|q| q.into_inner()).collect(),
        mean,
    })
}

#[derive(Debug, Serialize, PartialEq)]
pub struct CurvePoint {
    pub margin: f64,
    pub top_probability: f64,
    pub sensitivity: f64,
    pub variance: f64,
}

/// Sensitivity and noise variance for logits `[m, 0, ..., 0]` as the
/// margin `m` grows from 0 to `max_margin`.
pub fn noise_curve(cfg: DynaNoiseConfig, k: usize, max_margin: f64, points: usize) -> mia_bench::Result<Vec<CurvePoint>> {
    cfg.validate()?;
    if k < 2 || points < 2 || max_margin.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(mia_bench::Error::InvalidParameter("need k >= 2, points >= 2 and max_margin > 0".into()));
    }
    (0..points)
        .map(|i| {
            let margin = max_margin * i as f64 / (points - 1) as f64;
            let mut z = vec![0.0; k];
            z[0] = margin;
            let z = LogitVector::new(z)?;
            let r = sensitivity_score(&z)?;
            Ok(CurvePoint {
                margin,
                top_probability: softmax(&z, 1.0)?.max(),
                sensitivity: r.value(),
                variance: noise_variance(r, &cfg),
            })
        })
        .collect()
}

pub fn midput_view(baseline: &[f64], defended: &[f64]) -> mia_bench::Result<MidputReport> {
    if baseline.len() != 4 || defended.len() != 4 {
        return Err(mia_bench::Error::InvalidInput(
            "expected [accuracy, confidence ASR, loss ASR, shadow ASR]".into(),
        ));
    }
    let none = EvalReport::new("None", baseline[0], baseline[1], baseline[2], baseline[3])?;
    let def = EvalReport::new("Defended", defended[0], defended[1], defended[2], defended[3])?;
    compute_midput(&none, &def)
}

fn to_js<T: Serialize>(value: mia_bench::Result<T>) -> Result<String, JsError> {
    let value = value.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&value).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn defend(
    logits: Vec<f64>,
    base_variance: f64,
    lambda_scale: f64,
    temperature: f64,
    seed: u32,
    draws: u32,
) -> Result<String, JsError> {
    let cfg = DynaNoiseConfig {
        base_variance,
        lambda_scale,
        temperature,
    };
    to_js(defend_view(logits, cfg, seed.into(), draws as usize))
}

#[wasm_bindgen]
pub fn curve(base_variance: f64, lambda_scale: f64, k: u32, max_margin: f64, points: u32) -> Result<String, JsError> {
    let cfg = DynaNoiseConfig {
        base_variance,
        lambda_scale,
        temperature: 1.0,
    };
    to_js(noise_curve(cfg, k as usize, max_margin, points as usize))
}

#[wasm_bindgen]
pub fn midput(baseline: Vec<f64>, defended: Vec<f64>) -> Result<String, JsError> {
    to_js(midput_view(&baseline, &defended))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_config_reproduces_softmax() {
        let cfg = DynaNoiseConfig {
            base_variance: 0.0,
            lambda_scale: 4.0,
            temperature: 1.0,
        };
        let v = defend_view(vec![2.0, 1.0, 0.0], cfg, 1, 5).unwrap();
        assert_eq!(v.draws.len(), 5);
        assert!(v.draws.iter().all(|d| *d == v.undefended));
        assert_eq!(v.argmax_kept, 1.0);
        assert_eq!(v.variance, 0.0);
    }

    #[test]
    fn curve_rises_with_margin() {
        let pts = noise_curve(DynaNoiseConfig::default(), 4, 10.0, 11).unwrap();
        assert_eq!(pts[0].sensitivity, 0.0);
        assert_eq!(pts[0].variance, DynaNoiseConfig::default().base_variance);
        assert!(pts.windows(2).all(|w| w[1].variance >= w[0].variance));
        assert!(noise_curve(DynaNoiseConfig::default(), 1, 10.0, 11).is_err());
    }

    #[test]
    fn midput_matches_core() {
        let m = midput_view(&[0.8211, 0.6956, 0.7639, 0.7841], &[0.8156, 0.2785, 0.4221, 0.5334]).unwrap();
        assert!((m.midput_overall - 0.3310).abs() <= 5e-4);
        assert!(midput_view(&[0.5; 3], &[0.5; 4]).is_err());
    }
}
