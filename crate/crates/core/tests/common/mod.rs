//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use mia_bench::models::{LogRegParams, MlpParams};

pub const FD_STEP: f64 = 1e-6;
/// Floor on the denominator of the relative error, so coordinates whose true
/// gradient is ~0 are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Smallest |pre-activation| of the hidden layer; finite differences are
/// meaningless within `FD_STEP` of a ReLU kink.
pub fn relu_margin(p: &MlpParams, x: &[f64]) -> f64 {
    (0..p.hidden)
        .map(|j| {
            let row = &p.w1[j * p.input_dim..(j + 1) * p.input_dim];
            (p.b1[j] + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>()).abs()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Largest relative error between the analytic MLP gradient and central
/// differences of the loss, over every parameter.
pub fn mlp_gradient_error(p: &MlpParams, x: &[f64], target: &[f64]) -> f64 {
    let (_, grad) = p.loss_and_gradient(x, target).unwrap();
    let analytic = grad.to_flat();
    let base = p.to_flat();
    let mut probe = p.clone();
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let mut v = base.clone();
        v[i] = base[i] + FD_STEP;
        probe.set_flat(&v);
        let up = probe.loss_and_gradient(x, target).unwrap().0;
        v[i] = base[i] - FD_STEP;
        probe.set_flat(&v);
        let down = probe.loss_and_gradient(x, target).unwrap().0;
        worst = worst.max(relative_error(analytic[i], (up - down) / (2.0 * FD_STEP)));
    }
    worst
}

#[allow(clippy::needless_range_loop)]
pub fn logreg_gradient_error(p: &LogRegParams, x: &[f64], label: bool) -> f64 {
    let (_, gw, gb) = p.loss_and_gradient(x, label).unwrap();
    let loss_at = |q: &LogRegParams| q.loss_and_gradient(x, label).unwrap().0;
    let mut worst: f64 = 0.0;
    for i in 0..=p.dim() {
        let mut up = p.clone();
        let mut down = p.clone();
        let analytic = if i < p.dim() {
            up.weights[i] += FD_STEP;
            down.weights[i] -= FD_STEP;
            gw[i]
        } else {
            up.bias += FD_STEP;
            down.bias -= FD_STEP;
            gb
        };
        let numeric = (loss_at(&up) - loss_at(&down)) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(analytic, numeric));
    }
    worst
}
