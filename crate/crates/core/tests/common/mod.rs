#![allow(dead_code)]

use serde_json::Value;
use survae::{Flow, FlowSpec, Noise, Parameterized, Tensor};

pub fn flow(spec: Value) -> Flow {
    let spec = FlowSpec::from_json(&spec.to_string()).expect("valid flow spec");
    Flow::build(&spec).expect("flow builds")
}

/// Adds `scale * N(0, 1)` to every parameter so zero-initialized heads do
/// not hide gradient paths.
pub fn jitter(flow: &mut Flow, seed: u64, scale: f64) {
    let mut noise = Noise::from_seed(seed);
    for p in flow.parameters_mut() {
        for v in p.value.data_mut() {
            *v += scale * noise.normal();
        }
    }
}

pub fn normals(n: usize, d: usize, seed: u64) -> Tensor {
    let mut noise = Noise::from_seed(seed);
    Tensor::new(vec![n, d], noise.normals(n * d)).unwrap()
}

pub fn map_rows(x: &Tensor, f: impl Fn(&[f64]) -> Vec<f64>) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..x.rows()).map(|i| f(x.row(i))).collect();
    Tensor::from_rows(&rows).unwrap()
}

pub fn repeat_row(x: &[f64], k: usize) -> Tensor {
    Tensor::new(vec![k, x.len()], x.iter().copied().cycle().take(k * x.len()).collect()).unwrap()
}

pub fn log_normal(v: f64) -> f64 {
    -0.5 * v * v - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// Mean and standard error of the mean.
pub fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Log of the mean of `exp(lw)` with its delta-method standard error.
pub fn log_mean_exp_se(lw: &[f64]) -> (f64, f64) {
    let m = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = lw.iter().map(|l| (l - m).exp()).collect();
    let (wm, wse) = mean_se(&w);
    (m + wm.ln(), wse / wm)
}
