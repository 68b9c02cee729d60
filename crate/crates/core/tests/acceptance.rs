//! Acceptance checks, one line per criterion.
//!
//! Set `SURVAE_ACCEPTANCE=1,4,7` to run a subset.

mod common;

use std::time::Instant;

use common::{flow, jitter, log_mean_exp_se, log_normal, map_rows, mean_se, normals, repeat_row};
use serde_json::json;
use survae::ad::finite_diff_check;
use survae::layers::{build_layer, check_right_inverse, LayerSpec};
use survae::oracle::{self, Grid};
use survae::train::{self, TrainConfig, Trainer};
use survae::{ckpt, data, presets, Flow, Noise, Parameterized, Tensor};

type Outcome = (bool, String);

fn main() {
    let only: Option<Vec<u32>> = std::env::var("SURVAE_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let checks: [(u32, &str, fn() -> Outcome); 10] = [
        (1, "gradient correctness", gradients),
        (2, "change-of-variables exactness", change_of_variables),
        (3, "likelihood contribution oracles", contribution_oracles),
        (4, "delta limit", delta_limit),
        (5, "zero bound gap for exact inversion", ppca_gap),
        (6, "right-inverse suites", right_inverse),
        (7, "structural invariants", structural),
        (8, "synthetic training", synthetic_training),
        (9, "exchangeable-set toy run", exchangeable_sets),
        (10, "determinism", determinism),
    ];
    let mut failed = 0;
    for (id, name, check) in checks {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let (ok, detail) = match std::panic::catch_unwind(check) {
            Ok(r) => r,
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        if !ok {
            failed += 1;
        }
        let tag = if ok { "PASS" } else { "FAIL" };
        println!("[{tag}] {id:>2} {name}: {detail} ({:.1}s)", t.elapsed().as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn uniforms(n: usize, d: usize, lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut noise = Noise::from_seed(seed);
    Tensor::new(vec![n, d], (0..n * d).map(|_| lo + (hi - lo) * noise.uniform()).collect()).unwrap()
}

fn sorted_rows(x: &Tensor) -> Tensor {
    map_rows(x, |r| {
        let mut r = r.to_vec();
        r.sort_by(f64::total_cmp);
        r
    })
}

// 1 -----------------------------------------------------------------------

fn gradients() -> Outcome {
    let t = Instant::now();
    let clf = json!({"type": "classifier", "hidden": [8]});
    let cdn = json!({"family": "conditional_diagonal_normal", "hidden": [8]});
    let diag = |dim: usize| json!({"family": "diagonal_normal", "dim": dim});
    let nx = normals(6, 3, 11);
    let pos = nx.map(f64::abs);
    let x2 = nx.columns(0, 2);
    let cases: Vec<(&str, serde_json::Value, Tensor)> = vec![
        (
            "affine_coupling+actnorm",
            json!({"input_dim": 2, "base": diag(2), "layers": [
                {"kind": "actnorm", "initialized": true},
                {"kind": "affine_coupling", "hidden": [8, 8]},
                {"kind": "reverse"},
                {"kind": "affine_coupling", "hidden": [8]}]}),
            x2.clone(),
        ),
        (
            "abs/inference",
            json!({"input_dim": 3, "base": diag(3), "layers": [
                {"kind": "abs", "orientation": "inference", "sign_model": clf}]}),
            nx.clone(),
        ),
        (
            "abs/generative",
            json!({"input_dim": 3, "base": diag(3), "layers": [
                {"kind": "abs", "orientation": "generative", "sign_model": clf}]}),
            pos.clone(),
        ),
        (
            "max/inference",
            json!({"input_dim": 3, "base": diag(1), "layers": [
                {"kind": "max", "orientation": "inference", "index_model": clf}]}),
            nx.clone(),
        ),
        (
            "max/generative",
            json!({"input_dim": 1, "base": diag(3), "layers": [
                {"kind": "max", "orientation": "generative", "k": 3, "index_model": clf,
                 "fill": {"type": "truncated_normal"}}]}),
            nx.columns(0, 1),
        ),
        (
            "sort/inference",
            json!({"input_dim": 3, "base": diag(3), "layers": [
                {"kind": "sort", "orientation": "inference", "perm_model": clf}]}),
            nx.clone(),
        ),
        (
            "sort/generative",
            json!({"input_dim": 3, "base": diag(3), "layers": [
                {"kind": "sort", "orientation": "generative", "perm_model": clf}]}),
            sorted_rows(&nx),
        ),
        (
            "slice/inference",
            json!({"input_dim": 3, "base": diag(2), "layers": [
                {"kind": "slice", "orientation": "inference", "aux": 1, "aux_model": cdn}]}),
            nx.clone(),
        ),
        (
            "slice/generative",
            json!({"input_dim": 2, "base": diag(3), "layers": [
                {"kind": "slice", "orientation": "generative", "aux": 1, "aux_model": cdn}]}),
            x2.clone(),
        ),
        (
            "rounding/inference",
            json!({"input_dim": 2, "base": diag(2), "layers": [
                {"kind": "rounding", "orientation": "inference",
                 "model": {"type": "conditional", "hidden": [8]}}]}),
            x2.map(|v| 3.0 * v),
        ),
        (
            "rounding/generative",
            json!({"input_dim": 2, "base": diag(2), "layers": [
                {"kind": "rounding", "orientation": "generative",
                 "model": {"type": "conditional", "hidden": [8]}}]}),
            x2.map(|v| (3.0 * v).floor()),
        ),
        (
            "vae",
            json!({"input_dim": 3, "base": {"family": "standard_normal", "dim": 2}, "layers": [
                {"kind": "vae", "latent": 2, "encoder_hidden": [8], "decoder_hidden": [8]}]}),
            nx.clone(),
        ),
        (
            "ppca",
            json!({"input_dim": 3, "base": {"family": "standard_normal", "dim": 2}, "layers": [
                {"kind": "ppca", "latent": 2}]}),
            nx.clone(),
        ),
        (
            "base categorical",
            json!({"input_dim": 1, "base": {"family": "categorical", "classes": 4}, "layers": []}),
            Tensor::new(vec![4, 1], vec![0.0, 1.0, 3.0, 1.0]).unwrap(),
        ),
    ];
    let mut worst = 0.0f64;
    let mut worst_abs = 0.0f64;
    let mut failures = Vec::new();
    let n = cases.len();
    for (i, (name, spec, x)) in cases.into_iter().enumerate() {
        let mut f = flow(spec);
        // large decoder precisions make the objective O(1e3) and swamp the
        // central differences in rounding error
        let scale = if name == "vae" { 0.05 } else { 0.3 };
        jitter(&mut f, 100 + i as u64, scale);
        let mut rec = Noise::from_seed(7).recording();
        let value = f.log_prob(&x, &mut rec).expect("forward pass").mean();
        if std::env::var("SURVAE_VERBOSE").is_ok() {
            eprintln!("{name}: objective {value}");
        }
        let bundle = rec.take_bundle();
        let report = finite_diff_check(
            &mut f,
            |m: &Flow, tape| {
                let mut noise = Noise::replay(bundle.clone());
                Ok(m.log_prob_var(tape.constant(x.clone()), &mut noise)?.mean())
            },
            1e-6,
        );
        match report {
            Ok(r) => {
                worst = worst.max(r.max_rel_err());
                worst_abs = r.entries.iter().fold(worst_abs, |m, e| m.max(e.max_abs_err));
                if !r.passes(1e-5) {
                    if std::env::var("SURVAE_VERBOSE").is_ok() {
                        eprintln!("{name}: {:#?}", r.entries);
                    }
                    failures.push(format!("{name} rel err {:.2e}", r.max_rel_err()));
                }
            }
            Err(e) => failures.push(format!("{name}: {e}")),
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let ok = failures.is_empty() && secs < 120.0;
    (
        ok,
        format!(
            "{n} flows, max relative error {worst:.2e} (< 1e-5, differences under {:.0e} count as exact), \
             max absolute error {worst_abs:.1e}, {secs:.1}s (< 120s){}",
            survae::ad::ABS_FLOOR,
            if failures.is_empty() { String::new() } else { format!("; failed: {}", failures.join(", ")) }
        ),
    )
}

// 2 -----------------------------------------------------------------------

fn log_sigmoid(v: f64) -> f64 {
    -(-v).exp().ln_1p()
}

fn change_of_variables() -> Outcome {
    let n = 1000;
    let ln2 = std::f64::consts::LN_2;
    let mut worst = 0.0f64;

    // x in (0,1): u = logit x, v = (u - 0.5)/2, w = softplus v, w ~ half-normal
    let f1 = flow(json!({"input_dim": 2, "base": {"family": "half_normal", "dim": 2}, "layers": [
        {"kind": "elementwise", "map": {"type": "logit"}},
        {"kind": "elementwise", "map": {"type": "affine", "a": 2.0, "b": 0.5}},
        {"kind": "elementwise", "map": {"type": "softplus"}}]}));
    let x1 = uniforms(n, 2, 0.001, 0.999, 21);
    let by_hand1 = |r: &[f64]| -> f64 {
        r.iter()
            .map(|&x| {
                let u = (x / (1.0 - x)).ln();
                let v = (u - 0.5) / 2.0;
                let w = v.exp().ln_1p();
                ln2 + log_normal(w) + log_sigmoid(v) - ln2 - x.ln() - (1.0 - x).ln()
            })
            .sum()
    };

    // x real: v = (x - 0.3)/(-1.5), s = sigmoid v, u = logit s, w = (u + 1)/0.5, w ~ N(0,1)
    let f2 = flow(json!({"input_dim": 2, "base": {"family": "standard_normal", "dim": 2}, "layers": [
        {"kind": "elementwise", "map": {"type": "affine", "a": -1.5, "b": 0.3}},
        {"kind": "elementwise", "map": {"type": "sigmoid"}},
        {"kind": "elementwise", "map": {"type": "logit"}},
        {"kind": "elementwise", "map": {"type": "affine", "a": 0.5, "b": -1.0}}]}));
    let x2 = normals(n, 2, 22).map(|v| 2.0 * v);
    let by_hand2 = |r: &[f64]| -> f64 {
        r.iter()
            .map(|&x| {
                let v = (x - 0.3) / -1.5;
                let w = (v + 1.0) / 0.5;
                log_normal(w) - 1.5f64.ln() - 0.5f64.ln()
            })
            .sum()
    };

    // x > 0: u = log(e^x - 1), w = (u + 1)/0.5, w ~ N(0,1)
    let f3 = flow(json!({"input_dim": 2, "base": {"family": "standard_normal", "dim": 2}, "layers": [
        {"kind": "elementwise", "map": {"type": "inverse_softplus"}},
        {"kind": "elementwise", "map": {"type": "affine", "a": 0.5, "b": -1.0}}]}));
    let x3 = normals(n, 2, 23).map(f64::exp);
    let by_hand3 = |r: &[f64]| -> f64 {
        r.iter()
            .map(|&x| {
                let u = x + (-(-x).exp_m1()).ln();
                let w = (u + 1.0) / 0.5;
                log_normal(w) - 0.5f64.ln() - (-(-x).exp_m1()).ln()
            })
            .sum()
    };

    let cases: [(&Flow, &Tensor, &dyn Fn(&[f64]) -> f64); 3] =
        [(&f1, &x1, &by_hand1), (&f2, &x2, &by_hand2), (&f3, &x3, &by_hand3)];
    for (f, x, by_hand) in cases {
        let lp = f.log_prob(x, &mut Noise::from_seed(0)).unwrap().values;
        for (i, v) in lp.iter().enumerate() {
            let err = (v - by_hand(x.row(i))).abs();
            worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
        }
    }
    (worst < 1e-10, format!("3 flows x {n} points, max |error| {worst:.2e} (< 1e-10)"))
}

// 3 -----------------------------------------------------------------------

struct OracleTally {
    exact_worst: f64,
    mc_worst_z: f64,
    identity_worst: f64,
    failures: Vec<String>,
    cases: usize,
}

fn exact_case(t: &mut OracleTally, name: &str, f: &Flow, x: &Tensor) {
    t.cases += 1;
    let lp = f.log_prob(x, &mut Noise::from_seed(1)).unwrap().values;
    for i in 0..x.rows() {
        let o = oracle::quadrature_log_marginal(f, x.row(i), &Grid::default()).unwrap();
        let err = (lp[i] - o).abs();
        let err = if lp[i] == o { 0.0 } else { err };
        t.exact_worst = t.exact_worst.max(err);
        if !(err < 1e-10) {
            t.failures.push(format!("{name} row {i}: flow {} oracle {o}", lp[i]));
            return;
        }
    }
}

const MC_DRAWS: usize = 100_000;

/// The flow's own per-draw bounds importance-weight the marginal; the
/// estimate must agree with the oracle value within three standard errors.
fn mc_case(t: &mut OracleTally, name: &str, f: &Flow, x: &Tensor, grid: &Grid, seed: u64) {
    t.cases += 1;
    for i in 0..x.rows() {
        let reps = repeat_row(x.row(i), MC_DRAWS);
        let lw = f.log_prob(&reps, &mut Noise::from_seed(seed + i as u64)).unwrap().values;
        let (est, se) = log_mean_exp_se(&lw);
        let o = oracle::quadrature_log_marginal(f, x.row(i), grid).unwrap();
        let err = (est - o).abs();
        let z = if se > 0.0 { err / se } else if err < 1e-10 { 0.0 } else { f64::INFINITY };
        t.mc_worst_z = t.mc_worst_z.max(z);
        if !(z <= 3.0) {
            t.failures.push(format!("{name} row {i}: estimate {est} se {se:.2e} oracle {o}"));
            return;
        }
    }
}

fn identity_case(t: &mut OracleTally, name: &str, f: &Flow, x: &Tensor) {
    t.cases += 1;
    let lp = f.log_prob(x, &mut Noise::from_seed(2)).unwrap().values;
    for i in 0..x.rows() {
        let closed: f64 = x.row(i).iter().map(|&v| log_normal(v)).sum();
        let err = (lp[i] - closed).abs();
        t.identity_worst = t.identity_worst.max(err);
        if !(err < 1e-8) {
            t.failures.push(format!("{name} row {i}: flow {} closed form {closed}", lp[i]));
            return;
        }
    }
}

fn contribution_oracles() -> Outcome {
    let clf = json!({"type": "classifier", "hidden": [8]});
    let cdn = json!({"family": "conditional_diagonal_normal", "hidden": [8]});
    let diag = |dim: usize| json!({"family": "diagonal_normal", "dim": dim});
    let perturbed = |spec: serde_json::Value, seed: u64, scale: f64| {
        let mut f = flow(spec);
        jitter(&mut f, seed, scale);
        f
    };
    let built = |spec: serde_json::Value, seed: u64| perturbed(spec, seed, 0.3);
    let mut t = OracleTally {
        exact_worst: 0.0,
        mc_worst_z: 0.0,
        identity_worst: 0.0,
        failures: Vec::new(),
        cases: 0,
    };
    let x3 = normals(8, 3, 31);
    let x2 = x3.columns(0, 2);

    // exact orientations
    let f = built(json!({"input_dim": 3, "base": diag(3), "layers": [
        {"kind": "abs", "orientation": "inference", "sign_model": clf}]}), 1);
    exact_case(&mut t, "abs/inference", &f, &x3);
    let f = built(json!({"input_dim": 3, "base": diag(1), "layers": [
        {"kind": "max", "orientation": "inference", "index_model": clf}]}), 2);
    exact_case(&mut t, "max/inference", &f, &x3);
    let f = built(json!({"input_dim": 3, "base": diag(3), "layers": [
        {"kind": "sort", "orientation": "inference", "perm_model": clf}]}), 3);
    exact_case(&mut t, "sort/inference", &f, &x3);
    let f = built(json!({"input_dim": 3, "base": diag(2), "layers": [
        {"kind": "slice", "orientation": "inference", "aux": 1, "aux_model": cdn}]}), 4);
    exact_case(&mut t, "slice/inference", &f, &x3);
    let f = built(json!({"input_dim": 1, "base": {"family": "categorical", "classes": 4}, "layers": [
        {"kind": "rounding", "orientation": "inference", "model": {"type": "conditional", "hidden": [8]}}]}), 5);
    exact_case(&mut t, "rounding/inference", &f, &uniforms(8, 1, 0.0, 4.0, 32));
    let f = built(json!({"input_dim": 2, "base": {"family": "rectified_normal", "dim": 2}, "layers": [
        {"kind": "relu", "orientation": "inference"}]}), 6);
    exact_case(&mut t, "relu/inference", &f, &x2);

    // Generative orientations. Importance weights are only square-integrable
    // when the proposals have heavier tails than the posteriors, so these
    // flows use a base narrower than the unit-scale fills and a uniform
    // in-bin model (a logistic-normal in-bin density vanishes at the bin edges).
    // Milder perturbations keep proposal and posterior close, so the weights
    // are not so skewed that a normal-theory 3-SE band stops applying.
    let built = |spec: serde_json::Value, seed: u64| perturbed(spec, seed, 0.1);
    let narrow = |spec: serde_json::Value, seed: u64, dim: usize| {
        let mut f = built(spec, seed);
        f.set_parameter("base.log_std", Tensor::full(&[dim], -0.7)).unwrap();
        f
    };
    let few = |x: &Tensor| x.select_rows(&[0, 1, 2]);
    let f = built(json!({"input_dim": 2, "base": diag(2), "layers": [
        {"kind": "abs", "orientation": "generative", "sign_model": clf}]}), 7);
    mc_case(&mut t, "abs/generative", &f, &few(&x2.map(f64::abs)), &Grid::default(), 70);
    let f = narrow(json!({"input_dim": 1, "base": diag(2), "layers": [
        {"kind": "max", "orientation": "generative", "k": 2, "index_model": clf}]}), 8, 2);
    mc_case(&mut t, "max/generative k=2", &f, &few(&x3.columns(0, 1)), &Grid::default(), 80);
    let f = narrow(json!({"input_dim": 1, "base": diag(3), "layers": [
        {"kind": "max", "orientation": "generative", "k": 3, "fill": {"type": "truncated_normal"}}]}), 9, 3);
    let coarse = Grid { points: 1201, ..Grid::default() };
    mc_case(&mut t, "max/generative k=3", &f, &few(&x3.columns(1, 2)), &coarse, 90);
    let f = built(json!({"input_dim": 3, "base": diag(3), "layers": [
        {"kind": "sort", "orientation": "generative", "perm_model": clf}]}), 10);
    mc_case(&mut t, "sort/generative", &f, &few(&sorted_rows(&x3)), &Grid::default(), 100);
    let f = narrow(json!({"input_dim": 2, "base": diag(3), "layers": [
        {"kind": "slice", "orientation": "generative", "aux": 1, "aux_model": cdn}]}), 11, 3);
    mc_case(&mut t, "slice/generative", &f, &few(&x2), &Grid::default(), 110);
    let f = built(json!({"input_dim": 2, "base": diag(2), "layers": [
        {"kind": "rounding", "orientation": "generative"}]}), 12);
    let ints = Tensor::from_rows(&[[-1.0, 0.0], [0.0, 2.0], [2.0, -3.0]]).unwrap();
    let cells = Grid { points: 801, ..Grid::default() };
    mc_case(&mut t, "rounding/generative", &f, &ints, &cells, 120);
    let f = narrow(json!({"input_dim": 2, "base": diag(2), "layers": [
        {"kind": "relu", "orientation": "generative"}]}), 13, 2);
    let kinks = Tensor::from_rows(&[[0.0, 0.7], [1.2, 0.0], [0.0, 0.0]]).unwrap();
    mc_case(&mut t, "relu/generative", &f, &kinks, &Grid::default(), 130);

    // i.i.d. recovery
    let f = flow(json!({"input_dim": 3, "base": {"family": "half_normal", "dim": 3}, "layers": [
        {"kind": "abs", "orientation": "inference"}]}));
    identity_case(&mut t, "abs + half-normal", &f, &x3);
    let f = flow(json!({"input_dim": 3, "base": {"family": "ordered_normal", "dim": 3}, "layers": [
        {"kind": "sort", "orientation": "inference"}]}));
    identity_case(&mut t, "sort + ordered base", &f, &x3);
    let f = flow(json!({"input_dim": 3, "base": {"family": "max_normal", "k": 3, "dim": 1}, "layers": [
        {"kind": "max", "orientation": "inference", "fill": {"type": "truncated_normal"}}]}));
    identity_case(&mut t, "max + order-statistic base", &f, &x3);
    let f = flow(json!({"input_dim": 3, "base": {"family": "rectified_normal", "dim": 3}, "layers": [
        {"kind": "relu", "orientation": "inference"}]}));
    identity_case(&mut t, "relu + rectified base", &f, &x3);

    (
        t.failures.is_empty(),
        format!(
            "{} flows; exact max |err| {:.2e} (< 1e-10), MC max |z| {:.2} (<= 3 at k=1e5), i.i.d. identities max |err| {:.2e} (< 1e-8){}",
            t.cases,
            t.exact_worst,
            t.mc_worst_z,
            t.identity_worst,
            if t.failures.is_empty() { String::new() } else { format!("; failed: {}", t.failures.join("; ")) }
        ),
    )
}

// 4 -----------------------------------------------------------------------

fn ppca_flow(dim: usize, latent: usize, w: Tensor, sigma: f64) -> Flow {
    let mut f = flow(json!({"input_dim": dim, "base": {"family": "standard_normal", "dim": latent},
        "layers": [{"kind": "ppca", "latent": latent}]}));
    f.set_parameter("layers.0.weight", w).unwrap();
    f.set_parameter("layers.0.log_sigma", Tensor::vector(vec![sigma.ln()])).unwrap();
    f
}

fn delta_limit() -> Outcome {
    let sigmas = [1e-1, 1e-2, 1e-3, 1e-4];
    let (a, x) = (2.0, 1.3);
    let seq = oracle::delta_limit_sequence(a, 0.0, x, &sigmas).unwrap();
    let gaps: Vec<f64> = seq.iter().map(|p| p.gap).collect();
    let monotone = gaps.windows(2).all(|w| w[1] < w[0]);
    let last = *gaps.last().unwrap();
    // the layer's own per-draw ELBO must track the analytic one
    let mut layer_err = 0.0f64;
    for p in &seq {
        let f = ppca_flow(1, 1, Tensor::new(vec![1, 1], vec![a]).unwrap(), p.sigma);
        let lp = f.log_prob(&repeat_row(&[x], 1000), &mut Noise::from_seed(4)).unwrap();
        layer_err = layer_err.max((lp.mean() - p.elbo).abs());
    }
    let ok = monotone && last < 1e-6 && layer_err < 1e-8;
    let shown: Vec<String> = gaps.iter().map(|g| format!("{g:.1e}")).collect();
    (
        ok,
        format!(
            "gaps [{}] monotone={monotone}, last {last:.2e} (< 1e-6); layer vs analytic ELBO max |err| {layer_err:.1e} (< 1e-8)",
            shown.join(", ")
        ),
    )
}

// 5 -----------------------------------------------------------------------

fn ppca_gap() -> Outcome {
    let k = 100_000;
    // the estimator has zero variance, so its standard error is pure
    // rounding; agreement below this floor counts as a match
    let floor = 1e-10;
    let mut ok = true;
    let mut parts = Vec::new();

    let (w1, s1) = (Tensor::new(vec![1, 1], vec![1.7]).unwrap(), 0.6);
    let f = ppca_flow(1, 1, w1.clone(), s1);
    for (i, x) in [-0.8, 2.1].into_iter().enumerate() {
        let lw = f.log_prob(&repeat_row(&[x], k), &mut Noise::from_seed(50 + i as u64)).unwrap().values;
        let (m, se) = mean_se(&lw);
        let var = se * se * k as f64;
        let exact = oracle::ppca_log_marginal(&w1, s1, &[x]).unwrap();
        let err = (m - exact).abs();
        let pass = err <= (3.0 * se).max(floor) && var < 1e-6;
        ok &= pass;
        parts.push(format!("1-D x={x}: |err| {err:.1e} se {se:.1e} var {var:.1e}"));
    }

    let w3 = Tensor::new(vec![3, 2], vec![0.9, -0.4, 0.3, 1.1, -0.7, 0.5]).unwrap();
    let s3 = 0.5;
    let f = ppca_flow(3, 2, w3.clone(), s3);
    let x = [0.4, -1.2, 0.9];
    let lw = f.log_prob(&repeat_row(&x, k), &mut Noise::from_seed(52)).unwrap().values;
    let (m, se) = mean_se(&lw);
    let exact = oracle::ppca_log_marginal(&w3, s3, &x).unwrap();
    let err = (m - exact).abs();
    ok &= err <= (3.0 * se).max(floor);
    parts.push(format!("3-D: |err| {err:.1e} se {se:.1e}"));
    (ok, format!("k=1e5; {}", parts.join("; ")))
}

// 6 -----------------------------------------------------------------------

fn right_inverse() -> Outcome {
    let n = 100_000;
    let tol = 1e-9;
    let nz = normals(n, 3, 61);
    let pos = nz.map(f64::abs);
    // about a third of the coordinates sit exactly on the kink
    let kinked = map_rows(&pos, |r| r.iter().map(|&v| if v < 0.43 { 0.0 } else { v }).collect());
    let ints = nz.map(|v| (4.0 * v).floor());
    let clf = json!({"type": "classifier", "hidden": [8]});
    let cdn = json!({"family": "conditional_diagonal_normal", "hidden": [8]});
    let layer = |spec: serde_json::Value, d: usize| {
        let spec: LayerSpec = serde_json::from_value(spec).unwrap();
        let mut l = build_layer(&spec, 0, d, &mut Noise::from_seed(3)).unwrap();
        for p in l.parameters_mut() {
            let mut noise = Noise::from_seed(4);
            for v in p.value.data_mut() {
                *v += 0.3 * noise.normal();
            }
        }
        l
    };
    // (name, layer, points, must pass)
    let cases = vec![
        ("abs/inference", layer(json!({"kind": "abs", "orientation": "inference"}), 3), pos.clone(), true),
        ("abs/inference classifier", layer(json!({"kind": "abs", "orientation": "inference", "sign_model": clf}), 3), pos.clone(), true),
        ("abs/generative", layer(json!({"kind": "abs", "orientation": "generative", "sign_model": clf}), 3), pos.clone(), true),
        ("max/inference", layer(json!({"kind": "max", "orientation": "inference"}), 3), nz.columns(0, 1), true),
        ("max/inference truncated", layer(json!({"kind": "max", "orientation": "inference", "index_model": clf, "fill": {"type": "truncated_normal"}}), 3), nz.columns(0, 1), true),
        ("max/generative", layer(json!({"kind": "max", "orientation": "generative", "k": 3}), 1), nz.columns(0, 1), true),
        ("max/generative truncated", layer(json!({"kind": "max", "orientation": "generative", "k": 3, "fill": {"type": "truncated_normal"}}), 1), nz.columns(0, 1), true),
        ("sort/inference", layer(json!({"kind": "sort", "orientation": "inference", "perm_model": clf}), 3), sorted_rows(&nz), true),
        ("sort/generative", layer(json!({"kind": "sort", "orientation": "generative"}), 3), sorted_rows(&nz), true),
        ("slice/inference", layer(json!({"kind": "slice", "orientation": "inference", "aux": 1, "aux_model": cdn}), 3), nz.columns(0, 2), true),
        ("slice/generative", layer(json!({"kind": "slice", "orientation": "generative", "aux": 2, "aux_model": cdn}), 3), nz.clone(), true),
        ("rounding/inference", layer(json!({"kind": "rounding", "orientation": "inference"}), 3), ints.clone(), true),
        ("rounding/inference conditional", layer(json!({"kind": "rounding", "orientation": "inference", "model": {"type": "conditional", "hidden": [8]}}), 3), ints.clone(), true),
        ("rounding/generative", layer(json!({"kind": "rounding", "orientation": "generative", "model": {"type": "conditional", "hidden": [8]}}), 3), ints.clone(), true),
        ("relu/inference", layer(json!({"kind": "relu", "orientation": "inference"}), 3), kinked.clone(), true),
        ("relu/generative", layer(json!({"kind": "relu", "orientation": "generative"}), 3), kinked.clone(), true),
        ("leaky max/inference", layer(json!({"kind": "max", "orientation": "inference", "fill": {"type": "standard_normal"}}), 3), nz.columns(0, 1), false),
        ("leaky max/generative", layer(json!({"kind": "max", "orientation": "generative", "k": 3, "fill": {"type": "standard_normal"}}), 1), nz.columns(0, 1), false),
        ("leaky relu/inference", layer(json!({"kind": "relu", "orientation": "inference", "neg_model": {"type": "standard_normal"}}), 3), kinked.clone(), false),
        ("leaky relu/generative", layer(json!({"kind": "relu", "orientation": "generative", "neg_model": {"type": "standard_normal"}}), 3), kinked.clone(), false),
    ];
    let mut bad = Vec::new();
    let (mut sound, mut leaky) = (0, 0);
    let mut worst = 0.0f64;
    for (i, (name, l, points, should_pass)) in cases.into_iter().enumerate() {
        let r = check_right_inverse(l.as_ref(), &points, &mut Noise::from_seed(600 + i as u64), tol).unwrap();
        if should_pass {
            sound += 1;
            worst = worst.max(r.max_error);
        } else {
            leaky += 1;
        }
        if r.passes() != should_pass || r.draws != n {
            bad.push(format!("{name} ({} violations)", r.violations));
        }
    }
    (
        bad.is_empty(),
        format!(
            "{sound} layers x 1e5 draws clean (max error {worst:.1e}, tol {tol:.0e}), {leaky} leaky fills detected{}",
            if bad.is_empty() { String::new() } else { format!("; wrong verdicts: {}", bad.join(", ")) }
        ),
    )
}

// 7 -----------------------------------------------------------------------

fn bits_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn structural() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;

    // sort-first: every reordering of every row
    let mut sf = Flow::build(&presets::preset("sortflow-toy").unwrap()).unwrap();
    jitter(&mut sf, 71, 0.1);
    let x = normals(64, 4, 72);
    let reference = sf.log_prob(&x, &mut Noise::from_seed(0)).unwrap().values;
    let mut sort_ok = reference.iter().all(|v| v.is_finite());
    for rank in 0..survae::layers::factorial(4) {
        let p = survae::layers::perm_unrank(rank, 4);
        let xp = map_rows(&x, |r| p.iter().map(|&j| r[j]).collect());
        sort_ok &= bits_equal(&reference, &sf.log_prob(&xp, &mut Noise::from_seed(rank as u64)).unwrap().values);
    }
    ok &= sort_ok;
    parts.push(format!("sort-first invariant under 24 orderings: {sort_ok}"));

    // abs-first: every sign pattern
    let mut af = Flow::build(&presets::preset("absflow-symmetric").unwrap()).unwrap();
    jitter(&mut af, 73, 0.1);
    let x = normals(64, 2, 74);
    let reference = af.log_prob(&x, &mut Noise::from_seed(0)).unwrap().values;
    let mut abs_ok = reference.iter().all(|v| v.is_finite());
    for s in [[1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]] {
        let xs = map_rows(&x, |r| vec![s[0] * r[0], s[1] * r[1]]);
        abs_ok &= bits_equal(&reference, &af.log_prob(&xs, &mut Noise::from_seed(9)).unwrap().values);
    }
    ok &= abs_ok;
    parts.push(format!("abs-first symmetric under sign flips: {abs_ok}"));

    // stochastic permutation in front of a flow, versus the flow applied to
    // the permutation drawn from the same stream
    let tail = json!([
        {"kind": "affine_coupling", "hidden": [16]},
        {"kind": "reverse"},
        {"kind": "affine_coupling", "hidden": [16]}]);
    let mut with = flow(json!({"input_dim": 4, "base": {"family": "standard_normal", "dim": 4},
        "layers": [{"kind": "stochastic_permutation"}, tail[0], tail[1], tail[2]]}));
    let mut without = flow(json!({"input_dim": 4, "base": {"family": "standard_normal", "dim": 4}, "layers": tail}));
    jitter(&mut with, 75, 0.2);
    jitter(&mut without, 75, 0.2);
    let x = normals(64, 4, 76);
    let lp_with = with.log_prob(&x, &mut Noise::from_seed(77)).unwrap().values;
    let mut noise = Noise::from_seed(77);
    let (px, v) = with.layers()[0].inference_tensor(&x, &mut noise).unwrap();
    let lp_without = without.log_prob(&px, &mut noise).unwrap().values;
    let perm_ok = bits_equal(&lp_with, &lp_without) && v.iter().all(|&c| c == 0.0);
    ok &= perm_ok;
    parts.push(format!("stochastic permutation adds exactly 0: {perm_ok}"));

    // IWBO of an exact flow
    let base = Flow::build(&presets::preset("baseline").unwrap()).unwrap();
    let x = normals(256, 2, 78);
    let lp = base.log_prob(&x, &mut Noise::from_seed(0)).unwrap().values;
    let mut iw_err = 0.0f64;
    for k in [1, 7, 50] {
        let iw = base.iwbo(&x, k, 79, 2).unwrap().values;
        iw_err = lp.iter().zip(&iw).fold(iw_err, |m, (a, b)| m.max((a - b).abs()));
    }
    ok &= iw_err <= 1e-12;
    parts.push(format!("exact-flow IWBO(k) - log_prob max |diff| {iw_err:.1e} (<= 1e-12)"));
    (ok, parts.join("; "))
}

// 8 -----------------------------------------------------------------------

fn test_nll(f: &Flow, x: &Tensor) -> f64 {
    -f.log_prob(x, &mut Noise::from_seed(0)).unwrap().mean()
}

/// Largest rise between consecutive 500-iteration window means of the trace.
fn largest_smoothed_rise(trace: &[train::TraceRow]) -> f64 {
    let w: Vec<f64> = trace
        .chunks(5)
        .filter(|c| c.len() == 5)
        .map(|c| c.iter().map(|r| r.mean_nats).sum::<f64>() / 5.0)
        .collect();
    w.windows(2).map(|p| p[1] - p[0]).fold(f64::NEG_INFINITY, f64::max)
}

fn synthetic_training() -> Outcome {
    let (train_set, test_set) = data::train_test("gaussians", data::TRAIN_SIZE, 0).unwrap();
    let (entropy, entropy_se) = data::entropy("gaussians", 1_000_000, 1).unwrap();
    let config = TrainConfig::default();
    let mut results = Vec::new();
    for name in ["baseline", "absflow-symmetric"] {
        let mut f = Flow::build(&presets::preset(name).unwrap()).unwrap();
        let t = Instant::now();
        let (_, trace) = train::train(&mut f, &train_set.samples, config.clone()).unwrap();
        let secs = t.elapsed().as_secs_f64();
        let nll = test_nll(&f, &test_set.samples);
        results.push((name, f.num_parameters(), nll, secs, largest_smoothed_rise(&trace)));
    }
    let anti = Flow::build(&presets::preset("absflow-antisymmetric").unwrap()).unwrap().num_parameters();
    let (_, base_params, base_nll, base_secs, base_smooth) = results[0];
    let (_, sym_params, sym_nll, sym_secs, _) = results[1];
    let ratio = anti as f64 / base_params as f64;
    let near_entropy = (base_nll - entropy).abs() < 0.15;
    let sym_ok = sym_params == base_params && sym_nll <= base_nll + 0.1;
    let ratio_ok = (0.15..=0.40).contains(&ratio);
    let time_ok = base_secs < 1800.0 && sym_secs < 1800.0;
    (
        near_entropy && sym_ok && ratio_ok && time_ok,
        format!(
            "entropy {entropy:.4} (se {entropy_se:.4}); baseline NLL {base_nll:.4} (|gap| {:.4} < 0.15) in {base_secs:.0}s, \
             largest rise of 500-iteration trace means {base_smooth:.3}; symmetric NLL {sym_nll:.4} (<= baseline + 0.1) in {sym_secs:.0}s, \
             params {sym_params} == {base_params}; anti-symmetric ratio {anti}/{base_params} = {ratio:.4} in [0.15, 0.40]",
            (base_nll - entropy).abs()
        ),
    )
}

// 9 -----------------------------------------------------------------------

fn exchangeable_sets() -> Outcome {
    let name = "exchangeable-gaussian-sets";
    let (train_set, test_set) = data::train_test(name, 20_000, 0).unwrap();
    let config = TrainConfig {
        iterations: 2000,
        ..TrainConfig::default()
    };
    let mut sort_flow = Flow::build(&presets::preset("sortflow-toy").unwrap()).unwrap();
    let mut perm_flow = Flow::build(&presets::preset("permuteflow-toy").unwrap()).unwrap();
    train::train(&mut sort_flow, &train_set.samples, config.clone()).unwrap();
    train::train(&mut perm_flow, &train_set.samples, config).unwrap();

    let batch = 1000;
    let batches = test_set.n() / batch;
    let mut finite_invariant = 0;
    let mut bounded = 0;
    let mut sort_nll = 0.0;
    let (mut elbo_sum, mut iwbo_sum) = (0.0, 0.0);
    for b in 0..batches {
        let x = test_set.samples.select_rows(&(b * batch..(b + 1) * batch).collect::<Vec<_>>());
        let lp = sort_flow.log_prob(&x, &mut Noise::from_seed(b as u64)).unwrap();
        let mut shuffle = Noise::from_seed(900 + b as u64);
        let perms: Vec<Vec<usize>> = (0..x.rows()).map(|_| shuffle.permutation(4)).collect();
        let rows: Vec<Vec<f64>> = (0..x.rows()).map(|i| perms[i].iter().map(|&j| x.row(i)[j]).collect()).collect();
        let xp = Tensor::from_rows(&rows).unwrap();
        let lpp = sort_flow.log_prob(&xp, &mut Noise::from_seed(0)).unwrap();
        if lp.values.iter().all(|v| v.is_finite()) && bits_equal(&lp.values, &lpp.values) {
            finite_invariant += 1;
        }
        sort_nll -= lp.mean() / batches as f64;
        // ELBO over the same 100 importance draws the IWBO uses
        let seed = 1000 + b as u64;
        let elbo = (0..100)
            .map(|j| perm_flow.log_prob(&x, &mut Noise::stream(seed, j)).unwrap().mean())
            .sum::<f64>()
            / 100.0;
        let iwbo = perm_flow.iwbo(&x, 100, seed, 1).unwrap().mean();
        if elbo <= iwbo {
            bounded += 1;
        }
        elbo_sum += elbo / batches as f64;
        iwbo_sum += iwbo / batches as f64;
    }
    (
        finite_invariant == batches && bounded == batches,
        format!(
            "{batches} test batches; sort flow finite and permutation-invariant on {finite_invariant} (NLL {sort_nll:.3}); \
             permute flow ELBO <= IWBO(100) on {bounded} (mean ELBO {elbo_sum:.5}, IWBO {iwbo_sum:.5})"
        ),
    )
}

// 10 ----------------------------------------------------------------------

fn determinism() -> Outcome {
    let train_set = data::generate("gaussians", 4000, 3).unwrap();
    let config = TrainConfig {
        iterations: 400,
        batch_size: 64,
        warmup_iters: 50,
        decay_per_epoch: 0.9,
        seed: 5,
        ..TrainConfig::default()
    };
    let fresh = || Flow::build(&presets::preset("augmented").unwrap()).unwrap();
    let run = || {
        let mut f = fresh();
        let (t, trace) = train::train(&mut f, &train_set.samples, config.clone()).unwrap();
        (ckpt::to_bytes(&f, &t.state()).unwrap(), trace, f)
    };
    let (bytes_a, trace_a, flow_a) = run();
    let (bytes_b, trace_b, _) = run();
    let trace_bits = |t: &[train::TraceRow]| -> Vec<u64> {
        t.iter().flat_map(|r| [r.iteration, r.lr.to_bits(), r.mean_nats.to_bits()]).collect()
    };
    let same_trace = trace_bits(&trace_a) == trace_bits(&trace_b);
    let same_ckpt = bytes_a == bytes_b;

    let x = train_set.samples.select_rows(&(0..500).collect::<Vec<_>>());
    let e1 = flow_a.iwbo(&x, 16, 8, 1).unwrap().values;
    let e2 = flow_a.iwbo(&x, 16, 8, 3).unwrap().values;
    let s1 = flow_a.sample(200, &mut Noise::from_seed(9)).unwrap();
    let s2 = flow_a.sample(200, &mut Noise::from_seed(9)).unwrap();
    let same_eval = bits_equal(&e1, &e2) && bits_equal(s1.data(), s2.data());

    // stop halfway, round-trip through bytes, continue
    let mut f = fresh();
    let (t, first) = {
        let mut tr = Trainer::new(config.clone()).unwrap();
        f.initialize(
            &train_set.samples.select_rows(&(0..1000).collect::<Vec<_>>()),
            &mut Noise::stream(config.seed, 1),
        )
        .unwrap();
        let first = tr.run_for(&mut f, &train_set.samples, 200).unwrap();
        (tr, first)
    };
    let mid = ckpt::to_bytes(&f, &t.state()).unwrap();
    let (mut f2, state) = ckpt::from_bytes(&mid).unwrap();
    let roundtrip = ckpt::to_bytes(&f2, &state).unwrap() == mid;
    let mut t2 = Trainer::resume(config.clone(), state).unwrap();
    let second = t2.run(&mut f2, &train_set.samples).unwrap();
    let resumed = ckpt::to_bytes(&f2, &t2.state()).unwrap();
    let joined: Vec<_> = first.into_iter().chain(second).collect();
    let same_resume = resumed == bytes_a && trace_bits(&joined) == trace_bits(&trace_a);

    (
        same_trace && same_ckpt && same_eval && roundtrip && same_resume,
        format!(
            "traces {same_trace}, checkpoints ({} bytes) {same_ckpt}, eval outputs {same_eval}, \
             save/load {roundtrip}, resume {same_resume}",
            bytes_a.len()
        ),
    )
}
