use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"{"input_dim": 2, "base": {"family": "standard_normal", "dim": 2}, "layers": [
    {"kind": "affine_coupling", "hidden": [8]}, {"kind": "reverse"}, {"kind": "affine_coupling", "hidden": [8]}]}"#;
const EMPTY: &str = r#"{"input_dim": 2, "base": {"family": "standard_normal", "dim": 2}, "layers": []}"#;
const ABS: &str = r#"{"input_dim": 2, "base": {"family": "standard_normal", "dim": 2}, "layers": [
    {"kind": "abs", "orientation": "inference", "sign_model": {"type": "uniform"}},
    {"kind": "elementwise", "map": {"type": "inverse_softplus"}},
    {"kind": "affine_coupling", "hidden": [8]}]}"#;
const SLICE: &str = r#"{"input_dim": 2, "base": {"family": "standard_normal", "dim": 3}, "layers": [
    {"kind": "slice", "orientation": "generative", "aux": 1,
     "aux_model": {"family": "conditional_diagonal_normal", "hidden": [4]}}]}"#;

fn survae(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_survae"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = survae(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(dir: &Path, args: &[&str], code: i32) -> String {
    let out = survae(dir, args);
    assert_eq!(out.status.code(), Some(code), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    assert!(out.stdout.is_empty());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "diagnostic is one line: {err:?}");
    err
}

/// Trains `descriptor` for a few iterations and returns the checkpoint path.
fn checkpoint(dir: &TempDir, name: &str, descriptor: &str) -> PathBuf {
    let arch = dir.path().join(format!("{name}.json"));
    std::fs::write(&arch, descriptor).unwrap();
    ok(dir.path(), &["train", "--arch", arch.to_str().unwrap(), "--dataset", "gaussians", "--iters", "20", "--batch", "16"]);
    dir.path().join(format!("{name}.ckpt"))
}

fn grid_csv(text: &str) -> Vec<[f64; 3]> {
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("x,y,density"));
    lines
        .map(|l| {
            let v: Vec<f64> = l.split(',').map(|s| s.parse().unwrap()).collect();
            [v[0], v[1], v[2]]
        })
        .collect()
}

fn mean_nats(stdout: &str) -> f64 {
    let after = stdout.split(": ").nth(1).unwrap();
    after.split(' ').next().unwrap().parse().unwrap()
}

#[test]
fn generate_is_deterministic_and_validates_arguments() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    let a = ok(p, &["generate", "--dataset", "corners", "--n", "50", "--seed", "3"]);
    let b = ok(p, &["generate", "--dataset", "corners", "--n", "50", "--seed", "3"]);
    let c = ok(p, &["generate", "--dataset", "corners", "--n", "50", "--seed", "4"]);
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.lines().count(), 51);
    assert_eq!(a.lines().next(), Some("x,y"));

    ok(p, &["generate", "--dataset", "corners", "--n", "50", "--seed", "3", "--out", "c.csv"]);
    assert_eq!(std::fs::read_to_string(p.join("c.csv")).unwrap(), a);

    fails(p, &["generate", "--dataset", "corners", "--n", "0"], 2);
    fails(p, &["generate", "--dataset", "spirals", "--n", "5"], 2);
    fails(p, &["generate", "--dataset", "corners", "--n", "5", "--bogus"], 2);
}

#[test]
fn train_reports_parameters_and_rejects_bad_descriptors() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    let base = ok(p, &["train", "--arch", "baseline", "--dataset", "gaussians", "--iters", "1", "--batch", "8"]);
    let sym = ok(p, &["train", "--arch", "absflow-symmetric", "--dataset", "gaussians", "--iters", "1", "--batch", "8"]);
    let count = |s: &str| s.lines().next().unwrap().to_string();
    assert_eq!(count(&base), "parameters: 82808");
    assert_eq!(count(&sym), count(&base));
    assert!(p.join("baseline.ckpt").is_file());
    assert!(p.join("baseline.trace.csv").is_file());

    fails(p, &["train", "--arch", "missing.json", "--dataset", "gaussians"], 2);

    std::fs::write(
        p.join("bad.json"),
        r#"{"input_dim": 2, "base": {"family": "standard_normal"}, "layers": [{"kind": "reverse"}, {"kind": "abs"}]}"#,
    )
    .unwrap();
    let err = fails(p, &["train", "--arch", "bad.json", "--dataset", "gaussians"], 2);
    assert!(err.contains("layer 1"), "{err}");

    std::fs::write(
        p.join("wide.json"),
        r#"{"input_dim": 2, "base": {"family": "standard_normal", "dim": 2}, "layers": [{"kind": "reverse"}, {"kind": "slice", "orientation": "inference", "aux": 5, "aux_model": {"family": "conditional_diagonal_normal", "hidden": [4]}}]}"#,
    )
    .unwrap();
    let err = fails(p, &["train", "--arch", "wide.json", "--dataset", "gaussians"], 2);
    assert!(err.contains("layer 1"), "{err}");

    fails(p, &["train", "--arch", "baseline", "--dataset", "gaussians", "--batch", "0"], 2);
}

#[test]
fn training_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    std::fs::write(p.join("tiny.json"), TINY).unwrap();
    let run = |tag: &str| {
        let ck = format!("{tag}.ckpt");
        let tr = format!("{tag}.csv");
        ok(p, &["train", "--arch", "tiny.json", "--dataset", "circles", "--iters", "250", "--batch", "32", "--seed", "7", "--ckpt-out", &ck, "--trace-out", &tr]);
        (std::fs::read(p.join(ck)).unwrap(), std::fs::read_to_string(p.join(tr)).unwrap())
    };
    let (ck_a, tr_a) = run("a");
    let (ck_b, tr_b) = run("b");
    assert_eq!(ck_a, ck_b);
    assert_eq!(tr_a, tr_b);
    assert_eq!(tr_a.lines().next(), Some("iteration,lr,mean_nats"));
    assert_eq!(tr_a.lines().count(), 1 + 3);
}

#[test]
fn eval_metrics_agree_on_exact_flows() {
    let dir = TempDir::new().unwrap();
    let ck = checkpoint(&dir, "tiny", TINY);
    let ck = ck.to_str().unwrap();
    let p = dir.path();
    let nll = ok(p, &["eval", "--ckpt", ck, "--dataset", "gaussians", "--metric", "nll", "--seed", "2"]);
    let iw = ok(p, &["eval", "--ckpt", ck, "--dataset", "gaussians", "--metric", "iwbo", "--k", "10", "--seed", "2", "--out", "iw.csv"]);
    assert!((mean_nats(&nll) - mean_nats(&iw)).abs() <= 1e-12, "{nll} vs {iw}");
    assert!(nll.contains("bits/dim"));
    let rows = std::fs::read_to_string(p.join("iw.csv")).unwrap();
    assert_eq!(rows.lines().next(), Some("index,nats"));
    assert!(rows.lines().count() > 1000);

    let again = ok(p, &["eval", "--ckpt", ck, "--dataset", "gaussians", "--metric", "iwbo", "--k", "10", "--seed", "2"]);
    assert_eq!(iw, again);

    fails(p, &["eval", "--ckpt", ck, "--dataset", "gaussians", "--metric", "iwbo", "--k", "0"], 2);
    fails(p, &["eval", "--ckpt", ck, "--dataset", "gaussians", "--metric", "iwbo"], 2);
    fails(p, &["eval", "--ckpt", ck, "--dataset", "gaussians", "--metric", "kl"], 2);
    fails(p, &["eval", "--ckpt", "nowhere.ckpt", "--dataset", "gaussians"], 1);
    std::fs::write(p.join("junk.ckpt"), b"not a checkpoint").unwrap();
    fails(p, &["eval", "--ckpt", "junk.ckpt", "--dataset", "gaussians"], 1);
}

#[test]
fn iwbo_tightens_elbo_and_ignores_thread_count() {
    let dir = TempDir::new().unwrap();
    let ck = checkpoint(&dir, "slice", SLICE);
    let ck = ck.to_str().unwrap();
    let p = dir.path();
    let elbo = mean_nats(&ok(p, &["eval", "--ckpt", ck, "--dataset", "gaussians", "--metric", "elbo"]));
    let iw = ok(p, &["eval", "--ckpt", ck, "--dataset", "gaussians", "--metric", "iwbo", "--k", "20"]);
    assert!(mean_nats(&iw) < elbo);
    fails(p, &["eval", "--ckpt", ck, "--dataset", "gaussians", "--metric", "nll"], 2);

    let threaded = Command::new(env!("CARGO_BIN_EXE_survae"))
        .current_dir(p)
        .env("SURVAE_THREADS", "3")
        .args(["eval", "--ckpt", ck, "--dataset", "gaussians", "--metric", "iwbo", "--k", "20"])
        .output()
        .unwrap();
    assert!(threaded.status.success());
    assert_eq!(String::from_utf8(threaded.stdout).unwrap(), iw);
}

#[test]
fn sampling_is_seeded() {
    let dir = TempDir::new().unwrap();
    let ck = checkpoint(&dir, "tiny", TINY);
    let ck = ck.to_str().unwrap();
    let p = dir.path();
    let a = ok(p, &["sample", "--ckpt", ck, "--n", "25", "--seed", "9"]);
    let b = ok(p, &["sample", "--ckpt", ck, "--n", "25", "--seed", "9"]);
    let c = ok(p, &["sample", "--ckpt", ck, "--n", "25", "--seed", "10"]);
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.lines().count(), 26);
    fails(p, &["sample", "--ckpt", ck, "--n", "0"], 2);
}

#[test]
fn grid_of_standard_normal_peaks_at_origin() {
    let dir = TempDir::new().unwrap();
    let ck = checkpoint(&dir, "empty", EMPTY);
    let ck = ck.to_str().unwrap();
    let p = dir.path();
    let text = ok(p, &["grid", "--ckpt", ck, "--xmin", "-3", "--xmax", "2", "--ymin", "-1", "--ymax", "4", "--res", "7", "--out", "csv"]);
    let cells = grid_csv(&text);
    assert_eq!(cells.len(), 49);
    let peak = cells.iter().max_by(|a, b| a[2].total_cmp(&b[2])).unwrap();
    let nearest = cells
        .iter()
        .min_by(|a, b| (a[0].hypot(a[1])).total_cmp(&b[0].hypot(b[1])))
        .unwrap();
    assert_eq!(peak, nearest);
    for c in &cells {
        let expected = (-(c[0] * c[0] + c[1] * c[1]) / 2.0).exp() / (2.0 * std::f64::consts::PI);
        assert!((c[2] - expected).abs() < 1e-14);
    }

    let one = grid_csv(&ok(p, &["grid", "--ckpt", ck, "--xmin", "-1", "--xmax", "3", "--ymin", "0", "--ymax", "2", "--res", "1", "--out", "csv"]));
    assert_eq!(one.len(), 1);
    assert_eq!([one[0][0], one[0][1]], [1.0, 1.0]);

    ok(p, &["grid", "--ckpt", ck, "--res", "5", "--out", "g.ppm"]);
    let img = std::fs::read(p.join("g.ppm")).unwrap();
    let header = b"P5\n5 5\n255\n";
    assert_eq!(&img[..header.len()], header);
    let px = &img[header.len()..];
    assert_eq!(px.len(), 25);
    assert_eq!(px[12], 255);
    assert_eq!(px.iter().copied().max(), Some(255));

    let stdout = survae(p, &["grid", "--ckpt", ck, "--res", "5", "--out", "ppm"]).stdout;
    assert_eq!(stdout, img);

    fails(p, &["grid", "--ckpt", ck, "--res", "0", "--out", "csv"], 2);
    fails(p, &["grid", "--ckpt", ck, "--xmin", "1", "--xmax", "1", "--out", "csv"], 2);
    fails(p, &["grid", "--ckpt", ck, "--out", "grid.png"], 2);
}

#[test]
fn grid_of_abs_flow_is_point_symmetric() {
    let dir = TempDir::new().unwrap();
    let ck = checkpoint(&dir, "abs", ABS);
    let p = dir.path();
    let text = ok(p, &["grid", "--ckpt", ck.to_str().unwrap(), "--xmin", "-3", "--xmax", "3", "--ymin", "-2", "--ymax", "2", "--res", "24", "--out", "csv"]);
    let cells = grid_csv(&text);
    let n = cells.len();
    for (i, c) in cells.iter().enumerate() {
        let m = cells[n - 1 - i];
        assert!((c[0] + m[0]).abs() < 1e-12 && (c[1] + m[1]).abs() < 1e-12);
        assert!((c[2] - m[2]).abs() <= 1e-9, "{c:?} vs {m:?}");
    }
}

#[test]
fn catalog_lists_layer_kinds() {
    let dir = TempDir::new().unwrap();
    let text = ok(dir.path(), &["catalog"]);
    for kind in ["abs", "max", "sort", "slice", "rounding", "affine_coupling"] {
        assert!(text.contains(kind), "{kind}");
    }
}
