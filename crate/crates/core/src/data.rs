//! Synthetic datasets.
//!
//! Canonical parameters:
//!
//! | name | definition |
//! |---|---|
//! | `checkerboard` | uniform over the 8 "on" squares (side 2) of a 4×4 lattice on `[-4,4)²`; a square is on when `floor(x/2) + floor(y/2)` is even |
//! | `gaussians` | equal mixture of 8 isotropic Gaussians, σ = 0.2, centred at angles `2πk/8` on a circle of radius 2 |
//! | `circles` | equal mixture of two rings of radii 1 and 2.5, uniform angle, radial noise σ = 0.08 |
//! | `corners` | equal mixture of 4 Gaussians centred at `(±2.5, ±2.5)`, std 0.8 along the tangential direction and 0.15 along the diagonal |
//! | `exchangeable-gaussian-sets` | `D` i.i.d. standard normals per example (default `D = 4`) |
//!
//! The checkerboard flips under reflection of a single axis; the other three
//! are invariant under `(x, y) -> (-x, -y)`.

use std::f64::consts::{PI, SQRT_2};
use std::io::{BufRead, Write};

use crate::ad::special::{log_normal_pdf, LN_2PI};
use crate::ad::Tensor;
use crate::error::{Error, Result};
use crate::flow::log_mean_exp;
use crate::noise::Noise;

pub const NAMES: [&str; 5] = [
    "checkerboard",
    "corners",
    "gaussians",
    "circles",
    "exchangeable-gaussian-sets",
];

/// Set size of the exchangeable toy data.
pub const SET_SIZE: usize = 4;

/// Training-set size used by the synthetic protocol.
pub const TRAIN_SIZE: usize = 128_000;

/// Offset between the training seed and the test-split seed.
const TEST_SEED_OFFSET: u64 = 0x9E37_79B9;

pub const GAUSSIANS_RADIUS: f64 = 2.0;
pub const GAUSSIANS_STD: f64 = 0.2;
pub const GAUSSIANS_COMPONENTS: usize = 8;
pub const CIRCLES_RADII: [f64; 2] = [1.0, 2.5];
pub const CIRCLES_STD: f64 = 0.08;
pub const CORNERS_OFFSET: f64 = 2.5;
pub const CORNERS_MAJOR_STD: f64 = 0.8;
pub const CORNERS_MINOR_STD: f64 = 0.15;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub seed: u64,
    pub samples: Tensor,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.samples.rows()
    }

    pub fn dim(&self) -> usize {
        self.samples.cols()
    }
}

/// Seed of the held-out split paired with training seed `seed`.
pub fn test_seed(seed: u64) -> u64 {
    seed.wrapping_add(TEST_SEED_OFFSET)
}

fn check_name(name: &str) -> Result<()> {
    if NAMES.contains(&name) {
        Ok(())
    } else {
        Err(Error::config(format!(
            "unknown dataset '{name}' (known: {})",
            NAMES.join(", ")
        )))
    }
}

pub fn generate(name: &str, n: usize, seed: u64) -> Result<Dataset> {
    check_name(name)?;
    if n == 0 {
        return Err(Error::config("dataset size must be at least 1"));
    }
    let mut noise = Noise::from_seed(seed);
    let dim = if name == "exchangeable-gaussian-sets" { SET_SIZE } else { 2 };
    let mut data = Vec::with_capacity(n * dim);
    for _ in 0..n {
        match name {
            "checkerboard" => data.extend(checkerboard_point(&mut noise)),
            "gaussians" => data.extend(gaussians_point(&mut noise)),
            "circles" => data.extend(circles_point(&mut noise)),
            "corners" => data.extend(corners_point(&mut noise)),
            _ => data.extend(noise.normals(dim)),
        }
    }
    Ok(Dataset {
        name: name.to_string(),
        seed,
        samples: Tensor::new(vec![n, dim], data)?,
    })
}

/// Training split under `seed` and the test split under [`test_seed`].
pub fn train_test(name: &str, n: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    Ok((generate(name, n, seed)?, generate(name, n, test_seed(seed))?))
}

fn checkerboard_point(noise: &mut Noise) -> [f64; 2] {
    let x = noise.uniform() * 8.0 - 4.0;
    let row = noise.below(2) as f64;
    let parity = (x / 2.0).floor().rem_euclid(2.0);
    // y cell = 2·row + parity - 2 keeps floor(x/2) + floor(y/2) even.
    let y = (2.0 * row + parity - 2.0) * 2.0 + noise.uniform() * 2.0;
    [x, y]
}

fn gaussian_centre(k: usize) -> [f64; 2] {
    let a = 2.0 * PI * k as f64 / GAUSSIANS_COMPONENTS as f64;
    [GAUSSIANS_RADIUS * a.cos(), GAUSSIANS_RADIUS * a.sin()]
}

fn gaussians_point(noise: &mut Noise) -> [f64; 2] {
    let c = gaussian_centre(noise.below(GAUSSIANS_COMPONENTS));
    [
        c[0] + GAUSSIANS_STD * noise.normal(),
        c[1] + GAUSSIANS_STD * noise.normal(),
    ]
}

fn circles_point(noise: &mut Noise) -> [f64; 2] {
    let r = CIRCLES_RADII[noise.below(2)] + CIRCLES_STD * noise.normal();
    let a = 2.0 * PI * noise.uniform();
    [r * a.cos(), r * a.sin()]
}

fn corners_point(noise: &mut Noise) -> [f64; 2] {
    let q = noise.below(4);
    let sx = if q & 1 == 0 { 1.0 } else { -1.0 };
    let sy = if q & 2 == 0 { 1.0 } else { -1.0 };
    let major = CORNERS_MAJOR_STD * noise.normal();
    let minor = CORNERS_MINOR_STD * noise.normal();
    // Diagonal direction (sx, sy)/√2, tangential direction (-sy, sx)/√2.
    [
        sx * CORNERS_OFFSET + (minor * sx - major * sy) / SQRT_2,
        sy * CORNERS_OFFSET + (minor * sy + major * sx) / SQRT_2,
    ]
}

/// True log-density of a dataset where it has a closed form.
pub fn log_density(name: &str, x: &[f64]) -> Result<f64> {
    check_name(name)?;
    match name {
        "gaussians" => {
            let terms: Vec<f64> = (0..GAUSSIANS_COMPONENTS)
                .map(|k| {
                    let c = gaussian_centre(k);
                    log_normal_pdf((x[0] - c[0]) / GAUSSIANS_STD)
                        + log_normal_pdf((x[1] - c[1]) / GAUSSIANS_STD)
                        - 2.0 * GAUSSIANS_STD.ln()
                })
                .collect();
            Ok(log_mean_exp(&terms))
        }
        "checkerboard" => {
            let inside = x.iter().all(|v| (-4.0..4.0).contains(v));
            let on = ((x[0] / 2.0).floor() + (x[1] / 2.0).floor()).rem_euclid(2.0) == 0.0;
            Ok(if inside && on { -(32f64.ln()) } else { f64::NEG_INFINITY })
        }
        "exchangeable-gaussian-sets" => {
            Ok(x.iter().map(|v| -0.5 * v * v).sum::<f64>() - 0.5 * LN_2PI * x.len() as f64)
        }
        _ => Err(Error::Oracle(format!("{name} has no closed-form density"))),
    }
}

/// Monte Carlo estimate of the differential entropy in nats, with its
/// standard error.
pub fn entropy(name: &str, n: usize, seed: u64) -> Result<(f64, f64)> {
    let data = generate(name, n, seed)?;
    let lp: Vec<f64> = (0..n)
        .map(|i| log_density(name, data.samples.row(i)))
        .collect::<Result<_>>()?;
    let mean = -lp.iter().sum::<f64>() / n as f64;
    let var = lp.iter().map(|v| (-v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0).max(1.0);
    Ok((mean, (var / n as f64).sqrt()))
}

/// Formats a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Column header: `x,y` for two columns, `x0,x1,…` otherwise.
pub fn default_header(cols: usize) -> Vec<String> {
    if cols == 2 {
        vec!["x".into(), "y".into()]
    } else {
        (0..cols).map(|j| format!("x{j}")).collect()
    }
}

pub fn write_csv<W: Write>(mut out: W, header: &[String], rows: &Tensor) -> Result<()> {
    if header.len() != rows.cols() {
        return Err(Error::config("csv header does not match column count"));
    }
    writeln!(out, "{}", header.join(","))?;
    for i in 0..rows.rows() {
        let line: Vec<String> = rows.row(i).iter().map(|v| fmt_f64(*v)).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}

/// Reads a headered numeric CSV into an `n × cols` tensor.
pub fn read_csv<R: BufRead>(input: R) -> Result<(Vec<String>, Tensor)> {
    let mut lines = input.lines();
    let header: Vec<String> = match lines.next() {
        Some(h) => h?.split(',').map(|s| s.trim().to_string()).collect(),
        None => return Err(Error::config("empty csv")),
    };
    let mut data = Vec::new();
    let mut n = 0;
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::config(format!("csv line {}: {e}", i + 2)))?;
        if row.len() != header.len() {
            return Err(Error::config(format!("csv line {}: expected {} fields", i + 2, header.len())));
        }
        data.extend(row);
        n += 1;
    }
    if n == 0 {
        return Err(Error::config("csv has no rows"));
    }
    let cols = header.len();
    Ok((header, Tensor::new(vec![n, cols], data)?))
}
