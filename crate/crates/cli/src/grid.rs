use std::io::Write;
use std::path::Path;

use survae::data::fmt_f64;
use survae::{Flow, Noise, Tensor};

const CHUNK: usize = 1 << 14;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Pgm,
}

impl Format {
    pub fn from_out(out: &str) -> Option<Format> {
        match out {
            "csv" => return Some(Format::Csv),
            "ppm" => return Some(Format::Pgm),
            _ => {}
        }
        let ext = Path::new(out).extension()?.to_str()?.to_ascii_lowercase();
        match ext.as_str() {
            "csv" => Some(Format::Csv),
            "ppm" | "pgm" => Some(Format::Pgm),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Bounds {
    xmin: f64,
    xmax: f64,
    ymin: f64,
    ymax: f64,
    res: usize,
}

impl Bounds {
    pub fn new(xmin: f64, xmax: f64, ymin: f64, ymax: f64, res: usize) -> Result<Bounds, String> {
        if res == 0 {
            return Err("--res must be at least 1".into());
        }
        if ![xmin, xmax, ymin, ymax].iter().all(|v| v.is_finite()) {
            return Err("grid bounds must be finite".into());
        }
        if xmin >= xmax || ymin >= ymax {
            return Err("grid bounds need xmin < xmax and ymin < ymax".into());
        }
        Ok(Bounds { xmin, xmax, ymin, ymax, res })
    }

    fn centre(lo: f64, hi: f64, i: usize, res: usize) -> f64 {
        let t = (i as f64 + 0.5) / res as f64;
        lo + t * (hi - lo)
    }

    /// Row-major points: y descending (top row first), x ascending.
    fn points(&self) -> Vec<[f64; 2]> {
        let r = self.res;
        let mut pts = Vec::with_capacity(r * r);
        for row in 0..r {
            let y = Self::centre(self.ymin, self.ymax, r - 1 - row, r);
            for col in 0..r {
                pts.push([Self::centre(self.xmin, self.xmax, col, r), y]);
            }
        }
        pts
    }
}

pub struct DensityGrid {
    pub res: usize,
    pub points: Vec<[f64; 2]>,
    pub density: Vec<f64>,
}

/// Densities `exp(log_prob)` at cell centres. Flows that are not exact use
/// their stochastic estimate with noise seeded at 0.
pub fn evaluate(flow: &Flow, bounds: &Bounds) -> survae::Result<DensityGrid> {
    let points = bounds.points();
    let mut noise = Noise::from_seed(0);
    let mut density = Vec::with_capacity(points.len());
    for chunk in points.chunks(CHUNK) {
        let x = Tensor::new(vec![chunk.len(), 2], chunk.iter().flatten().copied().collect())?;
        density.extend(flow.log_prob(&x, &mut noise)?.values.into_iter().map(f64::exp));
    }
    Ok(DensityGrid {
        res: bounds.res,
        points,
        density,
    })
}

pub fn write_csv<W: Write>(w: &mut W, g: &DensityGrid) -> std::io::Result<()> {
    writeln!(w, "x,y,density")?;
    for (p, d) in g.points.iter().zip(&g.density) {
        writeln!(w, "{},{},{}", fmt_f64(p[0]), fmt_f64(p[1]), fmt_f64(*d))?;
    }
    Ok(())
}

pub fn write_pgm<W: Write>(w: &mut W, g: &DensityGrid) -> std::io::Result<()> {
    write!(w, "P5\n{} {}\n255\n", g.res, g.res)?;
    let max = g.density.iter().copied().filter(|d| d.is_finite()).fold(0.0, f64::max);
    let pixels: Vec<u8> = g
        .density
        .iter()
        .map(|&d| {
            if max > 0.0 && d.is_finite() {
                (255.0 * d / max).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect();
    w.write_all(&pixels)
}
