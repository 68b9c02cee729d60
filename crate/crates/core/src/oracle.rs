//! Brute-force references for likelihood contributions.
//!
//! Oracle flows are a base distribution plus at most one layer. Marginals are
//! computed from the layer's generative model by enumerating discrete latents
//! and integrating continuous ones numerically. Only raw density factors are
//! evaluated (base, classifiers, fill and noise models); no layer
//! contribution code is called.

use crate::ad::special::{log_normal_pdf, logit, HALF_LN_2PI, LN2, LN_2PI};
use crate::ad::{cholesky, Tensor};
use crate::dist::Distribution;
use crate::error::{Error, Result};
use crate::flow::Flow;
use crate::layers::{
    factorial, perm_rank, perm_unrank, Abs, Max, NegModel, Ppca, Relu, Rounding, Side, Slice,
    Sort, StochasticPermutation, Transform, Vae,
};
use crate::noise::Noise;

/// Highest number of continuous latents integrated numerically.
pub const MAX_QUADRATURE_DIM: usize = 2;

/// Largest set size for enumeration over permutations.
pub const MAX_ENUMERATION_DIM: usize = 8;

/// Largest number of sign patterns enumerated for abs layers (as a power
/// of two).
const MAX_SIGN_BITS: usize = 16;

/// Rows per chunk when evaluating quadrature nodes.
const CHUNK: usize = 1 << 16;

/// One-dimensional node layout for unbounded latents; boxes are products.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl Default for Grid {
    fn default() -> Self {
        Grid {
            lo: -10.0,
            hi: 10.0,
            points: 4001,
        }
    }
}

/// Monte Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub value: f64,
    pub std_error: f64,
}

fn oracle_err(msg: impl Into<String>) -> Error {
    Error::Oracle(msg.into())
}

/// Streaming `log(sum(exp(.)))`.
#[derive(Clone, Copy, Debug)]
struct LogSum {
    max: f64,
    sum: f64,
}

impl LogSum {
    fn new() -> Self {
        LogSum {
            max: f64::NEG_INFINITY,
            sum: 0.0,
        }
    }

    fn push(&mut self, v: f64) {
        if v == f64::NEG_INFINITY {
            return;
        }
        if v > self.max {
            self.sum = self.sum * (self.max - v).exp() + 1.0;
            self.max = v;
        } else {
            self.sum += (v - self.max).exp();
        }
    }

    fn value(&self) -> f64 {
        if self.max == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.max + self.sum.ln()
        }
    }
}

fn log_sum_exp(v: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = LogSum::new();
    v.into_iter().for_each(|x| acc.push(x));
    acc.value()
}

fn row(x: &[f64]) -> Tensor {
    Tensor::from_parts(vec![1, x.len()], x.to_vec())
}

fn repeat_row(x: &[f64], n: usize) -> Tensor {
    Tensor::from_parts(vec![n, x.len()], x.repeat(n))
}

fn base_lp(flow: &Flow, t: &Tensor) -> Result<Vec<f64>> {
    flow.base().log_prob_tensor(t, None)
}

fn base_lp1(flow: &Flow, z: &[f64]) -> Result<f64> {
    Ok(base_lp(flow, &row(z))?[0])
}

/// Log-probability of chosen classes per row; uniform when there is no
/// classifier.
fn choice_lp(model: Option<&Distribution>, classes: usize, chosen: &[usize], ctx: &Tensor) -> Result<Vec<f64>> {
    match model {
        None => Ok(vec![-(classes as f64).ln(); chosen.len()]),
        Some(d) => {
            let c = Tensor::from_parts(vec![chosen.len(), 1], chosen.iter().map(|&c| c as f64).collect());
            d.log_prob_tensor(&c, Some(ctx))
        }
    }
}

fn draw_choices(model: Option<&Distribution>, classes: usize, ctx: &Tensor, noise: &mut Noise) -> Result<Vec<usize>> {
    match model {
        None => Ok((0..ctx.rows()).map(|_| noise.below(classes)).collect()),
        Some(d) => Ok(d.sample_tensor(ctx.rows(), Some(ctx), noise)?.data().iter().map(|&v| v as usize).collect()),
    }
}

/// Sign-bit log-probabilities (1 = positive).
fn bits_lp(model: Option<&Distribution>, bits: &Tensor, ctx: &Tensor) -> Result<Vec<f64>> {
    match model {
        None => Ok(vec![-(bits.cols() as f64) * LN2; bits.rows()]),
        Some(d) => d.log_prob_tensor(bits, Some(ctx)),
    }
}

fn neg_lp(model: &NegModel, v: f64) -> f64 {
    match *model {
        NegModel::HalfNormal { scale } => {
            if v > 0.0 {
                f64::NEG_INFINITY
            } else {
                LN2 + log_normal_pdf(v / scale) - scale.ln()
            }
        }
        NegModel::StandardNormal => log_normal_pdf(v),
    }
}

fn draw_neg(model: &NegModel, noise: &mut Noise) -> f64 {
    match *model {
        NegModel::HalfNormal { scale } => -scale * noise.normal().abs(),
        NegModel::StandardNormal => noise.normal(),
    }
}

/// Node positions and log weights of a one-dimensional rule.
fn nodes(lo: f64, hi: f64, points: usize, midpoint: bool) -> Result<Vec<(f64, f64)>> {
    if !(hi > lo) {
        return Err(oracle_err(format!("empty integration range [{lo}, {hi}]")));
    }
    if midpoint {
        if points == 0 {
            return Err(oracle_err("midpoint rule needs at least one cell"));
        }
        let h = (hi - lo) / points as f64;
        Ok((0..points).map(|i| (lo + (i as f64 + 0.5) * h, h.ln())).collect())
    } else {
        if points < 2 {
            return Err(oracle_err("trapezoid rule needs at least two points"));
        }
        let h = (hi - lo) / (points - 1) as f64;
        Ok((0..points)
            .map(|i| {
                let w = if i == 0 || i == points - 1 { h / 2.0 } else { h };
                (lo + i as f64 * h, w.ln())
            })
            .collect())
    }
}

/// `log ∫ exp(f)` over a box. `f` maps `[N, dims]` node rows to log values.
fn integrate(
    ranges: &[(f64, f64)],
    points: usize,
    midpoint: bool,
    mut f: impl FnMut(&Tensor) -> Result<Vec<f64>>,
) -> Result<f64> {
    let dims = ranges.len();
    if dims == 0 || dims > MAX_QUADRATURE_DIM {
        return Err(oracle_err(format!(
            "quadrature over {dims} latent dimensions is not supported (max {MAX_QUADRATURE_DIM})"
        )));
    }
    let axes: Vec<Vec<(f64, f64)>> = ranges
        .iter()
        .map(|&(lo, hi)| nodes(lo, hi, points, midpoint))
        .collect::<Result<_>>()?;
    let total: usize = axes.iter().map(|a| a.len()).product();
    let mut acc = LogSum::new();
    let mut start = 0;
    while start < total {
        let end = (start + CHUNK).min(total);
        let mut pts = Vec::with_capacity((end - start) * dims);
        let mut lw = Vec::with_capacity(end - start);
        for flat in start..end {
            let mut rem = flat;
            let mut w = 0.0;
            for a in axes.iter().rev() {
                let (p, lwi) = a[rem % a.len()];
                rem /= a.len();
                pts.push(p);
                w += lwi;
            }
            let n = pts.len();
            pts[n - dims..].reverse();
            lw.push(w);
        }
        let lv = f(&Tensor::from_parts(vec![end - start, dims], pts))?;
        for (v, w) in lv.into_iter().zip(lw) {
            acc.push(v + w);
        }
        start = end;
    }
    Ok(acc.value())
}

/// Rows of `[n, width]` with each `(position, value)` of `fixed` in place and
/// the columns of `free` filling the remaining positions.
fn interleave(free: &Tensor, fixed: &[(usize, f64)], width: usize) -> Tensor {
    let n = free.rows();
    let mut out = Vec::with_capacity(n * width);
    for i in 0..n {
        let mut it = free.row(i).iter();
        for j in 0..width {
            match fixed.iter().find(|(p, _)| *p == j) {
                Some(&(_, v)) => out.push(v),
                None => out.push(*it.next().expect("free column count")),
            }
        }
    }
    Tensor::from_parts(vec![n, width], out)
}

fn check_point(flow: &Flow, x: &[f64]) -> Result<()> {
    if x.len() != flow.input_dim() {
        return Err(Error::shape("oracle", &[x.len()], &[flow.input_dim()]));
    }
    Ok(())
}

fn single_layer(flow: &Flow) -> Result<Option<&dyn Transform>> {
    match flow.layers() {
        [] => Ok(None),
        [l] => Ok(Some(l.as_ref())),
        _ => Err(oracle_err("oracle flows have at most one layer")),
    }
}

fn all_perms(d: usize) -> Result<Vec<Vec<usize>>> {
    if d > MAX_ENUMERATION_DIM {
        return Err(oracle_err(format!("enumeration over {d}! permutations is too large")));
    }
    Ok((0..factorial(d)).map(|r| perm_unrank(r, d)).collect())
}

/// `log p(x)` for a single-layer flow by exact enumeration of discrete
/// latents and quadrature over continuous ones.
pub fn quadrature_log_marginal(flow: &Flow, x: &[f64], grid: &Grid) -> Result<f64> {
    check_point(flow, x)?;
    let Some(layer) = single_layer(flow)? else {
        return base_lp1(flow, x);
    };
    let any = layer.as_any();
    if let Some(l) = any.downcast_ref::<Abs>() {
        abs_marginal(flow, l, x)
    } else if let Some(l) = any.downcast_ref::<Max>() {
        max_marginal(flow, l, x, grid)
    } else if let Some(l) = any.downcast_ref::<Sort>() {
        sort_marginal(flow, l, x)
    } else if let Some(l) = any.downcast_ref::<Slice>() {
        slice_marginal(flow, l, x, grid)
    } else if let Some(l) = any.downcast_ref::<Rounding>() {
        rounding_marginal(flow, l, x, grid)
    } else if let Some(l) = any.downcast_ref::<Relu>() {
        relu_marginal(flow, l, x, grid)
    } else if any.downcast_ref::<StochasticPermutation>().is_some() {
        let perms = all_perms(x.len())?;
        let lnf = (perms.len() as f64).ln();
        let terms = perms
            .iter()
            .map(|p| Ok(base_lp1(flow, &p.iter().map(|&i| x[i]).collect::<Vec<_>>())? - lnf))
            .collect::<Result<Vec<_>>>()?;
        Ok(log_sum_exp(terms))
    } else if let Some(l) = any.downcast_ref::<Ppca>() {
        let (w, sigma) = (l.weight(), l.sigma());
        let ranges = vec![(grid.lo, grid.hi); w.cols()];
        integrate(&ranges, grid.points, false, |z| {
            let prior = base_lp(flow, z)?;
            Ok((0..z.rows())
                .map(|i| prior[i] + ppca_likelihood(w, sigma, z.row(i), x))
                .collect())
        })
    } else if let Some(l) = any.downcast_ref::<Vae>() {
        let ranges = vec![(grid.lo, grid.hi); l.out_dim()];
        integrate(&ranges, grid.points, false, |z| {
            let prior = base_lp(flow, z)?;
            let lik = l.decoder().log_prob_tensor(&repeat_row(x, z.rows()), Some(z))?;
            Ok(prior.iter().zip(lik).map(|(a, b)| a + b).collect())
        })
    } else {
        Err(oracle_err(format!("no oracle for layer kind {}", layer.kind())))
    }
}

fn ppca_likelihood(w: &Tensor, sigma: f64, z: &[f64], x: &[f64]) -> f64 {
    (0..x.len())
        .map(|i| {
            let mean: f64 = w.row(i).iter().zip(z).map(|(a, b)| a * b).sum();
            log_normal_pdf((x[i] - mean) / sigma) - sigma.ln()
        })
        .sum()
}

fn sign_patterns(abs: &Abs, x: &[f64]) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let elems = abs.elements();
    let m = elems.len();
    if m > MAX_SIGN_BITS {
        return Err(oracle_err(format!("2^{m} sign patterns is too many")));
    }
    let mut out = Vec::new();
    for mask in 0..(1usize << m) {
        let mut z = x.to_vec();
        let mut bits = vec![0.0; m];
        let mut ok = true;
        for (c, &e) in elems.iter().enumerate() {
            let positive = (mask >> c) & 1 == 1;
            bits[c] = positive as u8 as f64;
            if !positive {
                z[e] = -x[e];
                // zero has a single preimage
                ok &= x[e] != 0.0;
            }
        }
        if ok {
            out.push((z, bits));
        }
    }
    Ok(out)
}

fn abs_marginal(flow: &Flow, abs: &Abs, x: &[f64]) -> Result<f64> {
    let elems = abs.elements();
    match abs.side() {
        // x = s * z with z >= 0 drawn from the base and s from the sign model
        Side::Inference => {
            let mut terms = Vec::new();
            for (z, bits) in sign_patterns(abs, x)? {
                if elems.iter().any(|&e| z[e] < 0.0) {
                    continue;
                }
                let zt = row(&z);
                let b = Tensor::from_parts(vec![1, bits.len()], bits);
                terms.push(base_lp(flow, &zt)?[0] + bits_lp(abs.sign_model(), &b, &zt)?[0]);
            }
            Ok(log_sum_exp(terms))
        }
        // x = |z|: sum the base over every preimage
        Side::Generative => {
            if elems.iter().any(|&e| x[e] < 0.0) {
                return Ok(f64::NEG_INFINITY);
            }
            let terms = sign_patterns(abs, x)?
                .into_iter()
                .map(|(z, _)| base_lp1(flow, &z))
                .collect::<Result<Vec<_>>>()?;
            Ok(log_sum_exp(terms))
        }
    }
}

fn fill_lp(fill: &Distribution, rest: &Tensor, m: &Tensor) -> Result<Vec<f64>> {
    fill.log_prob_tensor(rest, fill.is_conditional().then_some(m))
}

fn max_marginal(flow: &Flow, max: &Max, x: &[f64], grid: &Grid) -> Result<f64> {
    let k = max.k();
    match max.side() {
        // the maximum comes from the base, its position from the index model
        // and the other coordinates from the fill model below it
        Side::Inference => {
            let mut terms = Vec::new();
            for i in 0..k {
                let m = x[i];
                if (0..k).any(|j| x[j] > m || (j < i && x[j] == m)) {
                    continue;
                }
                let rest: Vec<f64> = (0..k).filter(|&j| j != i).map(|j| x[j]).collect();
                let mt = row(&[m]);
                terms.push(
                    base_lp(flow, &mt)?[0]
                        + choice_lp(max.index_model(), k, &[i], &mt)?[0]
                        + fill_lp(max.fill_distribution(), &row(&rest), &mt)?[0],
                );
            }
            Ok(log_sum_exp(terms))
        }
        // x = max(z): integrate the base over z_{-i} <= x for each argmax i
        Side::Generative => {
            let ranges = vec![(grid.lo, x[0]); k - 1];
            let terms = (0..k)
                .map(|i| {
                    integrate(&ranges, grid.points, false, |w| {
                        base_lp(flow, &interleave(w, &[(i, x[0])], k))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(log_sum_exp(terms))
        }
    }
}

fn sort_marginal(flow: &Flow, sort: &Sort, x: &[f64]) -> Result<f64> {
    let d = x.len();
    let perms = all_perms(d)?;
    let classes = perms.len();
    match sort.side() {
        // z sorted from the base, positions from the permutation model;
        // ties resolve to ascending source index
        Side::Inference => {
            let mut terms = Vec::new();
            for p in &perms {
                let z: Vec<f64> = p.iter().map(|&i| x[i]).collect();
                let sorted = (1..d).all(|j| z[j - 1] < z[j] || (z[j - 1] == z[j] && p[j - 1] < p[j]));
                if !sorted {
                    continue;
                }
                let zt = row(&z);
                terms.push(base_lp(flow, &zt)?[0] + choice_lp(sort.perm_model(), classes, &[perm_rank(p)], &zt)?[0]);
            }
            Ok(log_sum_exp(terms))
        }
        // x = sort(z): sum the base over every arrangement
        Side::Generative => {
            if x.windows(2).any(|w| w[0] > w[1]) {
                return Ok(f64::NEG_INFINITY);
            }
            let terms = perms
                .iter()
                .map(|p| {
                    let mut z = vec![0.0; d];
                    for (j, &pos) in p.iter().enumerate() {
                        z[pos] = x[j];
                    }
                    base_lp1(flow, &z)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(log_sum_exp(terms))
        }
    }
}

fn aux_lp(slice: &Slice, aux: &Tensor, kept: &Tensor) -> Result<Vec<f64>> {
    let m = slice.aux_model();
    m.log_prob_tensor(aux, m.is_conditional().then_some(kept))
}

fn slice_marginal(flow: &Flow, slice: &Slice, x: &[f64], grid: &Grid) -> Result<f64> {
    let kept = slice.kept();
    match slice.side() {
        Side::Inference => {
            let x1 = row(&x[..kept]);
            Ok(base_lp(flow, &x1)?[0] + aux_lp(slice, &row(&x[kept..]), &x1)?[0])
        }
        Side::Generative => {
            let ranges = vec![(grid.lo, grid.hi); slice.aux()];
            let fixed: Vec<(usize, f64)> = x.iter().copied().enumerate().collect();
            integrate(&ranges, grid.points, false, |e| {
                base_lp(flow, &interleave(e, &fixed, kept + slice.aux()))
            })
        }
    }
}

/// `log q(u | bin)` for in-bin offsets.
fn bin_lp(r: &Rounding, u: &Tensor, bin: &Tensor) -> Result<Vec<f64>> {
    let n = u.rows();
    match r.bin_model() {
        None => Ok((0..n)
            .map(|i| {
                if u.row(i).iter().all(|v| (0.0..1.0).contains(v)) {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect()),
        Some(d) => {
            let e = u.map(logit);
            let lp = d.log_prob_tensor(&e, Some(bin))?;
            Ok((0..n)
                .map(|i| lp[i] - u.row(i).iter().map(|v| (v * (1.0 - v)).ln()).sum::<f64>())
                .collect())
        }
    }
}

fn rounding_marginal(flow: &Flow, r: &Rounding, x: &[f64], grid: &Grid) -> Result<f64> {
    match r.side() {
        // integer bin from the base, in-bin offset from the bin model
        Side::Inference => {
            let z: Vec<f64> = x.iter().map(|v| v.floor()).collect();
            let u: Vec<f64> = x.iter().zip(&z).map(|(a, b)| a - b).collect();
            let zt = row(&z);
            Ok(base_lp(flow, &zt)?[0] + bin_lp(r, &row(&u), &zt)?[0])
        }
        // P(floor(z) = x) = ∫_{[0,1)^d} p(x + u) du
        Side::Generative => {
            if x.iter().any(|v| v.fract() != 0.0) {
                return Err(oracle_err("dequantization oracle needs integer data"));
            }
            let ranges = vec![(0.0, 1.0); x.len()];
            integrate(&ranges, grid.points, true, |u| {
                let shifted = Tensor::from_parts(
                    u.shape().to_vec(),
                    (0..u.rows()).flat_map(|i| u.row(i).iter().zip(x).map(|(a, b)| a + b).collect::<Vec<_>>()).collect(),
                );
                base_lp(flow, &shifted)
            })
        }
    }
}

fn relu_marginal(flow: &Flow, relu: &Relu, x: &[f64], grid: &Grid) -> Result<f64> {
    match relu.side() {
        // non-positive coordinates come from the base's mass at zero and the
        // negative-part model
        Side::Inference => {
            let z: Vec<f64> = x.iter().map(|v| v.max(0.0)).collect();
            let neg: f64 = x.iter().filter(|v| **v <= 0.0).map(|&v| neg_lp(relu.neg_model(), v)).sum();
            Ok(base_lp1(flow, &z)? + neg)
        }
        // zeros in x integrate the base over the negative half-line
        Side::Generative => {
            if x.iter().any(|v| *v < 0.0) {
                return Ok(f64::NEG_INFINITY);
            }
            let fixed: Vec<(usize, f64)> = x.iter().copied().enumerate().filter(|(_, v)| *v != 0.0).collect();
            if fixed.len() == x.len() {
                return base_lp1(flow, x);
            }
            let ranges = vec![(grid.lo, 0.0); x.len() - fixed.len()];
            integrate(&ranges, grid.points, false, |w| base_lp(flow, &interleave(w, &fixed, x.len())))
        }
    }
}

/// Importance-sampling estimate of `log p(x)` with the flow's own inverse
/// as proposal. Deterministic inversions return the exact value with zero
/// standard error.
pub fn mc_log_marginal(flow: &Flow, x: &[f64], k: usize, noise: &mut Noise) -> Result<McEstimate> {
    check_point(flow, x)?;
    if k < 2 {
        return Err(oracle_err("monte carlo oracle needs k >= 2"));
    }
    let exact = |v: f64| McEstimate {
        value: v,
        std_error: 0.0,
    };
    let Some(layer) = single_layer(flow)? else {
        return Ok(exact(base_lp1(flow, x)?));
    };
    if layer.orientation().is_exact() {
        return Ok(exact(quadrature_log_marginal(flow, x, &Grid::default())?));
    }
    let any = layer.as_any();
    let ctx = repeat_row(x, k);
    let d = x.len();
    // log-weights log p(x, latent) - log q(latent | x), one per draw
    let lw: Vec<f64> = if let Some(l) = any.downcast_ref::<Abs>() {
        if l.elements().iter().any(|&e| x[e] < 0.0) {
            return Ok(exact(f64::NEG_INFINITY));
        }
        let m = l.elements().len();
        let bits = match l.sign_model() {
            None => Tensor::from_parts(vec![k, m], (0..k * m).map(|_| (noise.uniform() < 0.5) as u8 as f64).collect()),
            Some(s) => s.sample_tensor(k, Some(&ctx), noise)?,
        };
        let mut z = ctx.clone();
        for i in 0..k {
            for (c, &e) in l.elements().iter().enumerate() {
                z.data_mut()[i * d + e] *= 2.0 * bits.row(i)[c] - 1.0;
            }
        }
        let lq = bits_lp(l.sign_model(), &bits, &ctx)?;
        diff(base_lp(flow, &z)?, lq)
    } else if let Some(l) = any.downcast_ref::<Max>() {
        let kk = l.k();
        let idx = draw_choices(l.index_model(), kk, &ctx, noise)?;
        let fill = l.fill_distribution();
        let fctx = fill.is_conditional().then_some(&ctx);
        let rest = fill.sample_tensor(k, fctx, noise)?;
        let lq: Vec<f64> = choice_lp(l.index_model(), kk, &idx, &ctx)?
            .into_iter()
            .zip(fill.log_prob_tensor(&rest, fctx)?)
            .map(|(a, b)| a + b)
            .collect();
        let mut z = Vec::with_capacity(k * kk);
        for i in 0..k {
            z.extend(interleave(&row(rest.row(i)), &[(idx[i], x[0])], kk).data());
        }
        diff(base_lp(flow, &Tensor::from_parts(vec![k, kk], z))?, lq)
    } else if let Some(l) = any.downcast_ref::<Sort>() {
        if x.windows(2).any(|w| w[0] > w[1]) {
            return Ok(exact(f64::NEG_INFINITY));
        }
        let classes = factorial(d);
        let perms: Vec<Vec<usize>> = match l.perm_model() {
            None => (0..k).map(|_| noise.permutation(d)).collect(),
            Some(_) => draw_choices(l.perm_model(), classes, &ctx, noise)?
                .into_iter()
                .map(|r| perm_unrank(r, d))
                .collect(),
        };
        let ranks: Vec<usize> = perms.iter().map(|p| perm_rank(p)).collect();
        let mut z = vec![0.0; k * d];
        for (i, p) in perms.iter().enumerate() {
            for (j, &pos) in p.iter().enumerate() {
                z[i * d + pos] = x[j];
            }
        }
        let lq = choice_lp(l.perm_model(), classes, &ranks, &ctx)?;
        diff(base_lp(flow, &Tensor::from_parts(vec![k, d], z))?, lq)
    } else if let Some(l) = any.downcast_ref::<Slice>() {
        let m = l.aux_model();
        let mctx = m.is_conditional().then_some(&ctx);
        let e = m.sample_tensor(k, mctx, noise)?;
        let lq = m.log_prob_tensor(&e, mctx)?;
        diff(base_lp(flow, &Tensor::hcat(&[&ctx, &e])?)?, lq)
    } else if let Some(l) = any.downcast_ref::<Rounding>() {
        if x.iter().any(|v| v.fract() != 0.0) {
            return Ok(exact(f64::NEG_INFINITY));
        }
        let u = match l.bin_model() {
            None => Tensor::from_parts(vec![k, d], noise.uniforms(k * d)),
            Some(m) => m.sample_tensor(k, Some(&ctx), noise)?.map(|e| 1.0 / (1.0 + (-e).exp())),
        };
        let lq = bin_lp(l, &u, &ctx)?;
        diff(base_lp(flow, &ctx.zip_map(&u, |a, b| a + b)?)?, lq)
    } else if let Some(l) = any.downcast_ref::<Relu>() {
        if x.iter().any(|v| *v < 0.0) {
            return Ok(exact(f64::NEG_INFINITY));
        }
        let mut z = ctx.clone();
        let mut lq = vec![0.0; k];
        for i in 0..k {
            for j in 0..d {
                if x[j] == 0.0 {
                    let w = draw_neg(l.neg_model(), noise);
                    z.data_mut()[i * d + j] = w;
                    lq[i] += neg_lp(l.neg_model(), w);
                }
            }
        }
        diff(base_lp(flow, &z)?, lq)
    } else if any.downcast_ref::<StochasticPermutation>().is_some() {
        let mut z = Vec::with_capacity(k * d);
        for _ in 0..k {
            z.extend(noise.permutation(d).into_iter().map(|i| x[i]));
        }
        base_lp(flow, &Tensor::from_parts(vec![k, d], z))?
    } else if let Some(l) = any.downcast_ref::<Ppca>() {
        let (mean, cov) = l.posterior(&row(x))?;
        let lat = cov.rows();
        let chol = cholesky(&cov).ok_or_else(|| oracle_err("posterior covariance is not positive definite"))?;
        let mut z = Vec::with_capacity(k * lat);
        let mut lq = Vec::with_capacity(k);
        for _ in 0..k {
            let eps = noise.normals(lat);
            for a in 0..lat {
                z.push(mean.row(0)[a] + (0..=a).map(|b| chol[a * lat + b] * eps[b]).sum::<f64>());
            }
            let logdet: f64 = (0..lat).map(|a| chol[a * lat + a].ln()).sum();
            lq.push(eps.iter().map(|e| log_normal_pdf(*e)).sum::<f64>() - logdet);
        }
        let zt = Tensor::from_parts(vec![k, lat], z);
        let prior = base_lp(flow, &zt)?;
        let joint = (0..k)
            .map(|i| prior[i] + ppca_likelihood(l.weight(), l.sigma(), zt.row(i), x))
            .collect();
        diff(joint, lq)
    } else if let Some(l) = any.downcast_ref::<Vae>() {
        let z = l.encoder().sample_tensor(k, Some(&ctx), noise)?;
        let lq = l.encoder().log_prob_tensor(&z, Some(&ctx))?;
        let lik = l.decoder().log_prob_tensor(&ctx, Some(&z))?;
        let prior = base_lp(flow, &z)?;
        diff(prior.iter().zip(lik).map(|(a, b)| a + b).collect(), lq)
    } else {
        return Err(oracle_err(format!("no oracle for layer kind {}", layer.kind())));
    };
    Ok(estimate(&lw))
}

fn diff(a: Vec<f64>, b: Vec<f64>) -> Vec<f64> {
    a.into_iter().zip(b).map(|(a, b)| a - b).collect()
}

/// `log mean exp(lw)` with a delta-method standard error.
fn estimate(lw: &[f64]) -> McEstimate {
    let k = lw.len() as f64;
    let m = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return McEstimate {
            value: m,
            std_error: 0.0,
        };
    }
    let w: Vec<f64> = lw.iter().map(|v| (v - m).exp()).collect();
    let mean = w.iter().sum::<f64>() / k;
    let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
    McEstimate {
        value: m + mean.ln(),
        std_error: (var / k).sqrt() / mean,
    }
}

/// One point of the small-noise sequence for `x | z ~ N(a z + b, sigma²)`
/// with `z ~ N(0, 1)` and the exact posterior as encoder.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeltaPoint {
    pub sigma: f64,
    /// Analytic ELBO.
    pub elbo: f64,
    /// Change-of-variables value `log N((x - b)/a) - log|a|`.
    pub cov_value: f64,
    /// `|elbo - cov_value|`.
    pub gap: f64,
    /// `log p_sigma(x) - elbo`, zero up to rounding for the exact posterior.
    pub bound_gap: f64,
}

pub fn delta_limit_sequence(slope: f64, intercept: f64, x: f64, sigmas: &[f64]) -> Result<Vec<DeltaPoint>> {
    if slope == 0.0 || !slope.is_finite() {
        return Err(oracle_err("affine map needs a nonzero slope"));
    }
    let a2 = slope * slope;
    let r = x - intercept;
    let cov_value = log_normal_pdf(r / slope) - slope.abs().ln();
    sigmas
        .iter()
        .map(|&sigma| {
            if !(sigma > 0.0) {
                return Err(oracle_err("sigma must be positive"));
            }
            let s2 = sigma * sigma;
            let t = a2 + s2;
            // posterior N(m, v)
            let m = slope * r / t;
            let v = s2 / t;
            // E_q log p(x|z): residual x - b - a m = r s2 / t
            let resid = r * s2 / t;
            let e_lik = -0.5 * LN_2PI - sigma.ln() - (resid * resid + a2 * v) / (2.0 * s2);
            let e_prior = -HALF_LN_2PI - 0.5 * (m * m + v);
            let entropy = HALF_LN_2PI + 0.5 * v.ln() + 0.5;
            let elbo = e_lik + e_prior + entropy;
            let marginal = -HALF_LN_2PI - 0.5 * t.ln() - r * r / (2.0 * t);
            Ok(DeltaPoint {
                sigma,
                elbo,
                cov_value,
                gap: (elbo - cov_value).abs(),
                bound_gap: marginal - elbo,
            })
        })
        .collect()
}

/// `sum_i log N(x_i; 0, 1)`.
pub fn iid_normal_log_density(x: &[f64]) -> f64 {
    x.iter().map(|v| log_normal_pdf(*v)).sum()
}

/// `log N(x; 0, cov)` via a Cholesky factor.
pub fn gaussian_log_density(x: &[f64], cov: &Tensor) -> Result<f64> {
    let d = x.len();
    if cov.shape() != [d, d] {
        return Err(Error::shape("gaussian_log_density", cov.shape(), &[d, d]));
    }
    let l = cholesky(cov).ok_or_else(|| oracle_err("covariance is not positive definite"))?;
    // forward substitution L y = x
    let mut y = vec![0.0; d];
    for i in 0..d {
        let s: f64 = (0..i).map(|j| l[i * d + j] * y[j]).sum();
        y[i] = (x[i] - s) / l[i * d + i];
    }
    let logdet: f64 = (0..d).map(|i| l[i * d + i].ln()).sum();
    Ok(-0.5 * y.iter().map(|v| v * v).sum::<f64>() - logdet - d as f64 * HALF_LN_2PI)
}

/// Analytic PPCA marginal `log N(x; 0, W Wᵀ + sigma² I)`.
pub fn ppca_log_marginal(w: &Tensor, sigma: f64, x: &[f64]) -> Result<f64> {
    let d = w.rows();
    let mut cov = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            cov[i * d + j] = w.row(i).iter().zip(w.row(j)).map(|(a, b)| a * b).sum::<f64>()
                + if i == j { sigma * sigma } else { 0.0 };
        }
    }
    gaussian_log_density(x, &Tensor::from_parts(vec![d, d], cov))
}
