//! Base and conditional distributions.
//!
//! Every family evaluates per-example log-densities (log-masses for discrete
//! families) on `[n, dim]` values and draws samples from a caller-supplied
//! [`Noise`]. Continuous families sample by reparameterization so gradients
//! flow from the returned log-probability into the family's parameters and
//! context; discrete draws are detached.

use serde::{Deserialize, Serialize};

use crate::ad::special::{self, HALF_LN_2PI, LN2};
use crate::ad::{Parameter, Parameterized, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::noise::Noise;

/// Clamp margin for inverse-CDF sampling of truncated normals.
pub const TRUNCATION_MARGIN: f64 = 1e-12;

fn default_scale() -> f64 {
    1.0
}

/// Declarative description of a distribution family; dimensions are supplied
/// by the surrounding layer or flow.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum DistSpec {
    StandardNormal,
    DiagonalNormal,
    Uniform {
        low: Vec<f64>,
        high: Vec<f64>,
    },
    HalfNormal {
        #[serde(default = "default_scale")]
        scale: f64,
    },
    /// Mirror image of the half-normal, supported on `(-inf, 0]`.
    NegativeHalfNormal {
        #[serde(default = "default_scale")]
        scale: f64,
    },
    Bernoulli,
    Categorical {
        classes: usize,
    },
    ConditionalDiagonalNormal {
        #[serde(default)]
        hidden: Vec<usize>,
    },
    ConditionalBernoulli {
        #[serde(default)]
        hidden: Vec<usize>,
    },
    ConditionalCategorical {
        classes: usize,
        #[serde(default)]
        hidden: Vec<usize>,
    },
    /// Standard normal truncated to `(-inf, bound)`; the bound is the context.
    TruncatedNormalBelow,
    /// `bound - scale * |eps|`; the bound is the context.
    HalfNormalBelow {
        #[serde(default = "default_scale")]
        scale: f64,
    },
    /// I.i.d. standard normals conditioned to be in ascending order.
    OrderedNormal,
    /// Each coordinate distributed as the maximum of `k` standard normals.
    MaxNormal {
        k: usize,
    },
    /// `max(eps, 0)`: mass 1/2 at zero, standard normal density above.
    RectifiedNormal,
}

#[derive(Clone, Debug)]
pub enum Family {
    StandardNormal,
    DiagonalNormal { mean: Parameter, log_std: Parameter },
    Uniform { low: Vec<f64>, high: Vec<f64> },
    HalfNormal { scale: f64 },
    NegativeHalfNormal { scale: f64 },
    Bernoulli { logits: Parameter },
    Categorical { logits: Parameter },
    ConditionalDiagonalNormal { net: Mlp },
    ConditionalBernoulli { net: Mlp },
    ConditionalCategorical { net: Mlp },
    TruncatedNormalBelow,
    HalfNormalBelow { scale: f64 },
    OrderedNormal,
    MaxNormal { k: usize },
    RectifiedNormal,
}

/// A distribution over `[n, dim]` values (class indices are stored as one
/// column of integral floats).
#[derive(Clone, Debug)]
pub struct Distribution {
    family: Family,
    dim: usize,
}

fn neg_inf_mask(n: usize, bad: impl Fn(usize) -> bool) -> Tensor {
    Tensor::vector(
        (0..n)
            .map(|i| if bad(i) { f64::NEG_INFINITY } else { 0.0 })
            .collect(),
    )
}

impl Distribution {
    pub fn new(family: Family, dim: usize) -> Self {
        Distribution { family, dim }
    }

    pub fn standard_normal(dim: usize) -> Self {
        Self::new(Family::StandardNormal, dim)
    }

    pub fn uniform(low: Vec<f64>, high: Vec<f64>) -> Result<Self> {
        if low.len() != high.len() || low.iter().zip(&high).any(|(l, h)| !(l < h)) {
            return Err(Error::config("uniform bounds must satisfy low < high per dim"));
        }
        let dim = low.len();
        Ok(Self::new(Family::Uniform { low, high }, dim))
    }

    pub fn half_normal(dim: usize, scale: f64) -> Self {
        Self::new(Family::HalfNormal { scale }, dim)
    }

    pub fn categorical_uniform(prefix: &str, classes: usize) -> Self {
        Self::new(
            Family::Categorical {
                logits: Parameter::new(format!("{prefix}.logits"), Tensor::zeros(&[classes])),
            },
            1,
        )
    }

    /// Builds a family from its declarative form. `context_dim` is required
    /// for conditional families.
    pub fn build(
        spec: &DistSpec,
        dim: usize,
        context_dim: Option<usize>,
        prefix: &str,
        noise: &mut Noise,
    ) -> Result<Self> {
        let ctx = |name: &str| {
            context_dim.ok_or_else(|| {
                Error::config(format!("{prefix}: {name} needs a context dimension"))
            })
        };
        let family = match spec {
            DistSpec::StandardNormal => Family::StandardNormal,
            DistSpec::DiagonalNormal => Family::DiagonalNormal {
                mean: Parameter::new(format!("{prefix}.mean"), Tensor::zeros(&[dim])),
                log_std: Parameter::new(format!("{prefix}.log_std"), Tensor::zeros(&[dim])),
            },
            DistSpec::Uniform { low, high } => {
                if low.len() != dim || high.len() != dim {
                    return Err(Error::config(format!(
                        "{prefix}: uniform bounds must have {dim} entries"
                    )));
                }
                return Self::uniform(low.clone(), high.clone());
            }
            DistSpec::HalfNormal { scale } => Family::HalfNormal { scale: *scale },
            DistSpec::NegativeHalfNormal { scale } => Family::NegativeHalfNormal { scale: *scale },
            DistSpec::Bernoulli => Family::Bernoulli {
                logits: Parameter::new(format!("{prefix}.logits"), Tensor::zeros(&[dim])),
            },
            DistSpec::Categorical { classes } => {
                if dim != 1 {
                    return Err(Error::config(format!("{prefix}: categorical has event size 1")));
                }
                Family::Categorical {
                    logits: Parameter::new(format!("{prefix}.logits"), Tensor::zeros(&[*classes])),
                }
            }
            DistSpec::ConditionalDiagonalNormal { hidden } => {
                let sizes = [&[ctx("conditional_diagonal_normal")?][..], hidden, &[2 * dim]].concat();
                Family::ConditionalDiagonalNormal {
                    net: Mlp::new(&format!("{prefix}.net"), &sizes, false, noise)?,
                }
            }
            DistSpec::ConditionalBernoulli { hidden } => {
                let sizes = [&[ctx("conditional_bernoulli")?][..], hidden, &[dim]].concat();
                Family::ConditionalBernoulli {
                    net: Mlp::new(&format!("{prefix}.net"), &sizes, false, noise)?,
                }
            }
            DistSpec::ConditionalCategorical { classes, hidden } => {
                if dim != 1 {
                    return Err(Error::config(format!("{prefix}: categorical has event size 1")));
                }
                let sizes = [&[ctx("conditional_categorical")?][..], hidden, &[*classes]].concat();
                Family::ConditionalCategorical {
                    net: Mlp::new(&format!("{prefix}.net"), &sizes, false, noise)?,
                }
            }
            DistSpec::TruncatedNormalBelow => Family::TruncatedNormalBelow,
            DistSpec::HalfNormalBelow { scale } => Family::HalfNormalBelow { scale: *scale },
            DistSpec::OrderedNormal => Family::OrderedNormal,
            DistSpec::MaxNormal { k } => Family::MaxNormal { k: *k },
            DistSpec::RectifiedNormal => Family::RectifiedNormal,
        };
        Ok(Self::new(family, dim))
    }

    pub fn spec(&self) -> DistSpec {
        match &self.family {
            Family::StandardNormal => DistSpec::StandardNormal,
            Family::DiagonalNormal { .. } => DistSpec::DiagonalNormal,
            Family::Uniform { low, high } => DistSpec::Uniform {
                low: low.clone(),
                high: high.clone(),
            },
            Family::HalfNormal { scale } => DistSpec::HalfNormal { scale: *scale },
            Family::NegativeHalfNormal { scale } => DistSpec::NegativeHalfNormal { scale: *scale },
            Family::Bernoulli { .. } => DistSpec::Bernoulli,
            Family::Categorical { logits } => DistSpec::Categorical {
                classes: logits.numel(),
            },
            Family::ConditionalDiagonalNormal { net } => DistSpec::ConditionalDiagonalNormal {
                hidden: net.hidden().to_vec(),
            },
            Family::ConditionalBernoulli { net } => DistSpec::ConditionalBernoulli {
                hidden: net.hidden().to_vec(),
            },
            Family::ConditionalCategorical { net } => DistSpec::ConditionalCategorical {
                classes: net.output_dim(),
                hidden: net.hidden().to_vec(),
            },
            Family::TruncatedNormalBelow => DistSpec::TruncatedNormalBelow,
            Family::HalfNormalBelow { scale } => DistSpec::HalfNormalBelow { scale: *scale },
            Family::OrderedNormal => DistSpec::OrderedNormal,
            Family::MaxNormal { k } => DistSpec::MaxNormal { k: *k },
            Family::RectifiedNormal => DistSpec::RectifiedNormal,
        }
    }

    pub fn family(&self) -> &Family {
        &self.family
    }

    pub fn family_mut(&mut self) -> &mut Family {
        &mut self.family
    }

    pub fn name(&self) -> &'static str {
        match &self.family {
            Family::StandardNormal => "standard_normal",
            Family::DiagonalNormal { .. } => "diagonal_normal",
            Family::Uniform { .. } => "uniform",
            Family::HalfNormal { .. } => "half_normal",
            Family::NegativeHalfNormal { .. } => "negative_half_normal",
            Family::Bernoulli { .. } => "bernoulli",
            Family::Categorical { .. } => "categorical",
            Family::ConditionalDiagonalNormal { .. } => "conditional_diagonal_normal",
            Family::ConditionalBernoulli { .. } => "conditional_bernoulli",
            Family::ConditionalCategorical { .. } => "conditional_categorical",
            Family::TruncatedNormalBelow => "truncated_normal_below",
            Family::HalfNormalBelow { .. } => "half_normal_below",
            Family::OrderedNormal => "ordered_normal",
            Family::MaxNormal { .. } => "max_normal",
            Family::RectifiedNormal => "rectified_normal",
        }
    }

    /// Event size (columns of a value tensor).
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Whether `log_prob` and `sample` need a context tensor.
    pub fn is_conditional(&self) -> bool {
        matches!(
            self.family,
            Family::ConditionalDiagonalNormal { .. }
                | Family::ConditionalBernoulli { .. }
                | Family::ConditionalCategorical { .. }
                | Family::TruncatedNormalBelow
                | Family::HalfNormalBelow { .. }
        )
    }

    pub fn is_discrete(&self) -> bool {
        matches!(
            self.family,
            Family::Bernoulli { .. }
                | Family::Categorical { .. }
                | Family::ConditionalBernoulli { .. }
                | Family::ConditionalCategorical { .. }
        )
    }

    fn context<'t>(&self, context: Option<Var<'t>>) -> Result<Var<'t>> {
        context.ok_or(Error::MissingContext(self.name()))
    }

    /// Per-row bound broadcast to `[n, dim]`.
    fn bound<'t>(&self, context: Option<Var<'t>>, n: usize) -> Result<Var<'t>> {
        let b = self.context(context)?;
        let shape = b.shape();
        if shape.len() == 2 && shape[0] == n && shape[1] == self.dim {
            return Ok(b);
        }
        if b.value().numel() == n {
            return b.reshape(&[n, 1])?.broadcast_to(&[n, self.dim]);
        }
        Err(Error::shape("bound", &shape, &[n, self.dim]))
    }

    fn check_value(&self, value: &Tensor) -> Result<usize> {
        if value.rank() != 2 || value.cols() != self.dim {
            return Err(Error::shape(self.name(), value.shape(), &[value.rows(), self.dim]));
        }
        Ok(value.rows())
    }

    fn class_indices(&self, value: &Tensor, classes: usize) -> Result<Vec<usize>> {
        value
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && (v as usize) < classes {
                    Ok(v as usize)
                } else {
                    Err(Error::domain(self.name(), format!("class index {v}")))
                }
            })
            .collect()
    }

    /// Per-example log density (or log mass) of `value`.
    pub fn log_prob<'t>(&self, value: Var<'t>, context: Option<Var<'t>>) -> Result<Var<'t>> {
        let tape = value.tape();
        let v = value.value();
        let n = self.check_value(&v)?;
        let d = self.dim as f64;
        let normal_sum = |x: Var<'t>| -> Result<Var<'t>> {
            Ok(x.square().sum_axis(1)?.mul_scalar(-0.5).add_scalar(-d * HALF_LN_2PI))
        };
        match &self.family {
            Family::StandardNormal => normal_sum(value),
            Family::DiagonalNormal { mean, log_std } => {
                let mu = tape.param(mean).expand_rows(n)?;
                let ls = tape.param(log_std).expand_rows(n)?;
                let eps = value.sub(mu)?.mul(ls.neg().exp())?;
                normal_sum(eps)?.sub(ls.sum_axis(1)?)
            }
            Family::ConditionalDiagonalNormal { net } => {
                let params = net.forward(self.context(context)?)?;
                let parts = params.split(1, &[self.dim, self.dim])?;
                let eps = value.sub(parts[0])?.mul(parts[1].neg().exp())?;
                normal_sum(eps)?.sub(parts[1].sum_axis(1)?)
            }
            Family::Uniform { low, high } => {
                let log_vol: f64 = low.iter().zip(high).map(|(l, h)| (h - l).ln()).sum();
                let lp = (0..n)
                    .map(|i| {
                        let row = v.row(i);
                        let inside = row
                            .iter()
                            .zip(low.iter().zip(high))
                            .all(|(x, (l, h))| x >= l && x < h);
                        if inside {
                            -log_vol
                        } else {
                            f64::NEG_INFINITY
                        }
                    })
                    .collect();
                Ok(tape.constant(Tensor::vector(lp)))
            }
            Family::HalfNormal { scale } | Family::NegativeHalfNormal { scale } => {
                let negative = matches!(self.family, Family::NegativeHalfNormal { .. });
                let mag = if negative { value.neg() } else { value };
                let mask = {
                    let m = mag.value();
                    neg_inf_mask(n, |i| m.row(i).iter().any(|&x| x < 0.0))
                };
                let lp = normal_sum(mag.mul_scalar(1.0 / scale))?
                    .add_scalar(d * (LN2 - scale.ln()));
                lp.add(tape.constant(mask))
            }
            Family::HalfNormalBelow { scale } => {
                let b = self.bound(context, n)?;
                let gap = b.sub(value)?;
                let mask = {
                    let g = gap.value();
                    neg_inf_mask(n, |i| g.row(i).iter().any(|&x| x <= 0.0))
                };
                let lp = normal_sum(gap.mul_scalar(1.0 / scale))?
                    .add_scalar(d * (LN2 - scale.ln()));
                lp.add(tape.constant(mask))
            }
            Family::TruncatedNormalBelow => {
                let b = self.bound(context, n)?;
                let mask = {
                    let bv = b.value();
                    neg_inf_mask(n, |i| v.row(i).iter().zip(bv.row(i)).any(|(x, b)| x >= b))
                };
                let lp = normal_sum(value)?.sub(b.log_ndtr().sum_axis(1)?)?;
                lp.add(tape.constant(mask))
            }
            Family::Bernoulli { logits } => {
                let l = tape.param(logits).expand_rows(n)?;
                self.bernoulli_log_prob(l, &v)
            }
            Family::ConditionalBernoulli { net } => {
                let l = net.forward(self.context(context)?)?;
                self.bernoulli_log_prob(l, &v)
            }
            Family::Categorical { logits } => {
                let idx = self.class_indices(&v, logits.numel())?;
                let l = tape.param(logits).expand_rows(n)?;
                l.log_softmax(1)?.gather(1, &idx, 1)?.reshape(&[n])
            }
            Family::ConditionalCategorical { net } => {
                let idx = self.class_indices(&v, net.output_dim())?;
                let l = net.forward(self.context(context)?)?;
                l.log_softmax(1)?.gather(1, &idx, 1)?.reshape(&[n])
            }
            Family::OrderedNormal => {
                let mask = neg_inf_mask(n, |i| v.row(i).windows(2).any(|w| w[0] > w[1]));
                normal_sum(value)?
                    .add_scalar(special::ln_factorial(self.dim))
                    .add(tape.constant(mask))
            }
            Family::MaxNormal { k } => {
                let k = *k as f64;
                let cdf = value.log_ndtr().sum_axis(1)?.mul_scalar(k - 1.0);
                normal_sum(value)?.add_scalar(d * k.ln()).add(cdf)
            }
            Family::RectifiedNormal => {
                // Positive coordinates carry the normal density, zeros carry
                // mass 1/2, negatives are impossible.
                let pos: Vec<f64> = v.data().iter().map(|&x| (x > 0.0) as u8 as f64).collect();
                let pos_t = tape.constant(Tensor::from_parts(v.shape().to_vec(), pos));
                let dens = value
                    .square()
                    .mul_scalar(-0.5)
                    .add_scalar(-HALF_LN_2PI)
                    .mul(pos_t)?
                    .sum_axis(1)?;
                let consts: Vec<f64> = (0..n)
                    .map(|i| {
                        let row = v.row(i);
                        if row.iter().any(|&x| x < 0.0) {
                            f64::NEG_INFINITY
                        } else {
                            -LN2 * row.iter().filter(|&&x| x == 0.0).count() as f64
                        }
                    })
                    .collect();
                dens.add(tape.constant(Tensor::vector(consts)))
            }
        }
    }

    fn bernoulli_log_prob<'t>(&self, logits: Var<'t>, v: &Tensor) -> Result<Var<'t>> {
        let tape = logits.tape();
        if let Some(bad) = v.data().iter().find(|&&x| x != 0.0 && x != 1.0) {
            return Err(Error::domain(self.name(), format!("value {bad} not in {{0, 1}}")));
        }
        let ones = tape.constant(v.clone());
        let zeros = tape.constant(v.map(|x| 1.0 - x));
        let pos = logits.log_sigmoid().mul(ones)?;
        let neg = logits.neg().log_sigmoid().mul(zeros)?;
        pos.add(neg)?.sum_axis(1)
    }

    /// Draws `n` samples and their log-probability from the same draw.
    pub fn sample_with_log_prob<'t>(
        &self,
        tape: &'t Tape,
        n: usize,
        context: Option<Var<'t>>,
        noise: &mut Noise,
    ) -> Result<(Var<'t>, Var<'t>)> {
        if let Some(c) = context {
            if c.value().rows() != n {
                return Err(Error::shape(self.name(), &c.shape(), &[n]));
            }
        }
        let d = self.dim;
        let shape = [n, d];
        let normals = |noise: &mut Noise| Tensor::from_parts(shape.to_vec(), noise.normals(n * d));
        let x = match &self.family {
            Family::StandardNormal => tape.constant(normals(noise)),
            Family::DiagonalNormal { mean, log_std } => {
                let eps = tape.constant(normals(noise));
                let mu = tape.param(mean).expand_rows(n)?;
                let sd = tape.param(log_std).exp().expand_rows(n)?;
                mu.add(sd.mul(eps)?)?
            }
            Family::ConditionalDiagonalNormal { net } => {
                let params = net.forward(self.context(context)?)?;
                let parts = params.split(1, &[d, d])?;
                let eps = tape.constant(normals(noise));
                parts[0].add(parts[1].exp().mul(eps)?)?
            }
            Family::Uniform { low, high } => {
                let mut data = Vec::with_capacity(n * d);
                for _ in 0..n {
                    for (l, h) in low.iter().zip(high) {
                        data.push(l + (h - l) * noise.uniform());
                    }
                }
                tape.constant(Tensor::from_parts(shape.to_vec(), data))
            }
            Family::HalfNormal { scale } => {
                tape.constant(normals(noise).map(|e| scale * e.abs()))
            }
            Family::NegativeHalfNormal { scale } => {
                tape.constant(normals(noise).map(|e| -scale * e.abs()))
            }
            Family::HalfNormalBelow { scale } => {
                let b = self.bound(context, n)?;
                let h = tape.constant(normals(noise).map(|e| scale * e.abs()));
                b.sub(h)?
            }
            Family::TruncatedNormalBelow => {
                let b = self.bound(context, n)?;
                let bv = b.value();
                let mut out = Vec::with_capacity(n * d);
                let mut local = Vec::with_capacity(n * d);
                for &bi in bv.data() {
                    let (x, dxdb) = truncated_normal_below(bi, noise.uniform());
                    out.push(x);
                    local.push(dxdb);
                }
                b.elementwise_custom(out, local)
            }
            Family::Bernoulli { logits } => {
                let l = logits.value.data().to_vec();
                let data = (0..n * d)
                    .map(|i| bernoulli_draw(l[i % d], noise))
                    .collect();
                tape.constant(Tensor::from_parts(shape.to_vec(), data))
            }
            Family::ConditionalBernoulli { net } => {
                let l = net.forward(self.context(context)?)?.value();
                let data = l.data().iter().map(|&li| bernoulli_draw(li, noise)).collect();
                tape.constant(Tensor::from_parts(shape.to_vec(), data))
            }
            Family::Categorical { logits } => {
                let l = logits.value.data().to_vec();
                let data = (0..n).map(|_| noise.categorical(&l) as f64).collect();
                tape.constant(Tensor::from_parts(vec![n, 1], data))
            }
            Family::ConditionalCategorical { net } => {
                let l = net.forward(self.context(context)?)?.value();
                let data = (0..n).map(|i| noise.categorical(l.row(i)) as f64).collect();
                tape.constant(Tensor::from_parts(vec![n, 1], data))
            }
            Family::OrderedNormal => {
                let mut t = normals(noise);
                for row in t.data_mut().chunks_mut(d.max(1)) {
                    row.sort_by(f64::total_cmp);
                }
                tape.constant(t)
            }
            Family::MaxNormal { k } => {
                let data = (0..n * d)
                    .map(|_| {
                        (0..*k)
                            .map(|_| noise.normal())
                            .fold(f64::NEG_INFINITY, f64::max)
                    })
                    .collect();
                tape.constant(Tensor::from_parts(shape.to_vec(), data))
            }
            Family::RectifiedNormal => tape.constant(normals(noise).map(|e| e.max(0.0))),
        };
        let lp = self.log_prob(x, context)?;
        Ok((x, lp))
    }

    pub fn sample<'t>(
        &self,
        tape: &'t Tape,
        n: usize,
        context: Option<Var<'t>>,
        noise: &mut Noise,
    ) -> Result<Var<'t>> {
        Ok(self.sample_with_log_prob(tape, n, context, noise)?.0)
    }

    /// Tensor-level sampling on a scratch tape.
    pub fn sample_tensor(
        &self,
        n: usize,
        context: Option<&Tensor>,
        noise: &mut Noise,
    ) -> Result<Tensor> {
        let tape = Tape::new();
        let ctx = context.map(|c| tape.constant(c.clone()));
        Ok((*self.sample(&tape, n, ctx, noise)?.value()).clone())
    }

    /// Tensor-level log-probability on a scratch tape.
    pub fn log_prob_tensor(&self, value: &Tensor, context: Option<&Tensor>) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let ctx = context.map(|c| tape.constant(c.clone()));
        Ok(self
            .log_prob(tape.constant(value.clone()), ctx)?
            .value()
            .data()
            .to_vec())
    }
}

fn bernoulli_draw(logit: f64, noise: &mut Noise) -> f64 {
    if noise.uniform() < special::sigmoid(logit) {
        1.0
    } else {
        0.0
    }
}

/// Inverse-CDF draw from N(0,1) truncated to `(-inf, bound)` and the pathwise
/// derivative `dx/dbound` at fixed uniform input.
pub fn truncated_normal_below(bound: f64, u: f64) -> (f64, f64) {
    let log_mass = special::log_ndtr(bound);
    let mass = log_mass.exp();
    if mass > 4.0 * TRUNCATION_MARGIN {
        let p = (u * mass).clamp(TRUNCATION_MARGIN, mass - TRUNCATION_MARGIN);
        let x = special::ndtri(p);
        // x = ndtri(u * Phi(b))  =>  dx/db = u * phi(b) / phi(x)
        let dxdb = if p == u * mass {
            (u.ln() + special::log_normal_pdf(bound) - special::log_normal_pdf(x)).exp()
        } else {
            0.0
        };
        (x, dxdb)
    } else {
        // Far tail: the truncated normal approaches bound - Exp(|bound|).
        let rate = -bound;
        let e = -(1.0 - u).ln();
        (bound - e / rate, 1.0 - e / (rate * rate))
    }
}

impl Parameterized for Distribution {
    fn parameters(&self) -> Vec<&Parameter> {
        match &self.family {
            Family::DiagonalNormal { mean, log_std } => vec![mean, log_std],
            Family::Bernoulli { logits } | Family::Categorical { logits } => vec![logits],
            Family::ConditionalDiagonalNormal { net }
            | Family::ConditionalBernoulli { net }
            | Family::ConditionalCategorical { net } => net.parameters(),
            _ => Vec::new(),
        }
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        match &mut self.family {
            Family::DiagonalNormal { mean, log_std } => vec![mean, log_std],
            Family::Bernoulli { logits } | Family::Categorical { logits } => vec![logits],
            Family::ConditionalDiagonalNormal { net }
            | Family::ConditionalBernoulli { net }
            | Family::ConditionalCategorical { net } => net.parameters_mut(),
            _ => Vec::new(),
        }
    }
}
