//! Bijections: affine coupling, actnorm, elementwise maps and fixed
//! permutations.

use std::any::Any;

use serde::{Deserialize, Serialize};

use super::{check_input, const_v, zeros_v, LayerSpec, Orientation, Transform, CLAMP_MARGIN};
use crate::ad::special;
use crate::ad::{Parameter, Parameterized, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::noise::Noise;

/// Affine coupling: the first half of the features conditions a scale and
/// shift applied to the second half.
#[derive(Clone, Debug)]
pub struct AffineCoupling {
    dim: usize,
    split: usize,
    net: Mlp,
    scale_bound: f64,
}

impl AffineCoupling {
    pub fn new(
        prefix: &str,
        dim: usize,
        hidden: &[usize],
        scale_bound: f64,
        noise: &mut Noise,
    ) -> Result<Self> {
        if dim < 2 || dim % 2 != 0 {
            return Err(Error::config(format!(
                "affine coupling needs an even feature size, got {dim}"
            )));
        }
        if !(scale_bound > 0.0) {
            return Err(Error::config("affine coupling scale bound must be positive"));
        }
        let split = dim / 2;
        let sizes = [&[split][..], hidden, &[2 * (dim - split)]].concat();
        Ok(AffineCoupling {
            dim,
            split,
            net: Mlp::new(&format!("{prefix}.net"), &sizes, true, noise)?,
            scale_bound,
        })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    fn scale_shift<'t>(&self, x1: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let d2 = self.dim - self.split;
        let raw = self.net.forward(x1)?;
        let parts = raw.split(1, &[d2, d2])?;
        Ok((parts[0].tanh().mul_scalar(self.scale_bound), parts[1]))
    }
}

impl Transform for AffineCoupling {
    fn kind(&self) -> &'static str {
        "affine_coupling"
    }

    fn orientation(&self) -> Orientation {
        Orientation::Bijective
    }

    fn in_dim(&self) -> usize {
        self.dim
    }

    fn out_dim(&self) -> usize {
        self.dim
    }

    fn inference<'t>(&self, x: Var<'t>, _noise: &mut Noise) -> Result<(Var<'t>, Var<'t>)> {
        check_input(self, &x.value(), self.dim)?;
        let parts = x.split(1, &[self.split, self.dim - self.split])?;
        let (s, t) = self.scale_shift(parts[0])?;
        let z2 = parts[1].sub(t)?.mul(s.neg().exp())?;
        let z = Var::concat(&[parts[0], z2], 1)?;
        Ok((z, s.sum_axis(1)?.neg()))
    }

    fn generate(&self, z: &Tensor, _noise: &mut Noise) -> Result<Tensor> {
        check_input(self, z, self.dim)?;
        let tape = Tape::new();
        let parts = tape.constant(z.clone()).split(1, &[self.split, self.dim - self.split])?;
        let (s, t) = self.scale_shift(parts[0])?;
        let x2 = parts[1].mul(s.exp())?.add(t)?;
        let x = Var::concat(&[parts[0], x2], 1)?;
        let out = (*x.value()).clone();
        Ok(out)
    }

    fn generative_log_det(&self, z: &Tensor) -> Option<Result<Vec<f64>>> {
        Some((|| {
            let tape = Tape::new();
            let parts = tape.constant(z.clone()).split(1, &[self.split, self.dim - self.split])?;
            let (s, _) = self.scale_shift(parts[0])?;
            let ld = s.sum_axis(1)?.value().data().to_vec();
            Ok(ld)
        })())
    }

    fn spec(&self) -> LayerSpec {
        LayerSpec::AffineCoupling {
            hidden: self.net.hidden().to_vec(),
            scale_bound: self.scale_bound,
        }
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

impl Parameterized for AffineCoupling {
    fn parameters(&self) -> Vec<&Parameter> {
        self.net.parameters()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.net.parameters_mut()
    }
}

/// Per-feature affine normalization `z = (x - b) * exp(-log_scale)`.
#[derive(Clone, Debug)]
pub struct ActNorm {
    log_scale: Parameter,
    bias: Parameter,
    initialized: bool,
}

impl ActNorm {
    pub fn new(prefix: &str, dim: usize) -> Self {
        ActNorm {
            log_scale: Parameter::new(format!("{prefix}.log_scale"), Tensor::zeros(&[dim])),
            bias: Parameter::new(format!("{prefix}.bias"), Tensor::zeros(&[dim])),
            initialized: false,
        }
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// Marks the current parameter values as initialized.
    pub fn mark_initialized(&mut self) {
        self.initialized = true;
    }

    fn dim(&self) -> usize {
        self.bias.numel()
    }

    fn ready(&self) -> Result<()> {
        if self.initialized {
            Ok(())
        } else {
            Err(Error::Uninitialized(format!(
                "actnorm {}",
                self.bias.name.trim_end_matches(".bias")
            )))
        }
    }
}

impl Transform for ActNorm {
    fn kind(&self) -> &'static str {
        "actnorm"
    }

    fn orientation(&self) -> Orientation {
        Orientation::Bijective
    }

    fn in_dim(&self) -> usize {
        self.dim()
    }

    fn out_dim(&self) -> usize {
        self.dim()
    }

    fn inference<'t>(&self, x: Var<'t>, _noise: &mut Noise) -> Result<(Var<'t>, Var<'t>)> {
        self.ready()?;
        let n = check_input(self, &x.value(), self.dim())?;
        let tape = x.tape();
        let ls = tape.param(&self.log_scale);
        let b = tape.param(&self.bias).expand_rows(n)?;
        let z = x.sub(b)?.mul(ls.neg().exp().expand_rows(n)?)?;
        let v = ls.sum().neg().broadcast_to(&[n])?;
        Ok((z, v))
    }

    fn generate(&self, z: &Tensor, _noise: &mut Noise) -> Result<Tensor> {
        self.ready()?;
        check_input(self, z, self.dim())?;
        let d = self.dim();
        let mut x = z.clone();
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            let j = i % d;
            *v = *v * self.log_scale.value.data()[j].exp() + self.bias.value.data()[j];
        }
        Ok(x)
    }

    fn generative_log_det(&self, z: &Tensor) -> Option<Result<Vec<f64>>> {
        Some(self.ready().map(|_| vec![self.log_scale.value.sum(); z.rows()]))
    }

    fn spec(&self) -> LayerSpec {
        LayerSpec::Actnorm {
            initialized: self.initialized,
        }
    }

    fn needs_init(&self) -> bool {
        !self.initialized
    }

    fn initialize(&mut self, x: &Tensor) -> Result<()> {
        let n = check_input(self, x, self.dim())?;
        if n < 2 {
            return Err(Error::config("actnorm initialization needs at least two rows"));
        }
        let d = self.dim();
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v / n as f64;
            }
        }
        let mut var = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                var[j] += (x.row(i)[j] - mean[j]).powi(2) / n as f64;
            }
        }
        self.bias.value = Tensor::vector(mean);
        self.log_scale.value = Tensor::vector(var.iter().map(|v| 0.5 * v.max(1e-24).ln()).collect());
        self.initialized = true;
        Ok(())
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

impl Parameterized for ActNorm {
    fn parameters(&self) -> Vec<&Parameter> {
        vec![&self.log_scale, &self.bias]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.log_scale, &mut self.bias]
    }
}

/// Elementwise bijection, named by its inference-direction map `z = f(x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ElementwiseMap {
    /// `z = (x - b) / a`, i.e. `x = a z + b`.
    Affine { a: f64, b: f64 },
    /// `z = logit(x)` on `(0, 1)`.
    Logit,
    /// `z = sigmoid(x)`.
    Sigmoid,
    /// `z = softplus(x)`.
    Softplus,
    /// `z = log(exp(x) - 1)` on `x > 0`.
    InverseSoftplus,
}

#[derive(Clone, Debug)]
pub struct Elementwise {
    dim: usize,
    map: ElementwiseMap,
}

fn check_unit_interval(op: &'static str, t: &Tensor) -> Result<()> {
    match t.data().iter().find(|v| !(**v >= 0.0 && **v <= 1.0)) {
        Some(bad) => Err(Error::domain(op, format!("value {bad} outside [0, 1]"))),
        None => Ok(()),
    }
}

fn clamp_unit(v: f64) -> f64 {
    v.clamp(CLAMP_MARGIN, 1.0 - CLAMP_MARGIN)
}

impl Elementwise {
    pub fn new(dim: usize, map: ElementwiseMap) -> Result<Self> {
        if let ElementwiseMap::Affine { a, b } = map {
            if a == 0.0 || !a.is_finite() || !b.is_finite() {
                return Err(Error::config("elementwise affine needs finite a != 0"));
            }
        }
        Ok(Elementwise { dim, map })
    }

    pub fn map(&self) -> &ElementwiseMap {
        &self.map
    }
}

impl Transform for Elementwise {
    fn kind(&self) -> &'static str {
        "elementwise"
    }

    fn orientation(&self) -> Orientation {
        Orientation::Bijective
    }

    fn in_dim(&self) -> usize {
        self.dim
    }

    fn out_dim(&self) -> usize {
        self.dim
    }

    fn inference<'t>(&self, x: Var<'t>, _noise: &mut Noise) -> Result<(Var<'t>, Var<'t>)> {
        let xv = x.value();
        let n = check_input(self, &xv, self.dim)?;
        let tape = x.tape();
        match self.map {
            ElementwiseMap::Affine { a, b } => {
                let z = x.add_scalar(-b).mul_scalar(1.0 / a);
                Ok((z, const_v(tape, n, -(self.dim as f64) * a.abs().ln())))
            }
            ElementwiseMap::Logit => {
                check_unit_interval("logit", &xv)?;
                let xc = x.clamp(CLAMP_MARGIN, 1.0 - CLAMP_MARGIN);
                let lx = xc.log()?;
                let l1x = xc.neg().add_scalar(1.0).log()?;
                let z = lx.sub(l1x)?;
                Ok((z, lx.add(l1x)?.sum_axis(1)?.neg()))
            }
            ElementwiseMap::Sigmoid => {
                let z = x.sigmoid();
                let v = x.log_sigmoid().add(x.neg().log_sigmoid())?.sum_axis(1)?;
                Ok((z, v))
            }
            ElementwiseMap::Softplus => Ok((x.softplus(), x.log_sigmoid().sum_axis(1)?)),
            ElementwiseMap::InverseSoftplus => {
                if let Some(bad) = xv.data().iter().find(|v| !(**v >= 0.0)) {
                    return Err(Error::domain(
                        "inverse_softplus",
                        format!("value {bad} is negative"),
                    ));
                }
                let xs: Vec<f64> = xv.data().iter().map(|v| v.max(f64::MIN_POSITIVE)).collect();
                let z = x.elementwise_custom(
                    xs.iter().map(|&v| special::inv_softplus(v)).collect(),
                    xs.iter().map(|&v| 1.0 / -(-v).exp_m1()).collect(),
                );
                // V = -log(1 - exp(-x)), dV/dx = -1 / (exp(x) - 1)
                let v = x.elementwise_custom(
                    xs.iter().map(|&v| -(-(-v).exp_m1()).ln()).collect(),
                    xs.iter().map(|&v| -1.0 / v.exp_m1()).collect(),
                );
                Ok((z, v.sum_axis(1)?))
            }
        }
    }

    fn generate(&self, z: &Tensor, _noise: &mut Noise) -> Result<Tensor> {
        check_input(self, z, self.dim)?;
        Ok(match self.map {
            ElementwiseMap::Affine { a, b } => z.map(|v| a * v + b),
            ElementwiseMap::Logit => z.map(special::sigmoid),
            ElementwiseMap::Sigmoid => {
                check_unit_interval("sigmoid inverse", z)?;
                z.map(|v| special::logit(clamp_unit(v)))
            }
            ElementwiseMap::Softplus => {
                if let Some(bad) = z.data().iter().find(|v| !(**v > 0.0)) {
                    return Err(Error::domain("softplus inverse", format!("value {bad} <= 0")));
                }
                z.map(special::inv_softplus)
            }
            ElementwiseMap::InverseSoftplus => z.map(special::softplus),
        })
    }

    fn generative_log_det(&self, z: &Tensor) -> Option<Result<Vec<f64>>> {
        let per: fn(f64) -> f64 = match self.map {
            ElementwiseMap::Affine { a, .. } => {
                return Some(Ok(vec![self.dim as f64 * a.abs().ln(); z.rows()]));
            }
            ElementwiseMap::Logit => |v| log_sigmoid(v) + log_sigmoid(-v),
            ElementwiseMap::Sigmoid => |v| {
                let c = clamp_unit(v);
                -(c.ln() + (-c).ln_1p())
            },
            ElementwiseMap::Softplus => |v| -(-(-v).exp_m1()).ln(),
            ElementwiseMap::InverseSoftplus => log_sigmoid,
        };
        Some(Ok((0..z.rows()).map(|i| z.row(i).iter().map(|&v| per(v)).sum()).collect()))
    }

    fn spec(&self) -> LayerSpec {
        LayerSpec::Elementwise {
            map: self.map.clone(),
        }
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

fn log_sigmoid(v: f64) -> f64 {
    -special::softplus(-v)
}

impl Parameterized for Elementwise {
    fn parameters(&self) -> Vec<&Parameter> {
        Vec::new()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        Vec::new()
    }
}

/// Fixed permutation of the feature axis: `z_j = x_{perm[j]}`.
#[derive(Clone, Debug)]
pub struct Permutation {
    perm: Vec<usize>,
    inverse: Vec<usize>,
}

impl Permutation {
    pub fn new(perm: Vec<usize>) -> Result<Self> {
        let d = perm.len();
        let mut inverse = vec![usize::MAX; d];
        for (j, &p) in perm.iter().enumerate() {
            if p >= d || inverse[p] != usize::MAX {
                return Err(Error::config(format!("{perm:?} is not a permutation")));
            }
            inverse[p] = j;
        }
        Ok(Permutation { perm, inverse })
    }

    pub fn reverse(dim: usize) -> Self {
        Self::new((0..dim).rev().collect()).expect("reversal is a permutation")
    }

    /// A uniformly random permutation, drawn once.
    pub fn random(dim: usize, noise: &mut Noise) -> Self {
        Self::new(noise.permutation(dim)).expect("drawn permutation is valid")
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }
}

fn permute_cols(t: &Tensor, perm: &[usize]) -> Tensor {
    let d = perm.len();
    let mut out = Vec::with_capacity(t.numel());
    for i in 0..t.rows() {
        let row = t.row(i);
        out.extend(perm.iter().map(|&p| row[p]));
    }
    Tensor::from_parts(vec![t.rows(), d], out)
}

impl Transform for Permutation {
    fn kind(&self) -> &'static str {
        "permutation"
    }

    fn orientation(&self) -> Orientation {
        Orientation::Bijective
    }

    fn in_dim(&self) -> usize {
        self.perm.len()
    }

    fn out_dim(&self) -> usize {
        self.perm.len()
    }

    fn inference<'t>(&self, x: Var<'t>, _noise: &mut Noise) -> Result<(Var<'t>, Var<'t>)> {
        let n = check_input(self, &x.value(), self.perm.len())?;
        let idx: Vec<usize> = (0..n).flat_map(|_| self.perm.iter().copied()).collect();
        let z = x.gather(1, &idx, self.perm.len())?;
        Ok((z, zeros_v(x.tape(), n)))
    }

    fn generate(&self, z: &Tensor, _noise: &mut Noise) -> Result<Tensor> {
        check_input(self, z, self.perm.len())?;
        Ok(permute_cols(z, &self.inverse))
    }

    fn generative_log_det(&self, z: &Tensor) -> Option<Result<Vec<f64>>> {
        Some(Ok(vec![0.0; z.rows()]))
    }

    fn spec(&self) -> LayerSpec {
        LayerSpec::Permutation {
            perm: self.perm.clone(),
        }
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

impl Parameterized for Permutation {
    fn parameters(&self) -> Vec<&Parameter> {
        Vec::new()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        Vec::new()
    }
}
