//! Surjections, each available in the inference orientation (deterministic
//! `x -> z`, exact likelihood) and the generative orientation
//! (deterministic `z -> x`, variational bound).

use std::any::Any;

use super::{
    check_input, const_v, factorial, perm_rank, perm_unrank, zeros_v, BinModel, ChoiceModel,
    FillModel, LayerSpec, NegModel, Orientation, Side, Transform, CLAMP_MARGIN,
    MAX_SORT_CLASSIFIER_DIM,
};
use crate::ad::special::{HALF_LN_2PI, LN2};
use crate::ad::{Parameter, Parameterized, Tape, Tensor, Var};
use crate::dist::{DistSpec, Distribution, Family};
use crate::error::{Error, Result};
use crate::noise::Noise;

fn classifier_hidden(d: &Option<Distribution>) -> ChoiceModel {
    match d.as_ref().map(|d| d.spec()) {
        Some(DistSpec::ConditionalBernoulli { hidden })
        | Some(DistSpec::ConditionalCategorical { hidden, .. }) => ChoiceModel::Classifier { hidden },
        _ => ChoiceModel::Uniform,
    }
}

fn opt_params(d: &Option<Distribution>) -> Vec<&Parameter> {
    d.as_ref().map(|d| d.parameters()).unwrap_or_default()
}

fn opt_params_mut(d: &mut Option<Distribution>) -> Vec<&mut Parameter> {
    d.as_mut().map(|d| d.parameters_mut()).unwrap_or_default()
}

fn as_tensor(var: Var<'_>) -> Tensor {
    (*var.value()).clone()
}

/// Draws one class per row from a classifier or uniformly from `0..classes`.
fn draw_classes(
    model: &Option<Distribution>,
    classes: usize,
    context: &Tensor,
    noise: &mut Noise,
) -> Result<Vec<usize>> {
    let n = context.rows();
    match model {
        None => Ok((0..n).map(|_| noise.below(classes)).collect()),
        Some(d) => Ok(d
            .sample_tensor(n, Some(context), noise)?
            .data()
            .iter()
            .map(|&v| v as usize)
            .collect()),
    }
}

/// `log` probability of integer classes per row, as a `[n]` variable.
fn class_log_prob<'t>(
    model: &Option<Distribution>,
    classes: usize,
    chosen: &[usize],
    context: Var<'t>,
) -> Result<Var<'t>> {
    let tape = context.tape();
    let n = chosen.len();
    match model {
        None => Ok(const_v(tape, n, -(classes as f64).ln())),
        Some(d) => {
            let v = Tensor::from_parts(vec![n, 1], chosen.iter().map(|&c| c as f64).collect());
            d.log_prob(tape.constant(v), Some(context))
        }
    }
}

/// Absolute value on a subset of coordinates, discarding the sign.
#[derive(Clone, Debug)]
pub struct Abs {
    side: Side,
    dim: usize,
    elements: Vec<usize>,
    explicit: bool,
    sign: Option<Distribution>,
}

impl Abs {
    pub fn new(
        prefix: &str,
        side: Side,
        dim: usize,
        elements: Option<Vec<usize>>,
        sign_model: &ChoiceModel,
        noise: &mut Noise,
    ) -> Result<Self> {
        let explicit = elements.is_some();
        let elements = elements.unwrap_or_else(|| (0..dim).collect());
        let mut seen = vec![false; dim];
        for &e in &elements {
            if e >= dim || seen[e] {
                return Err(Error::config(format!("abs: invalid element list {elements:?}")));
            }
            seen[e] = true;
        }
        if elements.is_empty() {
            return Err(Error::config("abs: empty element list"));
        }
        let sign = match sign_model {
            ChoiceModel::Uniform => None,
            ChoiceModel::Classifier { hidden } => Some(Distribution::build(
                &DistSpec::ConditionalBernoulli {
                    hidden: hidden.clone(),
                },
                elements.len(),
                Some(dim),
                &format!("{prefix}.sign"),
                noise,
            )?),
        };
        Ok(Abs {
            side,
            dim,
            elements,
            explicit,
            sign,
        })
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn elements(&self) -> &[usize] {
        &self.elements
    }

    /// The sign classifier; `None` means signs are uniform.
    pub fn sign_model(&self) -> Option<&Distribution> {
        self.sign.as_ref()
    }

    fn check_nonneg(&self, t: &Tensor) -> Result<()> {
        for i in 0..t.rows() {
            for &e in &self.elements {
                let v = t.row(i)[e];
                if !(v >= 0.0) {
                    return Err(Error::domain("abs", format!("value {v} is negative")));
                }
            }
        }
        Ok(())
    }

    /// Sign bits (1 = positive) for the acted-on coordinates.
    fn draw_bits(&self, context: &Tensor, noise: &mut Noise) -> Result<Tensor> {
        let n = context.rows();
        let m = self.elements.len();
        match &self.sign {
            None => Ok(Tensor::from_parts(
                vec![n, m],
                (0..n * m).map(|_| (noise.uniform() < 0.5) as u8 as f64).collect(),
            )),
            Some(d) => d.sample_tensor(n, Some(context), noise),
        }
    }

    fn sign_matrix(&self, bits: &Tensor) -> Tensor {
        let n = bits.rows();
        let mut s = Tensor::ones(&[n, self.dim]);
        for i in 0..n {
            for (c, &e) in self.elements.iter().enumerate() {
                s.data_mut()[i * self.dim + e] = 2.0 * bits.row(i)[c] - 1.0;
            }
        }
        s
    }

    fn bits_log_prob<'t>(&self, bits: Tensor, context: Var<'t>) -> Result<Var<'t>> {
        let tape = context.tape();
        let n = bits.rows();
        match &self.sign {
            None => Ok(const_v(tape, n, -(self.elements.len() as f64) * LN2)),
            Some(d) => d.log_prob(tape.constant(bits), Some(context)),
        }
    }
}

impl Transform for Abs {
    fn kind(&self) -> &'static str {
        "abs"
    }

    fn orientation(&self) -> Orientation {
        self.side.orientation()
    }

    fn in_dim(&self) -> usize {
        self.dim
    }

    fn out_dim(&self) -> usize {
        self.dim
    }

    fn inference<'t>(&self, x: Var<'t>, noise: &mut Noise) -> Result<(Var<'t>, Var<'t>)> {
        let xv = x.value();
        let n = check_input(self, &xv, self.dim)?;
        let tape = x.tape();
        match self.side {
            Side::Inference => {
                // sign(0) = +1
                let bits = Tensor::from_parts(
                    vec![n, self.elements.len()],
                    (0..n)
                        .flat_map(|i| self.elements.iter().map(move |&e| (i, e)))
                        .map(|(i, e)| (xv.row(i)[e] >= 0.0) as u8 as f64)
                        .collect(),
                );
                let z = x.mul(tape.constant(self.sign_matrix(&bits)))?;
                let v = self.bits_log_prob(bits, z)?;
                Ok((z, v))
            }
            Side::Generative => {
                self.check_nonneg(&xv)?;
                let bits = self.draw_bits(&xv, noise)?;
                let z = x.mul(tape.constant(self.sign_matrix(&bits)))?;
                let v = self.bits_log_prob(bits, x)?.neg();
                Ok((z, v))
            }
        }
    }

    fn generate(&self, z: &Tensor, noise: &mut Noise) -> Result<Tensor> {
        check_input(self, z, self.dim)?;
        match self.side {
            Side::Inference => {
                self.check_nonneg(z)?;
                let bits = self.draw_bits(z, noise)?;
                z.zip_map(&self.sign_matrix(&bits), |a, b| a * b)
            }
            Side::Generative => {
                let mut x = z.clone();
                for i in 0..x.rows() {
                    for &e in &self.elements {
                        let v = &mut x.data_mut()[i * self.dim + e];
                        *v = v.abs();
                    }
                }
                Ok(x)
            }
        }
    }

    fn spec(&self) -> LayerSpec {
        LayerSpec::Abs {
            orientation: self.side,
            elements: self.explicit.then(|| self.elements.clone()),
            sign_model: classifier_hidden(&self.sign),
        }
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

impl Parameterized for Abs {
    fn parameters(&self) -> Vec<&Parameter> {
        opt_params(&self.sign)
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        opt_params_mut(&mut self.sign)
    }
}

/// Maximum over all `k` features, discarding the argmax and the other values.
#[derive(Clone, Debug)]
pub struct Max {
    side: Side,
    k: usize,
    index: Option<Distribution>,
    fill: FillModel,
    fill_dist: Distribution,
}

impl Max {
    pub fn new(
        prefix: &str,
        side: Side,
        in_dim: usize,
        k: Option<usize>,
        index_model: &ChoiceModel,
        fill: FillModel,
        noise: &mut Noise,
    ) -> Result<Self> {
        let k = match side {
            Side::Inference => {
                if k.is_some_and(|k| k != in_dim) {
                    return Err(Error::config(format!(
                        "max: k = {} disagrees with input size {in_dim}",
                        k.unwrap_or_default()
                    )));
                }
                in_dim
            }
            Side::Generative => {
                if in_dim != 1 {
                    return Err(Error::config("generative max expects one data feature"));
                }
                k.ok_or_else(|| Error::config("generative max needs k"))?
            }
        };
        if k < 2 {
            return Err(Error::config("max needs at least two features"));
        }
        let index = match index_model {
            ChoiceModel::Uniform => None,
            ChoiceModel::Classifier { hidden } => Some(Distribution::build(
                &DistSpec::ConditionalCategorical {
                    classes: k,
                    hidden: hidden.clone(),
                },
                1,
                Some(1),
                &format!("{prefix}.index"),
                noise,
            )?),
        };
        let fill_dist = match &fill {
            FillModel::HalfNormal { scale } => {
                if !(*scale > 0.0) {
                    return Err(Error::config("max fill scale must be positive"));
                }
                Distribution::new(Family::HalfNormalBelow { scale: *scale }, k - 1)
            }
            FillModel::TruncatedNormal => Distribution::new(Family::TruncatedNormalBelow, k - 1),
            FillModel::StandardNormal => Distribution::standard_normal(k - 1),
        };
        Ok(Max {
            side,
            k,
            index,
            fill,
            fill_dist,
        })
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn fill(&self) -> &FillModel {
        &self.fill
    }

    pub fn index_model(&self) -> Option<&Distribution> {
        self.index.as_ref()
    }

    /// Distribution of the non-maximal coordinates given the maximum.
    pub fn fill_distribution(&self) -> &Distribution {
        &self.fill_dist
    }

    fn fill_context<'t>(&self, m: Var<'t>) -> Option<Var<'t>> {
        self.fill_dist.is_conditional().then_some(m)
    }

    /// Column order that places the maximum (column 0 of `[m | rest]`) at
    /// position `k_i` of each row.
    fn assemble_index(&self, chosen: &[usize]) -> Vec<usize> {
        let mut idx = Vec::with_capacity(chosen.len() * self.k);
        for &c in chosen {
            let mut r = 1;
            for j in 0..self.k {
                if j == c {
                    idx.push(0);
                } else {
                    idx.push(r);
                    r += 1;
                }
            }
        }
        idx
    }

    fn rest_index(&self, chosen: &[usize]) -> Vec<usize> {
        chosen
            .iter()
            .flat_map(|&c| (0..self.k).filter(move |&j| j != c))
            .collect()
    }

    /// Splits `[n, k]` values into the maximum, its index and the rest.
    fn split_max<'t>(&self, v: Var<'t>) -> Result<(Var<'t>, Vec<usize>, Var<'t>)> {
        let n = v.value().rows();
        let (m, chosen) = v.max_along_axis(1)?;
        let rest = v.gather(1, &self.rest_index(&chosen), self.k - 1)?;
        Ok((m.reshape(&[n, 1])?, chosen, rest))
    }

    /// Fills `[n, 1]` maxima into `[n, k]` values with drawn index and rest.
    fn fill_up<'t>(
        &self,
        m: Var<'t>,
        noise: &mut Noise,
    ) -> Result<(Var<'t>, Vec<usize>, Var<'t>)> {
        let tape = m.tape();
        let n = m.value().rows();
        let chosen = draw_classes(&self.index, self.k, &m.value(), noise)?;
        let (rest, lp_rest) = self
            .fill_dist
            .sample_with_log_prob(tape, n, self.fill_context(m), noise)?;
        let full = Var::concat(&[m, rest], 1)?.gather(1, &self.assemble_index(&chosen), self.k)?;
        let lp = class_log_prob(&self.index, self.k, &chosen, m)?.add(lp_rest)?;
        Ok((full, chosen, lp))
    }
}

impl Transform for Max {
    fn kind(&self) -> &'static str {
        "max"
    }

    fn orientation(&self) -> Orientation {
        self.side.orientation()
    }

    fn in_dim(&self) -> usize {
        match self.side {
            Side::Inference => self.k,
            Side::Generative => 1,
        }
    }

    fn out_dim(&self) -> usize {
        match self.side {
            Side::Inference => 1,
            Side::Generative => self.k,
        }
    }

    fn inference<'t>(&self, x: Var<'t>, noise: &mut Noise) -> Result<(Var<'t>, Var<'t>)> {
        check_input(self, &x.value(), self.in_dim())?;
        match self.side {
            Side::Inference => {
                let (z, chosen, rest) = self.split_max(x)?;
                let v = class_log_prob(&self.index, self.k, &chosen, z)?
                    .add(self.fill_dist.log_prob(rest, self.fill_context(z))?)?;
                Ok((z, v))
            }
            Side::Generative => {
                let (z, _, lq) = self.fill_up(x, noise)?;
                Ok((z, lq.neg()))
            }
        }
    }

    fn generate(&self, z: &Tensor, noise: &mut Noise) -> Result<Tensor> {
        check_input(self, z, self.out_dim())?;
        let tape = Tape::new();
        let z = tape.constant(z.clone());
        let x = match self.side {
            Side::Inference => self.fill_up(z, noise)?.0,
            Side::Generative => self.split_max(z)?.0,
        };
        Ok(as_tensor(x))
    }

    fn spec(&self) -> LayerSpec {
        LayerSpec::Max {
            orientation: self.side,
            k: (self.side == Side::Generative).then_some(self.k),
            index_model: classifier_hidden(&self.index),
            fill: self.fill.clone(),
        }
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

impl Parameterized for Max {
    fn parameters(&self) -> Vec<&Parameter> {
        opt_params(&self.index)
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        opt_params_mut(&mut self.index)
    }
}

/// Ascending sort of all features, discarding the permutation.
#[derive(Clone, Debug)]
pub struct Sort {
    side: Side,
    dim: usize,
    perm: Option<Distribution>,
}

impl Sort {
    pub fn new(
        prefix: &str,
        side: Side,
        dim: usize,
        perm_model: &ChoiceModel,
        noise: &mut Noise,
    ) -> Result<Self> {
        if dim < 1 {
            return Err(Error::config("sort needs at least one feature"));
        }
        let perm = match perm_model {
            ChoiceModel::Uniform => None,
            ChoiceModel::Classifier { hidden } => {
                if dim > MAX_SORT_CLASSIFIER_DIM {
                    return Err(Error::config(format!(
                        "sort permutation classifier supports at most {MAX_SORT_CLASSIFIER_DIM} features, got {dim}"
                    )));
                }
                Some(Distribution::build(
                    &DistSpec::ConditionalCategorical {
                        classes: factorial(dim),
                        hidden: hidden.clone(),
                    },
                    1,
                    Some(dim),
                    &format!("{prefix}.perm"),
                    noise,
                )?)
            }
        };
        Ok(Sort { side, dim, perm })
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn perm_model(&self) -> Option<&Distribution> {
        self.perm.as_ref()
    }

    /// Draws one permutation per row; entry `j` is the position that
    /// receives the `j`-th smallest value.
    fn draw_perms(&self, context: &Tensor, noise: &mut Noise) -> Result<Vec<Vec<usize>>> {
        match &self.perm {
            None => Ok((0..context.rows()).map(|_| noise.permutation(self.dim)).collect()),
            Some(_) => Ok(draw_classes(&self.perm, factorial(self.dim), context, noise)?
                .into_iter()
                .map(|r| perm_unrank(r, self.dim))
                .collect()),
        }
    }

    fn perms_log_prob<'t>(&self, perms: &[Vec<usize>], context: Var<'t>) -> Result<Var<'t>> {
        let ranks: Vec<usize> = perms.iter().map(|p| perm_rank(p)).collect();
        class_log_prob(&self.perm, factorial(self.dim), &ranks, context)
    }
}

impl Transform for Sort {
    fn kind(&self) -> &'static str {
        "sort"
    }

    fn orientation(&self) -> Orientation {
        self.side.orientation()
    }

    fn in_dim(&self) -> usize {
        self.dim
    }

    fn out_dim(&self) -> usize {
        self.dim
    }

    fn inference<'t>(&self, x: Var<'t>, noise: &mut Noise) -> Result<(Var<'t>, Var<'t>)> {
        let xv = x.value();
        check_input(self, &xv, self.dim)?;
        match self.side {
            Side::Inference => {
                let (z, flat) = x.sort_along_axis(1)?;
                let perms: Vec<Vec<usize>> = flat.chunks(self.dim).map(|c| c.to_vec()).collect();
                let v = self.perms_log_prob(&perms, z)?;
                Ok((z, v))
            }
            Side::Generative => {
                if (0..xv.rows()).any(|i| xv.row(i).windows(2).any(|w| w[0] > w[1])) {
                    return Err(Error::domain("sort", "generative sort expects ascending rows"));
                }
                let perms = self.draw_perms(&xv, noise)?;
                let flat: Vec<usize> = perms.concat();
                let z = x.scatter(1, &flat, self.dim)?;
                let v = self.perms_log_prob(&perms, x)?.neg();
                Ok((z, v))
            }
        }
    }

    fn generate(&self, z: &Tensor, noise: &mut Noise) -> Result<Tensor> {
        check_input(self, z, self.dim)?;
        let tape = Tape::new();
        let zv = tape.constant(z.clone());
        match self.side {
            Side::Inference => {
                let flat = self.draw_perms(z, noise)?.concat();
                Ok(as_tensor(zv.scatter(1, &flat, self.dim)?))
            }
            Side::Generative => Ok(as_tensor(zv.sort_along_axis(1)?.0)),
        }
    }

    fn spec(&self) -> LayerSpec {
        LayerSpec::Sort {
            orientation: self.side,
            perm_model: classifier_hidden(&self.perm),
        }
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

impl Parameterized for Sort {
    fn parameters(&self) -> Vec<&Parameter> {
        opt_params(&self.perm)
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        opt_params_mut(&mut self.perm)
    }
}

/// Tensor slicing: the generative orientation augments data with `aux`
/// sampled features, the inference orientation drops the trailing `aux`
/// features.
#[derive(Clone, Debug)]
pub struct Slice {
    side: Side,
    kept: usize,
    aux: usize,
    model: Distribution,
}

impl Slice {
    pub fn new(
        prefix: &str,
        side: Side,
        in_dim: usize,
        aux: usize,
        aux_model: &DistSpec,
        noise: &mut Noise,
    ) -> Result<Self> {
        if aux == 0 {
            return Err(Error::config("slice needs a positive aux size"));
        }
        let kept = match side {
            Side::Generative => in_dim,
            Side::Inference => in_dim.checked_sub(aux).filter(|&k| k > 0).ok_or_else(|| {
                Error::config(format!(
                    "slice sizes do not fit: aux {aux} of input size {in_dim}"
                ))
            })?,
        };
        let model = Distribution::build(aux_model, aux, Some(kept), &format!("{prefix}.aux"), noise)?;
        if matches!(
            model.family(),
            Family::TruncatedNormalBelow | Family::HalfNormalBelow { .. }
        ) {
            return Err(Error::config("slice aux model cannot be bound-conditioned"));
        }
        Ok(Slice {
            side,
            kept,
            aux,
            model,
        })
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn kept(&self) -> usize {
        self.kept
    }

    pub fn aux(&self) -> usize {
        self.aux
    }

    pub fn aux_model(&self) -> &Distribution {
        &self.model
    }

    fn ctx<'t>(&self, v: Var<'t>) -> Option<Var<'t>> {
        self.model.is_conditional().then_some(v)
    }
}

impl Transform for Slice {
    fn kind(&self) -> &'static str {
        "slice"
    }

    fn orientation(&self) -> Orientation {
        self.side.orientation()
    }

    fn in_dim(&self) -> usize {
        match self.side {
            Side::Generative => self.kept,
            Side::Inference => self.kept + self.aux,
        }
    }

    fn out_dim(&self) -> usize {
        match self.side {
            Side::Generative => self.kept + self.aux,
            Side::Inference => self.kept,
        }
    }

    fn inference<'t>(&self, x: Var<'t>, noise: &mut Noise) -> Result<(Var<'t>, Var<'t>)> {
        let n = check_input(self, &x.value(), self.in_dim())?;
        match self.side {
            Side::Generative => {
                let (z2, lq) = self.model.sample_with_log_prob(x.tape(), n, self.ctx(x), noise)?;
                Ok((Var::concat(&[x, z2], 1)?, lq.neg()))
            }
            Side::Inference => {
                let parts = x.split(1, &[self.kept, self.aux])?;
                let v = self.model.log_prob(parts[1], self.ctx(parts[0]))?;
                Ok((parts[0], v))
            }
        }
    }

    fn generate(&self, z: &Tensor, noise: &mut Noise) -> Result<Tensor> {
        check_input(self, z, self.out_dim())?;
        match self.side {
            Side::Generative => Ok(z.columns(0, self.kept)),
            Side::Inference => {
                let ctx = self.model.is_conditional().then_some(z);
                let x2 = self.model.sample_tensor(z.rows(), ctx, noise)?;
                Tensor::hcat(&[z, &x2])
            }
        }
    }

    fn spec(&self) -> LayerSpec {
        LayerSpec::Slice {
            orientation: self.side,
            aux: self.aux,
            aux_model: self.model.spec(),
        }
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

impl Parameterized for Slice {
    fn parameters(&self) -> Vec<&Parameter> {
        self.model.parameters()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.model.parameters_mut()
    }
}

/// Logit clamp applied to bin noise before it enters a conditional normal.
const BIN_LOGIT_LIMIT: f64 = 30.0;

/// Rounding: the generative orientation dequantizes integers by adding
/// in-bin noise; the inference orientation quantizes with `floor`.
#[derive(Clone, Debug)]
pub struct Rounding {
    side: Side,
    dim: usize,
    bins: Option<Distribution>,
}

impl Rounding {
    pub fn new(
        prefix: &str,
        side: Side,
        dim: usize,
        model: &BinModel,
        noise: &mut Noise,
    ) -> Result<Self> {
        let bins = match model {
            BinModel::Uniform => None,
            BinModel::Conditional { hidden } => Some(Distribution::build(
                &DistSpec::ConditionalDiagonalNormal {
                    hidden: hidden.clone(),
                },
                dim,
                Some(dim),
                &format!("{prefix}.bins"),
                noise,
            )?),
        };
        Ok(Rounding { side, dim, bins })
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn bin_model(&self) -> Option<&Distribution> {
        self.bins.as_ref()
    }

    fn check_integral(&self, t: &Tensor) -> Result<()> {
        match t.data().iter().find(|v| !(v.is_finite() && v.fract() == 0.0)) {
            Some(bad) => Err(Error::domain("rounding", format!("value {bad} is not an integer"))),
            None => Ok(()),
        }
    }

    /// In-bin offsets `u` in `[0, 1)` and their log-density given the bin.
    fn sample_offsets<'t>(
        &self,
        bin: Var<'t>,
        noise: &mut Noise,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let tape = bin.tape();
        let n = bin.value().rows();
        match &self.bins {
            None => {
                let u = Tensor::from_parts(vec![n, self.dim], noise.uniforms(n * self.dim));
                Ok((tape.constant(u), zeros_v(tape, n)))
            }
            Some(d) => {
                let (e, le) = d.sample_with_log_prob(tape, n, Some(bin), noise)?;
                let e = e.clamp(-BIN_LOGIT_LIMIT, BIN_LOGIT_LIMIT);
                let jac = e.log_sigmoid().add(e.neg().log_sigmoid())?.sum_axis(1)?;
                Ok((e.sigmoid(), le.sub(jac)?))
            }
        }
    }

    fn offsets_log_prob<'t>(&self, u: Var<'t>, bin: Var<'t>) -> Result<Var<'t>> {
        let n = u.value().rows();
        match &self.bins {
            None => Ok(zeros_v(u.tape(), n)),
            Some(d) => {
                let uc = u.clamp(CLAMP_MARGIN, 1.0 - CLAMP_MARGIN);
                let lu = uc.log()?;
                let l1u = uc.neg().add_scalar(1.0).log()?;
                let e = lu.sub(l1u)?;
                d.log_prob(e, Some(bin))?.sub(lu.add(l1u)?.sum_axis(1)?)
            }
        }
    }
}

impl Transform for Rounding {
    fn kind(&self) -> &'static str {
        "rounding"
    }

    fn orientation(&self) -> Orientation {
        self.side.orientation()
    }

    fn in_dim(&self) -> usize {
        self.dim
    }

    fn out_dim(&self) -> usize {
        self.dim
    }

    fn inference<'t>(&self, x: Var<'t>, noise: &mut Noise) -> Result<(Var<'t>, Var<'t>)> {
        check_input(self, &x.value(), self.dim)?;
        match self.side {
            Side::Generative => {
                self.check_integral(&x.value())?;
                let (u, lq) = self.sample_offsets(x, noise)?;
                Ok((x.add(u)?, lq.neg()))
            }
            Side::Inference => {
                let z = x.floor();
                let u = x.sub(z)?;
                let v = self.offsets_log_prob(u, z)?;
                Ok((z, v))
            }
        }
    }

    fn generate(&self, z: &Tensor, noise: &mut Noise) -> Result<Tensor> {
        check_input(self, z, self.dim)?;
        match self.side {
            Side::Generative => Ok(z.map(f64::floor)),
            Side::Inference => {
                self.check_integral(z)?;
                let tape = Tape::new();
                let zv = tape.constant(z.clone());
                let (u, _) = self.sample_offsets(zv, noise)?;
                Ok(as_tensor(zv.add(u)?))
            }
        }
    }

    fn spec(&self) -> LayerSpec {
        let model = match self.bins.as_ref().map(|d| d.spec()) {
            Some(DistSpec::ConditionalDiagonalNormal { hidden }) => BinModel::Conditional { hidden },
            _ => BinModel::Uniform,
        };
        LayerSpec::Rounding {
            orientation: self.side,
            model,
        }
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

impl Parameterized for Rounding {
    fn parameters(&self) -> Vec<&Parameter> {
        opt_params(&self.bins)
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        opt_params_mut(&mut self.bins)
    }
}

/// Elementwise `max(., 0)`.
#[derive(Clone, Debug)]
pub struct Relu {
    side: Side,
    dim: usize,
    neg: NegModel,
}

impl Relu {
    pub fn new(side: Side, dim: usize, neg: NegModel) -> Result<Self> {
        if let NegModel::HalfNormal { scale } = neg {
            if !(scale > 0.0) {
                return Err(Error::config("relu negative model scale must be positive"));
            }
        }
        Ok(Relu { side, dim, neg })
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn neg_model(&self) -> &NegModel {
        &self.neg
    }

    /// Log-density of the negative-part model at one coordinate.
    pub fn neg_log_density(&self, v: f64) -> f64 {
        match self.neg {
            NegModel::HalfNormal { scale } => {
                if v > 0.0 {
                    f64::NEG_INFINITY
                } else {
                    LN2 - scale.ln() - 0.5 * (v / scale).powi(2) - HALF_LN_2PI
                }
            }
            NegModel::StandardNormal => -0.5 * v * v - HALF_LN_2PI,
        }
    }

    fn draw_neg(&self, noise: &mut Noise) -> f64 {
        match self.neg {
            NegModel::HalfNormal { scale } => -scale * noise.normal().abs(),
            NegModel::StandardNormal => noise.normal(),
        }
    }

    /// `sum_j mask_j * log p(v_j)` for the negative-part model.
    fn masked_log_density<'t>(&self, v: Var<'t>, mask: Tensor) -> Result<Var<'t>> {
        let tape = v.tape();
        let (scale, offset) = match self.neg {
            NegModel::HalfNormal { scale } => (scale, LN2 - scale.ln() - HALF_LN_2PI),
            NegModel::StandardNormal => (1.0, -HALF_LN_2PI),
        };
        v.mul_scalar(1.0 / scale)
            .square()
            .mul_scalar(-0.5)
            .add_scalar(offset)
            .mul(tape.constant(mask))?
            .sum_axis(1)
    }

    fn check_nonneg(&self, t: &Tensor) -> Result<()> {
        match t.data().iter().find(|v| !(**v >= 0.0)) {
            Some(bad) => Err(Error::domain("relu", format!("value {bad} is negative"))),
            None => Ok(()),
        }
    }
}

impl Transform for Relu {
    fn kind(&self) -> &'static str {
        "relu"
    }

    fn orientation(&self) -> Orientation {
        self.side.orientation()
    }

    fn in_dim(&self) -> usize {
        self.dim
    }

    fn out_dim(&self) -> usize {
        self.dim
    }

    fn inference<'t>(&self, x: Var<'t>, noise: &mut Noise) -> Result<(Var<'t>, Var<'t>)> {
        let xv = x.value();
        check_input(self, &xv, self.dim)?;
        let tape = x.tape();
        match self.side {
            Side::Inference => {
                let mask = xv.map(|v| (v <= 0.0) as u8 as f64);
                let v = self.masked_log_density(x, mask)?;
                Ok((x.relu(), v))
            }
            Side::Generative => {
                self.check_nonneg(&xv)?;
                let mask = xv.map(|v| (v == 0.0) as u8 as f64);
                let mut fill = Tensor::zeros(xv.shape());
                for (f, m) in fill.data_mut().iter_mut().zip(mask.data()) {
                    if *m == 1.0 {
                        *f = self.draw_neg(noise);
                    }
                }
                let fill = tape.constant(fill);
                let v = self.masked_log_density(fill, mask)?.neg();
                Ok((x.add(fill)?, v))
            }
        }
    }

    fn generate(&self, z: &Tensor, noise: &mut Noise) -> Result<Tensor> {
        check_input(self, z, self.dim)?;
        match self.side {
            Side::Inference => {
                self.check_nonneg(z)?;
                let mut x = z.clone();
                for v in x.data_mut() {
                    if *v == 0.0 {
                        *v = self.draw_neg(noise);
                    }
                }
                Ok(x)
            }
            Side::Generative => Ok(z.map(|v| v.max(0.0))),
        }
    }

    fn spec(&self) -> LayerSpec {
        LayerSpec::Relu {
            orientation: self.side,
            neg_model: self.neg.clone(),
        }
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

impl Parameterized for Relu {
    fn parameters(&self) -> Vec<&Parameter> {
        Vec::new()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        Vec::new()
    }
}
