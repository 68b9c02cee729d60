//! The layer catalog.
//!
//! Every layer maps data-side values `x` to latent-side values `z` in the
//! inference direction and reports a per-example likelihood contribution `V`;
//! the generative direction maps `z` back to `x`. Layers are stored data-side
//! first inside a [`crate::flow::Flow`].

use std::any::Any;
use std::fmt::Debug;

use serde::{Deserialize, Serialize};

use crate::ad::{Parameterized, Tape, Tensor, Var};
use crate::dist::DistSpec;
use crate::error::{Error, Result};
use crate::noise::Noise;

mod bijective;
mod stochastic;
mod surjective;

pub use bijective::{ActNorm, AffineCoupling, Elementwise, ElementwiseMap, Permutation};
pub use stochastic::{Ppca, StochasticPermutation, Vae};
pub use surjective::{Abs, Max, Relu, Rounding, Slice, Sort};

/// Clamp margin applied to logit and sigmoid-inverse inputs.
pub const CLAMP_MARGIN: f64 = 1e-6;

/// Default bound on coupling log-scales.
pub const SCALE_BOUND: f64 = 2.0;

/// Largest set size for which a learned permutation classifier is allowed.
pub const MAX_SORT_CLASSIFIER_DIM: usize = 5;

/// Which direction of a layer is deterministic.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Orientation {
    Bijective,
    /// Deterministic from data to latent; exact likelihood.
    InferenceSurjective,
    /// Deterministic from latent to data; likelihood bound.
    GenerativeSurjective,
    Stochastic,
}

impl Orientation {
    /// Whether the layer keeps the flow's likelihood exact.
    pub fn is_exact(self) -> bool {
        matches!(self, Orientation::Bijective | Orientation::InferenceSurjective)
    }

    pub fn label(self) -> &'static str {
        match self {
            Orientation::Bijective => "bijective",
            Orientation::InferenceSurjective => "inference surjection",
            Orientation::GenerativeSurjective => "generative surjection",
            Orientation::Stochastic => "stochastic",
        }
    }
}

/// Orientation selector for surjective layer kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Inference,
    Generative,
}

impl Side {
    pub fn orientation(self) -> Orientation {
        match self {
            Side::Inference => Orientation::InferenceSurjective,
            Side::Generative => Orientation::GenerativeSurjective,
        }
    }
}

/// Fixed uniform choice or a learned classifier over discrete choices
/// (signs, argmax indices, permutations).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ChoiceModel {
    #[default]
    Uniform,
    Classifier {
        #[serde(default)]
        hidden: Vec<usize>,
    },
}

/// Distribution of the non-maximal entries of a max surjection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FillModel {
    /// `value - scale * |eps|`.
    HalfNormal {
        #[serde(default = "one")]
        scale: f64,
    },
    /// Standard normal truncated below the maximum.
    TruncatedNormal,
    /// Unconstrained standard normal. Violates the fiber constraint; exists
    /// so the right-inverse checker can be shown to catch leaks.
    StandardNormal,
}

impl Default for FillModel {
    fn default() -> Self {
        FillModel::HalfNormal { scale: 1.0 }
    }
}

/// Distribution over the negative half-line used by ReLU surjections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum NegModel {
    /// Mirror-image half-normal on `(-inf, 0]`.
    HalfNormal {
        #[serde(default = "one")]
        scale: f64,
    },
    /// Unconstrained standard normal; leaks above zero (checker fixture).
    StandardNormal,
}

impl Default for NegModel {
    fn default() -> Self {
        NegModel::HalfNormal { scale: 1.0 }
    }
}

/// In-bin noise model of rounding surjections.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BinModel {
    #[default]
    Uniform,
    /// Sigmoid of a conditional diagonal normal.
    Conditional {
        #[serde(default)]
        hidden: Vec<usize>,
    },
}

fn one() -> f64 {
    1.0
}

fn scale_bound() -> f64 {
    SCALE_BOUND
}

/// Declarative layer configuration. Dimensions are resolved from the flow's
/// dimension chain at build time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    AffineCoupling {
        hidden: Vec<usize>,
        #[serde(default = "scale_bound")]
        scale_bound: f64,
    },
    Actnorm {
        #[serde(default)]
        initialized: bool,
    },
    Elementwise {
        map: ElementwiseMap,
    },
    Permutation {
        perm: Vec<usize>,
    },
    /// Shorthand for the reversing permutation.
    Reverse,
    Abs {
        orientation: Side,
        /// Coordinates the surjection acts on; all when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        elements: Option<Vec<usize>>,
        #[serde(default)]
        sign_model: ChoiceModel,
    },
    Max {
        orientation: Side,
        /// Latent size for the generative orientation.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        k: Option<usize>,
        #[serde(default)]
        index_model: ChoiceModel,
        #[serde(default)]
        fill: FillModel,
    },
    Sort {
        orientation: Side,
        #[serde(default)]
        perm_model: ChoiceModel,
    },
    Slice {
        orientation: Side,
        aux: usize,
        aux_model: DistSpec,
    },
    Rounding {
        orientation: Side,
        #[serde(default)]
        model: BinModel,
    },
    Relu {
        orientation: Side,
        #[serde(default)]
        neg_model: NegModel,
    },
    StochasticPermutation,
    Vae {
        latent: usize,
        #[serde(default)]
        encoder_hidden: Vec<usize>,
        #[serde(default)]
        decoder_hidden: Vec<usize>,
    },
    Ppca {
        latent: usize,
    },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::AffineCoupling { .. } => "affine_coupling",
            LayerSpec::Actnorm { .. } => "actnorm",
            LayerSpec::Elementwise { .. } => "elementwise",
            LayerSpec::Permutation { .. } | LayerSpec::Reverse => "permutation",
            LayerSpec::Abs { .. } => "abs",
            LayerSpec::Max { .. } => "max",
            LayerSpec::Sort { .. } => "sort",
            LayerSpec::Slice { .. } => "slice",
            LayerSpec::Rounding { .. } => "rounding",
            LayerSpec::Relu { .. } => "relu",
            LayerSpec::StochasticPermutation => "stochastic_permutation",
            LayerSpec::Vae { .. } => "vae",
            LayerSpec::Ppca { .. } => "ppca",
        }
    }
}

/// A SurVAE layer.
pub trait Transform: Parameterized + Send + Sync + Debug {
    fn kind(&self) -> &'static str;

    fn orientation(&self) -> Orientation;

    /// Data-side feature size.
    fn in_dim(&self) -> usize;

    /// Latent-side feature size.
    fn out_dim(&self) -> usize;

    /// Inference pass `x -> (z, V)` with `V` of shape `[n]`.
    fn inference<'t>(&self, x: Var<'t>, noise: &mut Noise) -> Result<(Var<'t>, Var<'t>)>;

    /// Generative pass `z -> x`.
    fn generate(&self, z: &Tensor, noise: &mut Noise) -> Result<Tensor>;

    /// `log |det dx/dz|` of the generative map at `z`, for bijections.
    fn generative_log_det(&self, _z: &Tensor) -> Option<Result<Vec<f64>>> {
        None
    }

    fn spec(&self) -> LayerSpec;

    /// Whether [`Transform::initialize`] must run before first use.
    fn needs_init(&self) -> bool {
        false
    }

    /// Data-dependent initialization from a batch of layer inputs.
    fn initialize(&mut self, _x: &Tensor) -> Result<()> {
        Ok(())
    }

    fn as_any(&self) -> &dyn Any;

    /// Tensor-level inference on a scratch tape.
    fn inference_tensor(&self, x: &Tensor, noise: &mut Noise) -> Result<(Tensor, Vec<f64>)> {
        let tape = Tape::new();
        let (z, v) = self.inference(tape.constant(x.clone()), noise)?;
        let z = (*z.value()).clone();
        let v = v.value().data().to_vec();
        Ok((z, v))
    }
}

pub(crate) fn check_input(layer: &dyn Transform, x: &Tensor, dim: usize) -> Result<usize> {
    if x.rank() != 2 || x.cols() != dim {
        return Err(Error::shape(layer.kind(), x.shape(), &[x.rows(), dim]));
    }
    Ok(x.rows())
}

pub(crate) fn zeros_v(tape: &Tape, n: usize) -> Var<'_> {
    tape.constant(Tensor::zeros(&[n]))
}

pub(crate) fn const_v(tape: &Tape, n: usize, v: f64) -> Var<'_> {
    tape.constant(Tensor::full(&[n], v))
}

/// Builds layer `index` of a flow from its spec, given the data-side size.
pub fn build_layer(
    spec: &LayerSpec,
    index: usize,
    in_dim: usize,
    noise: &mut Noise,
) -> Result<Box<dyn Transform>> {
    let prefix = format!("layers.{index}");
    let layer: Box<dyn Transform> = match spec {
        LayerSpec::AffineCoupling {
            hidden,
            scale_bound,
        } => Box::new(AffineCoupling::new(&prefix, in_dim, hidden, *scale_bound, noise)?),
        LayerSpec::Actnorm { initialized } => {
            let mut a = ActNorm::new(&prefix, in_dim);
            if *initialized {
                a.mark_initialized();
            }
            Box::new(a)
        }
        LayerSpec::Elementwise { map } => Box::new(Elementwise::new(in_dim, map.clone())?),
        LayerSpec::Permutation { perm } => Box::new(Permutation::new(perm.clone())?),
        LayerSpec::Reverse => Box::new(Permutation::reverse(in_dim)),
        LayerSpec::Abs {
            orientation,
            elements,
            sign_model,
        } => Box::new(Abs::new(
            &prefix,
            *orientation,
            in_dim,
            elements.clone(),
            sign_model,
            noise,
        )?),
        LayerSpec::Max {
            orientation,
            k,
            index_model,
            fill,
        } => Box::new(Max::new(
            &prefix,
            *orientation,
            in_dim,
            *k,
            index_model,
            fill.clone(),
            noise,
        )?),
        LayerSpec::Sort {
            orientation,
            perm_model,
        } => Box::new(Sort::new(&prefix, *orientation, in_dim, perm_model, noise)?),
        LayerSpec::Slice {
            orientation,
            aux,
            aux_model,
        } => Box::new(Slice::new(&prefix, *orientation, in_dim, *aux, aux_model, noise)?),
        LayerSpec::Rounding { orientation, model } => {
            Box::new(Rounding::new(&prefix, *orientation, in_dim, model, noise)?)
        }
        LayerSpec::Relu {
            orientation,
            neg_model,
        } => Box::new(Relu::new(*orientation, in_dim, neg_model.clone())?),
        LayerSpec::StochasticPermutation => Box::new(StochasticPermutation::new(in_dim)),
        LayerSpec::Vae {
            latent,
            encoder_hidden,
            decoder_hidden,
        } => Box::new(Vae::new(
            &prefix,
            in_dim,
            *latent,
            encoder_hidden,
            decoder_hidden,
            noise,
        )?),
        LayerSpec::Ppca { latent } => Box::new(Ppca::new(&prefix, in_dim, *latent, noise)?),
    };
    Ok(layer)
}

/// Outcome of a right-inverse check.
#[derive(Clone, Debug, PartialEq)]
pub struct RightInverseReport {
    pub draws: usize,
    /// Largest absolute reconstruction error.
    pub max_error: f64,
    /// Rows whose reconstruction error exceeded the tolerance.
    pub violations: usize,
}

impl RightInverseReport {
    pub fn passes(&self) -> bool {
        self.violations == 0
    }
}

/// Checks the stochastic right-inverse condition on `points`.
///
/// For inference surjections `points` are latent values and the check is
/// `inference(generate(z)).z == z`; for generative surjections `points` are
/// data values and the check is `generate(inference(x).z) == x`. Bijections
/// are checked in the generative-surjection direction.
pub fn check_right_inverse(
    layer: &dyn Transform,
    points: &Tensor,
    noise: &mut Noise,
    tol: f64,
) -> Result<RightInverseReport> {
    let (start, back) = match layer.orientation() {
        Orientation::InferenceSurjective => {
            let x = layer.generate(points, noise)?;
            (points, layer.inference_tensor(&x, noise)?.0)
        }
        Orientation::GenerativeSurjective | Orientation::Bijective => {
            let (z, _) = layer.inference_tensor(points, noise)?;
            (points, layer.generate(&z, noise)?)
        }
        Orientation::Stochastic => {
            return Err(Error::config(format!(
                "{}: stochastic layers have no right inverse",
                layer.kind()
            )))
        }
    };
    if start.shape() != back.shape() {
        return Err(Error::shape("check_right_inverse", start.shape(), back.shape()));
    }
    let mut max_error = 0.0f64;
    let mut violations = 0;
    for i in 0..start.rows() {
        let err = start
            .row(i)
            .iter()
            .zip(back.row(i))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let err = if err.is_nan() { f64::INFINITY } else { err };
        max_error = max_error.max(err);
        if err > tol {
            violations += 1;
        }
    }
    Ok(RightInverseReport {
        draws: start.rows(),
        max_error,
        violations,
    })
}

/// Lexicographic rank of a permutation of `0..d`.
pub fn perm_rank(p: &[usize]) -> usize {
    let d = p.len();
    let mut rank = 0;
    for i in 0..d {
        let smaller = p[i + 1..].iter().filter(|&&q| q < p[i]).count();
        rank = rank * (d - i) + smaller;
    }
    rank
}

/// Inverse of [`perm_rank`].
pub fn perm_unrank(mut rank: usize, d: usize) -> Vec<usize> {
    let mut digits = vec![0; d];
    for i in (0..d).rev() {
        let base = d - i;
        digits[i] = rank % base;
        rank /= base;
    }
    let mut pool: Vec<usize> = (0..d).collect();
    digits.into_iter().map(|k| pool.remove(k)).collect()
}

pub fn factorial(d: usize) -> usize {
    (1..=d).product()
}
