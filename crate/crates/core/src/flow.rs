//! Flows: an ordered list of layers over a base distribution.
//!
//! Layers are stored data-side first. The log-likelihood pass runs them
//! front-to-back in the inference direction, accumulating each layer's
//! likelihood contribution before adding the base log-density of the final
//! latent; sampling runs back-to-front through the generative passes.

use serde::{Deserialize, Serialize};

use crate::ad::{Parameter, Parameterized, Tape, Tensor, Var};
use crate::dist::{DistSpec, Distribution};
use crate::error::{Error, Result};
use crate::layers::{build_layer, LayerSpec, Transform};
use crate::noise::Noise;

/// Base distribution entry of a descriptor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseSpec {
    #[serde(flatten)]
    pub dist: DistSpec,
    /// Event size; inferred from the layer chain when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
}

/// Architecture descriptor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowSpec {
    /// Data-side feature size; defaults to the base size for empty flows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_dim: Option<usize>,
    /// Seed for parameter initialization.
    #[serde(default)]
    pub init_seed: u64,
    pub base: BaseSpec,
    #[serde(default)]
    pub layers: Vec<LayerSpec>,
}

impl FlowSpec {
    /// Parses a descriptor. A malformed layer entry is reported with its
    /// index.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| {
            let value: serde_json::Value = match serde_json::from_str(text) {
                Ok(v) => v,
                Err(_) => return Error::from(e),
            };
            let layers = value.get("layers").and_then(|l| l.as_array());
            for (index, layer) in layers.into_iter().flatten().enumerate() {
                if let Err(le) = LayerSpec::deserialize(layer) {
                    let kind = layer.get("kind").and_then(|k| k.as_str()).unwrap_or("?");
                    return Error::Descriptor(format!("layer {index} ({kind}): {le}"));
                }
            }
            Error::from(e)
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// What a per-example evaluation measures.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalKind {
    ExactLogProb,
    Elbo,
    Iwbo(usize),
}

/// Per-example values in nats.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub values: Vec<f64>,
    pub kind: EvalKind,
}

impl EvalResult {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Numerically stable `log(mean(exp(v)))`.
pub fn log_mean_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || m == f64::INFINITY {
        return m;
    }
    let s: f64 = v.iter().map(|x| (x - m).exp()).sum();
    m + (s / v.len() as f64).ln()
}

#[derive(Debug)]
pub struct Flow {
    input_dim: usize,
    init_seed: u64,
    base: Distribution,
    layers: Vec<Box<dyn Transform>>,
}

fn at_layer(index: usize, kind: &str) -> impl FnOnce(Error) -> Error + '_ {
    move |e| Error::Layer {
        index,
        kind: kind.to_string(),
        source: Box::new(e),
    }
}

impl Flow {
    /// Assembles a flow, validating the dimension chain.
    pub fn new(input_dim: usize, base: Distribution, layers: Vec<Box<dyn Transform>>) -> Result<Self> {
        let mut dim = input_dim;
        for (i, layer) in layers.iter().enumerate() {
            if layer.in_dim() != dim {
                return Err(at_layer(i, layer.kind())(Error::config(format!(
                    "expects {} input features but receives {dim}",
                    layer.in_dim()
                ))));
            }
            dim = layer.out_dim();
        }
        if base.dim() != dim {
            return Err(Error::config(format!(
                "base has size {} but the last layer produces {dim}",
                base.dim()
            )));
        }
        if base.is_conditional() {
            return Err(Error::config("base distribution cannot be conditional"));
        }
        Ok(Flow {
            input_dim,
            init_seed: 0,
            base,
            layers,
        })
    }

    /// Builds a flow from its descriptor.
    pub fn build(spec: &FlowSpec) -> Result<Self> {
        let input_dim = match (spec.input_dim, spec.layers.is_empty(), spec.base.dim) {
            (Some(d), _, _) => d,
            (None, true, Some(d)) => d,
            _ => return Err(Error::Descriptor("input_dim is required".into())),
        };
        if input_dim == 0 {
            return Err(Error::Descriptor("input_dim must be positive".into()));
        }
        let mut noise = Noise::from_seed(spec.init_seed);
        let mut dim = input_dim;
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, ls) in spec.layers.iter().enumerate() {
            let layer = build_layer(ls, i, dim, &mut noise).map_err(at_layer(i, ls.kind()))?;
            dim = layer.out_dim();
            layers.push(layer);
        }
        if let Some(d) = spec.base.dim {
            if d != dim {
                return Err(Error::Descriptor(format!(
                    "base dim {d} does not match layer output size {dim}"
                )));
            }
        }
        let base = Distribution::build(&spec.base.dist, dim, None, "base", &mut noise)?;
        let mut flow = Flow::new(input_dim, base, layers)?;
        flow.init_seed = spec.init_seed;
        Ok(flow)
    }

    /// Descriptor that rebuilds this architecture.
    pub fn spec(&self) -> FlowSpec {
        FlowSpec {
            input_dim: Some(self.input_dim),
            init_seed: self.init_seed,
            base: BaseSpec {
                dist: self.base.spec(),
                dim: Some(self.base.dim()),
            },
            layers: self.layers.iter().map(|l| l.spec()).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn base(&self) -> &Distribution {
        &self.base
    }

    pub fn layers(&self) -> &[Box<dyn Transform>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Box<dyn Transform>] {
        &mut self.layers
    }

    /// True iff every layer is bijective or an inference surjection.
    pub fn is_exact(&self) -> bool {
        self.layers.iter().all(|l| l.orientation().is_exact())
    }

    fn bound_kind(&self) -> EvalKind {
        if self.is_exact() {
            EvalKind::ExactLogProb
        } else {
            EvalKind::Elbo
        }
    }

    /// Per-example log-likelihood (or single-sample bound) on a tape.
    pub fn log_prob_var<'t>(&self, x: Var<'t>, noise: &mut Noise) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(Error::shape("flow", &shape, &[shape.first().copied().unwrap_or(0), self.input_dim]));
        }
        let mut z = x;
        let mut total: Option<Var<'t>> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let (next, v) = layer.inference(z, noise).map_err(at_layer(i, layer.kind()))?;
            total = Some(match total {
                None => v,
                Some(t) => t.add(v)?,
            });
            z = next;
        }
        let lp = self.base.log_prob(z, None)?;
        match total {
            None => Ok(lp),
            Some(t) => t.add(lp),
        }
    }

    /// Exact log-likelihood when the flow is exact, otherwise a single-sample
    /// lower-bound estimate.
    pub fn log_prob(&self, x: &Tensor, noise: &mut Noise) -> Result<EvalResult> {
        let tape = Tape::new();
        let lp = self.log_prob_var(tape.constant(x.clone()), noise)?;
        let values = lp.value().data().to_vec();
        Ok(EvalResult {
            values,
            kind: self.bound_kind(),
        })
    }

    /// Draws `n` samples: base first, then generative passes back-to-front.
    pub fn sample(&self, n: usize, noise: &mut Noise) -> Result<Tensor> {
        if n == 0 {
            return Err(Error::config("sample count must be positive"));
        }
        let mut v = self.base.sample_tensor(n, None, noise)?;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            v = layer.generate(&v, noise).map_err(at_layer(i, layer.kind()))?;
        }
        Ok(v)
    }

    /// Importance-weighted bound with `k` samples. Sample `j` draws from
    /// stream `j` of `seed`, so results do not depend on `threads`.
    pub fn iwbo(&self, x: &Tensor, k: usize, seed: u64, threads: usize) -> Result<EvalResult> {
        if k == 0 {
            return Err(Error::config("iwbo needs k >= 1"));
        }
        let one = |j: usize| -> Result<Vec<f64>> {
            Ok(self.log_prob(x, &mut Noise::stream(seed, j as u64))?.values)
        };
        let threads = threads.clamp(1, k);
        let per_sample: Vec<Vec<f64>> = if threads == 1 {
            (0..k).map(one).collect::<Result<_>>()?
        } else {
            let chunk = k.div_ceil(threads);
            let parts: Vec<Result<Vec<Vec<f64>>>> = std::thread::scope(|s| {
                let handles: Vec<_> = (0..threads)
                    .map(|t| {
                        let one = &one;
                        s.spawn(move || {
                            (t * chunk..((t + 1) * chunk).min(k)).map(one).collect::<Result<Vec<_>>>()
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("iwbo worker panicked")).collect()
            });
            let mut all = Vec::with_capacity(k);
            for p in parts {
                all.extend(p?);
            }
            all
        };
        let n = x.rows();
        let values = (0..n)
            .map(|i| log_mean_exp(&per_sample.iter().map(|s| s[i]).collect::<Vec<_>>()))
            .collect();
        Ok(EvalResult {
            values,
            kind: EvalKind::Iwbo(k),
        })
    }

    /// Runs data-dependent initialization for layers that need it.
    pub fn initialize(&mut self, x: &Tensor, noise: &mut Noise) -> Result<()> {
        let mut v = x.clone();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            if layer.needs_init() {
                layer.initialize(&v).map_err(at_layer(i, layer.kind()))?;
            }
            v = layer.inference_tensor(&v, noise).map_err(at_layer(i, layer.kind()))?.0;
        }
        Ok(())
    }

    pub fn needs_init(&self) -> bool {
        self.layers.iter().any(|l| l.needs_init())
    }
}

impl Parameterized for Flow {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut p = self.base.parameters();
        for l in &self.layers {
            p.extend(l.parameters());
        }
        p
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.base.parameters_mut();
        for l in &mut self.layers {
            p.extend(l.parameters_mut());
        }
        p
    }
}
