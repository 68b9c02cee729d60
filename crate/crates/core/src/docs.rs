//! Layer catalog generated from a registry of documented layer types.
//!
//! Every layer type implements [`Catalogued`]; [`registry`] lists them all.
//! Registering a type without an implementation, or with an entry whose
//! formula or oracle text is empty, fails to compile with the type's name.

use crate::layers::{
    Abs, ActNorm, AffineCoupling, Elementwise, Max, Permutation, Ppca, Relu, Rounding, Slice,
    Sort, StochasticPermutation, Vae,
};

/// Documentation of one layer kind in one orientation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerDoc {
    pub kind: &'static str,
    /// `bijective`, `inference`, `generative` or `stochastic`.
    pub orientation: &'static str,
    pub title: &'static str,
    /// Deterministic and stochastic directions.
    pub mapping: &'static str,
    /// Likelihood contribution `V(x, z)`.
    pub contribution: &'static str,
    /// Bound looseness `E(x, z)`.
    pub looseness: &'static str,
    /// Independent check that certifies the contribution.
    pub oracle: &'static str,
}

pub trait Catalogued {
    const ENTRIES: &'static [LayerDoc];
}

/// Compile-time completeness check used by [`registry`].
pub const fn complete(entries: &[LayerDoc]) -> bool {
    if entries.is_empty() {
        return false;
    }
    let mut i = 0;
    while i < entries.len() {
        let e = &entries[i];
        if e.kind.is_empty() || e.mapping.is_empty() || e.contribution.is_empty() || e.oracle.is_empty() {
            return false;
        }
        i += 1;
    }
    true
}

macro_rules! registry {
    ($($t:ty),* $(,)?) => {{
        $(
            const _: () = assert!(
                complete(<$t as Catalogued>::ENTRIES),
                concat!("missing or empty catalog entry for ", stringify!($t))
            );
        )*
        vec![$(<$t as Catalogued>::ENTRIES),*]
    }};
}

/// Catalog entries of every registered layer type.
pub fn registry() -> Vec<&'static [LayerDoc]> {
    registry![
        AffineCoupling,
        ActNorm,
        Elementwise,
        Permutation,
        Abs,
        Max,
        Sort,
        Slice,
        Rounding,
        Relu,
        StochasticPermutation,
        Vae,
        Ppca,
    ]
}

const HEADER: &str = "# Layer catalog

Each section lists one layer kind in one orientation: its deterministic and
stochastic directions, its likelihood contribution `V(x, z)` added to the
running log-likelihood in the inference direction, its bound looseness
`E(x, z)`, and the independent check that certifies `V`.

This file is generated by `survae catalog`; a test keeps it in sync.
";

/// Renders the catalog for a registry.
pub fn render_catalog(registry: &[&[LayerDoc]]) -> String {
    let mut out = String::from(HEADER);
    for entries in registry {
        for e in entries.iter() {
            out.push_str(&format!(
                "\n## {} (`{}`, {})\n\n- Mapping: {}\n- Contribution: {}\n- Looseness: {}\n- Certified by: {}\n",
                e.title, e.kind, e.orientation, e.mapping, e.contribution, e.looseness, e.oracle
            ));
        }
    }
    out
}

/// The catalog of all registered layers.
pub fn catalog() -> String {
    render_catalog(&registry())
}

const EXACT: &str = "0";
const FD: &str = "finite-difference gradient check of `log_prob`";

impl Catalogued for AffineCoupling {
    const ENTRIES: &'static [LayerDoc] = &[LayerDoc {
        kind: "affine_coupling",
        orientation: "bijective",
        title: "Affine coupling",
        mapping: "`x = [x1, x2]`, `(s_raw, t) = net(x1)`, `s = b·tanh(s_raw)` with bound `b`; `z = [x1, (x2 - t)·exp(-s)]`, inverse `x2 = z2·exp(s) + t`",
        contribution: "`-Σ s`",
        looseness: EXACT,
        oracle: "closed-form log-determinant of the triangular Jacobian; round-trip inversion; finite-difference gradient check of `log_prob`",
    }];
}

impl Catalogued for ActNorm {
    const ENTRIES: &'static [LayerDoc] = &[LayerDoc {
        kind: "actnorm",
        orientation: "bijective",
        title: "Activation normalization",
        mapping: "`z = (x - b)·exp(-l)` per feature; `b`, `l` set from the first batch's mean and log standard deviation",
        contribution: "`-Σ l`",
        looseness: EXACT,
        oracle: FD,
    }];
}

impl Catalogued for Elementwise {
    const ENTRIES: &'static [LayerDoc] = &[LayerDoc {
        kind: "elementwise",
        orientation: "bijective",
        title: "Elementwise bijections",
        mapping: "`affine z = (x - b)/a`, `logit z = log(x/(1-x))` (clamped to `[1e-6, 1-1e-6]`), `sigmoid`, `softplus`, `inverse_softplus z = log(exp(x) - 1)`",
        contribution: "`Σ log|dz/dx|`: `-log|a|`, `-log x - log(1-x)`, `log σ(x) + log σ(-x)`, `log σ(x)`, `x - log(exp(x) - 1)`",
        looseness: EXACT,
        oracle: "hand-derived closed-form densities of stacked affine/logit/softplus flows on 1000 random points",
    }];
}

impl Catalogued for Permutation {
    const ENTRIES: &'static [LayerDoc] = &[LayerDoc {
        kind: "permutation",
        orientation: "bijective",
        title: "Fixed permutation",
        mapping: "`z_j = x_perm[j]`; `reverse` is the reversing permutation",
        contribution: "`0`",
        looseness: EXACT,
        oracle: "round-trip inversion",
    }];
}

impl Catalogued for Abs {
    const ENTRIES: &'static [LayerDoc] = &[
        LayerDoc {
            kind: "abs",
            orientation: "inference",
            title: "Absolute value",
            mapping: "`z = |x|` on the chosen coordinates (sign(0) = +1); generation draws signs `s ~ p(s | z)` and sets `x = s·z`",
            contribution: "`log p(s | z)` with `s = sign(x)`; `-k log 2` for uniform signs",
            looseness: EXACT,
            oracle: "enumeration over sign patterns; half-normal base with uniform signs recovers `Σ log N(x_i)`",
        },
        LayerDoc {
            kind: "abs",
            orientation: "generative",
            title: "Absolute value (generative)",
            mapping: "`x = |z|`; inference draws signs `s ~ q(s | x)` and sets `z = s·x`",
            contribution: "`-log q(s | x)`",
            looseness: "`log q(s | x) - log p(s | x)`",
            oracle: "enumeration of the preimages `Σ_s p(s·x)`; right-inverse check",
        },
    ];
}

impl Catalogued for Max {
    const ENTRIES: &'static [LayerDoc] = &[
        LayerDoc {
            kind: "max",
            orientation: "inference",
            title: "Max",
            mapping: "`z = max_i x_i` (ties to the lowest index); generation draws the argmax `k ~ p(k | z)` and fills the rest below `z`",
            contribution: "`log p(k | z) + log p(x_-k | z)` with the fill density (half-normal below `z` by default)",
            looseness: EXACT,
            oracle: "enumeration over the argmax; order-statistic base with truncated-normal fill recovers `Σ log N(x_i)`",
        },
        LayerDoc {
            kind: "max",
            orientation: "generative",
            title: "Max (generative)",
            mapping: "`x = max_i z_i`; inference draws `k ~ q(k | x)` and a fill `z_-k < x`",
            contribution: "`-log q(k | x) - log q(z_-k | x)`",
            looseness: "`KL(q(z | x) ‖ p(z | x))`",
            oracle: "quadrature over the fills (up to two) and Monte Carlo importance sampling; right-inverse check",
        },
    ];
}

impl Catalogued for Sort {
    const ENTRIES: &'static [LayerDoc] = &[
        LayerDoc {
            kind: "sort",
            orientation: "inference",
            title: "Sort",
            mapping: "`z = sort(x)` ascending (stable); generation draws a permutation `I ~ p(I | z)` and scatters `z`",
            contribution: "`log p(I | z)`; `-log D!` for uniform permutations",
            looseness: EXACT,
            oracle: "enumeration over `D!` permutations; ordered-normal base recovers `Σ log N(x_i)`",
        },
        LayerDoc {
            kind: "sort",
            orientation: "generative",
            title: "Sort (generative)",
            mapping: "`x = sort(z)`; inference draws `I ~ q(I | x)` and scatters `x`",
            contribution: "`-log q(I | x)`",
            looseness: "`log q(I | x) - log p(I | x)`",
            oracle: "enumeration over arrangements `Σ_I p(scatter(x, I))`; right-inverse check",
        },
    ];
}

impl Catalogued for Slice {
    const ENTRIES: &'static [LayerDoc] = &[
        LayerDoc {
            kind: "slice",
            orientation: "inference",
            title: "Slice",
            mapping: "`z = x1` for `x = [x1, x2]`; generation draws `x2 ~ p(x2 | z)`",
            contribution: "`log p(x2 | z)`",
            looseness: EXACT,
            oracle: "direct evaluation of the joint density; right-inverse check",
        },
        LayerDoc {
            kind: "slice",
            orientation: "generative",
            title: "Augment",
            mapping: "`x = z1` for `z = [z1, z2]`; inference draws `z2 ~ q(z2 | x)`",
            contribution: "`-log q(z2 | x)`",
            looseness: "`KL(q(z2 | x) ‖ p(z2 | x))`",
            oracle: "quadrature over the augmented coordinates; a normal aux model with a normal base recovers `Σ log N(x_i)` in expectation",
        },
    ];
}

impl Catalogued for Rounding {
    const ENTRIES: &'static [LayerDoc] = &[
        LayerDoc {
            kind: "rounding",
            orientation: "inference",
            title: "Rounding",
            mapping: "`z = floor(x)`; generation draws in-bin offsets `u ~ p(u | z)` on `[0, 1)` and sets `x = z + u`",
            contribution: "`log p(x - z | z)`; `0` for uniform offsets",
            looseness: EXACT,
            oracle: "direct evaluation of bin mass times in-bin density",
        },
        LayerDoc {
            kind: "rounding",
            orientation: "generative",
            title: "Dequantization",
            mapping: "`x = floor(z)`; inference draws `u ~ q(u | x)` and sets `z = x + u`",
            contribution: "`-log q(u | x)`",
            looseness: "`KL(q(u | x) ‖ p(u | x))`",
            oracle: "midpoint quadrature of `∫ p(x + u) du` over the unit cell; Monte Carlo importance sampling",
        },
    ];
}

impl Catalogued for Relu {
    const ENTRIES: &'static [LayerDoc] = &[
        LayerDoc {
            kind: "relu",
            orientation: "inference",
            title: "ReLU",
            mapping: "`z = max(x, 0)`; generation replaces zeros with draws from the negative-part model",
            contribution: "`Σ_{x_i <= 0} log p(x_i)` under the negative-part model (half-normal on `(-inf, 0]` by default)",
            looseness: EXACT,
            oracle: "rectified-normal base with half-normal fill recovers `Σ log N(x_i)`",
        },
        LayerDoc {
            kind: "relu",
            orientation: "generative",
            title: "ReLU (generative)",
            mapping: "`x = max(z, 0)`; inference replaces zeros with draws `w <= 0`",
            contribution: "`-Σ log q(w_i)` over the zero coordinates",
            looseness: "`KL(q(w | x) ‖ p(w | x))`",
            oracle: "quadrature of the base over the negative half-line; right-inverse check",
        },
    ];
}

impl Catalogued for StochasticPermutation {
    const ENTRIES: &'static [LayerDoc] = &[LayerDoc {
        kind: "stochastic_permutation",
        orientation: "stochastic",
        title: "Stochastic permutation",
        mapping: "`z` is a uniformly random permutation of `x` in both directions",
        contribution: "`0`",
        looseness: "`log p(x) - log p(z)` averaged over permutations",
        oracle: "enumeration `log(Σ_π p(x_π) / D!)`; inserting the layer leaves `log_prob` unchanged at matched noise",
    }];
}

impl Catalogued for Vae {
    const ENTRIES: &'static [LayerDoc] = &[LayerDoc {
        kind: "vae",
        orientation: "stochastic",
        title: "Variational autoencoder",
        mapping: "encoder `z ~ q(z | x)`, decoder `x ~ p(x | z)`, both conditional diagonal normals",
        contribution: "`log p(x | z) - log q(z | x)`",
        looseness: "`KL(q(z | x) ‖ p(z | x))`",
        oracle: "quadrature over latents (up to two) and Monte Carlo importance sampling",
    }];
}

impl Catalogued for Ppca {
    const ENTRIES: &'static [LayerDoc] = &[LayerDoc {
        kind: "ppca",
        orientation: "stochastic",
        title: "Probabilistic PCA",
        mapping: "decoder `x ~ N(W z, σ² I)`; encoder is the exact posterior `N(M⁻¹ Wᵀ x, σ² M⁻¹)` with `M = WᵀW + σ² I`",
        contribution: "`log p(x | z) - log q(z | x)`",
        looseness: "`0` (exact posterior)",
        oracle: "analytic marginal `log N(x; 0, WWᵀ + σ² I)` and quadrature over a 1-D latent",
    }];
}
