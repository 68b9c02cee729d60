//! Stochastic layers: random permutation, VAE and probabilistic PCA.

use std::any::Any;

use super::{check_input, zeros_v, LayerSpec, Orientation, Transform};
use crate::ad::special::HALF_LN_2PI;
use crate::ad::{cholesky, Parameter, Parameterized, Tape, Tensor, Var};
use crate::dist::{DistSpec, Distribution};
use crate::error::{Error, Result};
use crate::noise::Noise;

/// Uniformly random shuffle of the feature axis in both directions.
#[derive(Clone, Debug)]
pub struct StochasticPermutation {
    dim: usize,
}

impl StochasticPermutation {
    pub fn new(dim: usize) -> Self {
        StochasticPermutation { dim }
    }

    fn shuffle<'t>(&self, v: Var<'t>, noise: &mut Noise) -> Result<Var<'t>> {
        let n = v.value().rows();
        let idx: Vec<usize> = (0..n).flat_map(|_| noise.permutation(self.dim)).collect();
        v.gather(1, &idx, self.dim)
    }
}

impl Transform for StochasticPermutation {
    fn kind(&self) -> &'static str {
        "stochastic_permutation"
    }

    fn orientation(&self) -> Orientation {
        Orientation::Stochastic
    }

    fn in_dim(&self) -> usize {
        self.dim
    }

    fn out_dim(&self) -> usize {
        self.dim
    }

    fn inference<'t>(&self, x: Var<'t>, noise: &mut Noise) -> Result<(Var<'t>, Var<'t>)> {
        let n = check_input(self, &x.value(), self.dim)?;
        Ok((self.shuffle(x, noise)?, zeros_v(x.tape(), n)))
    }

    fn generate(&self, z: &Tensor, noise: &mut Noise) -> Result<Tensor> {
        check_input(self, z, self.dim)?;
        let tape = Tape::new();
        let x = self.shuffle(tape.constant(z.clone()), noise)?;
        let out = (*x.value()).clone();
        Ok(out)
    }

    fn spec(&self) -> LayerSpec {
        LayerSpec::StochasticPermutation
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

impl Parameterized for StochasticPermutation {
    fn parameters(&self) -> Vec<&Parameter> {
        Vec::new()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        Vec::new()
    }
}

/// Variational autoencoder layer with Gaussian encoder `q(z|x)` and decoder
/// `p(x|z)`; `V = log p(x|z) - log q(z|x)` at a single posterior draw.
#[derive(Clone, Debug)]
pub struct Vae {
    dim: usize,
    latent: usize,
    encoder: Distribution,
    decoder: Distribution,
}

impl Vae {
    pub fn new(
        prefix: &str,
        dim: usize,
        latent: usize,
        encoder_hidden: &[usize],
        decoder_hidden: &[usize],
        noise: &mut Noise,
    ) -> Result<Self> {
        if latent == 0 {
            return Err(Error::config("vae latent size must be positive"));
        }
        let encoder = Distribution::build(
            &DistSpec::ConditionalDiagonalNormal {
                hidden: encoder_hidden.to_vec(),
            },
            latent,
            Some(dim),
            &format!("{prefix}.encoder"),
            noise,
        )?;
        let decoder = Distribution::build(
            &DistSpec::ConditionalDiagonalNormal {
                hidden: decoder_hidden.to_vec(),
            },
            dim,
            Some(latent),
            &format!("{prefix}.decoder"),
            noise,
        )?;
        Ok(Vae {
            dim,
            latent,
            encoder,
            decoder,
        })
    }

    pub fn encoder(&self) -> &Distribution {
        &self.encoder
    }

    pub fn decoder(&self) -> &Distribution {
        &self.decoder
    }

    pub fn encoder_mut(&mut self) -> &mut Distribution {
        &mut self.encoder
    }

    pub fn decoder_mut(&mut self) -> &mut Distribution {
        &mut self.decoder
    }

    fn hidden(d: &Distribution) -> Vec<usize> {
        match d.spec() {
            DistSpec::ConditionalDiagonalNormal { hidden } => hidden,
            _ => Vec::new(),
        }
    }
}

impl Transform for Vae {
    fn kind(&self) -> &'static str {
        "vae"
    }

    fn orientation(&self) -> Orientation {
        Orientation::Stochastic
    }

    fn in_dim(&self) -> usize {
        self.dim
    }

    fn out_dim(&self) -> usize {
        self.latent
    }

    fn inference<'t>(&self, x: Var<'t>, noise: &mut Noise) -> Result<(Var<'t>, Var<'t>)> {
        let n = check_input(self, &x.value(), self.dim)?;
        let (z, lq) = self.encoder.sample_with_log_prob(x.tape(), n, Some(x), noise)?;
        let lp = self.decoder.log_prob(x, Some(z))?;
        Ok((z, lp.sub(lq)?))
    }

    fn generate(&self, z: &Tensor, noise: &mut Noise) -> Result<Tensor> {
        check_input(self, z, self.latent)?;
        self.decoder.sample_tensor(z.rows(), Some(z), noise)
    }

    fn spec(&self) -> LayerSpec {
        LayerSpec::Vae {
            latent: self.latent,
            encoder_hidden: Self::hidden(&self.encoder),
            decoder_hidden: Self::hidden(&self.decoder),
        }
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

impl Parameterized for Vae {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut p = self.encoder.parameters();
        p.extend(self.decoder.parameters());
        p
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.encoder.parameters_mut();
        p.extend(self.decoder.parameters_mut());
        p
    }
}

/// Relative pivot below which `W^T W` is treated as singular.
const RANK_TOLERANCE: f64 = 1e-12;

/// Probabilistic PCA layer `x = W z + sigma * eps` whose inference pass samples
/// the exact Gaussian posterior, making the per-sample bound tight.
#[derive(Clone, Debug)]
pub struct Ppca {
    weight: Parameter,
    log_sigma: Parameter,
}

impl Ppca {
    pub fn new(prefix: &str, dim: usize, latent: usize, noise: &mut Noise) -> Result<Self> {
        if latent == 0 || latent > dim {
            return Err(Error::config(format!(
                "ppca latent size {latent} must be in 1..={dim}"
            )));
        }
        let w: Vec<f64> = (0..dim * latent)
            .map(|i| (i / latent == i % latent) as u8 as f64 + 0.1 * noise.normal())
            .collect();
        Ok(Ppca {
            weight: Parameter::new(format!("{prefix}.weight"), Tensor::from_parts(vec![dim, latent], w)),
            log_sigma: Parameter::new(format!("{prefix}.log_sigma"), Tensor::vector(vec![0.0])),
        })
    }

    /// Replaces `W` and `sigma`.
    pub fn set(&mut self, weight: Tensor, sigma: f64) -> Result<()> {
        if weight.shape() != self.weight.value.shape() {
            return Err(Error::shape("ppca", weight.shape(), self.weight.value.shape()));
        }
        if !(sigma > 0.0) {
            return Err(Error::config("ppca sigma must be positive"));
        }
        self.weight.value = weight;
        self.log_sigma.value = Tensor::vector(vec![sigma.ln()]);
        Ok(())
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight.value
    }

    pub fn sigma(&self) -> f64 {
        self.log_sigma.value.data()[0].exp()
    }

    fn dim(&self) -> usize {
        self.weight.value.rows()
    }

    fn latent(&self) -> usize {
        self.weight.value.cols()
    }

    fn check_rank(&self) -> Result<()> {
        let w = &self.weight.value;
        let l = self.latent();
        let wt = w.transpose()?;
        let mut g = vec![0.0; l * l];
        for i in 0..l {
            for j in 0..l {
                g[i * l + j] = wt.row(i).iter().zip(wt.row(j)).map(|(a, b)| a * b).sum();
            }
        }
        let scale = (0..l).map(|i| g[i * l + i]).fold(0.0, f64::max);
        let chol = cholesky(&Tensor::from_parts(vec![l, l], g));
        let ok = chol.is_some_and(|c| (0..l).all(|i| c[i * l + i].powi(2) > RANK_TOLERANCE * scale));
        if ok && scale > 0.0 {
            Ok(())
        } else {
            Err(Error::domain("ppca", "weight matrix is rank deficient"))
        }
    }

    /// Posterior mean rows `[n, latent]` and shared covariance `[latent, latent]`.
    pub fn posterior(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let tape = Tape::new();
        let (mean, _, minv, s2) = self.posterior_vars(tape.constant(x.clone()))?;
        let cov = minv.value().map(|v| v * s2.value().data()[0]);
        let mean = (*mean.value()).clone();
        Ok((mean, cov))
    }

    /// `(mean, M, M^-1, sigma^2)` with `M = W^T W + sigma^2 I`.
    #[allow(clippy::type_complexity)]
    fn posterior_vars<'t>(&self, x: Var<'t>) -> Result<(Var<'t>, Var<'t>, Var<'t>, Var<'t>)> {
        self.check_rank()?;
        let tape = x.tape();
        let l = self.latent();
        let w = tape.param(&self.weight);
        let s2 = tape.param(&self.log_sigma).mul_scalar(2.0).exp();
        let mut eye = Tensor::zeros(&[l, l]);
        for i in 0..l {
            eye.data_mut()[i * l + i] = 1.0;
        }
        let m = w.transpose()?.matmul(w)?.add(tape.constant(eye).mul(s2)?)?;
        let minv = m.inv_spd()?;
        let mean = x.matmul(w)?.matmul(minv)?;
        Ok((mean, m, minv, s2))
    }
}

impl Transform for Ppca {
    fn kind(&self) -> &'static str {
        "ppca"
    }

    fn orientation(&self) -> Orientation {
        Orientation::Stochastic
    }

    fn in_dim(&self) -> usize {
        self.dim()
    }

    fn out_dim(&self) -> usize {
        self.latent()
    }

    fn inference<'t>(&self, x: Var<'t>, noise: &mut Noise) -> Result<(Var<'t>, Var<'t>)> {
        let n = check_input(self, &x.value(), self.dim())?;
        let tape = x.tape();
        let (d, l) = (self.dim() as f64, self.latent());
        let (mean, m, minv, s2) = self.posterior_vars(x)?;

        // Draw z from the exact posterior; the draw itself is detached.
        let s2v = s2.value().data()[0];
        let cov = minv.value().map(|v| v * s2v);
        let chol = cholesky(&cov).ok_or_else(|| Error::domain("ppca", "posterior covariance"))?;
        let mv = mean.value();
        let mut z = Vec::with_capacity(n * l);
        for i in 0..n {
            let eps = noise.normals(l);
            for r in 0..l {
                let s: f64 = (0..=r).map(|c| chol[r * l + c] * eps[c]).sum();
                z.push(mv.row(i)[r] + s);
            }
        }
        let z = tape.constant(Tensor::from_parts(vec![n, l], z));

        // log q(z|x) with precision M / sigma^2 and log det cov = l log sigma^2 - log det M.
        let ls = tape.param(&self.log_sigma);
        let diff = z.sub(mean)?;
        let quad = diff.matmul(m)?.mul(diff)?.sum_axis(1)?.div(s2)?;
        let half_logdet = ls.mul_scalar(l as f64).sub(m.logdet_spd()?.mul_scalar(0.5))?;
        let lq = quad
            .mul_scalar(-0.5)
            .sub(half_logdet)?
            .add_scalar(-(l as f64) * HALF_LN_2PI);

        // log p(x|z) = log N(x; W z, sigma^2 I)
        let w = tape.param(&self.weight);
        let r = x.sub(z.matmul(w.transpose()?)?)?;
        let lp = r
            .square()
            .sum_axis(1)?
            .div(s2)?
            .mul_scalar(-0.5)
            .sub(ls.mul_scalar(d))?
            .add_scalar(-d * HALF_LN_2PI);
        Ok((z, lp.sub(lq)?))
    }

    fn generate(&self, z: &Tensor, noise: &mut Noise) -> Result<Tensor> {
        check_input(self, z, self.latent())?;
        let w = &self.weight.value;
        let sigma = self.sigma();
        let (d, l) = (self.dim(), self.latent());
        let mut x = Vec::with_capacity(z.rows() * d);
        for i in 0..z.rows() {
            for r in 0..d {
                let mean: f64 = (0..l).map(|c| w.row(r)[c] * z.row(i)[c]).sum();
                x.push(mean + sigma * noise.normal());
            }
        }
        Tensor::new(vec![z.rows(), d], x)
    }

    fn spec(&self) -> LayerSpec {
        LayerSpec::Ppca {
            latent: self.latent(),
        }
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

impl Parameterized for Ppca {
    fn parameters(&self) -> Vec<&Parameter> {
        vec![&self.weight, &self.log_sigma]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.weight, &mut self.log_sigma]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stochastic_permutation_frequencies() {
        let p = StochasticPermutation::new(3);
        let mut noise = Noise::from_seed(1);
        let x = Tensor::new(vec![100_000, 3], [0.0, 1.0, 2.0].repeat(100_000)).unwrap();
        let (z, v) = p.inference_tensor(&x, &mut noise).unwrap();
        assert!(v.iter().all(|&v| v == 0.0));
        let mut counts = std::collections::HashMap::new();
        for i in 0..z.rows() {
            let mut sorted = z.row(i).to_vec();
            sorted.sort_by(f64::total_cmp);
            assert_eq!(sorted, vec![0.0, 1.0, 2.0]);
            *counts.entry(z.row(i).iter().map(|v| *v as u8).collect::<Vec<_>>()).or_insert(0) += 1;
        }
        assert_eq!(counts.len(), 6);
        for c in counts.values() {
            assert!((*c as f64 / 1e5 - 1.0 / 6.0).abs() < 0.01);
        }
    }

    #[test]
    fn ppca_posterior_by_hand() {
        let mut p = Ppca::new("p", 1, 1, &mut Noise::from_seed(0)).unwrap();
        p.set(Tensor::new(vec![1, 1], vec![1.0]).unwrap(), 1.0).unwrap();
        let (mean, cov) = p.posterior(&Tensor::zeros(&[1, 1])).unwrap();
        assert_eq!(mean.data(), &[0.0]);
        assert!((cov.data()[0] - 0.5).abs() < 1e-15);
        p.set(Tensor::new(vec![1, 1], vec![1.0]).unwrap(), 1e4).unwrap();
        let (mean, _) = p.posterior(&Tensor::from_rows(&[[3.0]]).unwrap()).unwrap();
        assert!(mean.data()[0].abs() < 1e-6);
    }

    #[test]
    fn ppca_rejects_rank_deficient_weights() {
        let mut p = Ppca::new("p", 3, 2, &mut Noise::from_seed(0)).unwrap();
        p.set(Tensor::new(vec![3, 2], vec![1.0, 2.0, 2.0, 4.0, 0.5, 1.0]).unwrap(), 1.0)
            .unwrap();
        let err = p
            .inference_tensor(&Tensor::zeros(&[1, 3]), &mut Noise::from_seed(0))
            .unwrap_err();
        assert!(matches!(err, Error::Domain { .. }));
    }

    #[test]
    fn ppca_sample_is_exact_marginal() {
        // Every posterior draw gives V + log p(z) = log N(x; 0, W W^T + sigma^2 I).
        let mut p = Ppca::new("p", 2, 1, &mut Noise::from_seed(0)).unwrap();
        p.set(Tensor::new(vec![2, 1], vec![0.8, -1.5]).unwrap(), 0.6).unwrap();
        let x = Tensor::from_rows(&[[0.3, 1.1]]).unwrap();
        let cov: [[f64; 2]; 2] = [[0.64 + 0.36, -1.2], [-1.2, 2.25 + 0.36]];
        let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
        let (a, b) = (0.3, 1.1);
        let quad = (cov[1][1] * a * a - 2.0 * cov[0][1] * a * b + cov[0][0] * b * b) / det;
        let exact = -0.5 * quad - 0.5 * det.ln() - 2.0 * HALF_LN_2PI;
        let mut noise = Noise::from_seed(4);
        for _ in 0..20 {
            let (z, v) = p.inference_tensor(&x, &mut noise).unwrap();
            let lpz = -0.5 * z.data()[0].powi(2) - HALF_LN_2PI;
            assert!((v[0] + lpz - exact).abs() < 1e-12);
        }
    }
}
