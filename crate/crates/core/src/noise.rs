//! Explicit randomness handle passed into every stochastic evaluation.
//!
//! A [`Noise`] either draws live from a ChaCha20 stream or replays a
//! previously recorded [`NoiseBundle`], which is how stochastic objectives are
//! frozen for finite-difference checks.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

#[derive(Clone, Copy, Debug, PartialEq)]
enum Draw {
    Uniform(f64),
    Normal(f64),
    Word(u64),
}

/// Recorded sequence of primitive draws.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NoiseBundle {
    draws: Vec<Draw>,
}

impl NoiseBundle {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }
}

#[derive(Clone, Debug)]
enum Source {
    Live(ChaCha20Rng),
    Replay { bundle: NoiseBundle, pos: usize },
}

#[derive(Clone, Debug)]
pub struct Noise {
    source: Source,
    record: Option<Vec<Draw>>,
}

impl Noise {
    pub fn from_seed(seed: u64) -> Self {
        Self::from_rng(ChaCha20Rng::seed_from_u64(seed))
    }

    pub fn from_rng(rng: ChaCha20Rng) -> Self {
        Noise {
            source: Source::Live(rng),
            record: None,
        }
    }

    /// Independent stream `stream` of the generator seeded with `seed`.
    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self::from_rng(rng)
    }

    pub fn replay(bundle: NoiseBundle) -> Self {
        Noise {
            source: Source::Replay { bundle, pos: 0 },
            record: None,
        }
    }

    /// Starts recording every subsequent draw.
    pub fn recording(mut self) -> Self {
        self.record = Some(Vec::new());
        self
    }

    /// Draws recorded since [`Noise::recording`].
    pub fn take_bundle(&mut self) -> NoiseBundle {
        NoiseBundle {
            draws: self.record.take().unwrap_or_default(),
        }
    }

    /// Underlying generator, when live.
    pub fn rng(&self) -> Option<&ChaCha20Rng> {
        match &self.source {
            Source::Live(rng) => Some(rng),
            Source::Replay { .. } => None,
        }
    }

    fn next(&mut self, fresh: impl FnOnce(&mut ChaCha20Rng) -> Draw, kind: &str) -> Draw {
        let d = match &mut self.source {
            Source::Live(rng) => fresh(rng),
            Source::Replay { bundle, pos } => {
                let d = *bundle
                    .draws
                    .get(*pos)
                    .unwrap_or_else(|| panic!("noise bundle exhausted requesting {kind}"));
                *pos += 1;
                d
            }
        };
        if let Some(rec) = &mut self.record {
            rec.push(d);
        }
        d
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        match self.next(|r| Draw::Uniform(r.gen::<f64>()), "uniform") {
            Draw::Uniform(u) => u,
            other => panic!("noise replay mismatch: wanted uniform, recorded {other:?}"),
        }
    }

    pub fn normal(&mut self) -> f64 {
        match self.next(|r| Draw::Normal(r.sample(StandardNormal)), "normal") {
            Draw::Normal(z) => z,
            other => panic!("noise replay mismatch: wanted normal, recorded {other:?}"),
        }
    }

    /// A raw 64-bit word, used to seed derived streams.
    pub fn word(&mut self) -> u64 {
        match self.next(|r| Draw::Word(r.next_u64()), "word") {
            Draw::Word(w) => w,
            other => panic!("noise replay mismatch: wanted word, recorded {other:?}"),
        }
    }

    /// Uniform index in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    /// Index drawn from unnormalized log-weights by inverse CDF.
    pub fn categorical(&mut self, log_weights: &[f64]) -> usize {
        let m = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = log_weights.iter().map(|l| (l - m).exp()).collect();
        let total: f64 = w.iter().sum();
        let u = self.uniform() * total;
        let mut acc = 0.0;
        for (i, wi) in w.iter().enumerate() {
            acc += wi;
            if u < acc {
                return i;
            }
        }
        w.iter().rposition(|&x| x > 0.0).unwrap_or(0)
    }

    /// Uniform random permutation of `0..n` (Fisher-Yates).
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            p.swap(i, j);
        }
        p
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    pub fn uniforms(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.uniform()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replay_reproduces_draws() {
        let mut live = Noise::from_seed(3).recording();
        let a = (live.uniform(), live.normal(), live.word(), live.permutation(5));
        let mut replay = Noise::replay(live.take_bundle());
        let b = (replay.uniform(), replay.normal(), replay.word(), replay.permutation(5));
        assert_eq!(a, b);
    }

    #[test]
    fn streams_differ() {
        let mut a = Noise::stream(1, 0);
        let mut b = Noise::stream(1, 1);
        assert_ne!(a.word(), b.word());
        let mut c = Noise::stream(1, 0);
        let mut a2 = Noise::stream(1, 0);
        assert_eq!(c.word(), a2.word());
    }

    #[test]
    fn categorical_respects_zero_weight() {
        let mut n = Noise::from_seed(0);
        for _ in 0..1000 {
            let k = n.categorical(&[0.0, f64::NEG_INFINITY, 0.0]);
            assert_ne!(k, 1);
        }
    }
}
