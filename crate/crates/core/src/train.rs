//! Adam, learning-rate schedule and the minibatch training loop.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::ad::{Parameter, Parameterized, Tape, Tensor};
use crate::ckpt::TrainerState;
use crate::data::fmt_f64;
use crate::error::{Error, Result};
use crate::flow::Flow;
use crate::noise::Noise;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;
pub const CLIP_NORM: f64 = 10.0;
pub const EPOCH_ITERS: u64 = 1000;
pub const TRACE_EVERY: u64 = 100;

/// Rows used for data-dependent initialization.
const INIT_ROWS: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub iterations: u64,
    pub batch_size: usize,
    pub warmup_iters: u64,
    pub decay_per_epoch: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            iterations: 10_000,
            batch_size: 128,
            warmup_iters: 0,
            decay_per_epoch: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if !(self.decay_per_epoch > 0.0) {
            return Err(Error::config("decay per epoch must be positive"));
        }
        Ok(())
    }

    /// Linear warmup from 0 to `lr`, then one multiplicative decay per
    /// completed epoch.
    pub fn lr_at(&self, iteration: u64) -> f64 {
        if iteration < self.warmup_iters {
            return self.lr * iteration as f64 / self.warmup_iters as f64;
        }
        let epochs = (iteration - self.warmup_iters) / EPOCH_ITERS;
        self.lr * self.decay_per_epoch.powi(epochs as i32)
    }
}

/// Per-parameter Adam moments keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    pub step: u64,
    pub moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// One bias-corrected update. Parameters without a gradient entry are
    /// treated as having zero gradient.
    pub fn step(&mut self, params: Vec<&mut Parameter>, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        for p in &params {
            if let Some(g) = grads.get(&p.name) {
                if g.shape() != p.value.shape() {
                    return Err(Error::shape("adam", p.value.shape(), g.shape()));
                }
            }
            if let Some((m, _)) = self.moments.get(&p.name) {
                if m.shape() != p.value.shape() {
                    return Err(Error::shape("adam", p.value.shape(), m.shape()));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for p in params {
            let (m, v) = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())));
            let g = grads.get(&p.name);
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
                *w -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + EPSILON);
            }
        }
        Ok(())
    }
}

/// Scales gradients in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub iteration: u64,
    pub lr: f64,
    /// Minibatch mean of the negative objective at this iteration.
    pub mean_nats: f64,
}

pub fn write_trace_csv<W: Write>(mut out: W, trace: &[TraceRow]) -> Result<()> {
    writeln!(out, "iteration,lr,mean_nats")?;
    for r in trace {
        writeln!(out, "{},{},{}", r.iteration, fmt_f64(r.lr), fmt_f64(r.mean_nats))?;
    }
    Ok(())
}

/// Serializable generator position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha20Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Mutable training state: optimizer, batch generator and iteration count.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub adam: Adam,
    pub rng: ChaCha20Rng,
    pub iteration: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let rng = ChaCha20Rng::seed_from_u64(config.seed);
        Ok(Trainer {
            config,
            adam: Adam::new(),
            rng,
            iteration: 0,
        })
    }

    /// Continues from a checkpointed state.
    pub fn resume(config: TrainConfig, state: TrainerState) -> Result<Self> {
        let mut t = Trainer::new(config)?;
        if let Some(a) = state.adam {
            t.adam = a;
        }
        if let Some(r) = state.rng {
            t.rng = r.restore();
        }
        t.iteration = state.iteration;
        Ok(t)
    }

    pub fn state(&self) -> TrainerState {
        TrainerState {
            adam: Some(self.adam.clone()),
            rng: Some(RngState::capture(&self.rng)),
            iteration: self.iteration,
        }
    }

    /// One optimization step on a freshly drawn minibatch. Returns the
    /// minibatch loss in nats.
    pub fn step(&mut self, flow: &mut Flow, data: &Tensor) -> Result<f64> {
        let batch_seed = self.rng.next_u64();
        let n = data.rows();
        let idx: Vec<usize> = (0..self.config.batch_size).map(|_| self.rng.gen_range(0..n)).collect();
        let batch = data.select_rows(&idx);
        let lr = self.config.lr_at(self.iteration);
        let diverged = |loss: f64| Error::Diverged {
            iteration: self.iteration,
            batch_seed,
            loss,
        };

        let tape = Tape::new();
        let lp = flow.log_prob_var(tape.constant(batch), &mut Noise::from_seed(batch_seed))?;
        let loss = lp.mean().neg();
        let value = loss.item();
        if !value.is_finite() {
            return Err(diverged(value));
        }
        tape.backward(loss)?;
        let mut grads = tape.param_grads();
        drop(tape);
        if !clip_global_norm(&mut grads, CLIP_NORM).is_finite() {
            return Err(diverged(value));
        }
        self.adam.step(flow.parameters_mut(), &grads, lr)?;
        self.iteration += 1;
        Ok(value)
    }

    /// Runs until `config.iterations` steps have been taken, recording a
    /// trace row every [`TRACE_EVERY`] iterations.
    pub fn run(&mut self, flow: &mut Flow, data: &Tensor) -> Result<Vec<TraceRow>> {
        self.run_for(flow, data, self.config.iterations.saturating_sub(self.iteration))
    }

    pub fn run_for(&mut self, flow: &mut Flow, data: &Tensor, steps: u64) -> Result<Vec<TraceRow>> {
        let mut trace = Vec::new();
        for _ in 0..steps {
            let it = self.iteration;
            let lr = self.config.lr_at(it);
            let loss = self.step(flow, data)?;
            if it % TRACE_EVERY == 0 {
                trace.push(TraceRow {
                    iteration: it,
                    lr,
                    mean_nats: loss,
                });
            }
        }
        Ok(trace)
    }
}

/// Data-dependent initialization on the leading rows, then a full run.
pub fn train(flow: &mut Flow, data: &Tensor, config: TrainConfig) -> Result<(Trainer, Vec<TraceRow>)> {
    let mut trainer = Trainer::new(config)?;
    if flow.needs_init() {
        let rows: Vec<usize> = (0..data.rows().min(INIT_ROWS)).collect();
        flow.initialize(&data.select_rows(&rows), &mut Noise::stream(trainer.config.seed, 1))?;
    }
    let trace = trainer.run(flow, data)?;
    Ok((trainer, trace))
}
