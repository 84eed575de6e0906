//! Tabular denoisers and their training loop.
//!
//! A denoiser here is a table of logits indexed by (observed token, time
//! bin) with a softmax over output tokens.  Two roles exist: a `Mean` model
//! predicts the distribution of the clean token behind a snapshot, a `Jump`
//! model predicts where a reverse jump lands.  Small and exactly
//! differentiable, these are the models every objective and sampler in the
//! crate is exercised against.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::kernel::JumpKernel;
use crate::math;
use crate::oracle::DataDistribution;
use crate::rng::labeled_stream;
use crate::schedule::Schedule;
use crate::uniformize::{full_path, noise_token, UniformizeError};

/// Number of time bins in the tabular parameterization.
pub const TIME_BINS: usize = 32;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DenoiserError {
    #[error("vocabulary must have at least two tokens, got {m}")]
    VocabTooSmall { m: usize },
    #[error("need at least one time bin")]
    NoBins,
    #[error("invalid training configuration: {reason}")]
    BadConfig { reason: &'static str },
    #[error("training diverged at step {step}: loss = {loss}")]
    NonFinite { step: usize, loss: f64 },
    #[error(transparent)]
    Noise(#[from] UniformizeError),
}

/// What the output distribution of a model means.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// Distribution of the clean token given the snapshot.
    Mean,
    /// Distribution of the reverse-jump destination given the post-jump
    /// state of the forward path.
    Jump,
}

/// Anything that can produce the posterior-mean distribution of the clean
/// token for a snapshot.
pub trait MeanModel {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// Writes the predicted distribution of `x_0` given `(x_t, t)`.
    fn mean_into(&self, x_t: u32, t: f64, out: &mut [f64]);
    /// Natural-log probabilities; the default floors at 1e-300 to keep
    /// cross entropies finite.
    fn log_mean_into(&self, x_t: u32, t: f64, out: &mut [f64]) {
        self.mean_into(x_t, t, out);
        for v in out.iter_mut() {
            *v = math::ln(v.max(1e-300));
        }
    }
}

/// Anything that can produce a reverse-jump destination distribution.
pub trait JumpModel {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// Writes the predicted distribution of the pre-jump token given the
    /// post-jump token `x` at time `t`.
    fn jump_into(&self, x: u32, t: f64, out: &mut [f64]);
    fn log_jump_into(&self, x: u32, t: f64, out: &mut [f64]) {
        self.jump_into(x, t, out);
        for v in out.iter_mut() {
            *v = math::ln(v.max(1e-300));
        }
    }
}

/// Softmax table over output tokens, one logit row per (input token, time
/// bin) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularDenoiser {
    m: usize,
    bins: usize,
    role: Role,
    logits: Vec<f64>,
}

impl TabularDenoiser {
    pub fn new(m: usize, role: Role) -> Result<Self, DenoiserError> {
        Self::with_bins(m, role, TIME_BINS)
    }

    pub fn with_bins(m: usize, role: Role, bins: usize) -> Result<Self, DenoiserError> {
        if m < 2 {
            return Err(DenoiserError::VocabTooSmall { m });
        }
        if bins == 0 {
            return Err(DenoiserError::NoBins);
        }
        Ok(TabularDenoiser {
            m,
            bins,
            role,
            logits: vec![0.0; m * bins * m],
        })
    }

    pub fn len(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn params(&self) -> &[f64] {
        &self.logits
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    /// Time bin containing `t`; `t = 1` lands in the last bin.
    pub fn bin_of(&self, t: f64) -> usize {
        let raw = math::floor(t * self.bins as f64) as i64;
        raw.clamp(0, self.bins as i64 - 1) as usize
    }

    fn offset(&self, x: u32, bin: usize) -> usize {
        (x as usize * self.bins + bin) * self.m
    }

    fn row(&self, x: u32, t: f64) -> &[f64] {
        let start = self.offset(x, self.bin_of(t));
        &self.logits[start..start + self.m]
    }

    /// Softmax probabilities for input `(x, t)`.
    pub fn predict_into(&self, x: u32, t: f64, out: &mut [f64]) {
        let row = self.row(x, t);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (o, &l) in out.iter_mut().zip(row) {
            let e = math::exp(l - max);
            *o = e;
            total += e;
        }
        for o in out.iter_mut() {
            *o /= total;
        }
    }

    pub fn predict(&self, x: u32, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.m];
        self.predict_into(x, t, &mut out);
        out
    }

    /// Log-softmax, computed without exponentiating back.
    pub fn log_predict_into(&self, x: u32, t: f64, out: &mut [f64]) {
        let row = self.row(x, t);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_z = math::ln(row.iter().map(|&l| math::exp(l - max)).sum::<f64>()) + max;
        for (o, &l) in out.iter_mut().zip(row) {
            *o = l - log_z;
        }
    }

    /// Independent Gaussian logits with the given standard deviation.
    pub fn randomize(&mut self, rng: &mut impl Rng, scale: f64) {
        for l in self.logits.iter_mut() {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            *l = scale * z;
        }
    }

    /// Cross-entropy `-log p(target | x, t)` and its gradient with respect
    /// to the logits, accumulated into `grad` (full parameter length).
    pub fn nll_and_grad(&self, x: u32, t: f64, target: u32, grad: &mut [f64]) -> f64 {
        self.nll_and_grad_weighted(x, t, target, 1.0, grad)
    }

    /// As [`Self::nll_and_grad`], scaling both the returned loss term and
    /// the accumulated gradient by `weight`.
    pub fn nll_and_grad_weighted(
        &self,
        x: u32,
        t: f64,
        target: u32,
        weight: f64,
        grad: &mut [f64],
    ) -> f64 {
        debug_assert_eq!(grad.len(), self.logits.len());
        let start = self.offset(x, self.bin_of(t));
        let row = &self.logits[start..start + self.m];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for &l in row {
            total += math::exp(l - max);
        }
        let log_z = math::ln(total) + max;
        for (j, &l) in row.iter().enumerate() {
            let p = math::exp(l - log_z);
            grad[start + j] += weight * p;
        }
        grad[start + target as usize] -= weight;
        weight * (log_z - row[target as usize])
    }
}

impl MeanModel for TabularDenoiser {
    fn len(&self) -> usize {
        self.m
    }

    fn mean_into(&self, x_t: u32, t: f64, out: &mut [f64]) {
        assert!(
            self.role == Role::Mean,
            "mean queries require a Mean-role denoiser"
        );
        self.predict_into(x_t, t, out);
    }

    fn log_mean_into(&self, x_t: u32, t: f64, out: &mut [f64]) {
        assert!(
            self.role == Role::Mean,
            "mean queries require a Mean-role denoiser"
        );
        self.log_predict_into(x_t, t, out);
    }
}

impl JumpModel for TabularDenoiser {
    fn len(&self) -> usize {
        self.m
    }

    fn jump_into(&self, x: u32, t: f64, out: &mut [f64]) {
        assert!(
            self.role == Role::Jump,
            "jump queries require a Jump-role denoiser"
        );
        self.predict_into(x, t, out);
    }

    fn log_jump_into(&self, x: u32, t: f64, out: &mut [f64]) {
        assert!(
            self.role == Role::Jump,
            "jump queries require a Jump-role denoiser"
        );
        self.log_predict_into(x, t, out);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Momentum { beta: f64 },
    AdamLike { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::AdamLike {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct OptimizerState {
    kind: OptimizerKind,
    lr: f64,
    first: Vec<f64>,
    second: Vec<f64>,
    steps_taken: usize,
}

impl OptimizerState {
    fn new(kind: OptimizerKind, lr: f64, dim: usize) -> Self {
        let slots = match kind {
            OptimizerKind::Sgd => 0,
            OptimizerKind::Momentum { .. } => 1,
            OptimizerKind::AdamLike { .. } => 2,
        };
        OptimizerState {
            kind,
            lr,
            first: vec![0.0; if slots >= 1 { dim } else { 0 }],
            second: vec![0.0; if slots >= 2 { dim } else { 0 }],
            steps_taken: 0,
        }
    }

    fn apply(&mut self, params: &mut [f64], grad: &[f64]) {
        self.steps_taken += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Momentum { beta } => {
                for ((p, g), v) in params.iter_mut().zip(grad).zip(self.first.iter_mut()) {
                    *v = beta * *v + g;
                    *p -= self.lr * *v;
                }
            }
            OptimizerKind::AdamLike { beta1, beta2, eps } => {
                let t = self.steps_taken as f64;
                let c1 = 1.0 - math::powf(beta1, t);
                let c2 = 1.0 - math::powf(beta2, t);
                for (((p, g), m1), m2) in params
                    .iter_mut()
                    .zip(grad)
                    .zip(self.first.iter_mut())
                    .zip(self.second.iter_mut())
                {
                    *m1 = beta1 * *m1 + (1.0 - beta1) * g;
                    *m2 = beta2 * *m2 + (1.0 - beta2) * g * g;
                    let mhat = *m1 / c1;
                    let vhat = *m2 / c2;
                    *p -= self.lr * mhat / (math::sqrt(vhat) + eps);
                }
            }
        }
    }
}

/// Where clean tokens come from during training.
#[derive(Debug, Clone, Copy)]
pub enum TrainSource<'a> {
    /// Draw i.i.d. tokens from a categorical distribution.
    Categorical(&'a DataDistribution),
    /// Draw tokens uniformly from a pool (a flattened corpus).
    Tokens(&'a [u32]),
}

impl TrainSource<'_> {
    fn draw(&self, rng: &mut impl Rng) -> Result<u32, DenoiserError> {
        match self {
            TrainSource::Categorical(dist) => Ok(dist.sample(rng)),
            TrainSource::Tokens(pool) => {
                if pool.is_empty() {
                    return Err(DenoiserError::BadConfig {
                        reason: "token pool is empty",
                    });
                }
                Ok(pool[rng.random_range(0..pool.len())])
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.05,
            steps: 500,
            batch: 32,
            optimizer: OptimizerKind::default(),
            seed: 0,
        }
    }
}

/// One optimizer step's summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Stochastic training.  `Mean` models minimize the snapshot cross entropy
/// `-log p(x_0 | x_t, t)` with `x_t` drawn by exact forward noising and `t`
/// uniform per sample.  `Jump` models minimize the per-jump cross entropy
/// along full forward paths, predicting each pre-jump token from the
/// post-jump state.  Each step draws from its own labeled substream, so
/// results are bit-reproducible for a given seed.
pub fn train(
    model: &mut TabularDenoiser,
    kern: &JumpKernel,
    sched: &Schedule,
    source: TrainSource,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&TrainRecord),
) -> Result<Vec<TrainRecord>, DenoiserError> {
    if kern.len() != model.len() {
        return Err(DenoiserError::BadConfig {
            reason: "kernel and model vocabulary sizes differ",
        });
    }
    if !(cfg.lr > 0.0) {
        return Err(DenoiserError::BadConfig {
            reason: "learning rate must be positive",
        });
    }
    if cfg.batch == 0 {
        return Err(DenoiserError::BadConfig {
            reason: "batch size must be positive",
        });
    }
    let dim = model.params().len();
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.lr, dim);
    let mut grad = vec![0.0; dim];
    let mut records = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rng = labeled_stream(cfg.seed, step as u64);
        grad.fill(0.0);
        let mut loss_sum = 0.0;
        let mut terms = 0usize;
        for _ in 0..cfg.batch {
            let x0 = source.draw(&mut rng)?;
            match model.role {
                Role::Mean => {
                    let t = rng.random::<f64>();
                    let (x_t, _) = noise_token(kern, sched, x0, t, &mut rng)?;
                    loss_sum += model.nll_and_grad(x_t, t, x0, &mut grad);
                    terms += 1;
                }
                Role::Jump => {
                    let path = full_path(kern, sched, x0, &mut rng)?;
                    for (time, from, to) in path.true_jumps() {
                        loss_sum += model.nll_and_grad(to, time, from, &mut grad);
                        terms += 1;
                    }
                }
            }
        }
        let scale = 1.0 / cfg.batch as f64;
        let mut norm_sq = 0.0;
        for g in grad.iter_mut() {
            *g *= scale;
            norm_sq += *g * *g;
        }
        let loss = if terms == 0 { 0.0 } else { loss_sum * scale };
        let grad_norm = math::sqrt(norm_sq);
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(DenoiserError::NonFinite { step, loss });
        }
        opt.apply(model.params_mut(), &grad);
        let record = TrainRecord {
            step,
            loss,
            grad_norm,
        };
        on_step(&record);
        records.push(record);
    }
    Ok(records)
}
