//! Exact forward noising by uniformization.
//!
//! Conditioned on the jump count `N_t ~ Poisson(fbar(t))`, the jump times of
//! the forward chain are distributed as sorted copies of
//! `fbar^{-1}(U * fbar(t))`, and the chain moves through the jump kernel at
//! each firing.  Sampling this construction is exact: no discretization of
//! the interval is involved, and the probability of an untouched token is
//! `P(N_t = 0) = alpha(t)`.

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Poisson};

use crate::kernel::{JumpKernel, KernelError};
use crate::rng::{position_stream, Stream};
use crate::schedule::{Schedule, ScheduleError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum UniformizeError {
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("jump path shape invalid: {reason}")]
    BadPath { reason: &'static str },
}

/// One token's forward trajectory: `states[0]` is the clean token, and
/// `states[k]` holds from `times[k-1]` (exclusive) onward.  Times are
/// strictly increasing; with continuous schedules ties occur with
/// probability zero and sampled paths never contain them.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpPath {
    times: Vec<f64>,
    states: Vec<u32>,
}

impl JumpPath {
    pub fn new(times: Vec<f64>, states: Vec<u32>) -> Result<Self, UniformizeError> {
        if states.len() != times.len() + 1 {
            return Err(UniformizeError::BadPath {
                reason: "need exactly one more state than jump times",
            });
        }
        for w in times.windows(2) {
            if !(w[0] < w[1]) {
                return Err(UniformizeError::BadPath {
                    reason: "jump times must increase strictly",
                });
            }
        }
        if times.first().is_some_and(|&t| !(t > 0.0)) {
            return Err(UniformizeError::BadPath {
                reason: "jump times must be positive",
            });
        }
        Ok(JumpPath { times, states })
    }

    pub fn n_jumps(&self) -> usize {
        self.times.len()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[u32] {
        &self.states
    }

    pub fn clean(&self) -> u32 {
        self.states[0]
    }

    pub fn endpoint(&self) -> u32 {
        *self.states.last().expect("states never empty")
    }

    /// State occupied at interior time `u`: the last jump at or before `u`
    /// has already fired.
    pub fn state_at(&self, u: f64) -> u32 {
        let idx = self.times.partition_point(|&t| t <= u);
        self.states[idx]
    }

    /// Iterator over jumps as `(time, from, to)`.
    pub fn jumps(&self) -> impl Iterator<Item = (f64, u32, u32)> + '_ {
        self.times
            .iter()
            .enumerate()
            .map(|(k, &t)| (t, self.states[k], self.states[k + 1]))
    }

    /// Jumps that change the state.  Uniformization epochs where the kernel
    /// redrew the current token are bookkeeping, not transitions; estimators
    /// built on the jump flow must skip them.
    pub fn true_jumps(&self) -> impl Iterator<Item = (f64, u32, u32)> + '_ {
        self.jumps().filter(|(_, from, to)| from != to)
    }
}

/// A corrupted observation: token value at a single time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Snapshot {
    pub token: u32,
    pub t: f64,
}

/// Per-position jump paths for one token sequence, all sharing a horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct SequencePathBatch {
    t: f64,
    paths: Vec<JumpPath>,
}

impl SequencePathBatch {
    pub fn horizon(&self) -> f64 {
        self.t
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn paths(&self) -> &[JumpPath] {
        &self.paths
    }

    pub fn path(&self, position: usize) -> &JumpPath {
        &self.paths[position]
    }

    /// Endpoint tokens, i.e. the noised sequence at the horizon.
    pub fn tokens(&self) -> Vec<u32> {
        self.paths.iter().map(JumpPath::endpoint).collect()
    }
}

/// Draw the jump times on `[0, t]`: a Poisson count at intensity `fbar(t)`,
/// then sorted pushforwards of uniforms through `fbar^{-1}`.
pub fn sample_jump_times(
    sched: &Schedule,
    t: f64,
    rng: &mut impl Rng,
) -> Result<Vec<f64>, UniformizeError> {
    let intensity = sched.integrated_rate(t)?;
    if intensity <= 0.0 {
        return Ok(Vec::new());
    }
    let poisson = Poisson::new(intensity).expect("intensity is positive and finite");
    let n = poisson.sample(rng) as usize;
    let mut times = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.random();
        let v = sched.inverse_integrated_rate(u * intensity)?;
        times.push(v.min(t));
    }
    times.sort_unstable_by(f64::total_cmp);
    Ok(times)
}

/// Noise a single token to time `t`, returning the endpoint and the full
/// path that produced it.
pub fn noise_token(
    kern: &JumpKernel,
    sched: &Schedule,
    x0: u32,
    t: f64,
    rng: &mut impl Rng,
) -> Result<(u32, JumpPath), UniformizeError> {
    if x0 as usize >= kern.len() {
        return Err(KernelError::TokenOutOfRange {
            token: x0,
            m: kern.len(),
        }
        .into());
    }
    let times = sample_jump_times(sched, t, rng)?;
    let mut states = Vec::with_capacity(times.len() + 1);
    states.push(x0);
    let mut current = x0;
    for &tk in &times {
        current = kern.sample_jump(tk, current, rng)?;
        states.push(current);
    }
    Ok((current, JumpPath { times, states }))
}

/// Noise every position of a sequence independently to the shared time `t`.
/// Position `l` draws from the substream `(seed, sequence, l)`, so the
/// result is identical no matter how positions are scheduled.
pub fn noise_sequence(
    kern: &JumpKernel,
    sched: &Schedule,
    tokens: &[u32],
    t: f64,
    seed: u64,
    sequence: u32,
) -> Result<SequencePathBatch, UniformizeError> {
    let mut paths = Vec::with_capacity(tokens.len());
    for (l, &x0) in tokens.iter().enumerate() {
        let mut rng = position_stream(seed, sequence, l as u32);
        let (_, path) = noise_token(kern, sched, x0, t, &mut rng)?;
        paths.push(path);
    }
    Ok(SequencePathBatch { t, paths })
}

/// Stream for one position of a noising batch; exposed so parallel drivers
/// can recreate exactly the streams [`noise_sequence`] uses.
pub fn noising_stream(seed: u64, sequence: u32, position: u32) -> Stream {
    position_stream(seed, sequence, position)
}

/// Full-horizon path `omega ~ q_{[0,1]}(. | x0)`.
pub fn full_path(
    kern: &JumpKernel,
    sched: &Schedule,
    x0: u32,
    rng: &mut impl Rng,
) -> Result<JumpPath, UniformizeError> {
    noise_token(kern, sched, x0, 1.0, rng).map(|(_, path)| path)
}
