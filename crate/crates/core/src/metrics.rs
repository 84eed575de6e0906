//! Likelihood and diversity metrics.
//!
//! The likelihood side reports the snapshot bound: draw a time uniformly,
//! noise the clean sequence to that time with the exact forward sampler,
//! and score the mean model's cross entropy on the clean tokens.  Averaged
//! over draws this estimates the per-token snapshot loss, which upper
//! bounds the true negative log likelihood up to an additive constant that
//! does not depend on the model; reports carry the bound with that "<="
//! reading, never as an exact likelihood.
//!
//! The diversity side is distribution free: the proportion of distinct
//! n-grams across a sample set (duplicates removed within each sequence
//! before pooling, totals kept raw) and the mean per-sample unigram
//! entropy, in nats.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec;
use alloc::vec::Vec;

use core::f64::consts::LN_2;

use rand::Rng;

use crate::denoiser::MeanModel;
use crate::kernel::JumpKernel;
use crate::math;
use crate::rng::{labeled_stream, position_stream};
use crate::schedule::Schedule;
use crate::uniformize::{noise_token, UniformizeError};

/// How tightly the derived report fields track their identities
/// (`ppl = exp(nll)`, `bpc = nll / ln 2`).
pub const REPORT_IDENTITY_TOL: f64 = 1e-12;

/// Largest n-gram order the report carries.
pub const MAX_NGRAM: usize = 3;

/// Stream label for the per-round seed draws inside
/// [`nll_bound_snapshot`].  The high half is `u32::MAX` so the label can
/// never collide with a `position_stream` id of a realistic batch under
/// the same seed.
const ROUND_SEED_LABEL: u64 = ((u32::MAX as u64) << 32) | 0xE7A1;

/// Per-sequence stream position reserved for the time draw; data positions
/// of a sequence use their own index and stay clear of it.
const TIME_DRAW_POSITION: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("need at least one sample sequence")]
    EmptyCorpus,
    #[error("need at least one token per sequence")]
    EmptySequence,
    #[error("n-gram order {n_gram} is outside 1..={MAX_NGRAM}")]
    NgramOutOfRange { n_gram: usize },
    #[error("no sequence is long enough to carry a {n_gram}-gram")]
    NoNgrams { n_gram: usize },
    #[error("corpus is ragged: expected length {expected}, found {got}")]
    RaggedCorpus { expected: usize, got: usize },
    #[error("token {token} is outside the vocabulary of size {m}")]
    TokenOutOfRange { token: u32, m: usize },
    #[error("model emits {model} tokens but the kernel has {kernel}")]
    SizeMismatch { model: usize, kernel: usize },
    #[error("need at least one Monte-Carlo round")]
    NoRounds,
    #[error(transparent)]
    Noise(#[from] UniformizeError),
}

/// One evaluation summary: likelihood bound plus diversity statistics.
///
/// `nll` is the per-token snapshot bound in nats; `bpc` and `ppl` are
/// derived from it, so the identities `ppl = exp(nll)` and
/// `bpc = nll / ln 2` hold by construction.  `distinct[i]` is the
/// distinct-(i+1) ratio.  `nll_stderr` is the standard error across
/// Monte-Carlo rounds (zero when only one round was run).
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub nll: f64,
    pub nll_stderr: f64,
    pub bpc: f64,
    pub ppl: f64,
    pub entropy_mean: f64,
    pub distinct: [f64; MAX_NGRAM],
    pub sequences: usize,
    pub length: usize,
}

impl EvalReport {
    /// Builds a report from the measured quantities, deriving `bpc` and
    /// `ppl` from `nll`.
    pub fn from_parts(
        nll: f64,
        nll_stderr: f64,
        entropy_mean: f64,
        distinct: [f64; MAX_NGRAM],
        sequences: usize,
        length: usize,
    ) -> Self {
        EvalReport {
            nll,
            nll_stderr,
            bpc: nll / LN_2,
            ppl: math::exp(nll),
            entropy_mean,
            distinct,
            sequences,
            length,
        }
    }

    /// Distinct-n ratio for `n_gram` in `1..=MAX_NGRAM`.
    pub fn distinct_ratio(&self, n_gram: usize) -> Option<f64> {
        if (1..=MAX_NGRAM).contains(&n_gram) {
            Some(self.distinct[n_gram - 1])
        } else {
            None
        }
    }
}

/// Proportion of distinct n-grams: the number of n-grams that are unique
/// within their own sequence, pooled across sequences without double
/// counting, over the raw total of n-gram slots.  Sequences shorter than
/// the order contribute nothing to either side.
pub fn distinct_n(samples: &[Vec<u32>], n_gram: usize) -> Result<f64, MetricsError> {
    if !(1..=MAX_NGRAM).contains(&n_gram) {
        return Err(MetricsError::NgramOutOfRange { n_gram });
    }
    if samples.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let mut pooled: BTreeSet<Vec<u32>> = BTreeSet::new();
    let mut total = 0usize;
    for sample in samples {
        if sample.len() < n_gram {
            continue;
        }
        total += sample.len() - n_gram + 1;
        for window in sample.windows(n_gram) {
            pooled.insert(window.to_vec());
        }
    }
    if total == 0 {
        return Err(MetricsError::NoNgrams { n_gram });
    }
    Ok(pooled.len() as f64 / total as f64)
}

/// Mean over samples of the Shannon entropy (nats) of each sample's
/// empirical unigram distribution.  Empty input contributes nothing and an
/// empty sample list yields zero.
pub fn unigram_entropy(samples: &[Vec<u32>]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let mut acc = 0.0;
    for sample in samples {
        acc += sample_entropy(sample);
    }
    acc / samples.len() as f64
}

fn sample_entropy(sample: &[u32]) -> f64 {
    if sample.is_empty() {
        return 0.0;
    }
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &token in sample {
        *counts.entry(token).or_insert(0) += 1;
    }
    let n = sample.len() as f64;
    let mut h = 0.0;
    for &c in counts.values() {
        let p = c as f64 / n;
        h -= p * math::ln(p);
    }
    h
}

/// Monte-Carlo snapshot bound on the corpus NLL, plus diversity metrics,
/// folded into one [`EvalReport`].
///
/// Each round draws one time per sequence, noises every position to that
/// time with the exact forward sampler, and scores the model's cross
/// entropy on the clean tokens.  `nll` is the mean per-token value across
/// rounds and `nll_stderr` its standard error.  Rounds use seeds drawn
/// from a dedicated substream of `seed`, so results are bit-reproducible
/// and independent of how the work is scheduled.
pub fn nll_bound_snapshot(
    model: &impl MeanModel,
    kern: &JumpKernel,
    sched: &Schedule,
    corpus: &[Vec<u32>],
    mc_samples: usize,
    seed: u64,
) -> Result<EvalReport, MetricsError> {
    if mc_samples == 0 {
        return Err(MetricsError::NoRounds);
    }
    if corpus.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let m = kern.len();
    if model.len() != m {
        return Err(MetricsError::SizeMismatch {
            model: model.len(),
            kernel: m,
        });
    }
    let length = corpus[0].len();
    if length == 0 {
        return Err(MetricsError::EmptySequence);
    }
    for sequence in corpus {
        if sequence.len() != length {
            return Err(MetricsError::RaggedCorpus {
                expected: length,
                got: sequence.len(),
            });
        }
        for &token in sequence {
            if token as usize >= m {
                return Err(MetricsError::TokenOutOfRange { token, m });
            }
        }
    }

    let tokens_per_round = (corpus.len() * length) as f64;
    let mut seed_rng = labeled_stream(seed, ROUND_SEED_LABEL);
    let mut round_means = Vec::with_capacity(mc_samples);
    let mut log_row = vec![0.0; m];
    for _ in 0..mc_samples {
        let round_seed: u64 = seed_rng.random();
        let mut round_total = 0.0;
        for (j, sequence) in corpus.iter().enumerate() {
            let mut t_rng = position_stream(round_seed, j as u32, TIME_DRAW_POSITION);
            let t: f64 = t_rng.random();
            for (l, &x0) in sequence.iter().enumerate() {
                let mut rng = position_stream(round_seed, j as u32, l as u32);
                let (x_t, _) = noise_token(kern, sched, x0, t, &mut rng)?;
                model.log_mean_into(x_t, t, &mut log_row);
                round_total -= log_row[x0 as usize];
            }
        }
        round_means.push(round_total / tokens_per_round);
    }

    let rounds = round_means.len() as f64;
    let nll = round_means.iter().sum::<f64>() / rounds;
    let nll_stderr = if round_means.len() < 2 {
        0.0
    } else {
        let var = round_means
            .iter()
            .map(|v| (v - nll) * (v - nll))
            .sum::<f64>()
            / (rounds - 1.0);
        math::sqrt(var / rounds)
    };

    let mut distinct = [0.0; MAX_NGRAM];
    for (i, slot) in distinct.iter_mut().enumerate() {
        *slot = distinct_n(corpus, i + 1)?;
    }
    Ok(EvalReport::from_parts(
        nll,
        nll_stderr,
        unigram_entropy(corpus),
        distinct,
        corpus.len(),
        length,
    ))
}
