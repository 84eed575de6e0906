//! Synthetic embedding layouts for benchmarks and smoke tests.
//!
//! Two deterministic families keyed by an explicit seed:
//!
//! * `Grid` -- tokens on an integer lattice in `d` dimensions, filled in
//!   mixed-radix order and offset away from the origin so every row has
//!   positive norm (the cosine metric rejects zero rows).  No randomness;
//!   the seed is ignored.
//! * `Clusters` -- about `sqrt(m)` Gaussian cluster centers with tokens
//!   assigned round robin, giving the non-uniform neighborhood structure
//!   the similarity kernels are designed for.

use gdds_core::kernel::{EmbeddingTable, KernelError};
use gdds_core::rng::labeled_stream;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Substream label for cluster draws, distinct from every label used by
/// the core crate's tests.
const SYNTH_LABEL: u64 = ((u32::MAX as u64) << 32) | 0x51;

/// Spread of cluster centers around the origin.
const CENTER_SIGMA: f64 = 2.0;
/// Spread of tokens around their cluster center.
const POINT_SIGMA: f64 = 0.35;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    Grid,
    Clusters,
}

impl SynthKind {
    pub fn parse(s: &str) -> Option<SynthKind> {
        match s {
            "grid" => Some(SynthKind::Grid),
            "clusters" => Some(SynthKind::Clusters),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SynthKind::Grid => "grid",
            SynthKind::Clusters => "clusters",
        }
    }
}

/// Build a synthetic embedding table.  Deterministic in `(kind, m, d, seed)`.
pub fn synth_embeddings(
    kind: SynthKind,
    m: usize,
    d: usize,
    seed: u64,
) -> Result<EmbeddingTable, KernelError> {
    let rows = match kind {
        SynthKind::Grid => grid_rows(m, d),
        SynthKind::Clusters => cluster_rows(m, d, seed),
    };
    EmbeddingTable::new(m, d, rows)
}

fn grid_rows(m: usize, d: usize) -> Vec<f64> {
    if d == 0 {
        return Vec::new(); // EmbeddingTable::new reports the shape error
    }
    // Smallest lattice side whose d-dimensional cube holds m points.
    let mut side = 1usize;
    while side.pow(d as u32) < m {
        side += 1;
    }
    let mut rows = Vec::with_capacity(m * d);
    for i in 0..m {
        let mut rest = i;
        for _ in 0..d {
            let digit = rest % side;
            rest /= side;
            rows.push(digit as f64 + 0.5);
        }
    }
    rows
}

fn cluster_rows(m: usize, d: usize, seed: u64) -> Vec<f64> {
    let mut rng = labeled_stream(seed, SYNTH_LABEL);
    let normal = StandardNormal;
    let centers = usize::max(1, (m as f64).sqrt().round() as usize);
    let mut center_rows = Vec::with_capacity(centers * d);
    for _ in 0..centers * d {
        let z: f64 = normal.sample(&mut rng);
        center_rows.push(CENTER_SIGMA * z);
    }
    let mut rows = Vec::with_capacity(m * d);
    for i in 0..m {
        let c = i % centers;
        for j in 0..d {
            let z: f64 = normal.sample(&mut rng);
            rows.push(center_rows[c * d + j] + POINT_SIGMA * z);
        }
    }
    rows
}

/// Draw uniform random tokens below `m`, one labeled substream per call.
/// Benchmarks use this for clean data so that data generation and noising
/// never share a stream.
pub fn random_tokens(m: usize, count: usize, seed: u64, label: u64) -> Vec<u32> {
    let mut rng = labeled_stream(seed, label);
    (0..count).map(|_| rng.random_range(0..m as u32)).collect()
}
