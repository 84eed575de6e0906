//! Jump kernels: the column-stochastic mixing distributions `F_t`.
//!
//! A jump kernel fixes, for every time `t` and current token `y`, the
//! distribution `F_t(., y)` of the landing state when the chain fires.  Four
//! variants are provided: `Uniform` (self-transitions included), `Absorb`
//! (all mass on a reserved mask token), and two similarity-induced kernels
//! driven by token embeddings, one restricted to a k-NN graph mixed with a
//! uniform escape term and one dense.
//!
//! Columns of the similarity kernels carry zero diagonal; affinities are
//! `exp(-d(x, y) / (tau(t) sqrt(rho_x rho_y)))` with self-tuning bandwidths
//! `rho` taken from the distance to a fixed-order neighbor.  Sampling never
//! materializes an m x m matrix: the dense variant walks candidate blocks
//! twice, once for the normalizer and once for the inverse-CDF draw.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::math;

/// Smallest admissible self-tuning bandwidth.  Duplicate embeddings would
/// give `rho = 0`; they are floored here and reported through `log`.
pub const BANDWIDTH_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KernelError {
    #[error("vocabulary too small: {m}")]
    VocabTooSmall { m: usize },
    #[error("mask id {mask} outside vocabulary of {m}")]
    MaskOutOfRange { mask: u32, m: usize },
    #[error("embedding table expects {expected} values, got {got}")]
    BadShape { expected: usize, got: usize },
    #[error("embedding entry {index} is not finite")]
    NonFinite { index: usize },
    #[error("cosine metric undefined for zero embedding row {index}")]
    ZeroRow { index: usize },
    #[error("neighbor order {k} out of range for vocabulary of {m}")]
    BadNeighborOrder { k: usize, m: usize },
    #[error("temperature must be positive, got {tau0}")]
    BadTemperature { tau0: f64 },
    #[error("block size must be positive")]
    ZeroBlockSize,
    #[error("token {token} outside vocabulary of {m}")]
    TokenOutOfRange { token: u32, m: usize },
    #[error("time {t} outside the unit interval")]
    TimeOutOfRange { t: f64 },
}

fn check_time(t: f64) -> Result<(), KernelError> {
    if !(0.0..=1.0).contains(&t) || t.is_nan() {
        return Err(KernelError::TimeOutOfRange { t });
    }
    Ok(())
}

/// Embedding distance convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    /// Squared Euclidean distance.
    Gauss,
    /// `1 - <x, y>` on unit-normalized rows.
    Cosine,
}

/// Token embeddings, row-major `m x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    m: usize,
    d: usize,
    data: Vec<f64>,
}

impl EmbeddingTable {
    pub fn new(m: usize, d: usize, data: Vec<f64>) -> Result<Self, KernelError> {
        if m < 2 {
            return Err(KernelError::VocabTooSmall { m });
        }
        if data.len() != m * d || d == 0 {
            return Err(KernelError::BadShape {
                expected: m * d,
                got: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(KernelError::NonFinite { index });
        }
        Ok(EmbeddingTable { m, d, data })
    }

    pub fn len(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> &[f64] {
        &self.data
    }
}

/// Metric-resolved view of an embedding table: rows are unit-normalized for
/// the cosine metric, and squared norms are cached for the Gauss metric so a
/// distance costs one dot product.
#[derive(Debug, Clone, PartialEq)]
struct Geometry {
    metric: Metric,
    m: usize,
    d: usize,
    rows: Vec<f64>,
    sq_norms: Vec<f64>,
}

impl Geometry {
    fn new(emb: &EmbeddingTable, metric: Metric) -> Result<Self, KernelError> {
        let (m, d) = (emb.len(), emb.dim());
        let mut rows = emb.rows().to_vec();
        let mut sq_norms = vec![0.0; m];
        for i in 0..m {
            let row = &mut rows[i * d..(i + 1) * d];
            let ns: f64 = row.iter().map(|v| v * v).sum();
            match metric {
                Metric::Gauss => sq_norms[i] = ns,
                Metric::Cosine => {
                    if ns <= 0.0 {
                        return Err(KernelError::ZeroRow { index: i });
                    }
                    let inv = 1.0 / math::sqrt(ns);
                    for v in row.iter_mut() {
                        *v *= inv;
                    }
                    sq_norms[i] = 1.0;
                }
            }
        }
        Ok(Geometry {
            metric,
            m,
            d,
            rows,
            sq_norms,
        })
    }

    #[inline]
    fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.d..(i + 1) * self.d]
    }

    /// `d_emb(e_x, e_y)` under the resolved metric; non-negative.
    #[inline]
    fn distance(&self, x: usize, y: usize) -> f64 {
        let dot: f64 = self
            .row(x)
            .iter()
            .zip(self.row(y))
            .map(|(a, b)| a * b)
            .sum();
        let d = match self.metric {
            Metric::Gauss => self.sq_norms[x] + self.sq_norms[y] - 2.0 * dot,
            Metric::Cosine => 1.0 - dot,
        };
        d.max(0.0)
    }
}

/// Brute-force k-NN graph with self-tuning bandwidths.
///
/// Rows hold the `k` nearest non-self tokens sorted by ascending distance,
/// ties broken by token id.  `bandwidths[i]` is the distance from token `i`
/// to its `bandwidth_k`-th nearest neighbor, floored at [`BANDWIDTH_FLOOR`].
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGraph {
    m: usize,
    k: usize,
    metric: Metric,
    neighbors: Vec<u32>,
    distances: Vec<f64>,
    bandwidths: Vec<f64>,
}

impl NeighborGraph {
    pub fn len(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn neighbor_count(&self) -> usize {
        self.k
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn neighbors(&self, y: usize) -> &[u32] {
        &self.neighbors[y * self.k..(y + 1) * self.k]
    }

    pub fn distances(&self, y: usize) -> &[f64] {
        &self.distances[y * self.k..(y + 1) * self.k]
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }
}

fn check_orders(m: usize, k: usize, bandwidth_k: usize) -> Result<(), KernelError> {
    if k == 0 || k > m - 1 {
        return Err(KernelError::BadNeighborOrder { k, m });
    }
    if bandwidth_k == 0 || bandwidth_k > m - 1 {
        return Err(KernelError::BadNeighborOrder { k: bandwidth_k, m });
    }
    Ok(())
}

/// Exhaustive nearest-neighbor scan for one row; returns the `take` closest
/// non-self tokens sorted ascending.  `scratch` is reused across rows.
fn nearest_for_row(geom: &Geometry, y: usize, take: usize, scratch: &mut Vec<(f64, u32)>) {
    scratch.clear();
    for x in 0..geom.m {
        if x != y {
            scratch.push((geom.distance(x, y), x as u32));
        }
    }
    let cmp = |a: &(f64, u32), b: &(f64, u32)| {
        a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1))
    };
    if take < scratch.len() {
        scratch.select_nth_unstable_by(take - 1, cmp);
        scratch.truncate(take);
    }
    scratch.sort_unstable_by(cmp);
}

/// Build a brute-force neighbor graph.  Cost is `O(m^2 d)`.
pub fn build_neighbor_graph(
    emb: &EmbeddingTable,
    metric: Metric,
    k: usize,
    bandwidth_k: usize,
) -> Result<NeighborGraph, KernelError> {
    let geom = Geometry::new(emb, metric)?;
    let m = geom.m;
    check_orders(m, k, bandwidth_k)?;
    let take = k.max(bandwidth_k);
    let mut neighbors = Vec::with_capacity(m * k);
    let mut distances = Vec::with_capacity(m * k);
    let mut bandwidths = Vec::with_capacity(m);
    let mut floored = 0usize;
    let mut scratch: Vec<(f64, u32)> = Vec::with_capacity(m);
    for y in 0..m {
        nearest_for_row(&geom, y, take, &mut scratch);
        for &(dist, x) in scratch.iter().take(k) {
            neighbors.push(x);
            distances.push(dist);
        }
        let mut rho = scratch[bandwidth_k - 1].0;
        if rho < BANDWIDTH_FLOOR {
            rho = BANDWIDTH_FLOOR;
            floored += 1;
        }
        bandwidths.push(rho);
    }
    if floored > 0 {
        log::warn!(
            "{floored} of {m} tokens have degenerate self-tuning bandwidths \
             (duplicate embeddings); floored at {BANDWIDTH_FLOOR:e}"
        );
    }
    Ok(NeighborGraph {
        m,
        k,
        metric,
        neighbors,
        distances,
        bandwidths,
    })
}

/// Self-tuning bandwidths alone, for the dense kernel.
fn self_tuning_bandwidths(
    geom: &Geometry,
    bandwidth_k: usize,
) -> Result<Vec<f64>, KernelError> {
    check_orders(geom.m, 1, bandwidth_k)?;
    let mut bandwidths = Vec::with_capacity(geom.m);
    let mut floored = 0usize;
    let mut scratch: Vec<(f64, u32)> = Vec::with_capacity(geom.m);
    for y in 0..geom.m {
        nearest_for_row(geom, y, bandwidth_k, &mut scratch);
        let mut rho = scratch[bandwidth_k - 1].0;
        if rho < BANDWIDTH_FLOOR {
            rho = BANDWIDTH_FLOOR;
            floored += 1;
        }
        bandwidths.push(rho);
    }
    if floored > 0 {
        log::warn!(
            "{floored} of {} tokens have degenerate self-tuning bandwidths \
             (duplicate embeddings); floored at {BANDWIDTH_FLOOR:e}",
            geom.m
        );
    }
    Ok(bandwidths)
}

/// Temperature schedule `tau(t) = tau0 * exp(growth * t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TempSchedule {
    pub tau0: f64,
    pub growth: f64,
}

impl Default for TempSchedule {
    fn default() -> Self {
        TempSchedule {
            tau0: 1.0,
            growth: 4.0,
        }
    }
}

impl TempSchedule {
    pub fn at(&self, t: f64) -> f64 {
        self.tau0 * math::exp(self.growth * t)
    }
}

/// Mixture weight `lambda(t) = clamp(scale * t^exponent, 0, 1)` blending the
/// k-NN softmax with a uniform escape over non-self tokens.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixSchedule {
    pub scale: f64,
    pub exponent: f64,
}

impl Default for MixSchedule {
    fn default() -> Self {
        MixSchedule {
            scale: 1.0,
            exponent: 2.0,
        }
    }
}

impl MixSchedule {
    pub const OFF: MixSchedule = MixSchedule {
        scale: 0.0,
        exponent: 1.0,
    };

    pub fn at(&self, t: f64) -> f64 {
        let raw = if t == 0.0 && self.exponent == 0.0 {
            self.scale
        } else {
            self.scale * math::powf(t, self.exponent)
        };
        raw.clamp(0.0, 1.0)
    }
}

/// Similarity kernel restricted to a neighbor graph.
#[derive(Debug, Clone, PartialEq)]
pub struct SikKnn {
    graph: NeighborGraph,
    temp: TempSchedule,
    mix: MixSchedule,
}

/// Dense similarity kernel; columns are normalized over all non-self tokens
/// in blocks of `block_size` candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct SikDense {
    geom: Geometry,
    bandwidths: Vec<f64>,
    temp: TempSchedule,
    block_size: usize,
}

/// A column-stochastic jump kernel `F_t`.
#[derive(Debug, Clone, PartialEq)]
pub enum JumpKernel {
    Uniform { m: usize },
    Absorb { m: usize, mask: u32 },
    SikKnn(SikKnn),
    SikDense(SikDense),
}

impl JumpKernel {
    pub fn uniform(m: usize) -> Result<Self, KernelError> {
        if m < 2 {
            return Err(KernelError::VocabTooSmall { m });
        }
        Ok(JumpKernel::Uniform { m })
    }

    pub fn absorb(m: usize, mask: u32) -> Result<Self, KernelError> {
        if m < 2 {
            return Err(KernelError::VocabTooSmall { m });
        }
        if mask as usize >= m {
            return Err(KernelError::MaskOutOfRange { mask, m });
        }
        Ok(JumpKernel::Absorb { m, mask })
    }

    /// k-NN similarity kernel; builds the graph with a brute-force scan.
    pub fn sik_knn(
        emb: &EmbeddingTable,
        metric: Metric,
        k: usize,
        bandwidth_k: usize,
        temp: TempSchedule,
        mix: MixSchedule,
    ) -> Result<Self, KernelError> {
        let graph = build_neighbor_graph(emb, metric, k, bandwidth_k)?;
        Self::sik_knn_with_graph(graph, temp, mix)
    }

    pub fn sik_knn_with_graph(
        graph: NeighborGraph,
        temp: TempSchedule,
        mix: MixSchedule,
    ) -> Result<Self, KernelError> {
        if temp.tau0 <= 0.0 {
            return Err(KernelError::BadTemperature { tau0: temp.tau0 });
        }
        Ok(JumpKernel::SikKnn(SikKnn { graph, temp, mix }))
    }

    pub fn sik_dense(
        emb: &EmbeddingTable,
        metric: Metric,
        bandwidth_k: usize,
        temp: TempSchedule,
        block_size: usize,
    ) -> Result<Self, KernelError> {
        if temp.tau0 <= 0.0 {
            return Err(KernelError::BadTemperature { tau0: temp.tau0 });
        }
        if block_size == 0 {
            return Err(KernelError::ZeroBlockSize);
        }
        let geom = Geometry::new(emb, metric)?;
        let bandwidths = self_tuning_bandwidths(&geom, bandwidth_k)?;
        Ok(JumpKernel::SikDense(SikDense {
            geom,
            bandwidths,
            temp,
            block_size,
        }))
    }

    pub fn len(&self) -> usize {
        match self {
            JumpKernel::Uniform { m } => *m,
            JumpKernel::Absorb { m, .. } => *m,
            JumpKernel::SikKnn(k) => k.graph.m,
            JumpKernel::SikDense(d) => d.geom.m,
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn mask_id(&self) -> Option<u32> {
        match self {
            JumpKernel::Absorb { mask, .. } => Some(*mask),
            _ => None,
        }
    }

    fn check_token(&self, token: u32) -> Result<(), KernelError> {
        if (token as usize) < self.len() {
            Ok(())
        } else {
            Err(KernelError::TokenOutOfRange {
                token,
                m: self.len(),
            })
        }
    }

    /// Materialize the column `F_t(., y)` into `out` (length `m`).
    pub fn column_into(&self, t: f64, y: u32, out: &mut [f64]) -> Result<(), KernelError> {
        check_time(t)?;
        self.check_token(y)?;
        debug_assert_eq!(out.len(), self.len());
        match self {
            JumpKernel::Uniform { m } => {
                let p = 1.0 / *m as f64;
                out.fill(p);
            }
            JumpKernel::Absorb { mask, .. } => {
                out.fill(0.0);
                out[*mask as usize] = 1.0;
            }
            JumpKernel::SikKnn(kern) => kern.column_into(t, y as usize, out),
            JumpKernel::SikDense(kern) => kern.column_into(t, y as usize, out),
        }
        Ok(())
    }

    pub fn column(&self, t: f64, y: u32) -> Result<Vec<f64>, KernelError> {
        let mut out = vec![0.0; self.len()];
        self.column_into(t, y, &mut out)?;
        Ok(out)
    }

    /// Draw the landing token of a jump fired at time `t` from `current`.
    /// Matches the law of [`JumpKernel::column`] without materializing it.
    pub fn sample_jump(
        &self,
        t: f64,
        current: u32,
        rng: &mut impl Rng,
    ) -> Result<u32, KernelError> {
        check_time(t)?;
        self.check_token(current)?;
        Ok(match self {
            JumpKernel::Uniform { m } => rng.random_range(0..*m as u32),
            JumpKernel::Absorb { mask, .. } => *mask,
            JumpKernel::SikKnn(kern) => kern.sample_jump(t, current as usize, rng),
            JumpKernel::SikDense(kern) => kern.sample_jump(t, current as usize, rng),
        })
    }

    /// `out = F_t v`, accumulated column by column.
    pub fn apply(&self, t: f64, v: &[f64], out: &mut [f64]) -> Result<(), KernelError> {
        let m = self.len();
        debug_assert_eq!(v.len(), m);
        debug_assert_eq!(out.len(), m);
        out.fill(0.0);
        let mut col = vec![0.0; m];
        for (j, &vj) in v.iter().enumerate() {
            if vj != 0.0 {
                self.column_into(t, j as u32, &mut col)?;
                for (o, c) in out.iter_mut().zip(col.iter()) {
                    *o += vj * c;
                }
            }
        }
        Ok(())
    }

    /// `out = F_t^T u`; entry `j` is the inner product of column `j` with `u`.
    pub fn apply_transpose(&self, t: f64, u: &[f64], out: &mut [f64]) -> Result<(), KernelError> {
        let m = self.len();
        debug_assert_eq!(u.len(), m);
        debug_assert_eq!(out.len(), m);
        let mut col = vec![0.0; m];
        for j in 0..m {
            self.column_into(t, j as u32, &mut col)?;
            out[j] = col.iter().zip(u.iter()).map(|(c, w)| c * w).sum();
        }
        Ok(())
    }
}

impl SikKnn {
    pub fn graph(&self) -> &NeighborGraph {
        &self.graph
    }

    /// Softmax weights over the stored neighbors of `y` at temperature
    /// `tau(t)`, written into `weights` (length `k`).
    fn neighbor_softmax(&self, t: f64, y: usize, weights: &mut [f64]) {
        let tau = self.temp.at(t);
        let dists = self.graph.distances(y);
        let rho = &self.graph.bandwidths;
        let rho_y = rho[y];
        let mut max = f64::NEG_INFINITY;
        for (w, (&d, &x)) in weights
            .iter_mut()
            .zip(dists.iter().zip(self.graph.neighbors(y)))
        {
            let e = -d / (tau * math::sqrt(rho[x as usize] * rho_y));
            *w = e;
            if e > max {
                max = e;
            }
        }
        let mut sum = 0.0;
        for w in weights.iter_mut() {
            *w = math::exp(*w - max);
            sum += *w;
        }
        for w in weights.iter_mut() {
            *w /= sum;
        }
    }

    fn column_into(&self, t: f64, y: usize, out: &mut [f64]) {
        let m = self.graph.m;
        let lambda = self.mix.at(t);
        let escape = lambda / (m - 1) as f64;
        out.fill(escape);
        out[y] = 0.0;
        if lambda < 1.0 {
            let mut weights = vec![0.0; self.graph.k];
            self.neighbor_softmax(t, y, &mut weights);
            for (&x, &w) in self.graph.neighbors(y).iter().zip(weights.iter()) {
                out[x as usize] += (1.0 - lambda) * w;
            }
        }
    }

    fn sample_jump(&self, t: f64, current: usize, rng: &mut impl Rng) -> u32 {
        let m = self.graph.m;
        let lambda = self.mix.at(t);
        let u: f64 = rng.random();
        if u < lambda {
            // Uniform over the m - 1 non-self tokens.
            let r = rng.random_range(0..m as u32 - 1);
            return if (r as usize) < current { r } else { r + 1 };
        }
        let mut weights = vec![0.0; self.graph.k];
        self.neighbor_softmax(t, current, &mut weights);
        let idx = crate::rng::categorical(rng, &weights);
        self.graph.neighbors(current)[idx]
    }
}

impl SikDense {
    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    #[inline]
    fn exponent(&self, tau: f64, x: usize, y: usize, rho_y: f64) -> f64 {
        -self.geom.distance(x, y) / (tau * math::sqrt(self.bandwidths[x] * rho_y))
    }

    fn column_into(&self, t: f64, y: usize, out: &mut [f64]) {
        let m = self.geom.m;
        let tau = self.temp.at(t);
        let rho_y = self.bandwidths[y];
        let mut max = f64::NEG_INFINITY;
        for x in 0..m {
            let e = if x == y {
                f64::NEG_INFINITY
            } else {
                self.exponent(tau, x, y, rho_y)
            };
            out[x] = e;
            if e > max {
                max = e;
            }
        }
        let mut sum = 0.0;
        for v in out.iter_mut() {
            *v = if v.is_finite() { math::exp(*v - max) } else { 0.0 };
            sum += *v;
        }
        for v in out.iter_mut() {
            *v /= sum;
        }
    }

    /// Two-pass blockwise draw: pass one accumulates the normalizer, pass
    /// two replays the identical candidate walk and stops at the inverse-CDF
    /// target.  Both passes share the arithmetic, so the draw is exact with
    /// respect to the pass-one normalizer.
    fn sample_jump(&self, t: f64, current: usize, rng: &mut impl Rng) -> u32 {
        let m = self.geom.m;
        let tau = self.temp.at(t);
        let rho_y = self.bandwidths[current];

        let mut total = 0.0;
        let mut max_exp = f64::NEG_INFINITY;
        let mut start = 0;
        while start < m {
            let end = (start + self.block_size).min(m);
            for x in start..end {
                if x == current {
                    continue;
                }
                let e = self.exponent(tau, x, current, rho_y);
                total += math::exp(e);
                if e > max_exp {
                    max_exp = e;
                }
            }
            start = end;
        }

        // Rare rescue path: everything underflowed, replay shifted by the
        // max exponent.  The shift is deterministic, so both passes agree.
        let shift = if total < 1e-300 { -max_exp } else { 0.0 };
        if shift != 0.0 {
            total = 0.0;
            let mut start = 0;
            while start < m {
                let end = (start + self.block_size).min(m);
                for x in start..end {
                    if x != current {
                        total += math::exp(self.exponent(tau, x, current, rho_y) + shift);
                    }
                }
                start = end;
            }
        }

        let target: f64 = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut fallback = current as u32;
        let mut start = 0;
        while start < m {
            let end = (start + self.block_size).min(m);
            for x in start..end {
                if x == current {
                    continue;
                }
                let w = math::exp(self.exponent(tau, x, current, rho_y) + shift);
                if w > 0.0 {
                    acc += w;
                    fallback = x as u32;
                    if acc >= target {
                        return x as u32;
                    }
                }
            }
            start = end;
        }
        fallback
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::labeled_stream;
    use alloc::vec::Vec;

    /// 1-D points {0, 1, 3}: the frozen hand-checked geometry example.
    fn line_embeddings() -> EmbeddingTable {
        EmbeddingTable::new(3, 1, vec![0.0, 1.0, 3.0]).unwrap()
    }

    fn grid_embeddings(side: usize) -> EmbeddingTable {
        let m = side * side;
        let mut data = Vec::with_capacity(m * 2);
        for i in 0..m {
            data.push((i % side) as f64);
            data.push((i / side) as f64);
        }
        EmbeddingTable::new(m, 2, data).unwrap()
    }

    fn tv(a: &[f64], b: &[f64]) -> f64 {
        0.5 * a
            .iter()
            .zip(b)
            .map(|(x, y)| math::abs(x - y))
            .sum::<f64>()
    }

    #[test]
    fn uniform_and_absorb_columns() {
        let uni = JumpKernel::uniform(4).unwrap();
        let col = uni.column(0.3, 2).unwrap();
        assert_eq!(col, vec![0.25; 4]);

        let abs = JumpKernel::absorb(4, 3).unwrap();
        let col = abs.column(0.3, 1).unwrap();
        assert_eq!(col, vec![0.0, 0.0, 0.0, 1.0]);
        assert_eq!(abs.sample_jump(0.5, 0, &mut labeled_stream(0, 0)).unwrap(), 3);
    }

    #[test]
    fn line_graph_matches_hand_computation() {
        // Squared distances: 0<->1: 1, 0<->2: 9, 1<->2: 4.
        let graph = build_neighbor_graph(&line_embeddings(), Metric::Gauss, 2, 1).unwrap();
        assert_eq!(graph.neighbors(0), &[1, 2]);
        assert_eq!(graph.neighbors(1), &[0, 2]);
        assert_eq!(graph.neighbors(2), &[1, 0]);
        assert_eq!(graph.distances(0), &[1.0, 9.0]);
        assert_eq!(graph.distances(1), &[1.0, 4.0]);
        assert_eq!(graph.distances(2), &[4.0, 9.0]);
        assert_eq!(graph.bandwidths(), &[1.0, 1.0, 4.0]);
    }

    #[test]
    fn knn_column_matches_manual_softmax() {
        let emb = line_embeddings();
        let kern = JumpKernel::sik_knn(
            &emb,
            Metric::Gauss,
            2,
            1,
            TempSchedule { tau0: 1.0, growth: 0.0 },
            MixSchedule { scale: 0.5, exponent: 1.0 },
        )
        .unwrap();
        let t = 0.5;
        let lambda = 0.25; // 0.5 * 0.5
        // Column for y = 0: neighbors 1 (d=1, rho=1) and 2 (d=9, rho=4),
        // rho_0 = 1, tau = 1.
        let w1 = (-1.0f64 / (1.0 * 1.0f64).sqrt()).exp();
        let w2 = (-9.0f64 / (4.0 * 1.0f64).sqrt()).exp();
        let z = w1 + w2;
        let expect = [
            0.0,
            (1.0 - lambda) * w1 / z + lambda / 2.0,
            (1.0 - lambda) * w2 / z + lambda / 2.0,
        ];
        let col = kern.column(t, 0).unwrap();
        for (a, b) in col.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12, "{col:?} vs {expect:?}");
        }
        assert_eq!(col[0], 0.0);
    }

    #[test]
    fn full_knn_with_zero_mix_equals_dense() {
        let emb = grid_embeddings(8);
        let m = emb.len();
        let temp = TempSchedule::default();
        let knn = JumpKernel::sik_knn(&emb, Metric::Gauss, m - 1, 4, temp, MixSchedule::OFF)
            .unwrap();
        let dense = JumpKernel::sik_dense(&emb, Metric::Gauss, 4, temp, 7).unwrap();
        for t in [0.0, 0.37, 1.0] {
            for y in [0u32, 13, 63] {
                let a = knn.column(t, y).unwrap();
                let b = dense.column(t, y).unwrap();
                for (i, (x, z)) in a.iter().zip(b.iter()).enumerate() {
                    assert!(
                        (x - z).abs() < 1e-8,
                        "mismatch at t={t} y={y} i={i}: {x} vs {z}"
                    );
                }
            }
        }
    }

    #[test]
    fn sik_columns_are_stochastic_with_zero_diagonal() {
        let emb = grid_embeddings(5);
        // Shifted copy keeps every row nonzero for the cosine metric.
        let shifted = EmbeddingTable::new(
            emb.len(),
            emb.dim(),
            emb.rows().iter().map(|v| v + 1.0).collect(),
        )
        .unwrap();
        let kerns = [
            JumpKernel::sik_knn(
                &emb,
                Metric::Gauss,
                6,
                3,
                TempSchedule::default(),
                MixSchedule::default(),
            )
            .unwrap(),
            JumpKernel::sik_dense(&emb, Metric::Gauss, 3, TempSchedule::default(), 4).unwrap(),
            JumpKernel::sik_dense(&shifted, Metric::Cosine, 3, TempSchedule::default(), 64)
                .unwrap(),
        ];
        for kern in &kerns {
            for t in [0.1, 0.6, 1.0] {
                for y in 0..kern.len() as u32 {
                    let col = kern.column(t, y).unwrap();
                    let sum: f64 = col.iter().sum();
                    assert!((sum - 1.0).abs() < 1e-9, "column sum {sum}");
                    assert_eq!(col[y as usize], 0.0);
                    assert!(col.iter().all(|&p| p >= 0.0));
                }
            }
        }
    }

    #[test]
    fn high_temperature_flattens_dense_columns() {
        let mut rng = labeled_stream(11, 0);
        let m = 32;
        let data: Vec<f64> = (0..m * 3).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let emb = EmbeddingTable::new(m, 3, data).unwrap();
        let kern = JumpKernel::sik_dense(
            &emb,
            Metric::Gauss,
            4,
            TempSchedule { tau0: 1e6, growth: 0.0 },
            16,
        )
        .unwrap();
        let col = kern.column(0.5, 7).unwrap();
        let mut flat = vec![1.0 / (m - 1) as f64; m];
        flat[7] = 0.0;
        assert!(tv(&col, &flat) < 1e-3, "TV {}", tv(&col, &flat));
    }

    #[test]
    fn dense_sampling_matches_column_law() {
        let emb = grid_embeddings(4);
        let kern = JumpKernel::sik_dense(&emb, Metric::Gauss, 2, TempSchedule::default(), 5)
            .unwrap();
        let t = 0.4;
        let y = 9u32;
        let col = kern.column(t, y).unwrap();
        let mut counts = vec![0usize; kern.len()];
        let n = 200_000;
        let mut rng = labeled_stream(3, 7);
        for _ in 0..n {
            counts[kern.sample_jump(t, y, &mut rng).unwrap() as usize] += 1;
        }
        let emp: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
        assert!(tv(&emp, &col) < 0.01, "TV {}", tv(&emp, &col));
        assert_eq!(counts[y as usize], 0);
    }

    #[test]
    fn knn_sampling_matches_column_law() {
        let emb = grid_embeddings(4);
        let kern = JumpKernel::sik_knn(
            &emb,
            Metric::Gauss,
            5,
            2,
            TempSchedule::default(),
            MixSchedule::default(),
        )
        .unwrap();
        let t = 0.8; // mixture weight 0.64: both branches exercised
        let y = 5u32;
        let col = kern.column(t, y).unwrap();
        let mut counts = vec![0usize; kern.len()];
        let n = 200_000;
        let mut rng = labeled_stream(5, 9);
        for _ in 0..n {
            counts[kern.sample_jump(t, y, &mut rng).unwrap() as usize] += 1;
        }
        let emp: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
        assert!(tv(&emp, &col) < 0.01, "TV {}", tv(&emp, &col));
    }

    #[test]
    fn duplicate_embeddings_floor_bandwidths() {
        let emb = EmbeddingTable::new(4, 1, vec![0.0, 0.0, 1.0, 2.0]).unwrap();
        let graph = build_neighbor_graph(&emb, Metric::Gauss, 2, 1).unwrap();
        assert_eq!(graph.bandwidths()[0], BANDWIDTH_FLOOR);
        assert_eq!(graph.bandwidths()[1], BANDWIDTH_FLOOR);
        let kern = JumpKernel::sik_dense(&emb, Metric::Gauss, 1, TempSchedule::default(), 2)
            .unwrap();
        let col = kern.column(0.5, 0).unwrap();
        assert!(col.iter().all(|p| p.is_finite()));
        let sum: f64 = col.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn cosine_metric_small_instance() {
        // Unit-normalized rows: distances 1 - <x, y>.
        let emb = EmbeddingTable::new(
            3,
            2,
            vec![2.0, 0.0, 0.0, 3.0, 1.0, 1.0],
        )
        .unwrap();
        let graph = build_neighbor_graph(&emb, Metric::Cosine, 2, 1).unwrap();
        let inv_sqrt2 = core::f64::consts::FRAC_1_SQRT_2;
        // d(0,1) = 1, d(0,2) = 1 - 1/sqrt(2), d(1,2) = 1 - 1/sqrt(2).
        assert_eq!(graph.neighbors(0), &[2, 1]);
        assert!((graph.distances(0)[0] - (1.0 - inv_sqrt2)).abs() < 1e-12);
        assert!((graph.bandwidths()[0] - (1.0 - inv_sqrt2)).abs() < 1e-12);
    }

    #[test]
    fn construction_errors() {
        let emb = grid_embeddings(3);
        assert!(matches!(
            JumpKernel::uniform(1),
            Err(KernelError::VocabTooSmall { .. })
        ));
        assert!(matches!(
            JumpKernel::absorb(4, 4),
            Err(KernelError::MaskOutOfRange { .. })
        ));
        assert!(matches!(
            build_neighbor_graph(&emb, Metric::Gauss, 0, 1),
            Err(KernelError::BadNeighborOrder { .. })
        ));
        assert!(matches!(
            build_neighbor_graph(&emb, Metric::Gauss, 9, 1),
            Err(KernelError::BadNeighborOrder { .. })
        ));
        assert!(matches!(
            JumpKernel::sik_dense(&emb, Metric::Gauss, 2, TempSchedule::default(), 0),
            Err(KernelError::ZeroBlockSize)
        ));
        assert!(matches!(
            EmbeddingTable::new(2, 2, vec![0.0, f64::NAN, 1.0, 2.0]),
            Err(KernelError::NonFinite { index: 1 })
        ));
        let zero_row = EmbeddingTable::new(2, 2, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        assert!(matches!(
            build_neighbor_graph(&zero_row, Metric::Cosine, 1, 1),
            Err(KernelError::ZeroRow { index: 0 })
        ));
        let uni = JumpKernel::uniform(4).unwrap();
        assert!(matches!(
            uni.column(1.5, 0),
            Err(KernelError::TimeOutOfRange { .. })
        ));
        assert!(matches!(
            uni.column(0.5, 9),
            Err(KernelError::TokenOutOfRange { .. })
        ));
    }

    #[test]
    fn apply_matches_dense_matvec() {
        let emb = grid_embeddings(3);
        let kern = JumpKernel::sik_dense(&emb, Metric::Gauss, 2, TempSchedule::default(), 4)
            .unwrap();
        let m = kern.len();
        let t = 0.3;
        let mut rng = labeled_stream(2, 2);
        let v: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
        let mut via_apply = vec![0.0; m];
        kern.apply(t, &v, &mut via_apply).unwrap();
        let mut via_transpose = vec![0.0; m];
        kern.apply_transpose(t, &v, &mut via_transpose).unwrap();

        // Oracle: explicit dense matrix.
        let mut dense = vec![0.0; m * m];
        for j in 0..m {
            let col = kern.column(t, j as u32).unwrap();
            for i in 0..m {
                dense[i * m + j] = col[i];
            }
        }
        for i in 0..m {
            let row: f64 = (0..m).map(|j| dense[i * m + j] * v[j]).sum();
            assert!((row - via_apply[i]).abs() < 1e-12);
            let col: f64 = (0..m).map(|j| dense[j * m + i] * v[j]).sum();
            assert!((col - via_transpose[i]).abs() < 1e-12);
        }
    }
}
