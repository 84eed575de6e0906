//! Forward-noising latency benchmark.
//!
//! Measures wall-clock time to noise a full `batch x seq_len` token batch
//! with each requested kernel at a fixed time `t`.  Kernel construction
//! (neighbor graphs, bandwidths) happens once per kernel and is excluded
//! from timing; the benchmark measures sampling, not graph build.
//!
//! Protocol: per kernel, inner repetitions are first calibrated upward
//! until one sample takes at least a millisecond (the timer cannot
//! resolve sub-millisecond runs), then each seed performs `warmup`
//! discarded runs followed by `timed` recorded samples.  Per-seed rows
//! report mean and standard deviation over those samples; the per-kernel
//! aggregate reports the mean of seed means and the standard deviation
//! across seed means.  Noised outputs depend only on `(seed, sequence,
//! position)` substreams, so results are bit-identical for any worker
//! count; the jump-count checksum in each row pins that down.

use std::io::Write;
use std::time::{Duration, Instant};

use gdds_core::kernel::JumpKernel;
use gdds_core::rng::{labeled_stream, position_stream};
use gdds_core::schedule::Schedule;
use gdds_core::uniformize::noise_sequence;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::KernelKind;
use crate::synth::{synth_embeddings, SynthKind};

/// One sample must take at least this long, or repetitions are doubled.
const MIN_SAMPLE: Duration = Duration::from_millis(1);
/// Upper bound on the calibrated repetition count.
const MAX_REPS: usize = 1 << 20;
/// High-half label base for per-seed substream derivation.
const BENCH_LABEL: u64 = 0xBE5E << 32;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("bench config: {0}")]
    Config(String),
    #[error("bench config: zero timed runs requested")]
    NoTimedRuns,
    #[error("noising failed: {0}")]
    Noise(String),
}

fn d_batch() -> usize {
    512
}

fn d_seq_len() -> usize {
    1024
}

fn d_m() -> usize {
    50_257
}

fn d_d() -> usize {
    16
}

fn d_kernels() -> Vec<KernelKind> {
    vec![
        KernelKind::Uniform,
        KernelKind::Absorb,
        KernelKind::SikKnn,
        KernelKind::SikDense,
    ]
}

fn d_seeds() -> usize {
    5
}

fn d_timed() -> usize {
    10
}

fn d_warmup() -> usize {
    3
}

fn d_t() -> f64 {
    0.5
}

fn d_k() -> usize {
    64
}

fn d_bandwidth_k() -> usize {
    16
}

fn d_eps() -> f64 {
    1e-3
}

fn d_synth_seed() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default = "d_batch")]
    pub batch: usize,
    #[serde(default = "d_seq_len")]
    pub seq_len: usize,
    #[serde(default = "d_m")]
    pub m: usize,
    /// Embedding dimension for the similarity kernels.
    #[serde(default = "d_d")]
    pub d: usize,
    #[serde(default = "d_kernels")]
    pub kernels: Vec<KernelKind>,
    /// Number of measurement seeds, each with its own clean batch.
    #[serde(default = "d_seeds")]
    pub seeds: usize,
    #[serde(default = "d_timed")]
    pub timed: usize,
    #[serde(default = "d_warmup")]
    pub warmup: usize,
    /// Noising horizon.
    #[serde(default = "d_t")]
    pub t: f64,
    #[serde(default = "d_k")]
    pub k: usize,
    #[serde(default = "d_bandwidth_k")]
    pub bandwidth_k: usize,
    /// Terminal survival mass of the log-linear schedule.
    #[serde(default = "d_eps")]
    pub eps: f64,
    /// Base seed for clean-data and noising substreams.
    #[serde(default)]
    pub seed: u64,
    /// Seed for the synthetic cluster embeddings.
    #[serde(default = "d_synth_seed")]
    pub synth_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            batch: d_batch(),
            seq_len: d_seq_len(),
            m: d_m(),
            d: d_d(),
            kernels: d_kernels(),
            seeds: d_seeds(),
            timed: d_timed(),
            warmup: d_warmup(),
            t: d_t(),
            k: d_k(),
            bandwidth_k: d_bandwidth_k(),
            eps: d_eps(),
            seed: 0,
            synth_seed: d_synth_seed(),
            workers: None,
        }
    }
}

impl BenchConfig {
    fn validate(&self) -> Result<(), BenchError> {
        if self.timed == 0 {
            return Err(BenchError::NoTimedRuns);
        }
        let positive: [(&str, usize); 6] = [
            ("batch", self.batch),
            ("seq_len", self.seq_len),
            ("seeds", self.seeds),
            ("d", self.d),
            ("k", self.k),
            ("bandwidth_k", self.bandwidth_k),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(BenchError::Config(format!("{name} must be positive")));
            }
        }
        if self.m < 2 {
            return Err(BenchError::Config("m must be at least 2".into()));
        }
        if self.kernels.is_empty() {
            return Err(BenchError::Config("no kernels requested".into()));
        }
        if !(self.t > 0.0 && self.t <= 1.0) {
            return Err(BenchError::Config("t must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedStats {
    pub seed: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub tokens_per_sec: f64,
    /// Total uniformization epochs over one batch; a determinism checksum.
    pub total_jumps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelReport {
    pub kernel: KernelKind,
    /// Calibrated inner repetitions per timed sample.
    pub reps: usize,
    pub seeds: Vec<SeedStats>,
    /// Mean of seed means.
    pub mean_ms: f64,
    /// Standard deviation across seed means.
    pub std_ms: f64,
    pub tokens_per_sec: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchResult {
    pub batch: usize,
    pub seq_len: usize,
    pub m: usize,
    pub t: f64,
    pub reports: Vec<KernelReport>,
}

impl BenchResult {
    pub fn report(&self, kind: KernelKind) -> Option<&KernelReport> {
        self.reports.iter().find(|r| r.kernel == kind)
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

fn build_kernel(cfg: &BenchConfig, kind: KernelKind) -> Result<JumpKernel, BenchError> {
    let bad = |e: gdds_core::kernel::KernelError| BenchError::Config(format!("{kind:?}: {e}"));
    match kind {
        KernelKind::Uniform => JumpKernel::uniform(cfg.m).map_err(bad),
        KernelKind::Absorb => JumpKernel::absorb(cfg.m, cfg.m as u32 - 1).map_err(bad),
        KernelKind::SikKnn | KernelKind::SikDense => {
            let emb = synth_embeddings(SynthKind::Clusters, cfg.m, cfg.d, cfg.synth_seed)
                .map_err(bad)?;
            match kind {
                KernelKind::SikKnn => JumpKernel::sik_knn(
                    &emb,
                    gdds_core::kernel::Metric::Gauss,
                    cfg.k,
                    cfg.bandwidth_k,
                    gdds_core::kernel::TempSchedule::default(),
                    gdds_core::kernel::MixSchedule::default(),
                )
                .map_err(bad),
                _ => JumpKernel::sik_dense(
                    &emb,
                    gdds_core::kernel::Metric::Gauss,
                    cfg.bandwidth_k,
                    gdds_core::kernel::TempSchedule::default(),
                    4096,
                )
                .map_err(bad),
            }
        }
    }
}

/// Noise one full batch, returning the total jump count as a checksum.
fn run_batch(
    pool: &rayon::ThreadPool,
    kern: &JumpKernel,
    sched: &Schedule,
    tokens: &[Vec<u32>],
    t: f64,
    noise_seed: u64,
) -> Result<u64, BenchError> {
    let total = pool.install(|| {
        tokens
            .par_iter()
            .enumerate()
            .map(|(j, row)| {
                noise_sequence(kern, sched, row, t, noise_seed, j as u32)
                    .map(|batch| {
                        batch
                            .paths()
                            .iter()
                            .map(|p| p.n_jumps() as u64)
                            .sum::<u64>()
                    })
                    .map_err(|e| BenchError::Noise(e.to_string()))
            })
            .try_reduce(|| 0u64, |a, b| Ok(a + b))
    })?;
    Ok(std::hint::black_box(total))
}

/// Deterministic clean batch for one seed index.
fn clean_batch(cfg: &BenchConfig, data_seed: u64) -> Vec<Vec<u32>> {
    (0..cfg.batch)
        .map(|j| {
            let mut rng = position_stream(data_seed, j as u32, 0);
            (0..cfg.seq_len)
                .map(|_| rng.random_range(0..cfg.m as u32))
                .collect()
        })
        .collect()
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchResult, BenchError> {
    run_bench_with(cfg, |_| {})
}

/// As [`run_bench`], reporting coarse progress through `progress` (kernel
/// builds at benchmark scale can take minutes of wall clock).
pub fn run_bench_with(
    cfg: &BenchConfig,
    mut progress: impl FnMut(&str),
) -> Result<BenchResult, BenchError> {
    cfg.validate()?;
    let sched = Schedule::log_linear(cfg.eps)
        .map_err(|e| BenchError::Config(format!("schedule: {e}")))?;
    let workers = crate::config::resolve_workers(cfg.workers)
        .map_err(|e| BenchError::Config(e.to_string()))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| BenchError::Config(format!("thread pool: {e}")))?;

    // Per-seed substreams: one labeled stream yields the data seed and the
    // noising seed, so clean data and noising never share a stream.
    let seed_pair = |i: usize| -> (u64, u64) {
        let mut rng = labeled_stream(cfg.seed, BENCH_LABEL | i as u64);
        (rng.random(), rng.random())
    };

    let mut reports = Vec::with_capacity(cfg.kernels.len());
    for &kind in &cfg.kernels {
        progress(&format!("building {} kernel (m = {})", kind.name(), cfg.m));
        let build_started = Instant::now();
        let kern = build_kernel(cfg, kind)?;
        progress(&format!(
            "built {} in {:.1}s",
            kind.name(),
            build_started.elapsed().as_secs_f64()
        ));

        // Calibrate inner repetitions on the first seed's batch.
        let (data_seed, noise_seed) = seed_pair(0);
        let tokens = clean_batch(cfg, data_seed);
        let mut reps = 1usize;
        loop {
            let started = Instant::now();
            for _ in 0..reps {
                run_batch(&pool, &kern, &sched, &tokens, cfg.t, noise_seed)?;
            }
            if started.elapsed() >= MIN_SAMPLE || reps >= MAX_REPS {
                break;
            }
            reps *= 2;
        }

        let mut seed_rows = Vec::with_capacity(cfg.seeds);
        for i in 0..cfg.seeds {
            let (data_seed, noise_seed) = seed_pair(i);
            let tokens = clean_batch(cfg, data_seed);
            for _ in 0..cfg.warmup {
                run_batch(&pool, &kern, &sched, &tokens, cfg.t, noise_seed)?;
            }
            let mut samples_ms = Vec::with_capacity(cfg.timed);
            let mut total_jumps = 0u64;
            for _ in 0..cfg.timed {
                let started = Instant::now();
                let mut jumps = 0u64;
                for _ in 0..reps {
                    jumps = run_batch(&pool, &kern, &sched, &tokens, cfg.t, noise_seed)?;
                }
                let elapsed = started.elapsed().as_secs_f64() * 1e3 / reps as f64;
                samples_ms.push(elapsed);
                total_jumps = jumps;
            }
            let (mean_ms, std_ms) = mean_std(&samples_ms);
            let tokens_per_run = (cfg.batch * cfg.seq_len) as f64;
            seed_rows.push(SeedStats {
                seed: i,
                mean_ms,
                std_ms,
                tokens_per_sec: tokens_per_run / (mean_ms / 1e3),
                total_jumps,
            });
            progress(&format!(
                "{} seed {i}: {:.3} ms per batch",
                kind.name(),
                mean_ms
            ));
        }

        let seed_means: Vec<f64> = seed_rows.iter().map(|s| s.mean_ms).collect();
        let (mean_ms, std_ms) = mean_std(&seed_means);
        let tokens_per_run = (cfg.batch * cfg.seq_len) as f64;
        reports.push(KernelReport {
            kernel: kind,
            reps,
            seeds: seed_rows,
            mean_ms,
            std_ms,
            tokens_per_sec: tokens_per_run / (mean_ms / 1e3),
        });
    }

    Ok(BenchResult {
        batch: cfg.batch,
        seq_len: cfg.seq_len,
        m: cfg.m,
        t: cfg.t,
        reports,
    })
}

pub const CSV_HEADER: &str = "kernel,seed,mean_ms,std_ms,tokens_per_sec";

/// One CSV row per (kernel, seed).
pub fn write_csv(result: &BenchResult, w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for report in &result.reports {
        for row in &report.seeds {
            writeln!(
                w,
                "{},{},{:.6},{:.6},{:.3}",
                report.kernel.name(),
                row.seed,
                row.mean_ms,
                row.std_ms,
                row.tokens_per_sec
            )?;
        }
    }
    Ok(())
}

/// Minimal bar chart of per-kernel mean latency with std whiskers.
pub fn write_svg(result: &BenchResult, w: &mut impl Write) -> std::io::Result<()> {
    let width = 640.0;
    let height = 360.0;
    let margin = 50.0;
    let plot_h = height - 2.0 * margin;
    let n = result.reports.len().max(1);
    let slot = (width - 2.0 * margin) / n as f64;
    let bar_w = slot * 0.6;
    let max_ms = result
        .reports
        .iter()
        .map(|r| r.mean_ms + r.std_ms)
        .fold(1e-9, f64::max);

    writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {width} {height}">"#
    )?;
    writeln!(
        w,
        r#"<rect width="{width}" height="{height}" fill="white"/>"#
    )?;
    writeln!(
        w,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="monospace" font-size="14">forward noising latency, batch {}x{}, m = {}</text>"#,
        width / 2.0,
        result.batch,
        result.seq_len,
        result.m
    )?;
    for (i, report) in result.reports.iter().enumerate() {
        let x = margin + (i as f64 + 0.2) * slot;
        let h = plot_h * (report.mean_ms / max_ms);
        let y = height - margin - h;
        writeln!(
            w,
            r##"<rect x="{x:.1}" y="{y:.1}" width="{bar_w:.1}" height="{h:.1}" fill="#4878a8"/>"##
        )?;
        // Std whisker across seed means.
        let cx = x + bar_w / 2.0;
        let half = plot_h * (report.std_ms / max_ms);
        writeln!(
            w,
            r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/>"#,
            (y - half).max(margin),
            (y + half).min(height - margin)
        )?;
        writeln!(
            w,
            r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle" font-family="monospace" font-size="11">{:.2} ms</text>"#,
            (y - half).max(margin) - 6.0,
            report.mean_ms
        )?;
        writeln!(
            w,
            r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle" font-family="monospace" font-size="12">{}</text>"#,
            height - margin + 18.0,
            report.kernel.name()
        )?;
    }
    writeln!(w, "</svg>")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> BenchConfig {
        BenchConfig {
            batch: 4,
            seq_len: 16,
            m: 12,
            d: 3,
            kernels: vec![KernelKind::Uniform, KernelKind::Absorb, KernelKind::SikKnn],
            seeds: 2,
            timed: 3,
            warmup: 1,
            t: 0.5,
            k: 4,
            bandwidth_k: 2,
            eps: 1e-3,
            seed: 9,
            synth_seed: 3,
            workers: Some(1),
        }
    }

    #[test]
    fn tiny_bench_produces_full_reports() {
        let cfg = tiny_config();
        let result = run_bench(&cfg).expect("bench");
        assert_eq!(result.reports.len(), 3);
        for report in &result.reports {
            assert_eq!(report.seeds.len(), 2);
            assert!(report.reps >= 1);
            assert!(report.mean_ms > 0.0);
            assert!(report.tokens_per_sec > 0.0);
            for row in &report.seeds {
                assert!(row.mean_ms > 0.0);
                assert!(row.total_jumps > 0);
            }
        }
    }

    #[test]
    fn jump_checksums_are_worker_invariant() {
        // Identical configs except for the worker count must produce
        // identical noised batches, hence identical jump checksums.
        let mut one = tiny_config();
        one.kernels = vec![KernelKind::Uniform];
        let mut two = one.clone();
        two.workers = Some(2);
        let a = run_bench(&one).expect("one worker");
        let b = run_bench(&two).expect("two workers");
        let sums = |r: &BenchResult| -> Vec<u64> {
            r.reports[0].seeds.iter().map(|s| s.total_jumps).collect()
        };
        assert_eq!(sums(&a), sums(&b));
    }

    #[test]
    fn zero_timed_runs_is_rejected() {
        let mut cfg = tiny_config();
        cfg.timed = 0;
        assert!(matches!(run_bench(&cfg), Err(BenchError::NoTimedRuns)));
    }

    #[test]
    fn bad_shapes_are_config_errors() {
        let mut cfg = tiny_config();
        cfg.batch = 0;
        assert!(matches!(run_bench(&cfg), Err(BenchError::Config(_))));
        let mut cfg = tiny_config();
        cfg.kernels.clear();
        assert!(matches!(run_bench(&cfg), Err(BenchError::Config(_))));
        let mut cfg = tiny_config();
        cfg.t = 0.0;
        assert!(matches!(run_bench(&cfg), Err(BenchError::Config(_))));
        // k too large for the vocabulary surfaces as a kernel build error.
        let mut cfg = tiny_config();
        cfg.k = 40;
        assert!(matches!(run_bench(&cfg), Err(BenchError::Config(_))));
    }

    #[test]
    fn csv_and_svg_writers_emit_well_formed_output() {
        let mut cfg = tiny_config();
        cfg.kernels = vec![KernelKind::Uniform, KernelKind::Absorb];
        cfg.seeds = 2;
        cfg.timed = 2;
        cfg.warmup = 0;
        let result = run_bench(&cfg).expect("bench");

        let mut csv = Vec::new();
        write_csv(&result, &mut csv).expect("csv");
        let text = String::from_utf8(csv).expect("utf8");
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(CSV_HEADER));
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), 4, "2 kernels x 2 seeds");
        assert!(rows[0].starts_with("uniform,0,"));
        assert!(rows[3].starts_with("absorb,1,"));
        for row in rows {
            assert_eq!(row.split(',').count(), 5);
        }

        let mut svg = Vec::new();
        write_svg(&result, &mut svg).expect("svg");
        let text = String::from_utf8(svg).expect("utf8");
        assert!(text.starts_with("<svg"));
        assert!(text.trim_end().ends_with("</svg>"));
        assert!(text.contains("uniform"));
        assert!(text.contains("absorb"));
    }
}
