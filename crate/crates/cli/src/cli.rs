//! The `gdds` command line.
//!
//! `dispatch` is the whole interface: it takes an argv, runs one
//! subcommand, and returns the process exit code.  Codes follow one rule
//! everywhere: 0 on success, 1 for failures at run time, 2 for
//! configuration errors (bad flags, bad config files, bad input shapes).
//! Missing or unknown subcommands print usage and exit 2.
//!
//! All machine output is JSON-lines on stdout (or `--out`); progress and
//! diagnostics go to stderr.  Every randomized subcommand takes `--seed`
//! and derives per-sequence, per-position substreams from it, so output
//! is bit-identical for any worker count.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use gdds_core::denoiser::{train, Role, TabularDenoiser, TrainSource};
use gdds_core::metrics::nll_bound_snapshot;
use gdds_core::oracle::{invariant_battery, DataDistribution};
use gdds_core::sampler::{generate, DecodingGrid};
use gdds_core::uniformize::noise_sequence;
use rayon::prelude::*;

use crate::bench::{self, BenchError};
use crate::config::{
    resolve_workers, ConfigError, CorpusConfig, CorpusSource, KernelConfig, KernelKind,
    MetricKind, ObjectiveKind, OptimizerName, RunConfig, SynthSpec,
};
use crate::corpus::{Alphabet, Corpus, CorpusError};
use crate::formats::{self, FormatError};
use crate::synth::{synth_embeddings, SynthKind};

/// Default embedding dimension when the CLI has to synthesize embeddings
/// and no `--d` was given.
const DEFAULT_SYNTH_D: usize = 8;

#[derive(Debug)]
enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    fn config(msg: impl Into<String>) -> CliError {
        CliError::Config(msg.into())
    }

    fn runtime(msg: impl Into<String>) -> CliError {
        CliError::Runtime(msg.into())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> CliError {
        CliError::Config(e.to_string())
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> CliError {
        CliError::Config(e.to_string())
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> CliError {
        CliError::Config(e.to_string())
    }
}

/// Run one command line.  `argv` must include the program name.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = err.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(CliError::Config(msg)) => {
            eprintln!("config error: {msg}");
            2
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "gdds",
    version,
    about = "Discrete diffusion from snapshots: noising, training, sampling, evaluation",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Noise a corpus by exact forward simulation at one time.
    Noise(NoiseCmd),
    /// Train a tabular denoiser and write a checkpoint.
    Train(TrainCmd),
    /// Generate sequences from a checkpoint by ancestral decoding.
    Sample(SampleCmd),
    /// Evaluate a checkpoint: snapshot NLL bound plus diversity metrics.
    Eval(EvalCmd),
    /// Benchmark forward-noising latency per kernel.
    Bench(BenchCmd),
    /// Run the dense-oracle invariant battery and report JSON.
    OracleCheck(OracleCheckCmd),
    /// Write synthetic embeddings to a file.
    MakeEmbeddings(MakeEmbeddingsCmd),
}

#[derive(Args, Debug, Clone)]
struct CommonFlags {
    /// JSON run config; explicit flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed for every randomized draw.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; the GDDS_WORKERS variable overrides this.
    #[arg(long)]
    workers: Option<usize>,
}

impl CommonFlags {
    fn load(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(workers) = self.workers {
            cfg.workers = Some(workers);
        }
        Ok(cfg)
    }
}

#[derive(Args, Debug, Clone)]
struct KernelFlags {
    /// Kernel family: uniform | absorb | sik-knn | sik-dense.
    #[arg(long)]
    kernel: Option<String>,
    /// Vocabulary size; tokens are 0..m-1.
    #[arg(long)]
    m: Option<usize>,
    /// Absorbing state id (defaults to m-1).
    #[arg(long)]
    mask: Option<u32>,
    /// Embedding table, EMB1 binary or CSV by extension.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Synthesize embeddings instead: grid | clusters.
    #[arg(long)]
    synth: Option<String>,
    /// Embedding dimension for synthesized embeddings.
    #[arg(long)]
    d: Option<usize>,
    /// Embedding metric: gauss | cosine.
    #[arg(long)]
    metric: Option<String>,
    /// Neighbor count for sik-knn.
    #[arg(long)]
    k: Option<usize>,
    /// Self-tuning bandwidth order.
    #[arg(long)]
    bandwidth_k: Option<usize>,
    /// Terminal survival mass of the noise schedule.
    #[arg(long)]
    eps: Option<f64>,
}

impl KernelFlags {
    /// Merge flags into the config.  `default_m` backs `--kernel` without
    /// `--m`, e.g. the vocabulary size read from a checkpoint.
    fn overlay(&self, cfg: &mut RunConfig, default_m: Option<usize>) -> Result<(), CliError> {
        if let Some(raw) = &self.kernel {
            let kind = KernelKind::parse(raw)
                .ok_or_else(|| CliError::config(format!("unknown kernel {raw:?}")))?;
            match &mut cfg.kernel {
                Some(section) => section.kind = kind,
                None => {
                    let m = self.m.or(default_m).ok_or_else(|| {
                        CliError::config("--m is required when the config has no kernel section")
                    })?;
                    cfg.kernel = Some(KernelConfig::new(kind, m));
                }
            }
        }
        let Some(section) = &mut cfg.kernel else {
            return Ok(()); // nothing to overlay onto; callers validate
        };
        if let Some(m) = self.m {
            section.m = m;
        }
        if let Some(mask) = self.mask {
            section.mask = Some(mask);
        }
        if let Some(path) = &self.embeddings {
            section.embeddings = Some(path.clone());
        }
        if let Some(raw) = &self.synth {
            let kind = SynthKind::parse(raw)
                .ok_or_else(|| CliError::config(format!("unknown synth kind {raw:?}")))?;
            section.synth = Some(SynthSpec {
                kind,
                d: self.d.unwrap_or(DEFAULT_SYNTH_D),
                seed: cfg.seed,
            });
        }
        if let Some(raw) = &self.metric {
            section.metric = MetricKind::parse(raw)
                .ok_or_else(|| CliError::config(format!("unknown metric {raw:?}")))?;
        }
        if let Some(k) = self.k {
            section.k = k;
        }
        if let Some(b) = self.bandwidth_k {
            section.bandwidth_k = b;
        }
        // Convenience: a similarity kernel with neither an embedding file
        // nor a synth section falls back to clustered synthetic
        // embeddings seeded by the run seed.
        if matches!(section.kind, KernelKind::SikKnn | KernelKind::SikDense)
            && section.embeddings.is_none()
            && section.synth.is_none()
        {
            section.synth = Some(SynthSpec {
                kind: SynthKind::Clusters,
                d: self.d.unwrap_or(DEFAULT_SYNTH_D),
                seed: cfg.seed,
            });
        }
        if let Some(eps) = self.eps {
            cfg.schedule.eps = eps;
        }
        Ok(())
    }
}

#[derive(Args, Debug, Clone)]
struct CorpusFlags {
    /// Text file; requires --alphabet.
    #[arg(long)]
    text: Option<PathBuf>,
    /// Alphabet JSON mapping characters to dense ids.
    #[arg(long)]
    alphabet: Option<PathBuf>,
    /// TOK1 token file.
    #[arg(long)]
    tokens: Option<PathBuf>,
    /// Synthetic categorical weights, comma separated.
    #[arg(long)]
    qdata: Option<String>,
    /// Sequence length after concatenation and chunking.
    #[arg(long)]
    chunk: Option<usize>,
    /// Synthetic corpus: number of sequences.
    #[arg(long)]
    count: Option<usize>,
    /// Synthetic corpus: tokens per sequence.
    #[arg(long)]
    length: Option<usize>,
}

impl CorpusFlags {
    fn overlay(&self, cfg: &mut RunConfig) -> Result<(), CliError> {
        let sources = [self.text.is_some(), self.tokens.is_some(), self.qdata.is_some()];
        if sources.iter().filter(|&&b| b).count() > 1 {
            return Err(CliError::config(
                "--text, --tokens, and --qdata are mutually exclusive",
            ));
        }
        if let Some(path) = &self.text {
            cfg.corpus = Some(CorpusConfig {
                source: CorpusSource::Text,
                path: Some(path.clone()),
                alphabet: self.alphabet.clone(),
                chunk: self.chunk.unwrap_or(64),
                qdata: None,
                count: 0,
                length: 0,
            });
        } else if let Some(path) = &self.tokens {
            cfg.corpus = Some(CorpusConfig {
                source: CorpusSource::Tokens,
                path: Some(path.clone()),
                alphabet: None,
                chunk: self.chunk.unwrap_or(64),
                qdata: None,
                count: 0,
                length: 0,
            });
        } else if let Some(raw) = &self.qdata {
            cfg.corpus = Some(CorpusConfig {
                source: CorpusSource::Synthetic,
                path: None,
                alphabet: None,
                chunk: 0,
                qdata: Some(parse_f64_list(raw)?),
                count: self.count.unwrap_or(64),
                length: self.length.unwrap_or(32),
            });
        }
        if let Some(section) = &mut cfg.corpus {
            if let Some(chunk) = self.chunk {
                section.chunk = chunk;
            }
            if let Some(count) = self.count {
                section.count = count;
            }
            if let Some(length) = self.length {
                section.length = length;
            }
        }
        Ok(())
    }
}

#[derive(Args, Debug)]
struct NoiseCmd {
    #[command(flatten)]
    common: CommonFlags,
    #[command(flatten)]
    kernel: KernelFlags,
    #[command(flatten)]
    corpus: CorpusFlags,
    /// Noising horizon in (0, 1].
    #[arg(long, default_value_t = 0.5)]
    t: f64,
    /// Also emit one jump-path line per position.
    #[arg(long)]
    paths: bool,
    /// Output file; defaults to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainCmd {
    #[command(flatten)]
    common: CommonFlags,
    #[command(flatten)]
    kernel: KernelFlags,
    #[command(flatten)]
    corpus: CorpusFlags,
    /// Objective: snapshot | campbell.
    #[arg(long)]
    objective: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Optimizer: sgd | momentum | adam.
    #[arg(long)]
    optimizer: Option<String>,
    /// Write the trained model here as TDN1.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Training log JSON-lines; defaults to stdout.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SampleCmd {
    #[command(flatten)]
    common: CommonFlags,
    #[command(flatten)]
    kernel: KernelFlags,
    /// TDN1 checkpoint with a mean-role model.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Decoding grid steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Tokens per generated sequence.
    #[arg(long)]
    len: Option<usize>,
    /// Number of sequences to generate.
    #[arg(long)]
    num: Option<usize>,
    /// Alphabet JSON; adds a detokenized text field to each line.
    #[arg(long)]
    alphabet: Option<PathBuf>,
    /// Output file; defaults to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalCmd {
    #[command(flatten)]
    common: CommonFlags,
    #[command(flatten)]
    kernel: KernelFlags,
    #[command(flatten)]
    corpus: CorpusFlags,
    /// TDN1 checkpoint with a mean-role model.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Monte Carlo rounds for the snapshot bound.
    #[arg(long)]
    mc: Option<usize>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Append one CSV row here (header written when the file is new).
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchCmd {
    /// Bench JSON config: either a bare bench object or a run config
    /// with a "bench" section.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    /// Embedding dimension for similarity kernels.
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    timed: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    t: Option<f64>,
    /// Comma list of kernels, e.g. "uniform,absorb,sik-knn".
    #[arg(long)]
    kernels: Option<String>,
    /// CSV results path; defaults to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// SVG bar chart path.
    #[arg(long)]
    svg: Option<PathBuf>,
    /// Suppress progress output on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct OracleCheckCmd {
    #[command(flatten)]
    common: CommonFlags,
    #[command(flatten)]
    kernel: KernelFlags,
    /// Comma-separated interior check times.
    #[arg(long)]
    times: Option<String>,
    /// Categorical weights for the data distribution (default uniform).
    #[arg(long)]
    qdata: Option<String>,
    /// Output file; defaults to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MakeEmbeddingsCmd {
    /// Layout: grid | clusters.
    #[arg(long, default_value = "clusters")]
    kind: String,
    /// Vocabulary size.
    #[arg(long)]
    m: usize,
    /// Embedding dimension.
    #[arg(long, default_value_t = 8)]
    d: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output path; a .csv extension selects the CSV format.
    #[arg(long)]
    out: PathBuf,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Command::Noise(cmd) => noise_cmd(cmd),
        Command::Train(cmd) => train_cmd(cmd),
        Command::Sample(cmd) => sample_cmd(cmd),
        Command::Eval(cmd) => eval_cmd(cmd),
        Command::Bench(cmd) => bench_cmd(cmd),
        Command::OracleCheck(cmd) => oracle_check_cmd(cmd),
        Command::MakeEmbeddings(cmd) => make_embeddings_cmd(cmd),
    }
}

fn parse_f64_list(raw: &str) -> Result<Vec<f64>, CliError> {
    raw.split(',')
        .map(|p| p.trim())
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.parse::<f64>()
                .map_err(|_| CliError::config(format!("not a number: {p:?}")))
        })
        .collect()
}

fn out_writer(path: &Option<PathBuf>) -> Result<Box<dyn Write>, CliError> {
    match path {
        Some(p) => {
            let file = File::create(p)
                .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", p.display())))?;
            Ok(Box::new(BufWriter::new(file)))
        }
        None => Ok(Box::new(BufWriter::new(std::io::stdout()))),
    }
}

fn json_num(v: f64) -> String {
    if v.is_finite() {
        serde_json::to_string(&v).expect("finite float serializes")
    } else {
        // JSON has no infinities; emit null and let consumers decide.
        "null".to_string()
    }
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("string serializes")
}

fn json_u32s(xs: &[u32]) -> String {
    serde_json::to_string(xs).expect("ids serialize")
}

fn build_pool(workers: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::runtime(format!("thread pool: {e}")))
}

/// Kernel + schedule resolution shared by most subcommands.
fn resolve_setup(
    cfg: &RunConfig,
) -> Result<(gdds_core::kernel::JumpKernel, gdds_core::schedule::Schedule), CliError> {
    let section = cfg
        .kernel
        .as_ref()
        .ok_or_else(|| CliError::config("no kernel: pass --kernel/--m or a config file"))?;
    let kern = section.build()?;
    let sched = cfg.schedule.build()?;
    Ok((kern, sched))
}

fn load_corpus_section(cfg: &RunConfig) -> Result<(Corpus, Option<Alphabet>), CliError> {
    let section = cfg.corpus.as_ref().ok_or_else(|| {
        CliError::config("no corpus: pass --text/--tokens/--qdata or a config file")
    })?;
    Ok(section.load(cfg.seed)?)
}

fn noise_cmd(cmd: NoiseCmd) -> Result<(), CliError> {
    let mut cfg = cmd.common.load()?;
    cmd.kernel.overlay(&mut cfg, None)?;
    cmd.corpus.overlay(&mut cfg)?;
    if !(cmd.t > 0.0 && cmd.t <= 1.0) {
        return Err(CliError::config("--t must lie in (0, 1]"));
    }
    let (kern, sched) = resolve_setup(&cfg)?;
    let (corpus, _alphabet) = load_corpus_section(&cfg)?;
    if corpus.m() > kern.len() {
        return Err(CliError::config(format!(
            "corpus vocabulary {} exceeds kernel vocabulary {}",
            corpus.m(),
            kern.len()
        )));
    }
    let workers = resolve_workers(cfg.workers)?;
    let pool = build_pool(workers)?;
    let seed = cfg.seed;
    let emit_paths = cmd.paths;
    let t = cmd.t;

    let blocks: Result<Vec<Vec<String>>, String> = pool.install(|| {
        corpus
            .sequences()
            .par_iter()
            .enumerate()
            .map(|(j, row)| {
                let batch = noise_sequence(&kern, &sched, row, t, seed, j as u32)
                    .map_err(|e| e.to_string())?;
                let mut lines = Vec::with_capacity(1 + if emit_paths { row.len() } else { 0 });
                lines.push(format!(
                    r#"{{"sequence":{},"t":{},"clean":{},"noised":{}}}"#,
                    j,
                    json_num(t),
                    json_u32s(row),
                    json_u32s(&batch.tokens())
                ));
                if emit_paths {
                    for (pos, path) in batch.paths().iter().enumerate() {
                        let jumps: Vec<(f64, u32)> =
                            path.jumps().map(|(time, _, to)| (time, to)).collect();
                        lines.push(format!(
                            r#"{{"pos":{},"N":{},"jumps":{}}}"#,
                            pos,
                            path.n_jumps(),
                            serde_json::to_string(&jumps).expect("jumps serialize")
                        ));
                    }
                }
                Ok(lines)
            })
            .collect()
    });
    let blocks = blocks.map_err(CliError::Runtime)?;

    let mut w = out_writer(&cmd.out)?;
    for block in blocks {
        for line in block {
            writeln!(w, "{line}").map_err(|e| CliError::runtime(format!("write: {e}")))?;
        }
    }
    w.flush().map_err(|e| CliError::runtime(format!("flush: {e}")))?;
    Ok(())
}

fn train_cmd(cmd: TrainCmd) -> Result<(), CliError> {
    let mut cfg = cmd.common.load()?;
    cmd.kernel.overlay(&mut cfg, None)?;
    cmd.corpus.overlay(&mut cfg)?;
    let mut spec = cfg.train.clone().unwrap_or_default();
    if let Some(raw) = &cmd.objective {
        spec.objective = ObjectiveKind::parse(raw)
            .ok_or_else(|| CliError::config(format!("unknown objective {raw:?}")))?;
    }
    if let Some(steps) = cmd.steps {
        spec.steps = steps;
    }
    if let Some(batch) = cmd.batch {
        spec.batch = batch;
    }
    if let Some(lr) = cmd.lr {
        spec.lr = lr;
    }
    if let Some(raw) = &cmd.optimizer {
        spec.optimizer = OptimizerName::parse(raw)
            .ok_or_else(|| CliError::config(format!("unknown optimizer {raw:?}")))?;
    }

    let (kern, sched) = resolve_setup(&cfg)?;

    // The training source: synthetic categorical weights train directly
    // from the distribution; file corpora train from the flattened pool.
    let corpus_section = cfg.corpus.as_ref().ok_or_else(|| {
        CliError::config("no corpus: pass --text/--tokens/--qdata or a config file")
    })?;
    let qdata_holder;
    let pool_holder;
    let source = match (&corpus_section.source, &corpus_section.qdata) {
        (CorpusSource::Synthetic, Some(weights)) => {
            qdata_holder = DataDistribution::from_weights(weights)
                .map_err(|e| CliError::config(format!("qdata: {e}")))?;
            if qdata_holder.len() > kern.len() {
                return Err(CliError::config(format!(
                    "qdata has {} entries but the kernel vocabulary is {}",
                    qdata_holder.len(),
                    kern.len()
                )));
            }
            TrainSource::Categorical(&qdata_holder)
        }
        _ => {
            let (corpus, _) = load_corpus_section(&cfg)?;
            if corpus.m() > kern.len() {
                return Err(CliError::config(format!(
                    "corpus vocabulary {} exceeds kernel vocabulary {}",
                    corpus.m(),
                    kern.len()
                )));
            }
            pool_holder = corpus.flat();
            TrainSource::Tokens(&pool_holder)
        }
    };

    let mut model = TabularDenoiser::new(kern.len(), spec.objective.role())
        .map_err(|e| CliError::config(format!("model: {e}")))?;
    let tcfg = spec.train_config(cfg.seed);
    let mut w = out_writer(&cmd.log)?;
    let started = Instant::now();
    let mut write_err: Option<std::io::Error> = None;
    let records = train(&mut model, &kern, &sched, source, &tcfg, |rec| {
        if write_err.is_some() {
            return;
        }
        let line = format!(
            r#"{{"step":{},"loss":{},"grad_norm":{},"wall_ms":{}}}"#,
            rec.step,
            json_num(rec.loss),
            json_num(rec.grad_norm),
            json_num(started.elapsed().as_secs_f64() * 1e3)
        );
        if let Err(e) = writeln!(w, "{line}") {
            write_err = Some(e);
        }
    })
    .map_err(|e| CliError::runtime(format!("training: {e}")))?;
    if let Some(e) = write_err {
        return Err(CliError::runtime(format!("write log: {e}")));
    }
    w.flush().map_err(|e| CliError::runtime(format!("flush: {e}")))?;
    drop(w);

    if let Some(path) = &cmd.checkpoint {
        formats::write_checkpoint(path, &model)
            .map_err(|e| CliError::runtime(format!("checkpoint: {e}")))?;
    }
    eprintln!(
        "trained {} steps, final loss {:.6}",
        records.len(),
        records.last().map(|r| r.loss).unwrap_or(f64::NAN)
    );
    Ok(())
}

fn sample_cmd(cmd: SampleCmd) -> Result<(), CliError> {
    let mut cfg = cmd.common.load()?;
    let spec = cfg.sample.clone().unwrap_or_default();
    let steps = cmd.steps.unwrap_or(spec.steps);
    let len = cmd.len.unwrap_or(spec.len);
    let num = cmd.num.unwrap_or(spec.num);

    let model = formats::read_checkpoint(&cmd.checkpoint)?;
    if model.role() != Role::Mean {
        return Err(CliError::config(
            "sampling needs a mean-role checkpoint (trained with the snapshot objective)",
        ));
    }
    // `--kernel` without `--m` sizes the kernel from the checkpoint.
    cmd.kernel.overlay(&mut cfg, Some(model.len()))?;
    let (kern, sched) = resolve_setup(&cfg)?;
    if kern.len() != model.len() {
        return Err(CliError::config(format!(
            "checkpoint vocabulary {} does not match kernel vocabulary {}",
            model.len(),
            kern.len()
        )));
    }
    let alphabet = match &cmd.alphabet {
        Some(path) => Some(Alphabet::from_json_file(path)?),
        None => None,
    };
    let grid = DecodingGrid::uniform(steps)
        .map_err(|e| CliError::config(format!("decoding grid: {e}")))?;

    let workers = resolve_workers(cfg.workers)?;
    let pool = build_pool(workers)?;
    let seed = cfg.seed;
    let lines: Result<Vec<String>, String> = pool.install(|| {
        (0..num)
            .into_par_iter()
            .map(|i| {
                let tokens = generate(&model, &kern, &sched, &grid, len, seed, i as u32)
                    .map_err(|e| e.to_string())?;
                Ok(match &alphabet {
                    Some(alpha) => format!(
                        r#"{{"tokens":{},"text":{}}}"#,
                        json_u32s(&tokens),
                        json_str(&alpha.detokenize(&tokens))
                    ),
                    None => json_u32s(&tokens),
                })
            })
            .collect()
    });
    let lines = lines.map_err(CliError::Runtime)?;

    let mut w = out_writer(&cmd.out)?;
    for line in lines {
        writeln!(w, "{line}").map_err(|e| CliError::runtime(format!("write: {e}")))?;
    }
    w.flush().map_err(|e| CliError::runtime(format!("flush: {e}")))?;
    Ok(())
}

fn format_eval_report(report: &gdds_core::metrics::EvalReport) -> String {
    format!(
        concat!(
            r#"{{"nll":{},"nll_stderr":{},"bpc":{},"ppl":{},"entropy_mean":{},"#,
            r#""distinct":{{"1":{},"2":{},"3":{}}},"sequences":{},"length":{}}}"#
        ),
        json_num(report.nll),
        json_num(report.nll_stderr),
        json_num(report.bpc),
        json_num(report.ppl),
        json_num(report.entropy_mean),
        json_num(report.distinct[0]),
        json_num(report.distinct[1]),
        json_num(report.distinct[2]),
        report.sequences,
        report.length
    )
}

const EVAL_CSV_HEADER: &str =
    "nll,nll_stderr,bpc,ppl,entropy_mean,distinct1,distinct2,distinct3,sequences,length,seed";

fn eval_cmd(cmd: EvalCmd) -> Result<(), CliError> {
    let mut cfg = cmd.common.load()?;
    cmd.corpus.overlay(&mut cfg)?;
    let rounds = cmd
        .mc
        .or(cfg.eval.as_ref().map(|e| e.mc_rounds))
        .unwrap_or_else(|| crate::config::EvalSpec::default().mc_rounds);

    let model = formats::read_checkpoint(&cmd.checkpoint)?;
    if model.role() != Role::Mean {
        return Err(CliError::config(
            "evaluation needs a mean-role checkpoint (trained with the snapshot objective)",
        ));
    }
    // `--kernel` without `--m` sizes the kernel from the checkpoint.
    cmd.kernel.overlay(&mut cfg, Some(model.len()))?;
    let (kern, sched) = resolve_setup(&cfg)?;
    if kern.len() != model.len() {
        return Err(CliError::config(format!(
            "checkpoint vocabulary {} does not match kernel vocabulary {}",
            model.len(),
            kern.len()
        )));
    }
    let (corpus, _alphabet) = load_corpus_section(&cfg)?;
    if corpus.m() > kern.len() {
        return Err(CliError::config(format!(
            "corpus vocabulary {} exceeds kernel vocabulary {}",
            corpus.m(),
            kern.len()
        )));
    }

    let report = nll_bound_snapshot(&model, &kern, &sched, corpus.sequences(), rounds, cfg.seed)
        .map_err(|e| match e {
            gdds_core::metrics::MetricsError::Noise(inner) => {
                CliError::runtime(format!("noising during evaluation: {inner}"))
            }
            other => CliError::config(other.to_string()),
        })?;

    let line = format_eval_report(&report);
    match &cmd.json {
        Some(path) => {
            let mut w = out_writer(&Some(path.clone()))?;
            writeln!(w, "{line}").map_err(|e| CliError::runtime(format!("write: {e}")))?;
            w.flush().map_err(|e| CliError::runtime(format!("flush: {e}")))?;
        }
        None => println!("{line}"),
    }

    if let Some(path) = &cmd.csv {
        let fresh = !path.exists();
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| CliError::runtime(format!("cannot open {}: {e}", path.display())))?;
        if fresh {
            writeln!(file, "{EVAL_CSV_HEADER}")
                .map_err(|e| CliError::runtime(format!("write: {e}")))?;
        }
        writeln!(
            file,
            "{},{},{},{},{},{},{},{},{},{},{}",
            report.nll,
            report.nll_stderr,
            report.bpc,
            report.ppl,
            report.entropy_mean,
            report.distinct[0],
            report.distinct[1],
            report.distinct[2],
            report.sequences,
            report.length,
            cfg.seed
        )
        .map_err(|e| CliError::runtime(format!("write: {e}")))?;
    }
    Ok(())
}

fn bench_cmd(cmd: BenchCmd) -> Result<(), CliError> {
    let mut cfg = match &cmd.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
            let value: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| CliError::config(format!("config parse error: {e}")))?;
            if value.get("bench").is_some() {
                let run: RunConfig = RunConfig::parse(&text)?;
                run.bench
                    .ok_or_else(|| CliError::config("config has an empty bench section"))?
            } else {
                serde_json::from_value(value)
                    .map_err(|e| CliError::config(format!("bench config: {e}")))?
            }
        }
        None => bench::BenchConfig::default(),
    };
    if let Some(v) = cmd.seed {
        cfg.seed = v;
    }
    if let Some(v) = cmd.workers {
        cfg.workers = Some(v);
    }
    if let Some(v) = cmd.batch {
        cfg.batch = v;
    }
    if let Some(v) = cmd.seq_len {
        cfg.seq_len = v;
    }
    if let Some(v) = cmd.m {
        cfg.m = v;
    }
    if let Some(v) = cmd.d {
        cfg.d = v;
    }
    if let Some(v) = cmd.seeds {
        cfg.seeds = v;
    }
    if let Some(v) = cmd.timed {
        cfg.timed = v;
    }
    if let Some(v) = cmd.warmup {
        cfg.warmup = v;
    }
    if let Some(v) = cmd.t {
        cfg.t = v;
    }
    if let Some(raw) = &cmd.kernels {
        let kinds: Result<Vec<KernelKind>, CliError> = raw
            .split(',')
            .map(|p| p.trim())
            .filter(|p| !p.is_empty())
            .map(|p| {
                KernelKind::parse(p)
                    .ok_or_else(|| CliError::config(format!("unknown kernel {p:?}")))
            })
            .collect();
        cfg.kernels = kinds?;
    }

    let quiet = cmd.quiet;
    let result = match bench::run_bench_with(&cfg, |msg| {
        if !quiet {
            eprintln!("bench: {msg}");
        }
    }) {
        Ok(result) => result,
        Err(BenchError::NoTimedRuns) => {
            // Contract: zero timed runs produce an empty result and exit
            // code 2.  The CSV artifact still appears, header only.
            if let Some(path) = &cmd.out {
                let mut w = out_writer(&Some(path.clone()))?;
                writeln!(w, "{}", bench::CSV_HEADER)
                    .map_err(|e| CliError::runtime(format!("write: {e}")))?;
                w.flush().map_err(|e| CliError::runtime(format!("flush: {e}")))?;
            }
            return Err(CliError::config("zero timed runs requested"));
        }
        Err(BenchError::Config(msg)) => return Err(CliError::Config(msg)),
        Err(BenchError::Noise(msg)) => return Err(CliError::Runtime(msg)),
    };

    let mut w = out_writer(&cmd.out)?;
    bench::write_csv(&result, &mut w).map_err(|e| CliError::runtime(format!("csv: {e}")))?;
    w.flush().map_err(|e| CliError::runtime(format!("flush: {e}")))?;
    drop(w);
    if let Some(path) = &cmd.svg {
        let mut w = out_writer(&Some(path.clone()))?;
        bench::write_svg(&result, &mut w).map_err(|e| CliError::runtime(format!("svg: {e}")))?;
        w.flush().map_err(|e| CliError::runtime(format!("flush: {e}")))?;
    }
    if !quiet {
        for report in &result.reports {
            eprintln!(
                "bench: {:<9} {:>12.3} ms +- {:>8.3} ({:.0} tokens/s)",
                report.kernel.name(),
                report.mean_ms,
                report.std_ms,
                report.tokens_per_sec
            );
        }
    }
    Ok(())
}

fn oracle_check_cmd(cmd: OracleCheckCmd) -> Result<(), CliError> {
    let mut cfg = cmd.common.load()?;
    cmd.kernel.overlay(&mut cfg, None)?;
    let (kern, sched) = resolve_setup(&cfg)?;
    let times = match &cmd.times {
        Some(raw) => parse_f64_list(raw)?,
        None => vec![0.25, 0.5, 0.9],
    };
    if times.is_empty() || times.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
        return Err(CliError::config("--times must be interior points of (0, 1)"));
    }
    let qdata = match &cmd.qdata {
        Some(raw) => DataDistribution::from_weights(&parse_f64_list(raw)?)
            .map_err(|e| CliError::config(format!("qdata: {e}")))?,
        None => DataDistribution::uniform(kern.len()),
    };
    if qdata.len() != kern.len() {
        return Err(CliError::config(format!(
            "qdata has {} entries but the kernel vocabulary is {}",
            qdata.len(),
            kern.len()
        )));
    }

    let checks = invariant_battery(&kern, &sched, &qdata, &times)
        .map_err(|e| CliError::runtime(format!("invariant battery: {e}")))?;
    let all_pass = checks.iter().all(|c| c.pass);
    let kind = cfg.kernel.as_ref().map(|k| k.kind.name()).unwrap_or("?");
    let times_json: Vec<String> = times.iter().map(|&t| json_num(t)).collect();
    let checks_json: Vec<String> = checks
        .iter()
        .map(|c| {
            format!(
                r#"{{"name":{},"pass":{},"max_err":{}}}"#,
                json_str(c.name),
                c.pass,
                json_num(c.max_err)
            )
        })
        .collect();
    let line = format!(
        r#"{{"kernel":{},"m":{},"eps":{},"times":[{}],"checks":[{}],"all_pass":{}}}"#,
        json_str(kind),
        kern.len(),
        json_num(cfg.schedule.eps),
        times_json.join(","),
        checks_json.join(","),
        all_pass
    );
    let mut w = out_writer(&cmd.out)?;
    writeln!(w, "{line}").map_err(|e| CliError::runtime(format!("write: {e}")))?;
    w.flush().map_err(|e| CliError::runtime(format!("flush: {e}")))?;
    if !all_pass {
        let failed: Vec<&str> = checks.iter().filter(|c| !c.pass).map(|c| c.name).collect();
        return Err(CliError::runtime(format!(
            "invariant battery failed: {}",
            failed.join(", ")
        )));
    }
    Ok(())
}

fn make_embeddings_cmd(cmd: MakeEmbeddingsCmd) -> Result<(), CliError> {
    let kind = SynthKind::parse(&cmd.kind)
        .ok_or_else(|| CliError::config(format!("unknown synth kind {:?}", cmd.kind)))?;
    let emb = synth_embeddings(kind, cmd.m, cmd.d, cmd.seed)
        .map_err(|e| CliError::config(format!("embeddings: {e}")))?;
    let is_csv = cmd
        .out
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e == "csv")
        .unwrap_or(false);
    let write = if is_csv {
        formats::write_embeddings_csv(&cmd.out, &emb)
    } else {
        formats::write_embeddings(&cmd.out, &emb)
    };
    write.map_err(|e| CliError::runtime(format!("write {}: {e}", cmd.out.display())))?;
    println!(
        r#"{{"kind":{},"m":{},"d":{},"path":{}}}"#,
        json_str(kind.name()),
        cmd.m,
        cmd.d,
        json_str(&cmd.out.display().to_string())
    );
    Ok(())
}
