//! Run configuration.
//!
//! A run is described by one JSON document with a strict schema: unknown
//! keys are rejected everywhere, so typos fail loudly instead of silently
//! falling back to defaults.  Parsing then serializing then parsing again
//! is a fixed point; tests pin that property.
//!
//! Precedence for the worker count is `GDDS_WORKERS` environment variable,
//! then the `workers` config key, then 1.

use std::path::{Path, PathBuf};

use gdds_core::kernel::{JumpKernel, Metric, MixSchedule, TempSchedule};
use gdds_core::oracle::DataDistribution;
use gdds_core::schedule::Schedule;
use serde::{Deserialize, Serialize};

use crate::bench::BenchConfig;
use crate::corpus::{
    corpus_from_categorical, corpus_from_text_file, corpus_from_tokens, Alphabet, Corpus,
};
use crate::formats;
use crate::synth::{synth_embeddings, SynthKind};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Format(#[from] crate::formats::FormatError),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

/// Top-level run description.  Every section is optional except that the
/// subcommands validate what they need at dispatch time.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<KernelConfig>,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<CorpusConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample: Option<SampleSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bench: Option<BenchConfig>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig, ConfigError> {
        RunConfig::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Uniform,
    Absorb,
    SikKnn,
    SikDense,
}

impl KernelKind {
    pub fn parse(s: &str) -> Option<KernelKind> {
        match s {
            "uniform" => Some(KernelKind::Uniform),
            "absorb" => Some(KernelKind::Absorb),
            "sik-knn" | "sik_knn" => Some(KernelKind::SikKnn),
            "sik-dense" | "sik_dense" => Some(KernelKind::SikDense),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            KernelKind::Uniform => "uniform",
            KernelKind::Absorb => "absorb",
            KernelKind::SikKnn => "sik_knn",
            KernelKind::SikDense => "sik_dense",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    #[default]
    Gauss,
    Cosine,
}

impl MetricKind {
    pub fn parse(s: &str) -> Option<MetricKind> {
        match s {
            "gauss" => Some(MetricKind::Gauss),
            "cosine" => Some(MetricKind::Cosine),
            _ => None,
        }
    }

    pub fn to_metric(self) -> Metric {
        match self {
            MetricKind::Gauss => Metric::Gauss,
            MetricKind::Cosine => Metric::Cosine,
        }
    }
}

/// Synthetic embedding request used when no embedding file is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub d: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_k() -> usize {
    16
}

fn default_bandwidth_k() -> usize {
    8
}

fn default_tau0() -> f64 {
    1.0
}

fn default_tau_growth() -> f64 {
    4.0
}

fn default_mix_scale() -> f64 {
    1.0
}

fn default_mix_exponent() -> f64 {
    2.0
}

fn default_block_size() -> usize {
    4096
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub kind: KernelKind,
    pub m: usize,
    /// Absorbing state; defaults to the last token id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<u32>,
    /// Embedding file (`EMB1` binary, or CSV by extension).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
    /// Synthetic embeddings when no file is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
    #[serde(default)]
    pub metric: MetricKind,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_bandwidth_k")]
    pub bandwidth_k: usize,
    #[serde(default = "default_tau0")]
    pub tau0: f64,
    #[serde(default = "default_tau_growth")]
    pub tau_growth: f64,
    #[serde(default = "default_mix_scale")]
    pub mix_scale: f64,
    #[serde(default = "default_mix_exponent")]
    pub mix_exponent: f64,
    #[serde(default = "default_block_size")]
    pub block_size: usize,
}

impl KernelConfig {
    pub fn new(kind: KernelKind, m: usize) -> KernelConfig {
        KernelConfig {
            kind,
            m,
            mask: None,
            embeddings: None,
            synth: None,
            metric: MetricKind::Gauss,
            k: default_k(),
            bandwidth_k: default_bandwidth_k(),
            tau0: default_tau0(),
            tau_growth: default_tau_growth(),
            mix_scale: default_mix_scale(),
            mix_exponent: default_mix_exponent(),
            block_size: default_block_size(),
        }
    }

    pub fn mask_id(&self) -> u32 {
        self.mask
            .unwrap_or_else(|| self.m.saturating_sub(1) as u32)
    }

    fn embeddings_table(&self) -> Result<gdds_core::kernel::EmbeddingTable, ConfigError> {
        let emb = match (&self.embeddings, &self.synth) {
            (Some(path), _) => formats::load_embeddings(path)?,
            (None, Some(spec)) => synth_embeddings(spec.kind, self.m, spec.d, spec.seed)
                .map_err(|e| invalid(format!("synthetic embeddings: {e}")))?,
            (None, None) => {
                return Err(invalid(
                    "similarity kernels need an embeddings file or a synth section",
                ))
            }
        };
        if emb.len() != self.m {
            return Err(invalid(format!(
                "embeddings hold {} rows but the kernel declares m = {}",
                emb.len(),
                self.m
            )));
        }
        Ok(emb)
    }

    pub fn build(&self) -> Result<JumpKernel, ConfigError> {
        let temp = TempSchedule {
            tau0: self.tau0,
            growth: self.tau_growth,
        };
        let mix = MixSchedule {
            scale: self.mix_scale,
            exponent: self.mix_exponent,
        };
        let kern = match self.kind {
            KernelKind::Uniform => JumpKernel::uniform(self.m),
            KernelKind::Absorb => JumpKernel::absorb(self.m, self.mask_id()),
            KernelKind::SikKnn => {
                let emb = self.embeddings_table()?;
                JumpKernel::sik_knn(
                    &emb,
                    self.metric.to_metric(),
                    self.k,
                    self.bandwidth_k,
                    temp,
                    mix,
                )
            }
            KernelKind::SikDense => {
                let emb = self.embeddings_table()?;
                JumpKernel::sik_dense(
                    &emb,
                    self.metric.to_metric(),
                    self.bandwidth_k,
                    temp,
                    self.block_size,
                )
            }
        };
        kern.map_err(|e| invalid(format!("kernel: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    LogLinear,
    Linear,
    Custom,
}

fn default_eps() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default)]
    pub kind: ScheduleKind,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Tabulated survival values for `kind = "custom"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<Vec<f64>>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            kind: ScheduleKind::LogLinear,
            eps: default_eps(),
            table: None,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<Schedule, ConfigError> {
        let sched = match self.kind {
            ScheduleKind::LogLinear => Schedule::log_linear(self.eps),
            ScheduleKind::Linear => Schedule::linear(self.eps),
            ScheduleKind::Custom => {
                let table = self
                    .table
                    .as_ref()
                    .ok_or_else(|| invalid("custom schedule needs a table"))?;
                Schedule::custom(table)
            }
        };
        sched.map_err(|e| invalid(format!("schedule: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusSource {
    Text,
    Tokens,
    Synthetic,
}

fn default_chunk() -> usize {
    64
}

fn default_count() -> usize {
    64
}

fn default_length() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub source: CorpusSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alphabet: Option<PathBuf>,
    /// Fixed sequence length after concatenation.
    #[serde(default = "default_chunk")]
    pub chunk: usize,
    /// Categorical weights for the synthetic source; normalized on load.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qdata: Option<Vec<f64>>,
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default = "default_length")]
    pub length: usize,
}

impl CorpusConfig {
    /// Materialize the corpus.  The seed only matters for the synthetic
    /// source.  Returns the alphabet when one was loaded so callers can
    /// detokenize outputs.
    pub fn load(&self, seed: u64) -> Result<(Corpus, Option<Alphabet>), ConfigError> {
        match self.source {
            CorpusSource::Text => {
                let path = self
                    .path
                    .as_ref()
                    .ok_or_else(|| invalid("text corpus needs a path"))?;
                let alphabet_path = self
                    .alphabet
                    .as_ref()
                    .ok_or_else(|| invalid("text corpus needs an alphabet"))?;
                let alphabet = Alphabet::from_json_file(alphabet_path)?;
                let corpus = corpus_from_text_file(path, &alphabet, self.chunk)?;
                Ok((corpus, Some(alphabet)))
            }
            CorpusSource::Tokens => {
                let path = self
                    .path
                    .as_ref()
                    .ok_or_else(|| invalid("token corpus needs a path"))?;
                let (m, flat) = formats::read_tokens(path)?;
                Ok((corpus_from_tokens(m as usize, flat, self.chunk)?, None))
            }
            CorpusSource::Synthetic => {
                let weights = self
                    .qdata
                    .as_ref()
                    .ok_or_else(|| invalid("synthetic corpus needs qdata weights"))?;
                let qdata = DataDistribution::from_weights(weights)
                    .map_err(|e| invalid(format!("qdata: {e}")))?;
                let corpus = corpus_from_categorical(&qdata, self.count, self.length, seed)?;
                Ok((corpus, None))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    /// Snapshot cross entropy on a mean (posterior) model.
    #[default]
    Snapshot,
    /// Per-jump cross entropy along forward paths on a jump model.
    Campbell,
}

impl ObjectiveKind {
    pub fn parse(s: &str) -> Option<ObjectiveKind> {
        match s {
            "snapshot" => Some(ObjectiveKind::Snapshot),
            "campbell" => Some(ObjectiveKind::Campbell),
            _ => None,
        }
    }

    pub fn role(&self) -> gdds_core::denoiser::Role {
        match self {
            ObjectiveKind::Snapshot => gdds_core::denoiser::Role::Mean,
            ObjectiveKind::Campbell => gdds_core::denoiser::Role::Jump,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    Sgd,
    Momentum,
    #[default]
    Adam,
}

impl OptimizerName {
    pub fn parse(s: &str) -> Option<OptimizerName> {
        match s {
            "sgd" => Some(OptimizerName::Sgd),
            "momentum" => Some(OptimizerName::Momentum),
            "adam" => Some(OptimizerName::Adam),
            _ => None,
        }
    }
}

fn default_lr() -> f64 {
    0.05
}

fn default_steps() -> usize {
    500
}

fn default_batch() -> usize {
    32
}

fn default_beta() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_adam_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    #[serde(default)]
    pub objective: ObjectiveKind,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default)]
    pub optimizer: OptimizerName,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            objective: ObjectiveKind::Snapshot,
            lr: default_lr(),
            steps: default_steps(),
            batch: default_batch(),
            optimizer: OptimizerName::Adam,
            beta: default_beta(),
            beta2: default_beta2(),
            adam_eps: default_adam_eps(),
        }
    }
}

impl TrainSpec {
    pub fn optimizer_kind(&self) -> gdds_core::denoiser::OptimizerKind {
        use gdds_core::denoiser::OptimizerKind;
        match self.optimizer {
            OptimizerName::Sgd => OptimizerKind::Sgd,
            OptimizerName::Momentum => OptimizerKind::Momentum { beta: self.beta },
            OptimizerName::Adam => OptimizerKind::AdamLike {
                beta1: self.beta,
                beta2: self.beta2,
                eps: self.adam_eps,
            },
        }
    }

    pub fn train_config(&self, seed: u64) -> gdds_core::denoiser::TrainConfig {
        gdds_core::denoiser::TrainConfig {
            lr: self.lr,
            steps: self.steps,
            batch: self.batch,
            optimizer: self.optimizer_kind(),
            seed,
        }
    }
}

fn default_sample_steps() -> usize {
    64
}

fn default_sample_len() -> usize {
    32
}

fn default_sample_num() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSpec {
    #[serde(default = "default_sample_steps")]
    pub steps: usize,
    #[serde(default = "default_sample_len")]
    pub len: usize,
    #[serde(default = "default_sample_num")]
    pub num: usize,
}

impl Default for SampleSpec {
    fn default() -> Self {
        SampleSpec {
            steps: default_sample_steps(),
            len: default_sample_len(),
            num: default_sample_num(),
        }
    }
}

fn default_mc_rounds() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    /// Monte Carlo rounds for the snapshot bound.
    #[serde(default = "default_mc_rounds")]
    pub mc_rounds: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            mc_rounds: default_mc_rounds(),
        }
    }
}

/// Worker count precedence: `GDDS_WORKERS` env var, then the config key,
/// then 1.  A set but malformed env var is a configuration error.
pub fn resolve_workers(config_workers: Option<usize>) -> Result<usize, ConfigError> {
    match std::env::var("GDDS_WORKERS") {
        Ok(raw) => match raw.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(invalid(format!(
                "GDDS_WORKERS must be a positive integer, got {raw:?}"
            ))),
        },
        Err(std::env::VarError::NotPresent) => Ok(config_workers.unwrap_or(1).max(1)),
        Err(e) => Err(invalid(format!("GDDS_WORKERS: {e}"))),
    }
}
