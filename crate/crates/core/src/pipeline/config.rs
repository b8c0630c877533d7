//! Pipeline configuration, presets and backend construction.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::conversation::Strategy;
use crate::difficulty::{HashEmbedder, HashTopicModel};
use crate::error::{BackendError, Error, Result};
use crate::llm::{
    CompletionBackend, EmbeddingBackend, GenerationSettings, LlmClient, MockBackend, ResponseCache, RetryPolicy,
    SyntheticBackend, TcpBackend, TopicBackend,
};
use crate::rules::RuleConfig;
use crate::trainer::TrainConfig;

/// Where completions, topic distributions or embeddings come from.
///
/// `synthetic` and `hash` are the built-in offline backends, `mock:DIR`
/// replays scripted completions from `DIR`, and `tcp://HOST:PORT` talks to a
/// JSON-lines server.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BackendSpec {
    Synthetic,
    Hash,
    Mock(PathBuf),
    Tcp(String),
}

impl TryFrom<String> for BackendSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<BackendSpec> for String {
    fn from(b: BackendSpec) -> String {
        b.to_string()
    }
}

impl std::str::FromStr for BackendSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(BackendSpec::Synthetic),
            "hash" => Ok(BackendSpec::Hash),
            _ if s.starts_with("mock:") => Ok(BackendSpec::Mock(PathBuf::from(&s[5..]))),
            _ if s.starts_with("tcp://") => Ok(BackendSpec::Tcp(s.to_string())),
            _ => Err(Error::ConfigInvalid(format!("unknown backend `{s}`"))),
        }
    }
}

impl std::fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BackendSpec::Synthetic => f.write_str("synthetic"),
            BackendSpec::Hash => f.write_str("hash"),
            BackendSpec::Mock(dir) => write!(f, "mock:{}", dir.display()),
            BackendSpec::Tcp(addr) => f.write_str(addr),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub completion: Option<BackendSpec>,
    pub topic: BackendSpec,
    pub embedding: BackendSpec,
    pub generation: GenerationSettings,
    pub retry: RetryPolicy,
    pub timeout_secs: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            completion: None,
            topic: BackendSpec::Hash,
            embedding: BackendSpec::Hash,
            generation: GenerationSettings::default(),
            retry: RetryPolicy::default(),
            timeout_secs: 120,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub bucket_count: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig { bucket_count: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub corpus: PathBuf,
    pub output_dir: PathBuf,
    /// Token budget for assembled sequences, sentinels included.
    pub max_tokens: usize,
    /// Zero means one worker per available core.
    pub workers: usize,
    pub strategies: Vec<Strategy>,
    pub backend: BackendConfig,
    pub rules: RuleConfig,
    pub filter: FilterConfig,
    pub train: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            corpus: PathBuf::from("corpus.jsonl"),
            output_dir: PathBuf::from("out"),
            max_tokens: 512,
            workers: 0,
            strategies: Strategy::ALL.to_vec(),
            backend: BackendConfig::default(),
            rules: RuleConfig::default(),
            filter: FilterConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Shipped defaults for the two reference datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Qrecc,
    Topiocqa,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "qrecc" => Ok(Preset::Qrecc),
            "topiocqa" => Ok(Preset::Topiocqa),
            _ => Err(Error::ConfigInvalid(format!("unknown preset `{s}`"))),
        }
    }
}

impl PipelineConfig {
    pub fn preset(preset: Preset) -> Self {
        let mut cfg = PipelineConfig::default();
        let (r_w, tau, alpha, lr) = match preset {
            Preset::Qrecc => (0.5, 0.0012, 1.0, 1e-5),
            Preset::Topiocqa => (0.9, 0.001, 0.1, 1.5e-5),
        };
        cfg.rules.token_mask_ratio = r_w;
        cfg.rules.turn_mask_ratio = 0.5;
        cfg.train.temperature = tau;
        cfg.train.alpha = alpha;
        cfg.train.learning_rate = lr;
        cfg.train.batch_size = 12;
        cfg.train.hard_negatives = 1;
        cfg.filter.bucket_count = 10;
        cfg
    }

    /// Reads a TOML file. A top-level `preset = "qrecc"` or `"topiocqa"` key
    /// selects the base values the rest of the file overrides. Relative paths
    /// resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut value: toml::Table =
            toml::from_str(&text).map_err(|e| Error::ConfigInvalid(format!("{}: {e}", path.display())))?;
        let base = match value.remove("preset") {
            Some(toml::Value::String(name)) => PipelineConfig::preset(name.parse()?),
            Some(other) => return Err(Error::ConfigInvalid(format!("preset must be a string, got {other}"))),
            None => PipelineConfig::default(),
        };
        let mut merged = toml::Table::try_from(&base).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        merge(&mut merged, value);
        let mut cfg: PipelineConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e| Error::ConfigInvalid(format!("{}: {e}", path.display())))?;
        if let Some(dir) = path.parent() {
            cfg.resolve_relative(dir);
        }
        Ok(cfg)
    }

    fn resolve_relative(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        fix(&mut self.corpus);
        fix(&mut self.output_dir);
        if let Some(BackendSpec::Mock(p)) = &mut self.backend.completion {
            fix(p);
        }
    }

    /// Sets the seed used by rule augmentations, batching and training.
    pub fn set_seed(&mut self, seed: u64) {
        self.rules.global_seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.rules.validate()?;
        self.train.validate()?;
        if self.max_tokens < 3 {
            return Err(Error::ConfigInvalid("max_tokens must be at least 3".into()));
        }
        if self.filter.bucket_count == 0 {
            return Err(Error::ConfigInvalid("bucket_count must be at least 1".into()));
        }
        let needs_llm = self.strategies.iter().any(|s| s.needs_llm());
        if needs_llm && self.backend.completion.is_none() {
            return Err(Error::ConfigInvalid(
                "LLM strategies are enabled but no completion backend is configured".into(),
            ));
        }
        for (what, spec) in [("topic", &self.backend.topic), ("embedding", &self.backend.embedding)] {
            if matches!(spec, BackendSpec::Synthetic | BackendSpec::Mock(_)) {
                return Err(Error::ConfigInvalid(format!("{what} backend must be `hash` or tcp://")));
            }
        }
        if matches!(self.backend.completion, Some(BackendSpec::Hash)) {
            return Err(Error::ConfigInvalid("`hash` is not a completion backend".into()));
        }
        if let Some(BackendSpec::Mock(dir)) = &self.backend.completion {
            if !dir.is_dir() {
                return Err(Error::ConfigInvalid(format!("mock directory {} does not exist", dir.display())));
            }
        }
        Ok(())
    }

    pub fn worker_count(&self) -> usize {
        if self.workers > 0 {
            self.workers
        } else {
            thread::available_parallelism().map_or(1, |n| n.get())
        }
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.output_dir.join("cache")
    }

    pub fn completion_client(&self) -> Result<LlmClient> {
        let spec = self
            .backend
            .completion
            .as_ref()
            .ok_or_else(|| Error::ConfigInvalid("no completion backend configured".into()))?;
        let backend: Arc<dyn CompletionBackend> = match spec {
            BackendSpec::Synthetic => Arc::new(SyntheticBackend),
            BackendSpec::Mock(dir) => Arc::new(MockBackend::from_dir(dir)?),
            BackendSpec::Tcp(addr) => Arc::new(self.tcp(addr)),
            BackendSpec::Hash => return Err(Error::ConfigInvalid("`hash` is not a completion backend".into())),
        };
        Ok(LlmClient::new(backend)
            .with_cache(ResponseCache::new(self.cache_dir())?)
            .with_retry(self.backend.retry)
            .with_settings(self.backend.generation)
            .with_max_in_flight(self.worker_count()))
    }

    fn tcp(&self, addr: &str) -> TcpBackend {
        TcpBackend::new(addr).with_timeout(std::time::Duration::from_secs(self.backend.timeout_secs))
    }

    pub fn topic_backend(&self) -> Box<dyn TopicBackend> {
        match &self.backend.topic {
            BackendSpec::Tcp(addr) => Box::new(Retrying {
                inner: self.tcp(addr),
                policy: self.backend.retry,
            }),
            _ => Box::new(HashTopicModel::default()),
        }
    }

    pub fn embedding_backend(&self) -> Box<dyn EmbeddingBackend> {
        match &self.backend.embedding {
            BackendSpec::Tcp(addr) => Box::new(Retrying {
                inner: self.tcp(addr),
                policy: self.backend.retry,
            }),
            _ => Box::new(HashEmbedder::default()),
        }
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Retries transient topic and embedding failures with the completion
/// client's backoff policy.
struct Retrying<B> {
    inner: B,
    policy: RetryPolicy,
}

impl<B> Retrying<B> {
    fn run<T>(&self, mut f: impl FnMut() -> Result<T, BackendError>) -> Result<T, BackendError> {
        let mut attempt = 1;
        loop {
            match f() {
                Err(e) if e.is_retryable() && attempt < self.policy.max_attempts => {
                    thread::sleep(self.policy.delay(attempt));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

impl<B: TopicBackend> TopicBackend for Retrying<B> {
    fn topic_distribution(&self, text: &str) -> Result<Vec<(String, f64)>, BackendError> {
        self.run(|| self.inner.topic_distribution(text))
    }
}

impl<B: EmbeddingBackend> EmbeddingBackend for Retrying<B> {
    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        self.run(|| self.inner.embed(text))
    }
}
