//! Target-model access: the [`Backend`] trait plus a remote client for
//! OpenAI-compatible servers, the offline memorizer, a persistent cache and
//! a small wire-protocol server.

use std::collections::BTreeSet;
use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

mod cache;
mod memorizer;
mod remote;
mod serve;

pub use cache::{cache_file_name, CacheEntry, CacheStats, CacheStore, CachedBackend};
pub use memorizer::{MemorizerBackend, MemorizerConfig};
pub use remote::{RemoteBackend, RemoteConfig, RetryPolicy};
pub use serve::WireServer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Capability {
    TextCompletion,
    Chat,
    Logprobs,
}

/// Which endpoint the descriptor routes prompts to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    #[default]
    Completion,
    Chat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub model_id: String,
    pub capabilities: BTreeSet<Capability>,
    #[serde(default)]
    pub endpoint: String,
    #[serde(default)]
    pub protocol: Protocol,
    /// Name of the environment variable holding the API key.
    #[serde(default)]
    pub api_key_env: Option<String>,
}

impl BackendDescriptor {
    /// An in-process backend: no endpoint, no key.
    pub fn local(model_id: impl Into<String>, capabilities: impl IntoIterator<Item = Capability>) -> Self {
        Self {
            model_id: model_id.into(),
            capabilities: capabilities.into_iter().collect(),
            endpoint: String::new(),
            protocol: Protocol::default(),
            api_key_env: None,
        }
    }

    pub fn has(&self, cap: Capability) -> bool {
        self.capabilities.contains(&cap)
    }

    pub fn require(&self, cap: Capability) -> Result<()> {
        if self.has(cap) {
            Ok(())
        } else {
            Err(Error::Capability {
                model: self.model_id.clone(),
                capability: cap,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: usize,
    pub n_samples: usize,
    pub seed: Option<u64>,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_p: 0.95,
            max_tokens: 256,
            n_samples: 50,
            seed: None,
        }
    }
}

impl SamplingParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be a finite value >= 0, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::InvalidArgument(format!("top_p must lie in (0, 1], got {}", self.top_p)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Other,
}

impl FinishReason {
    pub fn parse(s: Option<&str>) -> FinishReason {
        match s {
            Some("stop") => FinishReason::Stop,
            Some("length") => FinishReason::Length,
            _ => FinishReason::Other,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FinishReason::Stop => "stop",
            FinishReason::Length => "length",
            FinishReason::Other => "other",
        }
    }
}

/// `(token, natural-log probability)`.
pub type TokenLogprob = (String, f64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<TokenLogprob>>,
    pub finish_reason: FinishReason,
}

/// A target model.
///
/// Sample `i` of a prompt is addressed by its index so that caches and
/// subsampling can reuse a pool of generations across runs.
pub trait Backend: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    /// Generations for sample indices `indices`, in index order.
    fn sample(&self, prompt: &str, params: &SamplingParams, indices: Range<usize>) -> Result<Vec<Generation>>;

    /// `params.n_samples` generations, sample indices `0..n`.
    fn complete(&self, prompt: &str, params: &SamplingParams) -> Result<Vec<Generation>> {
        self.sample(prompt, params, 0..params.n_samples)
    }

    /// Teacher-forced per-token log-probabilities of `text`.
    fn score_logprobs(&self, _text: &str) -> Result<Vec<TokenLogprob>> {
        self.descriptor().require(Capability::Logprobs)?;
        Err(Error::Backend("score_logprobs not supported".into()))
    }
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn descriptor(&self) -> &BackendDescriptor {
        (**self).descriptor()
    }
    fn sample(&self, prompt: &str, params: &SamplingParams, indices: Range<usize>) -> Result<Vec<Generation>> {
        (**self).sample(prompt, params, indices)
    }
    fn score_logprobs(&self, text: &str) -> Result<Vec<TokenLogprob>> {
        (**self).score_logprobs(text)
    }
}

impl<B: Backend + ?Sized> Backend for &B {
    fn descriptor(&self) -> &BackendDescriptor {
        (**self).descriptor()
    }
    fn sample(&self, prompt: &str, params: &SamplingParams, indices: Range<usize>) -> Result<Vec<Generation>> {
        (**self).sample(prompt, params, indices)
    }
    fn score_logprobs(&self, text: &str) -> Result<Vec<TokenLogprob>> {
        (**self).score_logprobs(text)
    }
}

/// Wraps a backend and counts the traffic that reaches it.
pub struct CountingBackend<B> {
    inner: B,
    calls: AtomicU64,
    samples: AtomicU64,
    logprob_calls: AtomicU64,
}

impl<B: Backend> CountingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            calls: AtomicU64::new(0),
            samples: AtomicU64::new(0),
            logprob_calls: AtomicU64::new(0),
        }
    }

    /// Number of `sample` requests.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    /// Total generations returned.
    pub fn samples(&self) -> u64 {
        self.samples.load(Ordering::Relaxed)
    }

    pub fn logprob_calls(&self) -> u64 {
        self.logprob_calls.load(Ordering::Relaxed)
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: Backend> Backend for CountingBackend<B> {
    fn descriptor(&self) -> &BackendDescriptor {
        self.inner.descriptor()
    }

    fn sample(&self, prompt: &str, params: &SamplingParams, indices: Range<usize>) -> Result<Vec<Generation>> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let out = self.inner.sample(prompt, params, indices)?;
        self.samples.fetch_add(out.len() as u64, Ordering::Relaxed);
        Ok(out)
    }

    fn score_logprobs(&self, text: &str) -> Result<Vec<TokenLogprob>> {
        self.logprob_calls.fetch_add(1, Ordering::Relaxed);
        self.inner.score_logprobs(text)
    }
}
