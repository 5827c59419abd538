//! Python bindings. Configs cross the boundary as JSON strings with the same
//! field names the Rust types serialize to.

use std::sync::Arc;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use ngcov_core::attack::{self, AttackConfig};
use ngcov_core::backends::{
    Backend, BackendDescriptor, Capability, MemorizerBackend, MemorizerConfig, Protocol, RemoteBackend, RemoteConfig,
    SamplingParams,
};
use ngcov_core::baselines::{self, LogprobRecord};
use ngcov_core::corpus::{self, Candidate, Dataset, Label};
use ngcov_core::eval;
use ngcov_core::similarity::{self as sim, Metric, SimilarityConfig};
use ngcov_core::textops::{self, BudgetMode, BudgetProxy, Granularity, PrefixRounding};
use ngcov_core::Error;

fn to_py(e: Error) -> PyErr {
    if e.is_backend() {
        PyRuntimeError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn granularity(s: &str) -> PyResult<Granularity> {
    match s {
        "word" => Ok(Granularity::Word),
        "char" => Ok(Granularity::Char),
        _ => Err(PyValueError::new_err(format!("granularity must be 'word' or 'char', got {s:?}"))),
    }
}

fn label(s: &str) -> PyResult<Label> {
    serde_json::from_value(serde_json::Value::String(s.to_owned()))
        .map_err(|_| PyValueError::new_err(format!("unknown label {s:?}")))
}

fn from_json<T: serde::de::DeserializeOwned + Default>(json: Option<&str>) -> PyResult<T> {
    match json {
        Some(j) => serde_json::from_str(j).map_err(|e| PyValueError::new_err(e.to_string())),
        None => Ok(T::default()),
    }
}

fn dataset(candidates: Vec<(String, String, String)>) -> PyResult<Dataset> {
    let cands = candidates
        .into_iter()
        .map(|(id, text, l)| Ok(Candidate::new(id, text, label(&l)?, "python")))
        .collect::<PyResult<Vec<_>>>()?;
    Ok(Dataset::new("python", cands))
}

/// Fraction of `reference` tokens inside spans of at least `min_ngram`
/// tokens that also occur in `generation`.
#[pyfunction]
#[pyo3(signature = (generation, reference, min_ngram = 4, granularity = "word"))]
fn coverage(generation: &str, reference: &str, min_ngram: usize, granularity: &str) -> PyResult<f64> {
    let g = self::granularity(granularity)?;
    Ok(sim::coverage(
        &textops::tokenize(generation, g),
        &textops::tokenize(reference, g),
        min_ngram,
    ))
}

#[pyfunction]
#[pyo3(signature = (generation, reference, a = 3, b = 12))]
fn creativity(generation: &str, reference: &str, a: usize, b: usize) -> PyResult<f64> {
    sim::creativity_score(
        &textops::tokenize(generation, Granularity::Word),
        &textops::tokenize(reference, Granularity::Word),
        a,
        b,
    )
    .map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (a, b, granularity = "word"))]
fn lcs(a: &str, b: &str, granularity: &str) -> PyResult<usize> {
    let g = self::granularity(granularity)?;
    sim::lcs(&textops::tokenize(a, g), &textops::tokenize(b, g)).map_err(to_py)
}

/// Scores one generation with a metric name and optional config JSON.
#[pyfunction]
#[pyo3(signature = (generation, reference, metric = "coverage", config = None))]
fn similarity(generation: &str, reference: &str, metric: &str, config: Option<&str>) -> PyResult<f64> {
    let mut cfg: SimilarityConfig = from_json(config)?;
    cfg.metric = Metric::parse(metric).ok_or_else(|| PyValueError::new_err(format!("unknown metric {metric:?}")))?;
    cfg.score(generation, reference).map(|s| s.value).map_err(to_py)
}

/// Returns `(prefix, suffix, suffix_token_budget)`.
#[pyfunction]
#[pyo3(signature = (text, ratio = 0.5, budget = "word-proxy"))]
fn split_prefix(text: &str, ratio: f64, budget: &str) -> PyResult<(String, String, usize)> {
    let mode = match budget {
        "word-proxy" => BudgetMode::WordProxy,
        "char-proxy" => BudgetMode::CharProxy,
        _ => return Err(PyValueError::new_err(format!("unknown budget mode {budget:?}"))),
    };
    let s = textops::split_prefix(text, ratio, PrefixRounding::Floor, &BudgetProxy::with_mode(mode)).map_err(to_py)?;
    Ok((s.prefix_text, s.suffix_text, s.suffix_token_budget))
}

fn labeled(scores: Vec<f64>, is_member: Vec<bool>) -> PyResult<Vec<(f64, Label)>> {
    if scores.len() != is_member.len() {
        return Err(PyValueError::new_err("scores and labels differ in length"));
    }
    Ok(scores
        .into_iter()
        .zip(is_member)
        .map(|(s, m)| (s, if m { Label::Member } else { Label::NonMember }))
        .collect())
}

#[pyfunction]
fn auroc(scores: Vec<f64>, is_member: Vec<bool>) -> PyResult<f64> {
    eval::auroc(&labeled(scores, is_member)?).map_err(to_py)
}

#[pyfunction]
fn roc_curve(scores: Vec<f64>, is_member: Vec<bool>) -> PyResult<Vec<(f64, f64)>> {
    eval::roc_curve(&labeled(scores, is_member)?).map_err(to_py)
}

fn record(logprobs: Vec<f64>) -> LogprobRecord {
    LogprobRecord {
        candidate_id: String::new(),
        model_id: String::new(),
        tokens: logprobs.into_iter().map(|lp| (String::new(), lp)).collect(),
    }
}

#[pyfunction]
fn loss_score(logprobs: Vec<f64>) -> PyResult<f64> {
    baselines::loss_score(&record(logprobs)).map_err(to_py)
}

#[pyfunction]
fn min_k_score(logprobs: Vec<f64>, k: f64) -> PyResult<f64> {
    baselines::min_k_score(&record(logprobs), k).map_err(to_py)
}

#[pyfunction]
fn zlib_score(logprobs: Vec<f64>, text: &str) -> PyResult<f64> {
    baselines::zlib_score(&record(logprobs), text).map_err(to_py)
}

/// `(id, text, label)` triples of a random pseudo-word corpus.
#[pyfunction]
#[pyo3(signature = (n_members, n_nonmembers, words_per_doc = 32, vocab_size = 5000, seed = 0))]
fn synthetic_dataset(
    n_members: usize,
    n_nonmembers: usize,
    words_per_doc: usize,
    vocab_size: usize,
    seed: u64,
) -> Vec<(String, String, String)> {
    corpus::synthetic_dataset(n_members, n_nonmembers, words_per_doc, vocab_size, seed)
        .candidates
        .into_iter()
        .map(|c| (c.id, c.text, c.label.as_str().to_owned()))
        .collect()
}

/// A target model: the synthetic memorizer or an HTTP completion endpoint.
#[pyclass(module = "ngcov", frozen)]
struct Model {
    inner: Arc<dyn Backend>,
}

#[pymethods]
impl Model {
    /// Memorizer over `members` texts; `config` is MemorizerConfig JSON.
    #[staticmethod]
    #[pyo3(signature = (members, config = None))]
    fn memorizer(members: Vec<String>, config: Option<&str>) -> PyResult<Self> {
        let cfg: MemorizerConfig = from_json(config)?;
        let ds = Dataset::new(
            "members",
            members
                .into_iter()
                .enumerate()
                .map(|(i, t)| Candidate::new(format!("m{i}"), t, Label::Member, "python"))
                .collect(),
        );
        Ok(Self {
            inner: Arc::new(MemorizerBackend::new(&ds, cfg).map_err(to_py)?),
        })
    }

    /// OpenAI-compatible endpoint. The API key is read from `api_key_env`.
    #[staticmethod]
    #[pyo3(signature = (model_id, endpoint, chat = false, logprobs = false, api_key_env = None))]
    fn remote(
        model_id: &str,
        endpoint: &str,
        chat: bool,
        logprobs: bool,
        api_key_env: Option<String>,
    ) -> PyResult<Self> {
        let mut caps = vec![if chat { Capability::Chat } else { Capability::TextCompletion }];
        if logprobs {
            caps.push(Capability::Logprobs);
        }
        let mut desc = BackendDescriptor::local(model_id, caps);
        desc.endpoint = endpoint.to_owned();
        desc.protocol = if chat { Protocol::Chat } else { Protocol::Completion };
        desc.api_key_env = api_key_env;
        Ok(Self {
            inner: Arc::new(RemoteBackend::new(RemoteConfig::new(desc)).map_err(to_py)?),
        })
    }

    #[getter]
    fn model_id(&self) -> String {
        self.inner.descriptor().model_id.clone()
    }

    #[pyo3(signature = (prompt, n = 1, max_tokens = 64, temperature = 1.0, top_p = 0.95))]
    fn complete(&self, prompt: &str, n: usize, max_tokens: usize, temperature: f64, top_p: f64) -> PyResult<Vec<String>> {
        let params = SamplingParams {
            temperature,
            top_p,
            max_tokens,
            n_samples: n,
            seed: None,
        };
        params.validate().map_err(to_py)?;
        Ok(self
            .inner
            .complete(prompt, &params)
            .map_err(to_py)?
            .into_iter()
            .map(|g| g.text)
            .collect())
    }

    fn score_logprobs(&self, text: &str) -> PyResult<Vec<(String, f64)>> {
        self.inner.score_logprobs(text).map_err(to_py)
    }

    /// Runs the attack over `(id, text, label)` triples and returns
    /// `(id, label, aggregated score)` rows. `config` is AttackConfig JSON.
    #[pyo3(signature = (candidates, config = None))]
    fn attack(
        &self,
        candidates: Vec<(String, String, String)>,
        config: Option<&str>,
    ) -> PyResult<Vec<(String, String, f64)>> {
        let cfg: AttackConfig = from_json(config)?;
        let run = attack::run_attack(self.inner.as_ref(), &dataset(candidates)?, &cfg).map_err(to_py)?;
        Ok(run
            .scores
            .into_iter()
            .map(|s| (s.candidate_id, s.label.as_str().to_owned(), s.aggregated))
            .collect())
    }
}

#[pymodule]
fn ngcov(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(coverage, m)?)?;
    m.add_function(wrap_pyfunction!(creativity, m)?)?;
    m.add_function(wrap_pyfunction!(lcs, m)?)?;
    m.add_function(wrap_pyfunction!(similarity, m)?)?;
    m.add_function(wrap_pyfunction!(split_prefix, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(roc_curve, m)?)?;
    m.add_function(wrap_pyfunction!(loss_score, m)?)?;
    m.add_function(wrap_pyfunction!(min_k_score, m)?)?;
    m.add_function(wrap_pyfunction!(zlib_score, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_dataset, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
