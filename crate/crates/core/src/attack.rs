//! The coverage attack: split each candidate, sample continuations of its
//! prefix, score each continuation against the held-out suffix, aggregate,
//! and optionally threshold.

use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::backends::{Backend, Generation, SamplingParams};
use crate::corpus::{Candidate, Dataset, Label};
use crate::digest::json_digest;
use crate::error::{Error, Result};
use crate::similarity::{Metric, SimilarityConfig};
use crate::textops::{split_prefix, BudgetProxy, PrefixRounding, PrefixSplit};

pub const PLACEHOLDER: &str = "{prefix}";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemplateMode {
    #[default]
    Completion,
    Chat,
    NoPrompt,
}

/// Written either as a built-in name or as a full table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TemplateSpec")]
pub struct PromptTemplate {
    pub name: String,
    pub body: String,
    #[serde(default)]
    pub mode: TemplateMode,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum TemplateSpec {
    Named(String),
    Full {
        name: String,
        body: String,
        #[serde(default)]
        mode: TemplateMode,
    },
}

impl TryFrom<TemplateSpec> for PromptTemplate {
    type Error = String;

    fn try_from(spec: TemplateSpec) -> std::result::Result<Self, String> {
        match spec {
            TemplateSpec::Named(name) => Self::builtin(&name).ok_or_else(|| format!("unknown template {name:?}")),
            TemplateSpec::Full { name, body, mode } => Self::new(name, body, mode).map_err(|e| e.to_string()),
        }
    }
}

impl PromptTemplate {
    pub fn new(name: impl Into<String>, body: impl Into<String>, mode: TemplateMode) -> Result<Self> {
        let t = Self {
            name: name.into(),
            body: body.into(),
            mode,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == TemplateMode::NoPrompt {
            return Ok(());
        }
        match self.body.matches(PLACEHOLDER).count() {
            1 => Ok(()),
            n => Err(Error::Template(format!(
                "template {:?} must contain {PLACEHOLDER} exactly once, found {n}",
                self.name
            ))),
        }
    }

    pub fn render(&self, prefix_text: &str) -> Result<String> {
        self.validate()?;
        Ok(match self.mode {
            TemplateMode::NoPrompt => prefix_text.to_owned(),
            _ => self.body.replacen(PLACEHOLDER, prefix_text, 1),
        })
    }

    /// Literary-passage completion prompt.
    pub fn books() -> Self {
        Self {
            name: "books".into(),
            body: "You will be shown a series of passages from famous literary works. After these examples, \
                   you will receive a prefix from another passage and be asked to complete it based on the \
                   text of a famous work. Provide only the continuation for the last given prefix without any \
                   extra commentary, formatting, or additional text.\n\nComplete the prefix: {prefix}"
                .into(),
            mode: TemplateMode::Chat,
        }
    }

    /// Encyclopedia-summary prompt.
    pub fn wiki() -> Self {
        Self {
            name: "wiki".into(),
            body: "Continue the generation as closely to verbatim as possible.\n\n{prefix}".into(),
            mode: TemplateMode::Completion,
        }
    }

    /// Generic web-text prompt.
    pub fn continue_text() -> Self {
        Self {
            name: "continue".into(),
            body: "Continue the text: {prefix}".into(),
            mode: TemplateMode::Completion,
        }
    }

    /// Raw prefix, no instruction.
    pub fn no_prompt() -> Self {
        Self {
            name: "none".into(),
            body: String::new(),
            mode: TemplateMode::NoPrompt,
        }
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "books" | "bookmia" => Some(Self::books()),
            "wiki" | "wikimia" => Some(Self::wiki()),
            "continue" | "pile" => Some(Self::continue_text()),
            "none" | "no-prompt" => Some(Self::no_prompt()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Max,
    Min,
    Mean,
    Median,
}

impl Aggregation {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "max" => Some(Self::Max),
            "min" => Some(Self::Min),
            "mean" => Some(Self::Mean),
            "median" => Some(Self::Median),
            _ => None,
        }
    }
}

pub fn aggregate(values: &[f64], method: Aggregation) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("cannot aggregate an empty list of scores".into()));
    }
    Ok(match method {
        Aggregation::Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        Aggregation::Min => values.iter().copied().fold(f64::INFINITY, f64::min),
        Aggregation::Mean => values.iter().sum::<f64>() / values.len() as f64,
        Aggregation::Median => {
            let mut v = values.to_vec();
            v.sort_by(f64::total_cmp);
            let mid = v.len() / 2;
            if v.len().is_multiple_of(2) {
                (v[mid - 1] + v[mid]) / 2.0
            } else {
                v[mid]
            }
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub prefix_ratio: f64,
    pub prefix_rounding: PrefixRounding,
    /// Generations per candidate.
    pub d: usize,
    /// `max_tokens` and `n_samples` are set per candidate.
    pub sampling: SamplingParams,
    pub sim: SimilarityConfig,
    pub agg: Aggregation,
    pub epsilon: Option<f64>,
    pub template: PromptTemplate,
    pub budget: BudgetProxy,
    /// Candidates scored concurrently. Not part of the config digest.
    #[serde(skip_serializing)]
    pub workers: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            prefix_ratio: 0.5,
            prefix_rounding: PrefixRounding::Floor,
            d: 50,
            sampling: SamplingParams::default(),
            sim: SimilarityConfig::default(),
            agg: Aggregation::Max,
            epsilon: None,
            template: PromptTemplate::wiki(),
            budget: BudgetProxy::default(),
            workers: 4,
        }
    }
}

impl AttackConfig {
    pub fn digest(&self) -> String {
        json_digest(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 1 {
            return Err(Error::InvalidArgument("d must be >= 1".into()));
        }
        if !(self.prefix_ratio > 0.0 && self.prefix_ratio < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "prefix_ratio must lie in (0, 1), got {}",
                self.prefix_ratio
            )));
        }
        self.sampling.validate()?;
        self.sim.validate()?;
        self.template.validate()
    }

    fn params_for(&self, split: &PrefixSplit, d: usize) -> SamplingParams {
        SamplingParams {
            max_tokens: split.suffix_token_budget,
            n_samples: d,
            ..self.sampling
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackScore {
    pub candidate_id: String,
    pub label: Label,
    pub metric: Metric,
    pub per_sample: Vec<f64>,
    pub aggregated: f64,
    pub config_digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skipped {
    pub candidate_id: String,
    pub reason: String,
}

/// A candidate ready to be sampled.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub split: PrefixSplit,
    pub prompt: String,
}

pub fn prepare(candidate: &Candidate, config: &AttackConfig) -> Result<Prepared> {
    let split = split_prefix(&candidate.text, config.prefix_ratio, config.prefix_rounding, &config.budget)?;
    let prompt = config.template.render(&split.prefix_text)?;
    Ok(Prepared { split, prompt })
}

/// Draws the first `d` generations of the candidate's sample pool.
pub fn sample_pool<B: Backend + ?Sized>(
    backend: &B,
    prepared: &Prepared,
    config: &AttackConfig,
    d: usize,
) -> Result<Vec<Generation>> {
    let params = config.params_for(&prepared.split, d);
    let gens = backend.complete(&prepared.prompt, &params)?;
    if gens.len() != d {
        return Err(Error::Backend(format!("expected {d} generations, got {}", gens.len())));
    }
    Ok(gens)
}

/// Similarity of each generation to `suffix`.
pub fn score_pool(generations: &[Generation], suffix: &str, sim: &SimilarityConfig) -> Result<Vec<f64>> {
    let reference = sim.tokens(suffix);
    generations
        .iter()
        .map(|g| sim.score_tokens(&sim.tokens(&g.text), &reference).map(|s| s.value))
        .collect()
}

pub fn score_candidate<B: Backend + ?Sized>(
    backend: &B,
    candidate: &Candidate,
    config: &AttackConfig,
) -> Result<AttackScore> {
    let prepared = prepare(candidate, config)?;
    let gens = sample_pool(backend, &prepared, config, config.d)?;
    let per_sample = score_pool(&gens, &prepared.split.suffix_text, &config.sim)?;
    Ok(AttackScore {
        candidate_id: candidate.id.clone(),
        label: candidate.label,
        metric: config.sim.metric,
        aggregated: aggregate(&per_sample, config.agg)?,
        per_sample,
        config_digest: config.digest(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prediction {
    Member,
    NonMember,
}

/// Member iff the aggregated score strictly exceeds `epsilon`.
pub fn decide(score: &AttackScore, epsilon: f64) -> Prediction {
    if score.aggregated > epsilon || epsilon == f64::NEG_INFINITY {
        Prediction::Member
    } else {
        Prediction::NonMember
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRun {
    pub scores: Vec<AttackScore>,
    pub skipped: Vec<Skipped>,
    /// Budget-proxy size of everything the backend returned.
    pub sampled_tokens: usize,
}

/// Runs `f` over `items` on up to `workers` threads and returns the results
/// in input order. Stops handing out work after the first error.
pub fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    workers: usize,
    f: impl Fn(usize, &T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    let first_error: Mutex<Option<(usize, Error)>> = Mutex::new(None);
    let done = AtomicUsize::new(0);
    let step = (items.len() / 10).max(1);
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                if failed.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                match f(i, &items[i]) {
                    Ok(r) => *slots[i].lock().unwrap() = Some(r),
                    Err(e) => {
                        failed.store(true, Ordering::SeqCst);
                        let mut slot = first_error.lock().unwrap();
                        if slot.as_ref().is_none_or(|(j, _)| i < *j) {
                            *slot = Some((i, e));
                        }
                        break;
                    }
                }
                let n = done.fetch_add(1, Ordering::SeqCst) + 1;
                if n.is_multiple_of(step) || n == items.len() {
                    log::info!("progress: {n}/{} candidates", items.len());
                }
            });
        }
    });
    if let Some((_, e)) = first_error.into_inner().unwrap() {
        return Err(e);
    }
    Ok(slots.into_iter().map(|m| m.into_inner().unwrap().unwrap()).collect())
}

/// Candidates that can be split, plus a manifest of those that cannot.
pub fn partition_candidates<'a>(
    dataset: &'a Dataset,
    config: &AttackConfig,
) -> Result<(Vec<(&'a Candidate, Prepared)>, Vec<Skipped>)> {
    let mut ready = Vec::with_capacity(dataset.len());
    let mut skipped = Vec::new();
    for cand in &dataset.candidates {
        match prepare(cand, config) {
            Ok(p) => ready.push((cand, p)),
            Err(e @ Error::TooFewWords { .. }) => {
                log::warn!("skipping candidate {}: {e}", cand.id);
                skipped.push(Skipped {
                    candidate_id: cand.id.clone(),
                    reason: e.to_string(),
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok((ready, skipped))
}

pub fn run_attack<B: Backend + ?Sized>(backend: &B, dataset: &Dataset, config: &AttackConfig) -> Result<AttackRun> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("dataset has no candidates".into()));
    }
    let (ready, skipped) = partition_candidates(dataset, config)?;
    if ready.is_empty() {
        return Err(Error::Empty("every candidate was skipped".into()));
    }
    let digest = config.digest();
    let results = parallel_map(&ready, config.workers, |_, (cand, prepared)| {
        let gens = sample_pool(backend, prepared, config, config.d)?;
        let tokens: usize = gens.iter().map(|g| config.budget.count(&g.text)).sum();
        let per_sample = score_pool(&gens, &prepared.split.suffix_text, &config.sim)?;
        Ok((
            AttackScore {
                candidate_id: cand.id.clone(),
                label: cand.label,
                metric: config.sim.metric,
                aggregated: aggregate(&per_sample, config.agg)?,
                per_sample,
                config_digest: digest.clone(),
            },
            tokens,
        ))
    })?;
    let sampled_tokens = results.iter().map(|(_, t)| t).sum();
    Ok(AttackRun {
        scores: results.into_iter().map(|(s, _)| s).collect(),
        skipped,
        sampled_tokens,
    })
}

/// What a run would request, computed without touching a backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plan {
    pub candidates: usize,
    pub skipped: usize,
    pub requests: usize,
    pub generations: usize,
    /// Sum over candidates of `d * token_budget(suffix)`.
    pub max_output_tokens: usize,
}

pub fn plan(dataset: &Dataset, config: &AttackConfig) -> Result<Plan> {
    config.validate()?;
    let (ready, skipped) = partition_candidates(dataset, config)?;
    Ok(Plan {
        candidates: ready.len(),
        skipped: skipped.len(),
        requests: ready.len(),
        generations: ready.len() * config.d,
        max_output_tokens: ready.iter().map(|(_, p)| config.d * p.split.suffix_token_budget).sum(),
    })
}

pub fn write_scores_jsonl(path: impl AsRef<Path>, scores: &[AttackScore]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in scores {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
