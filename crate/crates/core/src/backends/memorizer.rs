//! Deterministic stand-in for a trained model.
//!
//! Prompts whose trailing words reproduce the opening of a member document
//! are continued with that document, each word independently swapped for a
//! background draw with probability `corruption`. Everything else is
//! continued by a word n-gram model fitted on the member corpus. The same
//! mixture yields the teacher-forced log-probabilities.

use std::collections::HashMap;
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Backend, BackendDescriptor, Capability, FinishReason, Generation, SamplingParams, TokenLogprob};
use crate::corpus::Dataset;
use crate::digest::keyed_rng;
use crate::error::{Error, Result};
use crate::textops::{tokenize, BudgetProxy, Granularity};

const OOV: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemorizerConfig {
    /// Probability that a memorized word is replaced by a background draw.
    pub corruption: f64,
    /// Order of the background word n-gram model.
    pub background_order: usize,
    pub seed: u64,
    /// Minimum number of prompt words that must reproduce a document opening.
    pub anchor_words: usize,
    /// Weight of the uniform component mixed into the background model.
    pub smoothing: f64,
    pub budget: BudgetProxy,
}

impl Default for MemorizerConfig {
    fn default() -> Self {
        Self {
            corruption: 0.3,
            background_order: 2,
            seed: 0,
            anchor_words: 3,
            smoothing: 0.01,
            budget: BudgetProxy::default(),
        }
    }
}

#[derive(Debug, Default)]
struct NgramModel {
    order: usize,
    /// context (last k ids, k < order) -> successor counts, sorted by id
    successors: HashMap<Vec<u32>, Vec<(u32, u32)>>,
    totals: HashMap<Vec<u32>, u32>,
}

impl NgramModel {
    fn fit(docs: &[Vec<u32>], order: usize) -> Self {
        let mut counts: HashMap<Vec<u32>, HashMap<u32, u32>> = HashMap::new();
        for doc in docs {
            for (i, &w) in doc.iter().enumerate() {
                for k in 0..order {
                    if k > i {
                        break;
                    }
                    *counts.entry(doc[i - k..i].to_vec()).or_default().entry(w).or_default() += 1;
                }
            }
        }
        let mut successors = HashMap::with_capacity(counts.len());
        let mut totals = HashMap::with_capacity(counts.len());
        for (ctx, m) in counts {
            let mut v: Vec<(u32, u32)> = m.into_iter().collect();
            v.sort_unstable();
            totals.insert(ctx.clone(), v.iter().map(|(_, c)| c).sum());
            successors.insert(ctx, v);
        }
        NgramModel {
            order,
            successors,
            totals,
        }
    }

    /// Longest observed context suffix of `history`.
    fn context<'a>(&self, history: &'a [u32]) -> &'a [u32] {
        let max_k = (self.order - 1).min(history.len());
        for k in (1..=max_k).rev() {
            let ctx = &history[history.len() - k..];
            if !ctx.contains(&OOV) && self.successors.contains_key(ctx) {
                return ctx;
            }
        }
        &[]
    }

    fn mle(&self, history: &[u32], w: u32) -> f64 {
        let ctx = self.context(history);
        let Some(succ) = self.successors.get(ctx) else { return 0.0 };
        match succ.binary_search_by_key(&w, |(id, _)| *id) {
            Ok(i) => succ[i].1 as f64 / self.totals[ctx] as f64,
            Err(_) => 0.0,
        }
    }
}

pub struct MemorizerBackend {
    descriptor: BackendDescriptor,
    config: MemorizerConfig,
    vocab: HashMap<String, u32>,
    words: Vec<String>,
    docs: Vec<Vec<u32>>,
    /// opening `anchor_words` ids -> documents starting with them
    openings: HashMap<Vec<u32>, Vec<usize>>,
    max_doc_len: usize,
    background: NgramModel,
}

impl MemorizerBackend {
    pub fn new(members: &Dataset, config: MemorizerConfig) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Empty("memorizer needs a non-empty member corpus".into()));
        }
        if !(0.0..=1.0).contains(&config.corruption) {
            return Err(Error::InvalidArgument(format!(
                "corruption must lie in [0, 1], got {}",
                config.corruption
            )));
        }
        if config.background_order < 1 || config.anchor_words < 1 {
            return Err(Error::InvalidArgument(
                "background_order and anchor_words must be >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&config.smoothing) {
            return Err(Error::InvalidArgument("smoothing must lie in [0, 1]".into()));
        }
        let mut vocab = HashMap::new();
        let mut words = Vec::new();
        let docs: Vec<Vec<u32>> = members
            .candidates
            .iter()
            .map(|c| {
                tokenize(&c.text, Granularity::Word)
                    .tokens
                    .into_iter()
                    .map(|w| {
                        *vocab.entry(w.clone()).or_insert_with(|| {
                            words.push(w);
                            (words.len() - 1) as u32
                        })
                    })
                    .collect()
            })
            .collect();
        let mut openings: HashMap<Vec<u32>, Vec<usize>> = HashMap::new();
        for (i, d) in docs.iter().enumerate() {
            if d.len() > config.anchor_words {
                openings.entry(d[..config.anchor_words].to_vec()).or_default().push(i);
            }
        }
        let max_doc_len = docs.iter().map(Vec::len).max().unwrap_or(0);
        let background = NgramModel::fit(&docs, config.background_order);
        Ok(Self {
            descriptor: BackendDescriptor::local(
                format!(
                    "memorizer-c{}-o{}-s{}",
                    config.corruption, config.background_order, config.seed
                ),
                [Capability::TextCompletion, Capability::Chat, Capability::Logprobs],
            ),
            config,
            vocab,
            words,
            docs,
            openings,
            max_doc_len,
            background,
        })
    }

    pub fn config(&self) -> &MemorizerConfig {
        &self.config
    }

    fn encode(&self, text: &str) -> (Vec<String>, Vec<u32>) {
        let tokens = tokenize(text, Granularity::Word).tokens;
        let ids = tokens.iter().map(|t| self.vocab.get(t).copied().unwrap_or(OOV)).collect();
        (tokens, ids)
    }

    /// For every position `i` of `ids`, the memorized next word if the words
    /// before `i` end with a document opening of at least `anchor_words`.
    fn anchored_next(&self, ids: &[u32]) -> Vec<Option<u32>> {
        let a = self.config.anchor_words;
        let mut next = vec![None; ids.len()];
        for s in 0..ids.len().saturating_sub(a - 1) {
            let Some(docs) = self.openings.get(&ids[s..s + a]) else { continue };
            for &d in docs {
                let doc = &self.docs[d];
                let lcp = ids[s..].iter().zip(doc).take_while(|(x, y)| x == y).count();
                // context ids[s..i] == doc[..i - s] for i in s+a ..= s+lcp
                for i in (s + a)..=(s + lcp).min(ids.len() - 1) {
                    let j = i - s;
                    if j < doc.len() && next[i].is_none() {
                        next[i] = Some(doc[j]);
                    }
                }
            }
        }
        next
    }

    fn background_prob(&self, history: &[u32], w: u32) -> f64 {
        let eta = self.config.smoothing;
        // the extra slot is the unknown word
        let uniform = 1.0 / (self.words.len() + 1) as f64;
        if w == OOV {
            return eta * uniform;
        }
        (1.0 - eta) * self.background.mle(history, w) + eta * uniform
    }

    fn sample_background<R: Rng>(&self, history: &[u32], params: &SamplingParams, rng: &mut R) -> u32 {
        if rng.random::<f64>() < self.config.smoothing {
            return rng.random_range(0..self.words.len() as u32);
        }
        let ctx = self.background.context(history);
        let Some(succ) = self.background.successors.get(ctx) else {
            return rng.random_range(0..self.words.len() as u32);
        };
        if params.temperature == 0.0 {
            return succ.iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))).unwrap().0;
        }
        let total: f64 = succ.iter().map(|(_, c)| *c as f64).sum();
        let mut weighted: Vec<(u32, f64)> = succ
            .iter()
            .map(|&(w, c)| (w, (c as f64 / total).powf(1.0 / params.temperature)))
            .collect();
        let z: f64 = weighted.iter().map(|(_, p)| p).sum();
        weighted.iter_mut().for_each(|(_, p)| *p /= z);
        if params.top_p < 1.0 {
            weighted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let mut acc = 0.0;
            let mut keep = weighted.len();
            for (i, (_, p)) in weighted.iter().enumerate() {
                acc += p;
                if acc >= params.top_p {
                    keep = i + 1;
                    break;
                }
            }
            weighted.truncate(keep);
        }
        let z: f64 = weighted.iter().map(|(_, p)| p).sum();
        let mut u = rng.random::<f64>() * z;
        for &(w, p) in &weighted {
            if u < p {
                return w;
            }
            u -= p;
        }
        weighted.last().unwrap().0
    }

    /// Probability of emitting the memorized word, after tempering the
    /// keep/replace choice.
    fn keep_probability(&self, temperature: f64) -> f64 {
        let c = self.config.corruption;
        if temperature == 0.0 {
            return match c.partial_cmp(&0.5) {
                Some(std::cmp::Ordering::Less) => 1.0,
                Some(std::cmp::Ordering::Greater) => 0.0,
                _ => 0.5,
            };
        }
        let keep = (1.0 - c).powf(1.0 / temperature);
        let drop = c.powf(1.0 / temperature);
        if keep + drop == 0.0 {
            0.5
        } else {
            keep / (keep + drop)
        }
    }

    fn generate(&self, prompt_ids: &[u32], params: &SamplingParams, index: usize, prompt: &str) -> Generation {
        let mut rng = keyed_rng(
            self.config.seed,
            &[
                prompt.as_bytes(),
                &(index as u64).to_le_bytes(),
                &params.temperature.to_bits().to_le_bytes(),
                &params.top_p.to_bits().to_le_bytes(),
            ],
        );
        let continuation = self.continuation_of(prompt_ids);
        let keep_p = self.keep_probability(params.temperature);

        let mut history = prompt_ids.to_vec();
        let mut out: Vec<&str> = Vec::new();
        let (mut chars, mut finish) = (0usize, FinishReason::Length);
        let mut step = 0usize;
        loop {
            let memorized = match continuation {
                Some(cont) if step < cont.len() => Some(cont[step]),
                Some(_) => {
                    finish = FinishReason::Stop;
                    break;
                }
                None => None,
            };
            let w = match memorized {
                Some(m) if rng.random::<f64>() < keep_p => m,
                _ => self.sample_background(&history, params, &mut rng),
            };
            let word = self.words[w as usize].as_str();
            let new_chars = chars + word.chars().count() + usize::from(!out.is_empty());
            if self.config.budget.count_parts(out.len() + 1, new_chars) > params.max_tokens {
                break;
            }
            out.push(word);
            chars = new_chars;
            history.push(w);
            step += 1;
        }
        Generation {
            text: out.join(" "),
            token_logprobs: None,
            finish_reason: finish,
        }
    }

    fn continuation_of(&self, ids: &[u32]) -> Option<&[u32]> {
        let a = self.config.anchor_words;
        let first_start = ids.len().saturating_sub(self.max_doc_len);
        for s in first_start..ids.len().saturating_sub(a - 1) {
            let Some(docs) = self.openings.get(&ids[s..s + a]) else { continue };
            for &d in docs {
                let doc = &self.docs[d];
                let tail = &ids[s..];
                if tail.len() < doc.len() && doc[..tail.len()] == *tail {
                    return Some(&doc[tail.len()..]);
                }
            }
        }
        None
    }
}

impl Backend for MemorizerBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn sample(&self, prompt: &str, params: &SamplingParams, indices: Range<usize>) -> Result<Vec<Generation>> {
        params.validate()?;
        let (_, ids) = self.encode(prompt);
        Ok(indices.map(|i| self.generate(&ids, params, i, prompt)).collect())
    }

    fn score_logprobs(&self, text: &str) -> Result<Vec<TokenLogprob>> {
        let (tokens, ids) = self.encode(text);
        let anchored = self.anchored_next(&ids);
        let c = self.config.corruption;
        Ok(tokens
            .into_iter()
            .enumerate()
            .map(|(i, tok)| {
                let w = ids[i];
                let bg = self.background_prob(&ids[..i], w);
                let p = match anchored[i] {
                    Some(m) => (1.0 - c) * f64::from(u8::from(m == w)) + c * bg,
                    None => bg,
                };
                (tok, p.max(f64::MIN_POSITIVE).ln())
            })
            .collect())
    }
}
