//! N-gram overlap metrics between a generation and a reference text.
//!
//! All kernels run on a suffix automaton built over the first argument; the
//! second argument is streamed through it once to get, for every position, the
//! longest span ending there that also occurs in the first.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textops::{tokenize, Granularity, TokenSeq};

const NO_TOKEN: u32 = u32::MAX;

#[derive(Debug, Clone, Default)]
struct SuffixAutomaton {
    next: Vec<HashMap<u32, u32>>,
    link: Vec<Option<u32>>,
    len: Vec<usize>,
}

impl SuffixAutomaton {
    fn build(symbols: &[u32]) -> Self {
        let mut sam = SuffixAutomaton {
            next: Vec::with_capacity(2 * symbols.len() + 1),
            link: Vec::with_capacity(2 * symbols.len() + 1),
            len: Vec::with_capacity(2 * symbols.len() + 1),
        };
        sam.push_state(0, None);
        let mut last = 0u32;
        for &c in symbols {
            let cur = sam.push_state(sam.len[last as usize] + 1, None);
            let mut p = Some(last);
            while let Some(pi) = p {
                if sam.next[pi as usize].contains_key(&c) {
                    break;
                }
                sam.next[pi as usize].insert(c, cur);
                p = sam.link[pi as usize];
            }
            match p {
                None => sam.link[cur as usize] = Some(0),
                Some(pi) => {
                    let q = sam.next[pi as usize][&c];
                    if sam.len[pi as usize] + 1 == sam.len[q as usize] {
                        sam.link[cur as usize] = Some(q);
                    } else {
                        let clone = sam.push_state(sam.len[pi as usize] + 1, sam.link[q as usize]);
                        sam.next[clone as usize] = sam.next[q as usize].clone();
                        let mut p = Some(pi);
                        while let Some(pj) = p {
                            match sam.next[pj as usize].get(&c) {
                                Some(&t) if t == q => {
                                    sam.next[pj as usize].insert(c, clone);
                                    p = sam.link[pj as usize];
                                }
                                _ => break,
                            }
                        }
                        sam.link[q as usize] = Some(clone);
                        sam.link[cur as usize] = Some(clone);
                    }
                }
            }
            last = cur;
        }
        sam
    }

    fn push_state(&mut self, len: usize, link: Option<u32>) -> u32 {
        self.next.push(HashMap::new());
        self.link.push(link);
        self.len.push(len);
        (self.len.len() - 1) as u32
    }

    fn step(&self, state: u32, c: u32) -> Option<u32> {
        self.next[state as usize].get(&c).copied()
    }
}

/// Substring index over a reference token sequence.
#[derive(Debug, Clone)]
pub struct MatchIndex {
    reference: TokenSeq,
    vocab: HashMap<String, u32>,
    sam: SuffixAutomaton,
}

pub fn build_index(reference: &TokenSeq) -> MatchIndex {
    let mut vocab = HashMap::new();
    let symbols: Vec<u32> = reference
        .tokens
        .iter()
        .map(|t| {
            let next_id = vocab.len() as u32;
            *vocab.entry(t.clone()).or_insert(next_id)
        })
        .collect();
    MatchIndex {
        reference: reference.clone(),
        sam: SuffixAutomaton::build(&symbols),
        vocab,
    }
}

impl MatchIndex {
    pub fn reference(&self) -> &TokenSeq {
        &self.reference
    }

    fn encode(&self, query: &TokenSeq) -> Vec<u32> {
        query
            .tokens
            .iter()
            .map(|t| self.vocab.get(t).copied().unwrap_or(NO_TOKEN))
            .collect()
    }

    /// Largest `m` such that `query[start..start + m]` occurs contiguously in
    /// the reference.
    pub fn longest_match(&self, query: &TokenSeq, start: usize) -> usize {
        let mut state = 0;
        let mut m = 0;
        for t in query.tokens.iter().skip(start) {
            let Some(&c) = self.vocab.get(t) else { break };
            match self.sam.step(state, c) {
                Some(s) => {
                    state = s;
                    m += 1;
                }
                None => break,
            }
        }
        m
    }

    /// For each position `j` of `query`, the length of the longest span ending
    /// at `j` that occurs in the reference.
    pub fn match_lengths_ending(&self, query: &TokenSeq) -> Vec<usize> {
        let mut out = Vec::with_capacity(query.len());
        let mut state = 0u32;
        let mut l = 0usize;
        for c in self.encode(query) {
            loop {
                if let Some(s) = self.sam.step(state, c) {
                    state = s;
                    l += 1;
                    break;
                }
                match self.sam.link[state as usize] {
                    Some(up) => {
                        state = up;
                        l = self.sam.len[up as usize];
                    }
                    None => {
                        l = 0;
                        break;
                    }
                }
            }
            out.push(l);
        }
        out
    }

    /// Share of `query` positions inside a span of at least `min_len` tokens
    /// that occurs in the reference.
    pub fn coverage_of(&self, query: &TokenSeq, min_len: usize) -> f64 {
        coverage_from_lengths(&self.match_lengths_ending(query), min_len)
    }
}

fn coverage_from_lengths(ending: &[usize], min_len: usize) -> f64 {
    if ending.is_empty() {
        return 0.0;
    }
    let min_len = min_len.max(1);
    let mut covered = 0usize;
    // smallest start among qualifying spans ending at or after the cursor
    let mut min_start = usize::MAX;
    for k in (0..ending.len()).rev() {
        if ending[k] >= min_len {
            min_start = min_start.min(k + 1 - ending[k]);
        }
        if min_start <= k {
            covered += 1;
        }
    }
    covered as f64 / ending.len() as f64
}

/// Fraction of `x2` tokens covered by spans of length `>= min_len` that also
/// occur in `x1`. Zero when `x2` is empty.
pub fn coverage(x1: &TokenSeq, x2: &TokenSeq, min_len: usize) -> f64 {
    build_index(x1).coverage_of(x2, min_len)
}

/// Negated creativity index: `-(sum over L in a..=b of 1 - Cov_L)`.
pub fn creativity_score(x1: &TokenSeq, x2: &TokenSeq, a: usize, b: usize) -> Result<f64> {
    if a < 1 || a > b {
        return Err(Error::InvalidArgument(format!(
            "creativity range requires 1 <= A <= B, got A={a} B={b}"
        )));
    }
    let ending = build_index(x1).match_lengths_ending(x2);
    Ok(-(a..=b)
        .map(|l| 1.0 - coverage_from_lengths(&ending, l))
        .sum::<f64>())
}

/// Length of the longest common contiguous token run.
pub fn lcs(x1: &TokenSeq, x2: &TokenSeq) -> Result<usize> {
    if x1.granularity != x2.granularity {
        return Err(Error::GranularityMismatch(x1.granularity, x2.granularity));
    }
    Ok(build_index(x1)
        .match_lengths_ending(x2)
        .into_iter()
        .max()
        .unwrap_or(0))
}

/// Reference implementation of [`coverage`]: enumerate every span of `x2` and
/// search for it in `x1` directly.
pub fn brute_force_coverage(x1: &TokenSeq, x2: &TokenSeq, min_len: usize) -> f64 {
    let n = x2.len();
    if n == 0 {
        return 0.0;
    }
    let min_len = min_len.max(1);
    let mut covered = vec![false; n];
    for start in 0..n {
        for end in (start + min_len)..=n {
            let span = &x2.tokens[start..end];
            if x1.tokens.windows(span.len()).any(|w| w == span) {
                covered[start..end].iter_mut().for_each(|c| *c = true);
            }
        }
    }
    covered.iter().filter(|&&c| c).count() as f64 / n as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Coverage,
    Creativity,
    LcsChar,
    LcsWord,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Coverage, Metric::Creativity, Metric::LcsChar, Metric::LcsWord];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Coverage => "coverage",
            Metric::Creativity => "creativity",
            Metric::LcsChar => "lcs-char",
            Metric::LcsWord => "lcs-word",
        }
    }

    pub fn parse(s: &str) -> Option<Metric> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "coverage" | "cov" => Some(Metric::Coverage),
            "creativity" | "cre" => Some(Metric::Creativity),
            "lcs-char" | "lcsc" | "lcs-c" => Some(Metric::LcsChar),
            "lcs-word" | "lcsw" | "lcs-w" => Some(Metric::LcsWord),
            _ => None,
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimilarityConfig {
    pub metric: Metric,
    /// Minimum span length for coverage.
    pub min_ngram: usize,
    /// Creativity n-gram range, inclusive.
    pub creativity_min: usize,
    pub creativity_max: usize,
    /// Granularity for coverage and creativity; the LCS metrics fix their own.
    pub granularity: Granularity,
    pub case_fold: bool,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        Self {
            metric: Metric::Coverage,
            min_ngram: 4,
            creativity_min: 3,
            creativity_max: 12,
            granularity: Granularity::Word,
            case_fold: false,
        }
    }
}

impl SimilarityConfig {
    pub fn with_metric(metric: Metric) -> Self {
        Self {
            metric,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_ngram < 1 {
            return Err(Error::InvalidArgument("coverage L must be >= 1".into()));
        }
        if self.creativity_min < 1 || self.creativity_min > self.creativity_max {
            return Err(Error::InvalidArgument(format!(
                "creativity range requires 1 <= A <= B, got A={} B={}",
                self.creativity_min, self.creativity_max
            )));
        }
        Ok(())
    }

    pub fn token_granularity(&self) -> Granularity {
        match self.metric {
            Metric::Coverage | Metric::Creativity => self.granularity,
            Metric::LcsChar => Granularity::Char,
            Metric::LcsWord => Granularity::Word,
        }
    }

    pub fn tokens(&self, text: &str) -> TokenSeq {
        let seq = tokenize(text, self.token_granularity());
        if self.case_fold {
            seq.case_folded()
        } else {
            seq
        }
    }

    /// Similarity of `generation` to `reference`, oriented so that higher
    /// means more similar. An empty reference scores 0.
    pub fn score(&self, generation: &str, reference: &str) -> Result<SimilarityScore> {
        self.score_tokens(&self.tokens(generation), &self.tokens(reference))
    }

    pub fn score_tokens(&self, generation: &TokenSeq, reference: &TokenSeq) -> Result<SimilarityScore> {
        let value = if reference.is_empty() {
            0.0
        } else {
            match self.metric {
                Metric::Coverage => coverage(generation, reference, self.min_ngram),
                Metric::Creativity => {
                    creativity_score(generation, reference, self.creativity_min, self.creativity_max)?
                }
                Metric::LcsChar | Metric::LcsWord => lcs(generation, reference)? as f64,
            }
        };
        Ok(SimilarityScore {
            metric: self.metric,
            value,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScore {
    pub metric: Metric,
    pub value: f64,
}
