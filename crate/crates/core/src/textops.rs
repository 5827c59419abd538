//! Tokenization, prefix/suffix splitting and generation-length budgeting.
//!
//! Words are maximal runs of non-whitespace after NFC normalization. Character
//! tokens are Unicode scalar values of the raw text, so joining them gives the
//! input back unchanged.

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Word,
    Char,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub tokens: Vec<String>,
    pub granularity: Granularity,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn case_folded(&self) -> TokenSeq {
        TokenSeq {
            tokens: self.tokens.iter().map(|t| t.to_lowercase()).collect(),
            granularity: self.granularity,
        }
    }
}

pub fn nfc(text: &str) -> String {
    text.nfc().collect()
}

pub fn tokenize(text: &str, granularity: Granularity) -> TokenSeq {
    let tokens = match granularity {
        Granularity::Word => nfc(text).split_whitespace().map(str::to_owned).collect(),
        Granularity::Char => text.chars().map(String::from).collect(),
    };
    TokenSeq {
        tokens,
        granularity,
    }
}

pub fn word_count(text: &str) -> usize {
    nfc(text).split_whitespace().count()
}

/// How the word-count cut point is derived from the ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrefixRounding {
    #[default]
    Floor,
    Round,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixSplit {
    pub prefix_text: String,
    pub suffix_text: String,
    pub ratio: f64,
    pub suffix_token_budget: usize,
}

/// Byte spans of the whitespace-delimited words of `text`.
fn word_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                spans.push((s, i));
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        spans.push((s, text.len()));
    }
    spans
}

/// Splits `text` into a word prefix and suffix. Whitespace inside each side is
/// kept as in the (NFC-normalized) source.
pub fn split_prefix(
    text: &str,
    ratio: f64,
    rounding: PrefixRounding,
    budget: &BudgetProxy,
) -> Result<PrefixSplit> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "prefix ratio must lie in (0, 1), got {ratio}"
        )));
    }
    let normalized = nfc(text);
    let spans = word_spans(&normalized);
    let words = spans.len();
    if words < 2 {
        return Err(Error::TooFewWords { words });
    }
    let raw = ratio * words as f64;
    let cut = match rounding {
        PrefixRounding::Floor => raw.floor(),
        PrefixRounding::Round => raw.round(),
    } as usize;
    let cut = cut.clamp(1, words - 1);

    let prefix_text = normalized[spans[0].0..spans[cut - 1].1].to_owned();
    let suffix_text = normalized[spans[cut].0..spans[words - 1].1].to_owned();
    let suffix_token_budget = budget.count(&suffix_text);
    Ok(PrefixSplit {
        prefix_text,
        suffix_text,
        ratio,
        suffix_token_budget,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BudgetMode {
    #[default]
    WordProxy,
    CharProxy,
}

/// Stand-in for the target model's tokenizer when sizing generations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BudgetProxy {
    pub mode: BudgetMode,
    pub tokens_per_word: f64,
    pub chars_per_token: f64,
}

impl Default for BudgetProxy {
    fn default() -> Self {
        Self {
            mode: BudgetMode::WordProxy,
            tokens_per_word: 1.5,
            chars_per_token: 4.0,
        }
    }
}

impl BudgetProxy {
    pub fn with_mode(mode: BudgetMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn count(&self, text: &str) -> usize {
        match self.mode {
            BudgetMode::WordProxy => self.count_parts(word_count(text), 0),
            BudgetMode::CharProxy => self.count_parts(0, text.chars().count()),
        }
    }

    /// Budget of a text with `words` words and `chars` characters.
    pub fn count_parts(&self, words: usize, chars: usize) -> usize {
        match self.mode {
            BudgetMode::WordProxy => (words as f64 * self.tokens_per_word).ceil() as usize,
            BudgetMode::CharProxy => (chars as f64 / self.chars_per_token).ceil() as usize,
        }
    }
}

/// Token budget of `suffix_text` under the default proxy factors.
pub fn token_budget(suffix_text: &str, mode: BudgetMode) -> usize {
    BudgetProxy::with_mode(mode).count(suffix_text)
}
