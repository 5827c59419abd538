//! Membership datasets: JSONL I/O, validation splits and the two builders
//! (changed-Wikipedia-page pairs and binned length matching).

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::digest::{seeded_rng, sha256_hex};
use crate::error::{Error, Result};
use crate::textops::{nfc, word_count};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Member,
    #[serde(rename = "nonmember", alias = "non-member", alias = "non_member")]
    NonMember,
    Unknown,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Member => "member",
            Label::NonMember => "nonmember",
            Label::Unknown => "unknown",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    pub text: String,
    pub label: Label,
    #[serde(default)]
    pub source: String,
}

impl Candidate {
    pub fn new(id: impl Into<String>, text: impl Into<String>, label: Label, source: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            label,
            source: source.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Validation,
    Test,
    #[default]
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub candidates: Vec<Candidate>,
    pub split: Split,
    /// Seed used to draw this split, when it is one.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassCounts {
    pub members: usize,
    pub nonmembers: usize,
    pub unknown: usize,
}

impl Dataset {
    pub fn new(name: impl Into<String>, candidates: Vec<Candidate>) -> Self {
        Self {
            name: name.into(),
            candidates,
            split: Split::All,
            seed: None,
        }
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn counts(&self) -> ClassCounts {
        let mut c = ClassCounts::default();
        for cand in &self.candidates {
            match cand.label {
                Label::Member => c.members += 1,
                Label::NonMember => c.nonmembers += 1,
                Label::Unknown => c.unknown += 1,
            }
        }
        c
    }

    /// Evaluation needs every candidate labelled.
    pub fn require_labels(&self) -> Result<()> {
        match self.candidates.iter().find(|c| c.label == Label::Unknown) {
            Some(c) => Err(Error::InvalidArgument(format!(
                "candidate {:?} has label unknown; labels are required for evaluation",
                c.id
            ))),
            None => Ok(()),
        }
    }

    pub fn with_label(&self, label: Label) -> Dataset {
        Dataset {
            name: format!("{}-{}", self.name, label.as_str()),
            candidates: self.candidates.iter().filter(|c| c.label == label).cloned().collect(),
            split: self.split,
            seed: self.seed,
        }
    }

    pub fn get(&self, id: &str) -> Option<&Candidate> {
        self.candidates.iter().find(|c| c.id == id)
    }

    /// Content digest over the JSONL encoding.
    pub fn digest(&self) -> String {
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &self.candidates).expect("writing to a Vec cannot fail");
        sha256_hex(buf)
    }
}

fn write_jsonl<W: Write, T: Serialize>(mut w: W, items: &[T]) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads non-blank lines of a JSONL file, keeping 1-based line numbers.
fn read_json_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, T)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, item));
    }
    Ok(out)
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let rows: Vec<(usize, Candidate)> = read_json_lines(path)?;
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut candidates = Vec::with_capacity(rows.len());
    for (line, cand) in rows {
        if cand.text.trim().is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("candidate {:?} has empty text", cand.id),
            });
        }
        if let Some(&first) = seen.get(&cand.id) {
            return Err(Error::DuplicateId {
                id: cand.id,
                first,
                second: line,
            });
        }
        seen.insert(cand.id.clone(), line);
        candidates.push(cand);
    }
    if candidates.is_empty() {
        log::warn!("{}: dataset is empty", path.display());
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Dataset::new(name, candidates))
}

pub fn save_jsonl(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_jsonl(&mut w, &dataset.candidates)?;
    w.flush()?;
    Ok(())
}

/// Draws `round(fraction * N)` candidates as a validation split; the rest
/// form the test split. Both keep the input order.
pub fn split_validation(dataset: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "validation fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let n = dataset.len();
    let k = (fraction * n as f64).round() as usize;
    let mut rng = seeded_rng(seed);
    let mut chosen = vec![false; n];
    for i in rand::seq::index::sample(&mut rng, n, k) {
        chosen[i] = true;
    }
    let (mut val, mut test) = (Vec::with_capacity(k), Vec::with_capacity(n - k));
    for (cand, pick) in dataset.candidates.iter().zip(chosen) {
        if pick { &mut val } else { &mut test }.push(cand.clone());
    }
    let part = |candidates, split, suffix: &str| Dataset {
        name: format!("{}-{suffix}", dataset.name),
        candidates,
        split,
        seed: Some(seed),
    };
    Ok((part(val, Split::Validation, "val"), part(test, Split::Test, "test")))
}

/// Character-level edit distance over NFC text, divided by the longer length.
pub fn levenshtein_norm(a: &str, b: &str) -> f64 {
    let (a, b) = (nfc(a), nfc(b));
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        return 0.0;
    }
    strsim::levenshtein(&a, &b) as f64 / longest as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PagePair {
    pub page_id: String,
    pub old_text: String,
    pub new_text: String,
}

pub fn load_pairs_jsonl(path: impl AsRef<Path>) -> Result<Vec<PagePair>> {
    let path = path.as_ref();
    let rows: Vec<(usize, PagePair)> = read_json_lines(path)?;
    rows.into_iter()
        .map(|(line, p)| {
            if p.old_text.trim().is_empty() || p.new_text.trim().is_empty() {
                Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: format!("page {:?} has an empty version", p.page_id),
                })
            } else {
                Ok(p)
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WikiHardParams {
    pub min_words: usize,
    /// Normalized edit distance must exceed this.
    pub min_edit: f64,
    /// Word-count difference as a share of the longer version.
    pub max_len_diff: f64,
    pub truncate_words: usize,
    /// Keep at most this many surviving pairs, sampled with `seed`.
    pub sample_n: Option<usize>,
    pub seed: u64,
}

impl Default for WikiHardParams {
    fn default() -> Self {
        Self {
            min_words: 25,
            min_edit: 0.5,
            max_len_diff: 0.2,
            truncate_words: 256,
            sample_n: None,
            seed: 0,
        }
    }
}

fn truncate_words(text: &str, n: usize) -> String {
    nfc(text).split_whitespace().take(n).collect::<Vec<_>>().join(" ")
}

/// Why a page pair was dropped, or `None` if it survives the filters.
pub fn wiki_hard_rejection(pair: &PagePair, params: &WikiHardParams) -> Option<&'static str> {
    let (old_w, new_w) = (word_count(&pair.old_text), word_count(&pair.new_text));
    if old_w < params.min_words || new_w < params.min_words {
        return Some("too-short");
    }
    let longer = old_w.max(new_w) as f64;
    if old_w.abs_diff(new_w) as f64 > params.max_len_diff * longer {
        return Some("length-mismatch");
    }
    if levenshtein_norm(&pair.old_text, &pair.new_text) <= params.min_edit {
        return Some("too-similar");
    }
    None
}

/// Old page versions become members, new versions non-members.
pub fn build_wiki_hard(pairs: &[PagePair], params: &WikiHardParams) -> Result<Dataset> {
    let mut survivors: Vec<&PagePair> = pairs
        .iter()
        .filter(|p| wiki_hard_rejection(p, params).is_none())
        .collect();
    if survivors.is_empty() {
        return Err(Error::Empty("no page pair survived the wiki-hard filters".into()));
    }
    if let Some(n) = params.sample_n {
        if n < survivors.len() {
            let mut rng = seeded_rng(params.seed);
            let mut picked = rand::seq::index::sample(&mut rng, survivors.len(), n).into_vec();
            picked.sort_unstable();
            survivors = picked.into_iter().map(|i| survivors[i]).collect();
        }
    }
    let mut candidates = Vec::with_capacity(2 * survivors.len());
    for p in &survivors {
        candidates.push(Candidate::new(
            format!("{}:old", p.page_id),
            truncate_words(&p.old_text, params.truncate_words),
            Label::Member,
            "wiki-hard",
        ));
    }
    for p in &survivors {
        candidates.push(Candidate::new(
            format!("{}:new", p.page_id),
            truncate_words(&p.new_text, params.truncate_words),
            Label::NonMember,
            "wiki-hard",
        ));
    }
    let mut ds = Dataset::new("wiki-hard", candidates);
    ds.seed = params.sample_n.map(|_| params.seed);
    Ok(ds)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub count: usize,
    pub mean_words: f64,
    pub min_words: usize,
    pub max_words: usize,
}

impl LengthStats {
    pub fn of<'a>(cands: impl IntoIterator<Item = &'a Candidate>) -> LengthStats {
        let lens: Vec<usize> = cands.into_iter().map(|c| word_count(&c.text)).collect();
        let count = lens.len();
        LengthStats {
            count,
            mean_words: if count == 0 {
                0.0
            } else {
                lens.iter().sum::<usize>() as f64 / count as f64
            },
            min_words: lens.iter().copied().min().unwrap_or(0),
            max_words: lens.iter().copied().max().unwrap_or(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthMatchStats {
    pub members_before: LengthStats,
    pub nonmembers_before: LengthStats,
    pub members_after: LengthStats,
    pub nonmembers_after: LengthStats,
    /// Per bin: (lower edge, upper edge, members kept, non-members kept).
    pub bins: Vec<(f64, f64, usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LengthMatched {
    pub dataset: Dataset,
    pub stats: LengthMatchStats,
}

fn trim_by_length(cands: &[Candidate], trim: f64) -> Vec<(usize, &Candidate)> {
    let mut by_len: Vec<(usize, &Candidate)> = cands.iter().map(|c| (word_count(&c.text), c)).collect();
    by_len.sort_by_key(|(len, _)| *len);
    let cut = (trim * by_len.len() as f64).floor() as usize;
    if 2 * cut >= by_len.len() {
        return Vec::new();
    }
    by_len[cut..by_len.len() - cut].to_vec()
}

/// Trims both length tails of each class, then samples the two classes
/// evenly inside equal-width length bins shared by both.
pub fn binned_length_match(
    members: &Dataset,
    nonmembers: &Dataset,
    bins: usize,
    trim: f64,
    seed: u64,
) -> Result<LengthMatched> {
    if bins == 0 {
        return Err(Error::InvalidArgument("bins must be >= 1".into()));
    }
    if !(0.0..0.5).contains(&trim) {
        return Err(Error::InvalidArgument(format!("trim must lie in [0, 0.5), got {trim}")));
    }
    let m = trim_by_length(&members.candidates, trim);
    let n = trim_by_length(&nonmembers.candidates, trim);
    if m.is_empty() || n.is_empty() {
        return Err(Error::Empty("a class is empty after trimming".into()));
    }
    let lo = m.iter().chain(&n).map(|(l, _)| *l).min().unwrap() as f64;
    let hi = m.iter().chain(&n).map(|(l, _)| *l).max().unwrap() as f64;
    let width = (hi - lo) / bins as f64;
    let bin_of = |len: usize| -> usize {
        if width == 0.0 {
            0
        } else {
            (((len as f64 - lo) / width) as usize).min(bins - 1)
        }
    };
    let mut m_bins: Vec<Vec<&Candidate>> = vec![Vec::new(); bins];
    let mut n_bins: Vec<Vec<&Candidate>> = vec![Vec::new(); bins];
    for (len, c) in &m {
        m_bins[bin_of(*len)].push(c);
    }
    for (len, c) in &n {
        n_bins[bin_of(*len)].push(c);
    }

    let mut rng = seeded_rng(seed);
    let mut kept_m = Vec::new();
    let mut kept_n = Vec::new();
    let mut bin_stats = Vec::with_capacity(bins);
    for b in 0..bins {
        let take = m_bins[b].len().min(n_bins[b].len());
        kept_m.extend(m_bins[b].choose_multiple(&mut rng, take).map(|c| (*c).clone()));
        kept_n.extend(n_bins[b].choose_multiple(&mut rng, take).map(|c| (*c).clone()));
        bin_stats.push((lo + width * b as f64, lo + width * (b + 1) as f64, take, take));
    }
    if kept_m.is_empty() {
        return Err(Error::Empty("no length bin holds both classes".into()));
    }
    let stats = LengthMatchStats {
        members_before: LengthStats::of(&members.candidates),
        nonmembers_before: LengthStats::of(&nonmembers.candidates),
        members_after: LengthStats::of(&kept_m),
        nonmembers_after: LengthStats::of(&kept_n),
        bins: bin_stats,
    };
    let mut candidates = kept_m;
    candidates.extend(kept_n);
    let mut dataset = Dataset::new(format!("{}+{}-matched", members.name, nonmembers.name), candidates);
    dataset.seed = Some(seed);
    Ok(LengthMatched { dataset, stats })
}

/// Random pseudo-word corpus: every document is a run of Zipf-distributed
/// draws over one shared vocabulary. Used to drive the memorizer backend
/// offline.
pub fn synthetic_dataset(
    n_members: usize,
    n_nonmembers: usize,
    words_per_doc: usize,
    vocab_size: usize,
    seed: u64,
) -> Dataset {
    let mut rng = seeded_rng(seed);
    const SYLLABLES: [&str; 20] = [
        "ka", "lo", "mi", "ne", "su", "ta", "ri", "po", "de", "va", "zu", "he", "bo", "fi", "ga",
        "ju", "xe", "wa", "yo", "ce",
    ];
    let mut vocab: Vec<String> = Vec::with_capacity(vocab_size);
    let mut seen = std::collections::HashSet::new();
    // word length grows once short words keep colliding
    let (mut min_syllables, mut misses) = (1usize, 0u32);
    while vocab.len() < vocab_size.max(1) {
        let n = rng.random_range(min_syllables..=min_syllables + 2);
        let w: String = (0..n).map(|_| *SYLLABLES.choose(&mut rng).unwrap()).collect();
        if seen.insert(w.clone()) {
            vocab.push(w);
            misses = 0;
        } else {
            misses += 1;
            if misses > 64 {
                min_syllables += 1;
                misses = 0;
            }
        }
    }
    vocab.shuffle(&mut rng);
    let zipf = Zipf::new(vocab.len() as f64, 1.1).expect("valid zipf parameters");
    let doc = |rng: &mut rand_chacha::ChaCha8Rng| -> String {
        (0..words_per_doc)
            .map(|_| vocab[zipf.sample(rng) as usize - 1].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut candidates = Vec::with_capacity(n_members + n_nonmembers);
    for i in 0..n_members {
        candidates.push(Candidate::new(format!("m{i:05}"), doc(&mut rng), Label::Member, "synthetic"));
    }
    for i in 0..n_nonmembers {
        candidates.push(Candidate::new(format!("n{i:05}"), doc(&mut rng), Label::NonMember, "synthetic"));
    }
    let mut ds = Dataset::new("synthetic", candidates);
    ds.seed = Some(seed);
    ds
}
