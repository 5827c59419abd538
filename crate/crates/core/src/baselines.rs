//! Loss-family scores computed from token log-probabilities, and the
//! multiple-choice paraphrase test. Every score is oriented so that higher
//! means more member-like.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;

use flate2::write::ZlibEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use crate::attack::parallel_map;
use crate::backends::{Backend, Capability, SamplingParams, TokenLogprob};
use crate::corpus::{Candidate, Dataset};
use crate::error::{Error, Result};
use crate::textops::BudgetProxy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogprobRecord {
    pub candidate_id: String,
    pub model_id: String,
    pub tokens: Vec<TokenLogprob>,
}

impl LogprobRecord {
    pub fn validate(&self) -> Result<()> {
        if let Some((tok, lp)) = self.tokens.iter().find(|(_, lp)| !(*lp <= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "record {}: token {tok:?} has logprob {lp} > 0",
                self.candidate_id
            )));
        }
        Ok(())
    }

    fn logprobs(&self) -> Result<impl Iterator<Item = f64> + '_> {
        if self.tokens.is_empty() {
            return Err(Error::Empty(format!("record {} has no tokens", self.candidate_id)));
        }
        Ok(self.tokens.iter().map(|(_, lp)| *lp))
    }

    pub fn sum(&self) -> Result<f64> {
        Ok(self.logprobs()?.sum())
    }

    pub fn mean(&self) -> Result<f64> {
        Ok(self.sum()? / self.tokens.len() as f64)
    }
}

pub fn load_records_jsonl(path: impl AsRef<Path>) -> Result<Vec<LogprobRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: LogprobRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        rec.validate().map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn save_records_jsonl(path: impl AsRef<Path>, records: &[LogprobRecord]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Scores every candidate text with `backend`. Needs the logprob capability.
pub fn collect_records<B: Backend + ?Sized>(backend: &B, dataset: &Dataset, workers: usize) -> Result<Vec<LogprobRecord>> {
    let desc = backend.descriptor();
    desc.require(Capability::Logprobs)?;
    parallel_map(&dataset.candidates, workers, |_, c| {
        Ok(LogprobRecord {
            candidate_id: c.id.clone(),
            model_id: desc.model_id.clone(),
            tokens: backend.score_logprobs(&c.text)?,
        })
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BaselineMethod {
    #[serde(rename = "loss")]
    Loss,
    #[serde(rename = "rloss")]
    RefLoss,
    #[serde(rename = "zlib")]
    Zlib,
    #[serde(rename = "mink")]
    MinK,
    #[serde(rename = "decop")]
    DeCop,
}

impl BaselineMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Loss => "loss",
            Self::RefLoss => "rloss",
            Self::Zlib => "zlib",
            Self::MinK => "mink",
            Self::DeCop => "decop",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "loss" => Some(Self::Loss),
            "rloss" | "ref-loss" | "refloss" => Some(Self::RefLoss),
            "zlib" => Some(Self::Zlib),
            "mink" | "min-k" => Some(Self::MinK),
            "decop" | "de-cop" => Some(Self::DeCop),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineScore {
    pub candidate_id: String,
    pub method: BaselineMethod,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    #[default]
    Mean,
    Sum,
}

/// Mean token logprob, i.e. the negated per-token loss.
pub fn loss_score(record: &LogprobRecord) -> Result<f64> {
    loss_score_with(record, LossMode::Mean)
}

pub fn loss_score_with(record: &LogprobRecord, mode: LossMode) -> Result<f64> {
    match mode {
        LossMode::Mean => record.mean(),
        LossMode::Sum => record.sum(),
    }
}

/// Target mean logprob minus reference mean logprob.
pub fn ref_loss_score(target: &LogprobRecord, reference: &LogprobRecord) -> Result<f64> {
    if target.candidate_id != reference.candidate_id {
        return Err(Error::CandidateMismatch(format!(
            "target record {} paired with reference record {}",
            target.candidate_id, reference.candidate_id
        )));
    }
    Ok(target.mean()? - reference.mean()?)
}

/// Size of `text` in the zlib container at the default level, header and
/// checksum included.
pub fn zlib_size(text: &str) -> usize {
    let mut enc = ZlibEncoder::new(Vec::new(), Compression::default());
    enc.write_all(text.as_bytes()).expect("writing to a Vec cannot fail");
    enc.finish().expect("writing to a Vec cannot fail").len()
}

/// Summed logprob over the zlib size of the text.
pub fn zlib_score(record: &LogprobRecord, text: &str) -> Result<f64> {
    if text.is_empty() {
        return Err(Error::Empty(format!("candidate {} has empty text", record.candidate_id)));
    }
    Ok(record.sum()? / zlib_size(text) as f64)
}

/// Mean of the lowest `ceil(k / 100 * T)` token logprobs.
pub fn min_k_score(record: &LogprobRecord, k: f64) -> Result<f64> {
    if !(k > 0.0 && k <= 100.0) {
        return Err(Error::InvalidArgument(format!("K must lie in (0, 100], got {k}")));
    }
    let mut lps: Vec<f64> = record.logprobs()?.collect();
    if k == 100.0 {
        // same summation order as the loss
        return record.mean();
    }
    let t = lps.len();
    let take = ((k / 100.0 * t as f64).ceil() as usize).clamp(1, t);
    lps.sort_by(f64::total_cmp);
    Ok(lps[..take].iter().sum::<f64>() / take as f64)
}

/// `10:60:10` style inclusive ranges.
pub fn parse_k_grid(spec: &str) -> Result<Vec<f64>> {
    let bad = || Error::InvalidArgument(format!("bad K grid {spec:?}, expected start:end:step or a comma list"));
    if spec.contains(':') {
        let parts: Vec<f64> = spec
            .split(':')
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let [start, end, step] = parts[..] else { return Err(bad()) };
        if !(step > 0.0) || end < start {
            return Err(bad());
        }
        let n = ((end - start) / step + 1e-9).floor() as usize;
        Ok((0..=n).map(|i| start + step * i as f64).collect())
    } else {
        spec.split(',').map(|p| p.trim().parse::<f64>().map_err(|_| bad())).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecopConfig {
    /// Must contain `{passage}`.
    pub paraphrase_prompt: String,
    /// Must contain `{A}`, `{B}`, `{C}` and `{D}`.
    pub question_prompt: String,
    pub n_paraphrases: usize,
    pub paraphrase_temperature: f64,
    pub answer_max_tokens: usize,
    pub seed: u64,
}

impl Default for DecopConfig {
    fn default() -> Self {
        Self {
            paraphrase_prompt: "Rewrite the following passage so that the wording changes but the meaning \
                                stays the same. Reply with the rewritten passage only.\n\nPassage: {passage}"
                .into(),
            question_prompt: "Question: Which of the following passages is verbatim from the original text?\n\
                              Options:\nA. {A}\nB. {B}\nC. {C}\nD. {D}\n\
                              Reply with only the letter of the correct option.\nAnswer:"
                .into(),
            n_paraphrases: 3,
            paraphrase_temperature: 0.1,
            answer_max_tokens: 1,
            seed: 0,
        }
    }
}

const LETTERS: [&str; 4] = ["A", "B", "C", "D"];

/// All orderings of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn go(rest: &mut Vec<usize>, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if rest.is_empty() {
            out.push(cur.clone());
            return;
        }
        for i in 0..rest.len() {
            let x = rest.remove(i);
            cur.push(x);
            go(rest, cur, out);
            cur.pop();
            rest.insert(i, x);
        }
    }
    let mut out = Vec::new();
    go(&mut (0..n).collect(), &mut Vec::new(), &mut out);
    out
}

/// Option index named by the first token of `answer`, if that token is a
/// single letter A-D in either case.
pub fn parse_answer(answer: &str) -> Option<usize> {
    let first = answer.split_whitespace().next()?;
    let trimmed = first.trim_matches(|c: char| !c.is_alphanumeric());
    let mut chars = trimmed.chars();
    let c = chars.next()?.to_ascii_uppercase();
    if chars.next().is_some() {
        return None;
    }
    LETTERS.iter().position(|l| l.starts_with(c))
}

/// Input and output token counts of one candidate of `n` tokens: three
/// paraphrases out, one paraphrase request plus 24 four-passage questions in.
pub fn decop_cost(n: usize) -> (usize, usize) {
    (97 * n, 3 * n)
}

/// Fraction of the 24 orderings in which the target picks the original.
pub fn decop_score<T: Backend + ?Sized, P: Backend + ?Sized>(
    target: &T,
    paraphraser: &P,
    candidate: &Candidate,
    config: &DecopConfig,
) -> Result<f64> {
    if config.n_paraphrases != 3 {
        return Err(Error::InvalidArgument("the four-option test needs exactly 3 paraphrases".into()));
    }
    if config.paraphrase_prompt.matches("{passage}").count() != 1 {
        return Err(Error::Template("paraphrase prompt must contain {passage} once".into()));
    }
    let budget = BudgetProxy::default().count(&candidate.text).max(1);
    let paraphrases = paraphraser
        .complete(
            &config.paraphrase_prompt.replace("{passage}", &candidate.text),
            &SamplingParams {
                temperature: config.paraphrase_temperature,
                top_p: 1.0,
                max_tokens: 2 * budget,
                n_samples: config.n_paraphrases,
                seed: Some(config.seed),
            },
        )
        .map_err(|e| Error::Backend(format!("paraphrasing {} failed: {e}", candidate.id)))?;
    let mut options = vec![candidate.text.trim().to_owned()];
    for p in paraphrases {
        let text = p.text.trim().to_owned();
        if text.is_empty() {
            return Err(Error::Backend(format!("empty paraphrase for {}", candidate.id)));
        }
        options.push(text);
    }

    let answer_params = SamplingParams {
        temperature: 0.0,
        top_p: 1.0,
        max_tokens: config.answer_max_tokens,
        n_samples: 1,
        seed: Some(config.seed),
    };
    let perms = permutations(4);
    let mut correct = 0usize;
    for perm in &perms {
        let mut prompt = config.question_prompt.clone();
        for (slot, &opt) in perm.iter().enumerate() {
            prompt = prompt.replace(&format!("{{{}}}", LETTERS[slot]), &options[opt]);
        }
        let reply = target.complete(&prompt, &answer_params)?;
        let text = reply.first().map(|g| g.text.as_str()).unwrap_or("");
        match parse_answer(text) {
            Some(slot) if perm[slot] == 0 => correct += 1,
            Some(_) => {}
            None => log::warn!("{}: unparseable answer {text:?} counted as wrong", candidate.id),
        }
    }
    Ok(correct as f64 / perms.len() as f64)
}

/// Loss-family scores for every record that has a matching candidate.
/// Candidates without a usable record are logged and skipped.
pub fn score_records(
    method: BaselineMethod,
    dataset: &Dataset,
    target: &[LogprobRecord],
    reference: Option<&[LogprobRecord]>,
    k: f64,
    mode: LossMode,
) -> Result<Vec<BaselineScore>> {
    let by_id: HashMap<&str, &LogprobRecord> = target.iter().map(|r| (r.candidate_id.as_str(), r)).collect();
    let ref_by_id: Option<HashMap<&str, &LogprobRecord>> =
        reference.map(|rs| rs.iter().map(|r| (r.candidate_id.as_str(), r)).collect());
    if method == BaselineMethod::RefLoss && ref_by_id.is_none() {
        return Err(Error::Capability {
            model: "reference".into(),
            capability: Capability::Logprobs,
        });
    }
    let mut out = Vec::new();
    for cand in &dataset.candidates {
        let Some(rec) = by_id.get(cand.id.as_str()) else {
            log::warn!("no logprob record for {}, skipping", cand.id);
            continue;
        };
        let value = match method {
            BaselineMethod::Loss => loss_score_with(rec, mode),
            BaselineMethod::MinK => min_k_score(rec, k),
            BaselineMethod::Zlib => zlib_score(rec, &cand.text),
            BaselineMethod::RefLoss => match ref_by_id.as_ref().and_then(|m| m.get(cand.id.as_str())) {
                Some(r) => ref_loss_score(rec, r),
                None => Err(Error::Empty(format!("no reference record for {}", cand.id))),
            },
            BaselineMethod::DeCop => {
                return Err(Error::InvalidArgument("the paraphrase test does not use logprob records".into()))
            }
        };
        match value {
            Ok(value) => out.push(BaselineScore {
                candidate_id: cand.id.clone(),
                method,
                value,
            }),
            Err(e @ Error::Empty(_)) => log::warn!("skipping {}: {e}", cand.id),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

pub fn write_scores_jsonl(path: impl AsRef<Path>, scores: &[BaselineScore]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in scores {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{BackendDescriptor, Generation, FinishReason};
    use crate::corpus::Label;
    use proptest::prelude::*;
    use std::collections::BTreeSet;
    use std::ops::Range;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn rec(lps: &[f64]) -> LogprobRecord {
        LogprobRecord {
            candidate_id: "c".into(),
            model_id: "m".into(),
            tokens: lps.iter().map(|&lp| ("t".to_string(), lp)).collect(),
        }
    }

    #[test]
    fn loss_examples() {
        assert_eq!(loss_score(&rec(&[-1.0, -3.0])).unwrap(), -2.0);
        assert_eq!(loss_score(&rec(&[0.0, 0.0])).unwrap(), 0.0);
        assert_eq!(loss_score(&rec(&[-5.0])).unwrap(), -5.0);
        assert_eq!(loss_score_with(&rec(&[-1.0, -3.0]), LossMode::Sum).unwrap(), -4.0);
        assert!(loss_score(&rec(&[])).is_err());
    }

    #[test]
    fn ref_loss_examples() {
        assert_eq!(ref_loss_score(&rec(&[-2.0]), &rec(&[-4.0, -4.0])).unwrap(), 2.0);
        assert_eq!(ref_loss_score(&rec(&[-1.5, -0.5]), &rec(&[-1.5, -0.5])).unwrap(), 0.0);
        let mut other = rec(&[-1.0]);
        other.candidate_id = "d".into();
        assert!(matches!(ref_loss_score(&rec(&[-1.0]), &other), Err(Error::CandidateMismatch(_))));
    }

    #[test]
    fn min_k_examples() {
        assert_eq!(min_k_score(&rec(&[-1.0, -2.0, -3.0, -4.0]), 50.0).unwrap(), -3.5);
        // ceil(0.1 * 4) = 1 token
        assert_eq!(min_k_score(&rec(&[-1.0, -2.0, -3.0, -4.0]), 10.0).unwrap(), -4.0);
        assert!(min_k_score(&rec(&[-1.0]), 0.0).is_err());
        assert!(min_k_score(&rec(&[-1.0]), 101.0).is_err());
        assert_eq!(parse_k_grid("10:60:10").unwrap(), vec![10.0, 20.0, 30.0, 40.0, 50.0, 60.0]);
        assert_eq!(parse_k_grid("5,20").unwrap(), vec![5.0, 20.0]);
        assert!(parse_k_grid("10:5:1").is_err());
    }

    #[test]
    fn zlib_examples() {
        let text = "the quick brown fox jumps over the lazy dog";
        let size = zlib_size(text) as f64;
        assert_eq!(zlib_score(&rec(&[-50.0, -50.0]), text).unwrap(), -100.0 / size);
        assert_eq!(zlib_score(&rec(&[0.0]), text).unwrap(), 0.0);
        assert!(zlib_score(&rec(&[-1.0]), "").is_err());
        // header (2 bytes) + checksum (4 bytes) are always present
        assert!(zlib_size("") >= 6);
    }

    #[test]
    fn zlib_grows_sublinearly_on_repetition() {
        let text = "a fairly ordinary sentence about membership inference and compression.";
        let doubled = format!("{text}{text}");
        let (one, two) = (zlib_size(text), zlib_size(&doubled));
        assert!(two < 2 * one);
        let s1 = zlib_score(&rec(&[-100.0]), text).unwrap();
        let s2 = zlib_score(&rec(&[-200.0]), &doubled).unwrap();
        // the doubled loss is divided by less than twice the size
        assert!(s2.abs() > s1.abs());
    }

    #[test]
    fn permutations_are_all_distinct() {
        let p = permutations(4);
        assert_eq!(p.len(), 24);
        assert_eq!(p.iter().collect::<BTreeSet<_>>().len(), 24);
        assert_eq!(p[0], vec![0, 1, 2, 3]);
    }

    #[test]
    fn answer_parsing() {
        assert_eq!(parse_answer("B"), Some(1));
        assert_eq!(parse_answer(" c."), Some(2));
        assert_eq!(parse_answer("(D) because"), Some(3));
        assert_eq!(parse_answer("a"), Some(0));
        assert_eq!(parse_answer("E"), None);
        assert_eq!(parse_answer("The answer is A"), None);
        assert_eq!(parse_answer(""), None);
        assert_eq!(decop_cost(10), (970, 30));
    }

    /// Answers with the slot holding `truth`, or always with a fixed letter.
    struct Quiz {
        desc: BackendDescriptor,
        truth: String,
        fixed: Option<&'static str>,
        calls: AtomicUsize,
    }

    impl Quiz {
        fn new(truth: &str, fixed: Option<&'static str>) -> Self {
            Self {
                desc: BackendDescriptor::local("quiz", [Capability::TextCompletion]),
                truth: truth.into(),
                fixed,
                calls: AtomicUsize::new(0),
            }
        }
    }

    impl Backend for Quiz {
        fn descriptor(&self) -> &BackendDescriptor {
            &self.desc
        }

        fn sample(&self, prompt: &str, _params: &SamplingParams, indices: Range<usize>) -> Result<Vec<Generation>> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            let answer = match self.fixed {
                Some(l) => l.to_string(),
                None => LETTERS
                    .iter()
                    .find(|l| prompt.contains(&format!("{l}. {}\n", self.truth)))
                    .map_or("?".to_string(), |l| l.to_string()),
            };
            Ok(indices
                .map(|i| Generation {
                    text: if prompt.starts_with("Rewrite") { format!("variant {i}") } else { answer.clone() },
                    token_logprobs: None,
                    finish_reason: FinishReason::Stop,
                })
                .collect())
        }
    }

    #[test]
    fn decop_oracle_and_fixed_answers() {
        let cand = Candidate::new("x", "the original passage", Label::Member, "");
        let cfg = DecopConfig::default();
        let oracle = Quiz::new("the original passage", None);
        assert_eq!(decop_score(&oracle, &oracle, &cand, &cfg).unwrap(), 1.0);
        assert_eq!(oracle.calls.load(Ordering::SeqCst), 25);
        // a constant letter is right whenever the original sits there: 6 of 24
        let fixed = Quiz::new("", Some("A"));
        assert_eq!(decop_score(&fixed, &oracle, &cand, &cfg).unwrap(), 0.25);
        let garbage = Quiz::new("", Some("maybe"));
        assert_eq!(decop_score(&garbage, &oracle, &cand, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn rloss_without_reference_is_a_capability_error() {
        let ds = Dataset::new("d", vec![Candidate::new("c", "x y", Label::Member, "")]);
        let r = score_records(BaselineMethod::RefLoss, &ds, &[rec(&[-1.0])], None, 20.0, LossMode::Mean);
        assert!(matches!(r, Err(Error::Capability { .. })));
    }

    #[test]
    fn records_round_trip_and_reject_positive() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let rs = vec![rec(&[-0.1, -2.5]), rec(&[-3.0])];
        save_records_jsonl(&path, &rs).unwrap();
        assert_eq!(load_records_jsonl(&path).unwrap(), rs);
        std::fs::write(&path, r#"{"candidate_id":"c","model_id":"m","tokens":[["a",0.5]]}"#).unwrap();
        assert!(matches!(load_records_jsonl(&path), Err(Error::Parse { line: 1, .. })));
    }

    proptest! {
        #[test]
        fn min_k_100_is_loss(lps in proptest::collection::vec(-30.0f64..0.0, 1..200)) {
            let r = rec(&lps);
            prop_assert_eq!(min_k_score(&r, 100.0).unwrap(), loss_score(&r).unwrap());
        }

        #[test]
        fn min_k_is_monotone_in_k(lps in proptest::collection::vec(-30.0f64..0.0, 1..60), k1 in 1.0f64..100.0, k2 in 1.0f64..100.0) {
            let (lo, hi) = if k1 <= k2 { (k1, k2) } else { (k2, k1) };
            let r = rec(&lps);
            prop_assert!(min_k_score(&r, lo).unwrap() <= min_k_score(&r, hi).unwrap() + 1e-9);
        }

        #[test]
        fn zlib_depends_only_on_the_sum(mut lps in proptest::collection::vec(-10.0f64..0.0, 1..30), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let text = "some fixed candidate text";
            let a = zlib_score(&rec(&lps), text).unwrap();
            lps.shuffle(&mut crate::digest::seeded_rng(seed));
            let b = zlib_score(&rec(&lps), text).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
            lps.push(-1.0);
            prop_assert!(zlib_score(&rec(&lps), text).unwrap() < b);
        }
    }
}
