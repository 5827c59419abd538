//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed. Oracles below are written independently of
//! the library code they check.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::Rng;

use ngcov_core::attack::{self, AttackConfig, AttackScore};
use ngcov_core::backends::{Backend, CountingBackend, MemorizerBackend, MemorizerConfig, WireServer};
use ngcov_core::baselines::{self, LogprobRecord};
use ngcov_core::corpus::{self, Candidate, Dataset, Label, PagePair, WikiHardParams};
use ngcov_core::digest::seeded_rng;
use ngcov_core::eval::{self, SamplePool};
use ngcov_core::similarity::{self, Metric};
use ngcov_core::textops::{BudgetMode, BudgetProxy, Granularity, TokenSeq};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn seq(tokens: Vec<String>, granularity: Granularity) -> TokenSeq {
    TokenSeq { tokens, granularity }
}

fn random_symbols(rng: &mut impl Rng, alphabet: usize, len: usize) -> Vec<String> {
    (0..len)
        .map(|_| char::from(b'a' + rng.random_range(0..alphabet) as u8).to_string())
        .collect()
}

// ---------------------------------------------------------------- oracles

/// Token `j` of `x2` is covered iff some length-`l` window of `x2` holding
/// `j` occurs in `x1`; longer matching spans always contain such a window.
fn oracle_coverage(x1: &[String], x2: &[String], l: usize) -> f64 {
    let n = x2.len();
    if n == 0 || l > n {
        return 0.0;
    }
    let occurs = |s: usize| x1.windows(l).any(|w| w == &x2[s..s + l]);
    let hits: Vec<bool> = (0..=n - l).map(occurs).collect();
    let covered = (0..n)
        .filter(|&j| (j.saturating_sub(l - 1)..=j.min(n - l)).any(|s| hits[s]))
        .count();
    covered as f64 / n as f64
}

fn oracle_lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut best = 0;
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            if x == y {
                cur[j + 1] = prev[j] + 1;
                best = best.max(cur[j + 1]);
            }
        }
        prev = cur;
    }
    best
}

fn oracle_auroc(scores: &[(f64, Label)]) -> f64 {
    let pos: Vec<f64> = scores.iter().filter(|s| s.1 == Label::Member).map(|s| s.0).collect();
    let neg: Vec<f64> = scores.iter().filter(|s| s.1 == Label::NonMember).map(|s| s.0).collect();
    let mut wins = 0.0;
    for p in &pos {
        for n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

fn oracle_budget(suffix_words: &[&str], mode: BudgetMode) -> usize {
    match mode {
        BudgetMode::WordProxy => (suffix_words.len() * 3).div_ceil(2),
        BudgetMode::CharProxy => suffix_words.join(" ").chars().count().div_ceil(4),
    }
}

// ---------------------------------------------------------------- criteria

fn c1_coverage() -> Outcome {
    let mut rng = seeded_rng(101);
    let start = Instant::now();
    for i in 0..1000 {
        let alphabet = rng.random_range(1..=8);
        let (n1, n2) = (rng.random_range(0..=40), rng.random_range(1..=40));
        let x1 = random_symbols(&mut rng, alphabet, n1);
        let x2 = random_symbols(&mut rng, alphabet, n2);
        let l = rng.random_range(1..=6);
        let (s1, s2) = (seq(x1.clone(), Granularity::Word), seq(x2.clone(), Granularity::Word));
        let fast = similarity::coverage(&s1, &s2, l);
        let brute = similarity::brute_force_coverage(&s1, &s2, l);
        let oracle = oracle_coverage(&x1, &x2, l);
        check(fast == brute && fast == oracle, || {
            format!("pair {i}: index {fast}, brute force {brute}, oracle {oracle}")
        })?;
    }
    let took = start.elapsed();
    check(took < Duration::from_secs(10), || format!("took {took:?}"))?;
    Ok(format!("1000 pairs equal, {took:.2?}"))
}

fn c2_lcs() -> Outcome {
    let mut rng = seeded_rng(202);
    let start = Instant::now();
    for i in 0..1000 {
        let alphabet = rng.random_range(1..=6);
        let (la, lb) = (rng.random_range(0..=60), rng.random_range(0..=60));
        // chars: strings over the alphabet, words: space-joined symbols
        let a: String = random_symbols(&mut rng, alphabet, la).concat();
        let b: String = random_symbols(&mut rng, alphabet, lb).concat();
        for g in [Granularity::Char, Granularity::Word] {
            let (ta, tb) = match g {
                Granularity::Char => (
                    ngcov_core::textops::tokenize(&a, g),
                    ngcov_core::textops::tokenize(&b, g),
                ),
                Granularity::Word => {
                    let words = |s: &str| s.chars().collect::<Vec<_>>().chunks(2).map(String::from_iter).collect::<Vec<_>>().join(" ");
                    (
                        ngcov_core::textops::tokenize(&words(&a), g),
                        ngcov_core::textops::tokenize(&words(&b), g),
                    )
                }
            };
            let fast = similarity::lcs(&ta, &tb).map_err(|e| e.to_string())?;
            let dp = oracle_lcs(&ta.tokens, &tb.tokens);
            check(fast == dp, || format!("pair {i} ({g:?}): fast {fast}, dp {dp}"))?;
        }
    }
    let took = start.elapsed();
    check(took < Duration::from_secs(10), || format!("took {took:?}"))?;
    Ok(format!("1000 pairs x 2 granularities equal, {took:.2?}"))
}

fn c3_auroc() -> Outcome {
    let mut rng = seeded_rng(303);
    let mut worst: f64 = 0.0;
    for i in 0..200 {
        let n = rng.random_range(2..=80);
        let levels = rng.random_range(1..=6);
        let mut scores: Vec<(f64, Label)> = (0..n)
            .map(|_| {
                let label = if rng.random_bool(0.5) { Label::Member } else { Label::NonMember };
                (rng.random_range(0..levels) as f64 * 0.25, label)
            })
            .collect();
        scores[0].1 = Label::Member;
        scores[1].1 = Label::NonMember;
        let rank = eval::auroc(&scores).map_err(|e| e.to_string())?;
        let brute = oracle_auroc(&scores);
        let area = eval::trapezoid_area(&eval::roc_curve(&scores).map_err(|e| e.to_string())?);
        worst = worst.max((rank - brute).abs()).max((area - rank).abs());
        check((rank - brute).abs() <= 1e-12 && (area - rank).abs() <= 1e-12, || {
            format!("set {i}: rank {rank}, pairwise {brute}, trapezoid {area}")
        })?;
    }
    Ok(format!("200 tied score sets, max deviation {worst:e}"))
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const DS: [usize; 4] = [1, 5, 10, 50];

struct World {
    dataset: Dataset,
    backend: MemorizerBackend,
}

fn world(seed: u64) -> World {
    let dataset = corpus::synthetic_dataset(200, 200, 32, 5000, seed);
    let config = MemorizerConfig {
        corruption: 0.3,
        background_order: 2,
        seed,
        ..MemorizerConfig::default()
    };
    let backend = MemorizerBackend::new(&dataset.with_label(Label::Member), config).expect("memorizer");
    World { dataset, backend }
}

fn attack_config(d: usize) -> AttackConfig {
    let mut c = AttackConfig {
        d,
        workers: 8,
        ..AttackConfig::default()
    };
    c.sampling.temperature = 1.0;
    c.sampling.top_p = 0.95;
    c.prefix_ratio = 0.5;
    c.sim.metric = Metric::Coverage;
    c.sim.min_ngram = 4;
    c.agg = attack::Aggregation::Max;
    c
}

struct Pools {
    /// Per seed, per d: scores off one shared pool of 50 generations.
    scores: Vec<Vec<Vec<AttackScore>>>,
    took: Duration,
}

fn pools() -> Result<Pools, String> {
    let start = Instant::now();
    let mut scores = Vec::new();
    for seed in SEEDS {
        let w = world(seed);
        let pool = SamplePool::draw(&w.backend, &w.dataset, &attack_config(50), 50).map_err(|e| e.to_string())?;
        scores.push(
            DS.iter()
                .map(|&d| pool.score(&attack_config(d)).map_err(|e| e.to_string()))
                .collect::<Result<Vec<_>, _>>()?,
        );
    }
    Ok(Pools {
        scores,
        took: start.elapsed(),
    })
}

fn auroc_of(scores: &[AttackScore]) -> f64 {
    eval::auroc(&eval::labeled(scores)).expect("both classes present")
}

fn c4_end_to_end(p: &Pools) -> Outcome {
    let per_seed: Vec<f64> = p.scores.iter().map(|s| auroc_of(&s[3])).collect();
    let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
    check(mean >= 0.90, || format!("mean AUROC {mean:.4} < 0.90 ({per_seed:?})"))?;
    check(p.took < Duration::from_secs(300), || format!("took {:?}", p.took))?;
    Ok(format!("mean AUROC {mean:.4} over 5 seeds at d=50, sampling {:.2?}", p.took))
}

fn c5_d_scaling(p: &Pools) -> Outcome {
    let n = SEEDS.len() as f64;
    let stats: Vec<(f64, f64)> = (0..DS.len())
        .map(|k| {
            let xs: Vec<f64> = p.scores.iter().map(|s| auroc_of(&s[k])).collect();
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (mean, var)
        })
        .collect();
    for k in 1..DS.len() {
        let ((m0, v0), (m1, v1)) = (stats[k - 1], stats[k]);
        let se = ((v0 + v1) / n).sqrt();
        check(m1 >= m0 - se, || {
            format!("AUROC(d={}) {m1:.4} < AUROC(d={}) {m0:.4} - SE {se:.4}", DS[k], DS[k - 1])
        })?;
    }
    check(stats[3].0 > stats[0].0, || {
        format!("AUROC(50) {:.4} not above AUROC(1) {:.4}", stats[3].0, stats[0].0)
    })?;
    // Max over a growing prefix of one pool never decreases
    for (si, per_d) in p.scores.iter().enumerate() {
        for k in 1..DS.len() {
            for (a, b) in per_d[k - 1].iter().zip(&per_d[k]) {
                check(a.candidate_id == b.candidate_id && a.aggregated <= b.aggregated, || {
                    format!("seed {si} candidate {}: d={} gives {} > d={} gives {}", a.candidate_id, DS[k - 1], a.aggregated, DS[k], b.aggregated)
                })?;
            }
        }
    }
    // a fresh d=10 run draws the same samples as the pool prefix
    let w = world(SEEDS[0]);
    let fresh = attack::run_attack(&w.backend, &w.dataset, &attack_config(10)).map_err(|e| e.to_string())?;
    check(fresh.scores == p.scores[0][2], || "fresh d=10 run differs from the pooled prefix".into())?;
    let means: Vec<String> = DS.iter().zip(&stats).map(|(d, (m, _))| format!("d={d}:{m:.4}")).collect();
    Ok(means.join(" "))
}

fn c6_baselines() -> Outcome {
    let w = world(SEEDS[0]);
    let records = baselines::collect_records(&w.backend, &w.dataset, 8).map_err(|e| e.to_string())?;
    let label = |r: &LogprobRecord| w.dataset.get(&r.candidate_id).expect("known id").label;
    let text = |r: &LogprobRecord| w.dataset.get(&r.candidate_id).expect("known id").text.clone();
    let mut parts = Vec::new();
    type ScoreFn<'a> = Box<dyn Fn(&LogprobRecord) -> ngcov_core::Result<f64> + 'a>;
    let methods: [(&str, ScoreFn); 3] = [
        ("loss", Box::new(baselines::loss_score)),
        ("zlib", Box::new(|r| baselines::zlib_score(r, &text(r)))),
        ("mink20", Box::new(|r| baselines::min_k_score(r, 20.0))),
    ];
    for (name, f) in methods {
        let scored = records
            .iter()
            .map(|r| Ok((f(r)?, label(r))))
            .collect::<ngcov_core::Result<Vec<_>>>()
            .map_err(|e| e.to_string())?;
        let a = eval::auroc(&scored).map_err(|e| e.to_string())?;
        check(a > 0.5, || format!("{name} AUROC {a:.4} <= 0.5"))?;
        parts.push(format!("{name} {a:.4}"));
    }
    let mut rng = seeded_rng(606);
    for i in 0..100 {
        let t = rng.random_range(1..=300);
        let rec = LogprobRecord {
            candidate_id: format!("r{i}"),
            model_id: "random".into(),
            tokens: (0..t).map(|j| (format!("t{j}"), -rng.random_range(0.0..20.0))).collect(),
        };
        let (mk, loss) = (
            baselines::min_k_score(&rec, 100.0).map_err(|e| e.to_string())?,
            baselines::loss_score(&rec).map_err(|e| e.to_string())?,
        );
        check(mk == loss, || format!("record {i}: min_k(100) {mk} != loss {loss}"))?;
    }
    parts.push("min_k(100) == loss on 100 records".into());
    Ok(parts.join(", "))
}

/// Varied-length candidates, including some too short to split.
fn ragged_dataset(seed: u64) -> Dataset {
    let mut rng = seeded_rng(seed);
    let cands = (0..120)
        .map(|i| {
            let n = rng.random_range(1..=90);
            let text = (0..n)
                .map(|_| {
                    let len = rng.random_range(1..=7);
                    random_symbols(&mut rng, 8, len).concat()
                })
                .collect::<Vec<_>>()
                .join(" ");
            let label = if i % 2 == 0 { Label::Member } else { Label::NonMember };
            Candidate::new(format!("c{i:03}"), text, label, "ragged")
        })
        .collect();
    Dataset::new("ragged", cands)
}

fn oracle_estimate(ds: &Dataset, d: usize, ratio: f64, mode: BudgetMode) -> usize {
    ds.candidates
        .iter()
        .map(|c| {
            let words: Vec<&str> = c.text.split_whitespace().collect();
            if words.len() < 2 {
                return 0;
            }
            let cut = ((ratio * words.len() as f64).floor() as usize).clamp(1, words.len() - 1);
            d * oracle_budget(&words[cut..], mode)
        })
        .sum()
}

fn c7_budget(bin: &Path) -> Outcome {
    let mut checked = 0;
    for seed in 0..3u64 {
        let ds = ragged_dataset(seed);
        let backend = CountingBackend::new(
            MemorizerBackend::new(&ds.with_label(Label::Member), MemorizerConfig::default()).map_err(|e| e.to_string())?,
        );
        for mode in [BudgetMode::WordProxy, BudgetMode::CharProxy] {
            for (d, ratio) in [(3, 0.5), (7, 0.3), (2, 0.8)] {
                let mut cfg = attack_config(d);
                cfg.prefix_ratio = ratio;
                cfg.budget = BudgetProxy::with_mode(mode);
                let plan = attack::plan(&ds, &cfg).map_err(|e| e.to_string())?;
                let want = oracle_estimate(&ds, d, ratio, mode);
                check(plan.max_output_tokens == want, || {
                    format!("seed {seed} {mode:?} d={d}: plan {} != oracle {want}", plan.max_output_tokens)
                })?;
                let run = attack::run_attack(&backend, &ds, &cfg).map_err(|e| e.to_string())?;
                check(run.sampled_tokens <= plan.max_output_tokens, || {
                    format!("sampled {} > estimate {}", run.sampled_tokens, plan.max_output_tokens)
                })?;
                checked += 1;
            }
        }
    }
    // the CLI dry run reports the same figure and never touches the endpoint
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ds = ragged_dataset(9);
    let server = serve(&ds)?;
    corpus::save_jsonl(&ds, dir.path().join("data.jsonl")).map_err(|e| e.to_string())?;
    let cfg = remote_config(&server.endpoint(), 6);
    std::fs::write(dir.path().join("run.toml"), cfg).map_err(|e| e.to_string())?;
    let out = Command::new(bin)
        .args(["attack", "--dry-run", "--config"])
        .arg(dir.path().join("run.toml"))
        .output()
        .map_err(|e| e.to_string())?;
    check(out.status.success(), || String::from_utf8_lossy(&out.stderr).into_owned())?;
    let plan: attack::Plan = serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())?;
    let want = oracle_estimate(&ds, 6, 0.5, BudgetMode::WordProxy);
    check(plan.max_output_tokens == want, || format!("dry run {} != oracle {want}", plan.max_output_tokens))?;
    check(server.requests() == 0, || format!("dry run sent {} requests", server.requests()))?;
    Ok(format!("{checked} plan/run pairs exact and bounded, dry run {want} tokens with 0 requests"))
}

fn serve(ds: &Dataset) -> Result<WireServer, String> {
    let backend = MemorizerBackend::new(&ds.with_label(Label::Member), MemorizerConfig::default()).map_err(|e| e.to_string())?;
    WireServer::start(Arc::new(backend) as Arc<dyn Backend>, "127.0.0.1:0").map_err(|e| e.to_string())
}

fn remote_config(endpoint: &str, d: usize) -> String {
    format!(
        r#"[dataset]
path = "data.jsonl"

[backend]
kind = "remote"
max_in_flight = 4

[backend.descriptor]
model_id = "memorizer"
capabilities = ["text-completion"]
endpoint = "{endpoint}"

[attack]
d = {d}
sampling = {{ seed = 0 }}

[cache]
dir = "cache"
"#
    )
}

fn c8_determinism(bin: &Path) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ds = corpus::synthetic_dataset(30, 30, 32, 2000, 8);
    corpus::save_jsonl(&ds, dir.path().join("data.jsonl")).map_err(|e| e.to_string())?;
    let server = serve(&ds)?;
    std::fs::write(dir.path().join("run.toml"), remote_config(&server.endpoint(), 8)).map_err(|e| e.to_string())?;
    let run = |out: &str| -> Result<(), String> {
        let o = Command::new(bin)
            .args(["attack", "--workers", "4", "--config"])
            .arg(dir.path().join("run.toml"))
            .arg("--out")
            .arg(dir.path().join(out))
            .output()
            .map_err(|e| e.to_string())?;
        check(o.status.success(), || String::from_utf8_lossy(&o.stderr).into_owned())
    };
    run("out1")?;
    let cold = server.requests();
    check(cold > 0, || "first run made no requests".into())?;
    run("out2")?;
    let warm = server.requests() - cold;
    check(warm == 0, || format!("second run made {warm} requests"))?;
    for f in ["scores.jsonl", "report.json", "report.csv", "report.md"] {
        let a = std::fs::read(dir.path().join("out1").join(f)).map_err(|e| format!("{f}: {e}"))?;
        let b = std::fs::read(dir.path().join("out2").join(f)).map_err(|e| format!("{f}: {e}"))?;
        check(a == b, || format!("{f} differs between runs"))?;
    }
    Ok(format!("{cold} requests cold, 0 warm, 4 output files identical"))
}

/// `(old words, new words, leading words rewritten, expected to survive)`.
/// Rewritten words use letters disjoint from the old text, so for equal
/// lengths the normalized edit distance is exactly 5k / (6n - 1).
const WIKI_FIXTURE: [(usize, usize, usize, bool); 25] = [
    (25, 25, 25, true),    // at the word floor, full rewrite
    (24, 30, 24, false),   // old too short
    (30, 24, 24, false),   // new too short
    (10, 10, 10, false),   // both too short
    (26, 26, 26, true),
    (30, 40, 30, false),   // 10 of 40 = 25% length gap
    (40, 50, 40, true),    // 10 of 50 = exactly 20%
    (40, 51, 40, false),   // 11 of 51
    (100, 80, 80, true),   // 20 of 100 = exactly 20%
    (100, 79, 79, false),  // 21 of 100
    (50, 50, 0, false),    // identical
    (50, 50, 10, false),   // 50/299
    (50, 50, 29, false),   // 145/299 = 0.485
    (50, 50, 30, true),    // 150/299 = 0.502
    (50, 50, 31, true),
    (50, 50, 50, true),
    (50, 45, 0, false),    // five words dropped
    (45, 50, 5, false),    // five words added, five rewritten
    (60, 60, 36, true),    // 180/359 = 0.501
    (60, 60, 35, false),   // 175/359 = 0.487
    (200, 200, 200, true),
    (300, 300, 300, true), // truncated to 256 words
    (25, 30, 25, true),    // 5 of 30 gap, at least 125/179 edits
    (30, 25, 0, false),    // five words dropped
    (80, 80, 60, true),    // 300/479
];

fn fixture_word(rng: &mut impl Rng, letters: &[u8]) -> String {
    (0..5).map(|_| char::from(letters[rng.random_range(0..letters.len())])).collect()
}

fn wiki_fixture() -> (Vec<PagePair>, Vec<String>) {
    let (old_letters, new_letters) = (b"abcdefghijkl", b"mnopqrstuvwx");
    let mut rng = seeded_rng(909);
    let mut pairs = Vec::new();
    let mut expected = Vec::new();
    for rep in 0..2 {
        for (i, &(old_n, new_n, k, keep)) in WIKI_FIXTURE.iter().enumerate() {
            let old: Vec<String> = (0..old_n).map(|_| fixture_word(&mut rng, old_letters)).collect();
            let new: Vec<String> = (0..new_n)
                .map(|j| {
                    if j < k {
                        fixture_word(&mut rng, new_letters)
                    } else if j < old_n {
                        old[j].clone()
                    } else {
                        fixture_word(&mut rng, old_letters)
                    }
                })
                .collect();
            let page_id = format!("p{rep}-{i:02}");
            if keep {
                expected.push(page_id.clone());
            }
            pairs.push(PagePair {
                page_id,
                old_text: old.join(" "),
                new_text: new.join(" "),
            });
        }
    }
    (pairs, expected)
}

fn doc(rng: &mut impl Rng, n: usize) -> String {
    (0..n).map(|_| fixture_word(rng, b"abcdefgh")).collect::<Vec<_>>().join(" ")
}

fn c9_builders() -> Outcome {
    let (pairs, expected) = wiki_fixture();
    check(pairs.len() == 50, || format!("fixture has {} pairs", pairs.len()))?;
    let ds = corpus::build_wiki_hard(&pairs, &WikiHardParams::default()).map_err(|e| e.to_string())?;
    let mut kept: Vec<String> = ds
        .candidates
        .iter()
        .filter_map(|c| c.id.strip_suffix(":old").map(str::to_owned))
        .collect();
    kept.sort();
    let mut want = expected.clone();
    want.sort();
    check(kept == want, || format!("kept {kept:?}, expected {want:?}"))?;
    let counts = ds.counts();
    check(counts.members == expected.len() && counts.nonmembers == expected.len(), || {
        format!("class counts {counts:?}")
    })?;
    check(ds.candidates.iter().all(|c| c.text.split_whitespace().count() <= 256), || {
        "a text exceeds 256 words".into()
    })?;

    // members skew long, non-members short, with overlap in the middle
    let mut rng = seeded_rng(910);
    let members = Dataset::new(
        "long",
        (0..300)
            .map(|i| {
                let n = rng.random_range(40..=200);
                Candidate::new(format!("m{i}"), doc(&mut rng, n), Label::Member, "fixture")
            })
            .collect(),
    );
    let nonmembers = Dataset::new(
        "short",
        (0..300)
            .map(|i| {
                let n = rng.random_range(10..=120);
                Candidate::new(format!("n{i}"), doc(&mut rng, n), Label::NonMember, "fixture")
            })
            .collect(),
    );
    let matched = corpus::binned_length_match(&members, &nonmembers, 10, 0.05, 0).map_err(|e| e.to_string())?;
    let s = &matched.stats;
    let before = (s.members_before.mean_words - s.nonmembers_before.mean_words).abs();
    let after = (s.members_after.mean_words - s.nonmembers_after.mean_words).abs();
    check(after < before, || format!("mean gap {before:.2} -> {after:.2}"))?;
    // recount classes per bin from the output texts themselves
    let (lo, hi) = (s.bins[0].0, s.bins[s.bins.len() - 1].1);
    let width = (hi - lo) / s.bins.len() as f64;
    let mut per_bin = vec![(0usize, 0usize); s.bins.len()];
    for c in &matched.dataset.candidates {
        let len = c.text.split_whitespace().count() as f64;
        let b = (((len - lo) / width) as usize).min(s.bins.len() - 1);
        match c.label {
            Label::Member => per_bin[b].0 += 1,
            _ => per_bin[b].1 += 1,
        }
    }
    check(per_bin.iter().all(|(m, n)| m == n), || format!("per-bin counts {per_bin:?}"))?;
    Ok(format!(
        "{} of 50 pairs kept as labeled; length gap {before:.1} -> {after:.1} words, {} per class",
        expected.len(),
        s.members_after.count
    ))
}

fn main() {
    let bin = Path::new(env!("CARGO_BIN_EXE_ngcov"));
    let mut failed = 0;
    let mut report = |n: u32, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS {n} {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {n} {name}: {why}");
            }
        }
    };
    report(1, "coverage oracle", &mut c1_coverage);
    report(2, "lcs oracle", &mut c2_lcs);
    report(3, "auroc oracle", &mut c3_auroc);
    let pools = pools();
    report(4, "memorizer end to end", &mut || c4_end_to_end(pools.as_ref()?));
    report(5, "d scaling", &mut || c5_d_scaling(pools.as_ref()?));
    report(6, "baseline direction", &mut c6_baselines);
    report(7, "token budget", &mut || c7_budget(bin));
    report(8, "cache determinism", &mut || c8_determinism(bin));
    report(9, "dataset builders", &mut c9_builders);
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all 9 acceptance criteria passed");
}
