//! AUROC and ROC curves, validation sweeps, ablations and report output.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attack::{
    aggregate, parallel_map, partition_candidates, sample_pool, score_pool, AttackConfig, AttackScore, Skipped,
};
use crate::backends::{Backend, Generation};
use crate::corpus::{Dataset, Label};
use crate::digest::json_digest;
use crate::error::{Error, Result};
use crate::similarity::Metric;

fn split_classes(scores: &[(f64, Label)]) -> Result<(usize, usize)> {
    if let Some((v, _)) = scores.iter().find(|(v, _)| v.is_nan()) {
        return Err(Error::InvalidArgument(format!("score {v} is not a number")));
    }
    let members = scores.iter().filter(|(_, l)| *l == Label::Member).count();
    let nonmembers = scores.iter().filter(|(_, l)| *l == Label::NonMember).count();
    if members == 0 || nonmembers == 0 {
        return Err(Error::InvalidArgument(format!(
            "AUROC needs both classes, got {members} members and {nonmembers} non-members"
        )));
    }
    Ok((members, nonmembers))
}

/// Probability that a random member outscores a random non-member, ties
/// counting one half. Unlabeled entries are ignored.
pub fn auroc(scores: &[(f64, Label)]) -> Result<f64> {
    let (n1, n0) = split_classes(scores)?;
    let mut v: Vec<(f64, bool)> = scores
        .iter()
        .filter(|(_, l)| *l != Label::Unknown)
        .map(|&(s, l)| (s, l == Label::Member))
        .collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    // sum of member midranks, doubled to stay in integers
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < v.len() {
        let mut j = i;
        while j < v.len() && v[j].0 == v[i].0 {
            j += 1;
        }
        let members = v[i..j].iter().filter(|(_, m)| *m).count() as u128;
        // ranks i+1..=j, midrank (i+1+j)/2
        rank_sum2 += members * (i + 1 + j) as u128;
        i = j;
    }
    let (n1, n0) = (n1 as u128, n0 as u128);
    let u2 = rank_sum2 - n1 * (n1 + 1);
    Ok(u2 as f64 / (2 * n1 * n0) as f64)
}

/// ROC points from the strictest threshold down, one per distinct score.
pub fn roc_curve(scores: &[(f64, Label)]) -> Result<Vec<(f64, f64)>> {
    let (n1, n0) = split_classes(scores)?;
    let mut v: Vec<(f64, bool)> = scores
        .iter()
        .filter(|(_, l)| *l != Label::Unknown)
        .map(|&(s, l)| (s, l == Label::Member))
        .collect();
    v.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < v.len() {
        let mut j = i;
        while j < v.len() && v[j].0 == v[i].0 {
            if v[j].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        points.push((fp as f64 / n0 as f64, tp as f64 / n1 as f64));
        i = j;
    }
    Ok(points)
}

pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

pub fn labeled(scores: &[AttackScore]) -> Vec<(f64, Label)> {
    scores.iter().map(|s| (s.aggregated, s.label)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocReport {
    pub method: String,
    pub model: String,
    pub auroc: f64,
    pub roc_points: Vec<(f64, f64)>,
    pub n_members: usize,
    pub n_nonmembers: usize,
    pub config_digest: String,
    pub dataset_digest: String,
    pub seed: Option<u64>,
    pub skipped: Vec<Skipped>,
}

impl RocReport {
    pub fn new(
        method: impl Into<String>,
        model: impl Into<String>,
        scores: &[(f64, Label)],
        config_digest: impl Into<String>,
    ) -> Result<Self> {
        let (n_members, n_nonmembers) = split_classes(scores)?;
        Ok(Self {
            method: method.into(),
            model: model.into(),
            auroc: auroc(scores)?,
            roc_points: roc_curve(scores)?,
            n_members,
            n_nonmembers,
            config_digest: config_digest.into(),
            dataset_digest: String::new(),
            seed: None,
            skipped: Vec::new(),
        })
    }
}

/// Index of the highest AUROC; ties go to the smallest digest.
pub fn best_index(entries: &[(String, f64)]) -> Result<usize> {
    if entries.is_empty() {
        return Err(Error::Empty("sweep grid is empty".into()));
    }
    let mut best = 0;
    for (i, (digest, score)) in entries.iter().enumerate().skip(1) {
        let (bd, bs) = &entries[best];
        if score > bs || (score == bs && digest < bd) {
            best = i;
        }
    }
    Ok(best)
}

/// Generations for every usable candidate of a dataset.
#[derive(Debug, Clone)]
pub struct SamplePool {
    pub candidates: Vec<PooledCandidate>,
    pub skipped: Vec<Skipped>,
}

#[derive(Debug, Clone)]
pub struct PooledCandidate {
    pub id: String,
    pub label: Label,
    pub suffix: String,
    pub generations: Vec<Generation>,
}

impl SamplePool {
    /// Draws `d` generations per candidate under `config`'s split and sampling.
    pub fn draw<B: Backend + ?Sized>(backend: &B, dataset: &Dataset, config: &AttackConfig, d: usize) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::Empty("dataset has no candidates".into()));
        }
        let (ready, skipped) = partition_candidates(dataset, config)?;
        if ready.is_empty() {
            return Err(Error::Empty("every candidate was skipped".into()));
        }
        let candidates = parallel_map(&ready, config.workers, |_, (cand, prepared)| {
            Ok(PooledCandidate {
                id: cand.id.clone(),
                label: cand.label,
                suffix: prepared.split.suffix_text.clone(),
                generations: sample_pool(backend, prepared, config, d)?,
            })
        })?;
        Ok(Self { candidates, skipped })
    }

    /// Scores the first `config.d` generations of each candidate.
    pub fn score(&self, config: &AttackConfig) -> Result<Vec<AttackScore>> {
        let digest = config.digest();
        parallel_map(&self.candidates, config.workers, |_, c| {
            if c.generations.len() < config.d {
                return Err(Error::InvalidArgument(format!(
                    "pool holds {} generations, config asks for {}",
                    c.generations.len(),
                    config.d
                )));
            }
            let per_sample = score_pool(&c.generations[..config.d], &c.suffix, &config.sim)?;
            Ok(AttackScore {
                candidate_id: c.id.clone(),
                label: c.label,
                metric: config.sim.metric,
                aggregated: aggregate(&per_sample, config.agg)?,
                per_sample,
                config_digest: digest.clone(),
            })
        })
    }
}

/// The fields of a config that decide which generations it needs.
fn sampling_key(config: &AttackConfig) -> String {
    json_digest(&(
        config.prefix_ratio,
        config.prefix_rounding,
        &config.sampling,
        &config.template,
        &config.budget,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub config: AttackConfig,
    pub digest: String,
    pub validation_auroc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub grid: Vec<SweepEntry>,
    pub best: AttackConfig,
    pub best_digest: String,
    pub test_auroc: Option<f64>,
}

/// Evaluates every config on `validation`. Configs that differ only in
/// scoring share one generation pool. The winner is optionally run on `test`.
pub fn sweep<B: Backend + ?Sized>(
    backend: &B,
    validation: &Dataset,
    grid: &[AttackConfig],
    test: Option<&Dataset>,
) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::Empty("sweep grid is empty".into()));
    }
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, c) in grid.iter().enumerate() {
        c.validate()?;
        groups.entry(sampling_key(c)).or_default().push(i);
    }
    let mut aurocs = vec![0.0; grid.len()];
    for members in groups.values() {
        let d_max = members.iter().map(|&i| grid[i].d).max().unwrap_or(1);
        let pool = SamplePool::draw(backend, validation, &grid[members[0]], d_max)?;
        for &i in members {
            aurocs[i] = auroc(&labeled(&pool.score(&grid[i])?))?;
            log::info!("sweep {}: validation AUROC {:.4}", grid[i].digest(), aurocs[i]);
        }
    }
    let entries: Vec<SweepEntry> = grid
        .iter()
        .zip(&aurocs)
        .map(|(c, &a)| SweepEntry {
            config: c.clone(),
            digest: c.digest(),
            validation_auroc: a,
        })
        .collect();
    let keyed: Vec<(String, f64)> = entries.iter().map(|e| (e.digest.clone(), e.validation_auroc)).collect();
    let best = entries[best_index(&keyed)?].clone();
    let test_auroc = match test {
        Some(ds) => {
            let run = crate::attack::run_attack(backend, ds, &best.config)?;
            Some(auroc(&labeled(&run.scores))?)
        }
        None => None,
    };
    Ok(SweepResult {
        grid: entries,
        best: best.config,
        best_digest: best.digest,
        test_auroc,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationAxis {
    NumSamples,
    PrefixRatio,
    Temperature,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "num-samples" | "d" => Some(Self::NumSamples),
            "prefix-ratio" => Some(Self::PrefixRatio),
            "temperature" => Some(Self::Temperature),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::NumSamples => "num-samples",
            Self::PrefixRatio => "prefix-ratio",
            Self::Temperature => "temperature",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: AblationAxis,
    pub value: f64,
    pub metric: Metric,
    pub auroc: f64,
    pub n_members: usize,
    pub n_nonmembers: usize,
    pub seed: Option<u64>,
}

fn with_axis(base: &AttackConfig, axis: AblationAxis, value: f64) -> Result<AttackConfig> {
    let mut c = base.clone();
    match axis {
        AblationAxis::NumSamples => {
            if value < 1.0 || value.fract() != 0.0 {
                return Err(Error::InvalidArgument(format!("sample count must be a positive integer, got {value}")));
            }
            c.d = value as usize;
        }
        AblationAxis::PrefixRatio => c.prefix_ratio = value,
        AblationAxis::Temperature => c.sampling.temperature = value,
    }
    c.validate()?;
    Ok(c)
}

/// One row per (axis value, metric). Sample-count ablations draw a single
/// pool of the largest count and score its prefixes.
pub fn ablation<B: Backend + ?Sized>(
    backend: &B,
    dataset: &Dataset,
    base: &AttackConfig,
    axis: AblationAxis,
    values: &[f64],
    metrics: &[Metric],
    seed: Option<u64>,
) -> Result<Vec<AblationRow>> {
    if values.is_empty() {
        return Err(Error::Empty("no ablation values given".into()));
    }
    let metrics = if metrics.is_empty() { vec![base.sim.metric] } else { metrics.to_vec() };
    let configs: Vec<AttackConfig> = values.iter().map(|&v| with_axis(base, axis, v)).collect::<Result<_>>()?;
    let shared = match axis {
        AblationAxis::NumSamples => {
            let d_max = configs.iter().map(|c| c.d).max().unwrap_or(1);
            Some(SamplePool::draw(backend, dataset, base, d_max)?)
        }
        _ => None,
    };
    let mut rows = Vec::new();
    for (config, &value) in configs.iter().zip(values) {
        let own;
        let pool = match &shared {
            Some(p) => p,
            None => {
                own = SamplePool::draw(backend, dataset, config, config.d)?;
                &own
            }
        };
        for &metric in &metrics {
            let mut c = config.clone();
            c.sim.metric = metric;
            let scores = labeled(&pool.score(&c)?);
            let (n_members, n_nonmembers) = split_classes(&scores)?;
            rows.push(AblationRow {
                axis,
                value,
                metric,
                auroc: auroc(&scores)?,
                n_members,
                n_nonmembers,
                seed,
            });
        }
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["axis", "value", "metric", "auroc", "n_members", "n_nonmembers", "seed"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.axis.as_str().to_string(),
            r.value.to_string(),
            r.metric.name().to_string(),
            r.auroc.to_string(),
            r.n_members.to_string(),
            r.n_nonmembers.to_string(),
            r.seed.map(|s| s.to_string()).unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    finish_csv(w)
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidArgument(format!("csv: {e}"))
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv writer emits the UTF-8 it was given"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Some(Self::Json),
            "csv" => Some(Self::Csv),
            "md" | "markdown" => Some(Self::Markdown),
            _ => None,
        }
    }
}

const CSV_HEADER: [&str; 9] = [
    "method",
    "model",
    "auroc",
    "n_members",
    "n_nonmembers",
    "config_digest",
    "dataset_digest",
    "seed",
    "skipped",
];

/// Serializes reports deterministically. Markdown is a methods-by-models
/// AUROC table rounded to two decimals; the other formats keep full precision.
pub fn emit_report(reports: &[RocReport], format: ReportFormat) -> Result<String> {
    if reports.is_empty() {
        log::warn!("no results to report");
    }
    match format {
        ReportFormat::Json => Ok(serde_json::to_string_pretty(reports)? + "\n"),
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(CSV_HEADER).map_err(csv_err)?;
            for r in reports {
                let skipped: Vec<&str> = r.skipped.iter().map(|s| s.candidate_id.as_str()).collect();
                w.write_record([
                    r.method.clone(),
                    r.model.clone(),
                    r.auroc.to_string(),
                    r.n_members.to_string(),
                    r.n_nonmembers.to_string(),
                    r.config_digest.clone(),
                    r.dataset_digest.clone(),
                    r.seed.map(|s| s.to_string()).unwrap_or_default(),
                    skipped.join(";"),
                ])
                .map_err(csv_err)?;
            }
            finish_csv(w)
        }
        ReportFormat::Markdown => {
            let mut models: Vec<&str> = Vec::new();
            let mut methods: Vec<&str> = Vec::new();
            let mut cell: BTreeMap<(&str, &str), f64> = BTreeMap::new();
            for r in reports {
                if !models.contains(&r.model.as_str()) {
                    models.push(&r.model);
                }
                if !methods.contains(&r.method.as_str()) {
                    methods.push(&r.method);
                }
                cell.insert((r.method.as_str(), r.model.as_str()), r.auroc);
            }
            let mut out = String::from("| Method |");
            for m in &models {
                out += &format!(" {m} |");
            }
            out += "\n|---|";
            out += &"---|".repeat(models.len());
            out += "\n";
            for method in &methods {
                out += &format!("| {method} |");
                for model in &models {
                    match cell.get(&(*method, *model)) {
                        Some(a) => out += &format!(" {a:.2} |"),
                        None => out += " - |",
                    }
                }
                out += "\n";
            }
            Ok(out)
        }
    }
}
