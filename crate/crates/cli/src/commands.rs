use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;

use ngcov_core::attack::{self, decide, parallel_map, Prediction};
use ngcov_core::backends::{
    cache_file_name, Backend, CacheEntry, CachedBackend, Capability, MemorizerBackend, RemoteBackend, WireServer,
};
use ngcov_core::baselines::{self, BaselineMethod, BaselineScore, LogprobRecord};
use ngcov_core::corpus::{self, Dataset, Label, LengthStats, WikiHardParams};
use ngcov_core::digest::json_digest;
use ngcov_core::eval::{self, AblationAxis, ReportFormat, RocReport};
use ngcov_core::similarity::Metric;

use crate::config::{BackendConfig, RunConfig};
use crate::{
    AblationArgs, AttackArgs, BaselineArgs, CacheArgs, CacheCommand, CliError, CliResult, Command, DatasetCommand,
    ServeArgs, SweepArgs,
};

pub fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Attack(a) => attack(a),
        Command::Baseline(a) => baseline(a),
        Command::Dataset(d) => dataset(d),
        Command::Ablation(a) => ablation(a),
        Command::Sweep(a) => sweep(a),
        Command::Cache(c) => cache(c),
        Command::Serve(a) => serve(a),
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn eval_err(e: impl std::fmt::Display) -> CliError {
    CliError::Eval(e.to_string())
}

fn load_config(path: &Path) -> CliResult<RunConfig> {
    RunConfig::load(path).map_err(CliError::Config)
}

fn load_dataset(path: &Path) -> CliResult<Dataset> {
    corpus::load_jsonl(path).map_err(config_err)
}

fn parse_metric(s: &str) -> CliResult<Metric> {
    Metric::parse(s).ok_or_else(|| CliError::Config(format!("unknown metric {s:?}")))
}

fn has_both_classes(ds: &Dataset) -> bool {
    let c = ds.counts();
    c.members > 0 && c.nonmembers > 0
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Config(format!("{}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut text = String::new();
    for r in rows {
        text += &serde_json::to_string(r).map_err(config_err)?;
        text.push('\n');
    }
    write_file(path, &text)
}

fn write_reports(dir: &Path, stem: &str, reports: &[RocReport], formats: &[ReportFormat]) -> CliResult<()> {
    for &f in formats {
        let ext = match f {
            ReportFormat::Json => "json",
            ReportFormat::Csv => "csv",
            ReportFormat::Markdown => "md",
        };
        let doc = eval::emit_report(reports, f).map_err(eval_err)?;
        write_file(&dir.join(format!("{stem}.{ext}")), &doc)?;
    }
    Ok(())
}

/// The backend a command talks to, plus the cache layer if one is configured.
pub struct BackendHandle {
    pub backend: Arc<dyn Backend>,
    cache: Option<Arc<CachedBackend<Arc<dyn Backend>>>>,
}

impl BackendHandle {
    fn log_stats(&self) {
        if let Some(c) = &self.cache {
            let s = c.stats();
            log::info!(
                "cache: {} entries, {} hits, {} misses, {} backend calls",
                s.entries,
                s.hits,
                s.misses,
                s.delegated_calls
            );
        }
    }
}

fn raw_backend(cfg: &BackendConfig, dataset: &Dataset) -> CliResult<Arc<dyn Backend>> {
    Ok(match cfg {
        BackendConfig::Memorizer { members, settings } => {
            let corpus = match members {
                Some(p) => load_dataset(p)?,
                None => dataset.with_label(Label::Member),
            };
            Arc::new(MemorizerBackend::new(&corpus, *settings).map_err(config_err)?)
        }
        BackendConfig::Remote(r) => Arc::new(RemoteBackend::new(r.clone())?),
    })
}

pub fn build_backend(cfg: &BackendConfig, dataset: &Dataset, cache_dir: Option<&Path>) -> CliResult<BackendHandle> {
    let inner = raw_backend(cfg, dataset)?;
    match cache_dir {
        Some(dir) => {
            let cached = Arc::new(CachedBackend::open(inner, dir).map_err(config_err)?);
            Ok(BackendHandle {
                backend: cached.clone(),
                cache: Some(cached),
            })
        }
        None => Ok(BackendHandle {
            backend: inner,
            cache: None,
        }),
    }
}

#[derive(Serialize)]
struct PredictionRow<'a> {
    candidate_id: &'a str,
    score: f64,
    prediction: Prediction,
}

fn attack(args: AttackArgs) -> CliResult<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(m) = &args.metric {
        cfg.attack.sim.metric = parse_metric(m)?;
    }
    if let Some(d) = args.d {
        cfg.attack.d = d;
    }
    if let Some(w) = args.workers {
        cfg.attack.workers = w;
    }
    if args.epsilon.is_some() {
        cfg.attack.epsilon = args.epsilon;
    }
    cfg.attack.validate().map_err(config_err)?;
    let dataset = load_dataset(&cfg.dataset.path)?;

    if args.dry_run {
        let plan = attack::plan(&dataset, &cfg.attack).map_err(config_err)?;
        println!("{}", serde_json::to_string_pretty(&plan).map_err(config_err)?);
        return Ok(());
    }

    let handle = build_backend(&cfg.backend, &dataset, cfg.cache.dir.as_deref())?;
    let run = attack::run_attack(handle.backend.as_ref(), &dataset, &cfg.attack)?;
    handle.log_stats();

    let out = args.out.unwrap_or_else(|| cfg.output.dir.clone());
    ensure_dir(&out)?;
    write_jsonl(&out.join("scores.jsonl"), &run.scores)?;
    if let Some(eps) = cfg.attack.epsilon {
        let rows: Vec<PredictionRow> = run
            .scores
            .iter()
            .map(|s| PredictionRow {
                candidate_id: &s.candidate_id,
                score: s.aggregated,
                prediction: decide(s, eps),
            })
            .collect();
        write_jsonl(&out.join("predictions.jsonl"), &rows)?;
    }
    if !has_both_classes(&dataset) {
        log::warn!("dataset lacks one of the two classes; skipping AUROC");
        return Ok(());
    }
    let mut report = RocReport::new(
        cfg.attack.sim.metric.name(),
        &handle.backend.descriptor().model_id,
        &eval::labeled(&run.scores),
        cfg.attack.digest(),
    )
    .map_err(eval_err)?;
    report.dataset_digest = dataset.digest();
    report.seed = Some(cfg.seeds.run);
    report.skipped = run.skipped;
    write_reports(&out, "report", std::slice::from_ref(&report), &cfg.output.formats)?;
    println!("{}\t{}\t{:.6}", report.method, report.model, report.auroc);
    Ok(())
}

fn baseline(args: BaselineArgs) -> CliResult<()> {
    let method = BaselineMethod::parse(&args.method)
        .ok_or_else(|| CliError::Config(format!("unknown baseline method {:?}", args.method)))?;
    let cfg = load_config(&args.config)?;
    let dataset = load_dataset(&cfg.dataset.path)?;
    let out = args.out.clone().unwrap_or_else(|| cfg.output.dir.clone());

    let (model, runs): (String, Vec<(String, String, Vec<BaselineScore>)>) = if method == BaselineMethod::DeCop {
        decop_runs(&cfg, &dataset)?
    } else {
        loss_family_runs(method, &args, &cfg, &dataset)?
    };

    ensure_dir(&out)?;
    let mut reports = Vec::new();
    for (name, digest, scores) in &runs {
        write_jsonl(&out.join(format!("baseline-{name}.jsonl")), scores)?;
        if has_both_classes(&dataset) {
            let by_id: BTreeMap<&str, Label> = dataset.candidates.iter().map(|c| (c.id.as_str(), c.label)).collect();
            let labeled: Vec<(f64, Label)> = scores.iter().map(|s| (s.value, by_id[s.candidate_id.as_str()])).collect();
            let mut r = RocReport::new(name.as_str(), model.as_str(), &labeled, digest.as_str()).map_err(eval_err)?;
            r.dataset_digest = dataset.digest();
            r.seed = Some(cfg.seeds.run);
            reports.push(r);
        }
    }
    if reports.is_empty() {
        log::warn!("dataset lacks one of the two classes; skipping AUROC");
        return Ok(());
    }
    write_reports(&out, &format!("baseline-{}-report", method.as_str()), &reports, &cfg.output.formats)?;
    let keyed: Vec<(String, f64)> = reports.iter().map(|r| (r.config_digest.clone(), r.auroc)).collect();
    let best = eval::best_index(&keyed).map_err(eval_err)?;
    for (i, r) in reports.iter().enumerate() {
        let flag = if reports.len() > 1 && i == best { "\tbest" } else { "" };
        println!("{}\t{}\t{:.6}{flag}", r.method, r.model, r.auroc);
    }
    Ok(())
}

type BaselineRuns = (String, Vec<(String, String, Vec<BaselineScore>)>);

fn loss_family_runs(method: BaselineMethod, args: &BaselineArgs, cfg: &RunConfig, dataset: &Dataset) -> CliResult<BaselineRuns> {
    let name = method.as_str();
    let reference = match method {
        BaselineMethod::RefLoss => {
            let path = args.reference.clone().or_else(|| cfg.baselines.reference_records.clone()).ok_or_else(|| {
                CliError::Backend("method rloss needs reference-model records (--reference or baselines.reference_records)".into())
            })?;
            Some(baselines::load_records_jsonl(&path).map_err(config_err)?)
        }
        _ => None,
    };
    let records_path = args.records.clone().or_else(|| cfg.baselines.records.clone());
    let (model, records): (String, Vec<LogprobRecord>) = match records_path {
        Some(p) => {
            let rs = baselines::load_records_jsonl(&p).map_err(config_err)?;
            (rs.first().map(|r| r.model_id.clone()).unwrap_or_default(), rs)
        }
        None => {
            let handle = build_backend(&cfg.backend, dataset, None)?;
            let desc = handle.backend.descriptor();
            if !desc.has(Capability::Logprobs) {
                return Err(CliError::Backend(format!(
                    "method {name} needs token logprobs, which backend {} does not provide",
                    desc.model_id
                )));
            }
            let rs = baselines::collect_records(handle.backend.as_ref(), dataset, cfg.attack.workers)?;
            (desc.model_id.clone(), rs)
        }
    };
    let ks = if method == BaselineMethod::MinK {
        let spec = args.k_grid.clone().unwrap_or_else(|| cfg.baselines.k_grid.clone());
        baselines::parse_k_grid(&spec).map_err(config_err)?
    } else {
        vec![100.0]
    };
    let mut runs = Vec::new();
    for k in ks {
        let scores = baselines::score_records(method, dataset, &records, reference.as_deref(), k, cfg.baselines.loss_mode)?;
        let label = if method == BaselineMethod::MinK { format!("mink-{k}") } else { name.to_string() };
        let digest = json_digest(&(method, k, cfg.baselines.loss_mode));
        runs.push((label, digest, scores));
    }
    Ok((model, runs))
}

fn decop_runs(cfg: &RunConfig, dataset: &Dataset) -> CliResult<BaselineRuns> {
    let para_cfg = cfg
        .baselines
        .paraphraser
        .as_ref()
        .ok_or_else(|| CliError::Backend("method decop needs a paraphraser backend ([baselines.paraphraser])".into()))?;
    let target = build_backend(&cfg.backend, dataset, cfg.cache.dir.as_deref())?;
    let paraphraser = build_backend(para_cfg, dataset, cfg.cache.dir.as_deref())?;
    let decop = &cfg.baselines.decop;
    let scores = parallel_map(&dataset.candidates, cfg.attack.workers, |_, c| {
        Ok(BaselineScore {
            candidate_id: c.id.clone(),
            method: BaselineMethod::DeCop,
            value: baselines::decop_score(target.backend.as_ref(), paraphraser.backend.as_ref(), c, decop)?,
        })
    })?;
    let model = target.backend.descriptor().model_id.clone();
    Ok((model, vec![("decop".into(), json_digest(decop), scores)]))
}

#[derive(Serialize)]
struct WikiHardSummary {
    pairs: usize,
    survivors: usize,
    rejected: BTreeMap<&'static str, usize>,
    members: LengthStats,
    nonmembers: LengthStats,
}

fn dataset(cmd: DatasetCommand) -> CliResult<()> {
    match cmd {
        DatasetCommand::WikiHard(a) => {
            let pairs = corpus::load_pairs_jsonl(&a.pairs).map_err(config_err)?;
            let params = WikiHardParams {
                min_words: a.min_words,
                min_edit: a.min_edit,
                max_len_diff: a.max_len_diff,
                truncate_words: a.truncate_words,
                sample_n: a.sample_n,
                seed: a.seed,
            };
            let mut rejected = BTreeMap::new();
            for p in &pairs {
                if let Some(reason) = corpus::wiki_hard_rejection(p, &params) {
                    *rejected.entry(reason).or_insert(0) += 1;
                }
            }
            let ds = corpus::build_wiki_hard(&pairs, &params).map_err(config_err)?;
            corpus::save_jsonl(&ds, &a.out).map_err(config_err)?;
            let summary = WikiHardSummary {
                pairs: pairs.len(),
                survivors: pairs.len() - rejected.values().sum::<usize>(),
                rejected,
                members: LengthStats::of(ds.candidates.iter().filter(|c| c.label == Label::Member)),
                nonmembers: LengthStats::of(ds.candidates.iter().filter(|c| c.label == Label::NonMember)),
            };
            println!("{}", serde_json::to_string_pretty(&summary).map_err(config_err)?);
        }
        DatasetCommand::LengthMatch(a) => {
            let (members, nonmembers) = match (&a.input, &a.members, &a.nonmembers) {
                (Some(p), None, None) => {
                    let ds = load_dataset(p)?;
                    (ds.with_label(Label::Member), ds.with_label(Label::NonMember))
                }
                (None, Some(m), Some(n)) => (relabel(load_dataset(m)?, Label::Member), relabel(load_dataset(n)?, Label::NonMember)),
                _ => return Err(CliError::Config("give either --input or both --members and --nonmembers".into())),
            };
            let matched = corpus::binned_length_match(&members, &nonmembers, a.bins, a.trim, a.seed).map_err(config_err)?;
            corpus::save_jsonl(&matched.dataset, &a.out).map_err(config_err)?;
            println!("{}", serde_json::to_string_pretty(&matched.stats).map_err(config_err)?);
        }
        DatasetCommand::Split(a) => {
            let ds = load_dataset(&a.input)?;
            let (val, test) = corpus::split_validation(&ds, a.fraction, a.seed).map_err(config_err)?;
            corpus::save_jsonl(&val, &a.validation_out).map_err(config_err)?;
            corpus::save_jsonl(&test, &a.test_out).map_err(config_err)?;
            println!("validation\t{}\ntest\t{}", val.len(), test.len());
        }
        DatasetCommand::Synth(a) => {
            let ds = corpus::synthetic_dataset(a.members, a.nonmembers, a.words, a.vocab, a.seed);
            corpus::save_jsonl(&ds, &a.out).map_err(config_err)?;
            println!("{}\t{}", a.out.display(), ds.len());
        }
    }
    Ok(())
}

fn relabel(mut ds: Dataset, label: Label) -> Dataset {
    for c in &mut ds.candidates {
        c.label = label;
    }
    ds
}

fn ablation(args: AblationArgs) -> CliResult<()> {
    let axis = AblationAxis::parse(&args.axis).ok_or_else(|| {
        CliError::Config(format!(
            "unknown ablation axis {:?}; expected num-samples, prefix-ratio or temperature",
            args.axis
        ))
    })?;
    let metrics: Vec<Metric> = args.metrics.iter().map(|m| parse_metric(m)).collect::<CliResult<_>>()?;
    let cfg = load_config(&args.config)?;
    cfg.attack.validate().map_err(config_err)?;
    let dataset = load_dataset(&cfg.dataset.path)?;
    if !has_both_classes(&dataset) {
        return Err(CliError::Eval("ablation needs labeled members and non-members".into()));
    }
    let handle = build_backend(&cfg.backend, &dataset, cfg.cache.dir.as_deref())?;
    let rows = eval::ablation(
        handle.backend.as_ref(),
        &dataset,
        &cfg.attack,
        axis,
        &args.values,
        &metrics,
        Some(cfg.seeds.run),
    )?;
    handle.log_stats();
    let csv = eval::ablation_csv(&rows).map_err(eval_err)?;
    let path = match args.out {
        Some(p) => p,
        None => {
            ensure_dir(&cfg.output.dir)?;
            cfg.output.dir.join(format!("ablation-{}.csv", axis.as_str()))
        }
    };
    write_file(&path, &csv)?;
    print!("{csv}");
    Ok(())
}

fn sweep(args: SweepArgs) -> CliResult<()> {
    let cfg = load_config(&args.config)?;
    let dataset = load_dataset(&cfg.dataset.path)?;
    let (val, test) =
        corpus::split_validation(&dataset, cfg.sweep.validation_fraction, cfg.seeds.run).map_err(config_err)?;
    if !has_both_classes(&val) {
        return Err(CliError::Eval("validation split lacks one of the two classes".into()));
    }
    let grid = cfg.sweep.grid(&cfg.attack);
    let handle = build_backend(&cfg.backend, &dataset, cfg.cache.dir.as_deref())?;
    let result = eval::sweep(handle.backend.as_ref(), &val, &grid, args.test.then_some(&test))?;
    handle.log_stats();
    let out = args.out.unwrap_or_else(|| cfg.output.dir.clone());
    ensure_dir(&out)?;
    write_file(
        &out.join("sweep.json"),
        &(serde_json::to_string_pretty(&result).map_err(config_err)? + "\n"),
    )?;
    for e in &result.grid {
        let mark = if e.digest == result.best_digest { "\tbest" } else { "" };
        println!(
            "{}\tL={}\t{:?}\t{:.6}{mark}",
            e.config.sim.metric, e.config.sim.min_ngram, e.config.agg, e.validation_auroc
        );
    }
    if let Some(a) = result.test_auroc {
        println!("test\t{a:.6}");
    }
    Ok(())
}

fn cache_dir(args: &CacheArgs) -> CliResult<PathBuf> {
    if let Some(d) = &args.dir {
        return Ok(d.clone());
    }
    let cfg_path = args.config.as_ref().ok_or_else(|| CliError::Config("give --dir or --config".into()))?;
    load_config(cfg_path)?
        .cache
        .dir
        .ok_or_else(|| CliError::Config("the config has no [cache] dir".into()))
}

fn cache_files(dir: &Path, model: Option<&str>) -> CliResult<Vec<PathBuf>> {
    if let Some(m) = model {
        let p = dir.join(cache_file_name(m));
        return Ok(if p.exists() { vec![p] } else { vec![] });
    }
    if !dir.exists() {
        return Ok(vec![]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::Config(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    Ok(files)
}

fn cache(cmd: CacheCommand) -> CliResult<()> {
    match cmd {
        CacheCommand::Inspect(a) => {
            let dir = cache_dir(&a)?;
            println!("file\tentries\tcorrupt\tbytes");
            for f in cache_files(&dir, a.model.as_deref())? {
                let text = std::fs::read_to_string(&f).map_err(config_err)?;
                let (mut ok, mut bad) = (std::collections::HashSet::new(), 0usize);
                for line in text.lines().filter(|l| !l.trim().is_empty()) {
                    match serde_json::from_str::<CacheEntry>(line) {
                        Ok(e) => {
                            ok.insert(e.key);
                        }
                        Err(_) => bad += 1,
                    }
                }
                println!("{}\t{}\t{bad}\t{}", f.display(), ok.len(), text.len());
            }
        }
        CacheCommand::Clear(a) => {
            let dir = cache_dir(&a)?;
            let files = cache_files(&dir, a.model.as_deref())?;
            for f in &files {
                std::fs::remove_file(f).map_err(|e| CliError::Config(format!("{}: {e}", f.display())))?;
            }
            println!("removed {} cache file(s)", files.len());
        }
    }
    Ok(())
}

fn serve(args: ServeArgs) -> CliResult<()> {
    let cfg = load_config(&args.config)?;
    let dataset = load_dataset(&cfg.dataset.path)?;
    let handle = build_backend(&cfg.backend, &dataset, None)?;
    let server = WireServer::start(handle.backend.clone(), &args.bind).map_err(|e| CliError::Backend(e.to_string()))?;
    println!("{}", server.endpoint());
    server.join();
    Ok(())
}
