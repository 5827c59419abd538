//! Run configuration, read from a sectioned TOML file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ngcov_core::attack::{Aggregation, AttackConfig};
use ngcov_core::backends::{MemorizerConfig, RemoteConfig};
use ngcov_core::baselines::{DecopConfig, LossMode};
use ngcov_core::digest::json_digest;
use ngcov_core::eval::ReportFormat;
use ngcov_core::similarity::Metric;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub backend: BackendConfig,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub baselines: BaselineSection,
    #[serde(default)]
    pub cache: CacheSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub seeds: SeedSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSection {
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendConfig {
    /// Synthetic target that has memorized `members`, or the labeled members
    /// of the run's dataset when no path is given.
    Memorizer {
        #[serde(default)]
        members: Option<PathBuf>,
        #[serde(default)]
        settings: MemorizerConfig,
    },
    Remote(RemoteConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSection {
    pub metrics: Vec<Metric>,
    /// Coverage n-gram sizes to try; other metrics ignore this axis.
    pub min_ngrams: Vec<usize>,
    pub aggs: Vec<Aggregation>,
    pub validation_fraction: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            metrics: Metric::ALL.to_vec(),
            min_ngrams: vec![3, 4, 5],
            aggs: vec![Aggregation::Max, Aggregation::Mean],
            validation_fraction: 0.05,
        }
    }
}

impl SweepSection {
    /// Every combination applied on top of `base`.
    pub fn grid(&self, base: &AttackConfig) -> Vec<AttackConfig> {
        let mut out = Vec::new();
        for &metric in &self.metrics {
            let ls = if metric == Metric::Coverage { self.min_ngrams.clone() } else { vec![base.sim.min_ngram] };
            for l in ls {
                for &agg in &self.aggs {
                    let mut c = base.clone();
                    c.sim.metric = metric;
                    c.sim.min_ngram = l;
                    c.agg = agg;
                    out.push(c);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineSection {
    /// Target-model logprob records; collected from the backend when absent.
    pub records: Option<PathBuf>,
    pub reference_records: Option<PathBuf>,
    pub k_grid: String,
    pub loss_mode: LossMode,
    pub decop: DecopConfig,
    pub paraphraser: Option<BackendConfig>,
}

impl Default for BaselineSection {
    fn default() -> Self {
        Self {
            records: None,
            reference_records: None,
            k_grid: "10:60:10".into(),
            loss_mode: LossMode::Mean,
            decop: DecopConfig::default(),
            paraphraser: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct CacheSection {
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub formats: Vec<ReportFormat>,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            formats: vec![ReportFormat::Json, ReportFormat::Csv, ReportFormat::Markdown],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SeedSection {
    /// Drives validation splits and dataset sampling.
    pub run: u64,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    /// Reads `path`; relative paths inside are taken relative to its directory.
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut cfg = Self::parse(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset.path);
        fix(&mut self.output.dir);
        for p in [&mut self.cache.dir, &mut self.baselines.records, &mut self.baselines.reference_records]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        for backend in std::iter::once(&mut self.backend).chain(self.baselines.paraphraser.as_mut()) {
            if let BackendConfig::Memorizer { members: Some(p), .. } = backend {
                fix(p);
            }
        }
    }

    pub fn digest(&self) -> String {
        json_digest(self)
    }
}
