use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::corpus::{branched_suite, default_suite, desk_vocabulary, Corpus};
use crate::decoders::{
    decode_ablation, decode_pvf, decode_static, decode_threshold, AblationMode, AblationParams, DecodeError, Strategy,
};
use crate::domain::{Canvas, ConfigFile, DecodeConfig, DomainError, Vocabulary};
use crate::metrics::{aggregate, speedup_ratio, to_csv, CsvRow, RunReport, Summary};
use crate::oracle::{Conditioning, Oracle};
use crate::vocabplan::PlanningSet;

/// One decoder configuration in a matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub label: String,
    pub strategy: Strategy,
    pub cfg: DecodeConfig<f64>,
    pub ablation: Option<AblationParams<f64>>,
}

impl RunSpec {
    /// PVF keeps `cfg` as given. The baselines run strictly block by block,
    /// since cross-block lookahead belongs to PVF.
    pub fn new(strategy: Strategy, cfg: &DecodeConfig<f64>) -> Self {
        let cfg = match strategy {
            Strategy::Pvf => cfg.clone(),
            _ => cfg.strict_blocks(),
        };
        Self {
            label: strategy.as_str().to_string(),
            strategy,
            cfg,
            ablation: None,
        }
    }

    pub fn ablation(cfg: &DecodeConfig<f64>, params: AblationParams<f64>) -> Self {
        let mode = match params.mode {
            AblationMode::Random => "random",
            AblationMode::Planning => "planning",
        };
        Self {
            label: format!("ablation-{mode}"),
            strategy: Strategy::Ablation,
            cfg: cfg.strict_blocks(),
            ablation: Some(params),
        }
    }

    pub fn labeled(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }
}

/// Runs one decoder over a corpus through `oracle`.
pub fn run_with_oracle<O: Oracle<f64> + ?Sized>(
    corpus: &Corpus,
    oracle: &O,
    spec: &RunSpec,
    planning: &PlanningSet,
    vocab: &Vocabulary,
) -> Result<RunReport<f64>, DecodeError> {
    let mut cfg = spec.cfg.clone();
    cfg.gen_length = corpus.gen_length();
    let canvas = Canvas::new(corpus.prompt.clone(), cfg.gen_length, vocab.mask_id())?;
    let (_, report) = match spec.strategy {
        Strategy::Static => decode_static(canvas, oracle, vocab, &cfg)?,
        Strategy::Threshold => decode_threshold(canvas, oracle, vocab, &cfg)?,
        Strategy::Pvf => decode_pvf(canvas, oracle, planning, vocab, &cfg)?,
        Strategy::Ablation => {
            let params = spec
                .ablation
                .as_ref()
                .ok_or_else(|| DomainError::InvalidConfig("ablation run without ablation parameters".into()))?;
            decode_ablation(canvas, oracle, planning, vocab, &cfg, params)?
        }
    };
    Ok(report)
}

/// Runs one decoder over a corpus with its own enumeration oracle.
/// Nearest-match backoff keeps low-confidence commits from ending a run.
pub fn run_one(
    corpus: &Corpus,
    spec: &RunSpec,
    planning: &PlanningSet,
    vocab: &Vocabulary,
) -> Result<RunReport<f64>, DecodeError> {
    let oracle = corpus.oracle_with(Conditioning::NearestBackoff);
    run_with_oracle(corpus, &oracle, spec, planning, vocab)
}

/// Aggregated result of one [`RunSpec`] over a suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub label: String,
    pub strategy: Strategy,
    pub tau_high: f64,
    pub max_candidates: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ablation_mode: Option<AblationMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub band: Option<(f64, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub summary: Summary,
    /// Mean threshold NFE at the same `tau_high` over this row's mean NFE.
    pub speedup_vs_threshold: Option<f64>,
    pub mean_extra_confidence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatrixResult {
    pub rows: Vec<MatrixRow>,
    pub runs: Vec<CsvRow>,
    /// Per-spec reports in corpus order, aligned with `rows`.
    pub reports: Vec<Vec<RunReport<f64>>>,
}

#[derive(Debug, thiserror::Error)]
#[error("run {run_id} failed: {source}")]
pub struct MatrixError {
    pub run_id: String,
    /// Everything completed before the failure.
    pub partial: Box<MatrixResult>,
    #[source]
    pub source: DecodeError,
}

/// Pareto point: one configuration's mean NFE and accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub tau_high: f64,
    pub nfe: f64,
    pub accuracy: f64,
}

impl MatrixResult {
    pub fn csv(&self) -> String {
        to_csv(&self.runs)
    }

    pub fn row(&self, label: &str) -> Option<&MatrixRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Accuracy-versus-NFE points per strategy label stem (the label up to
    /// the first `@`), ordered by `tau_high`.
    pub fn pareto(&self) -> BTreeMap<String, Vec<ParetoPoint>> {
        let mut out: BTreeMap<String, Vec<ParetoPoint>> = BTreeMap::new();
        for r in &self.rows {
            let stem = r.label.split('@').next().unwrap_or(&r.label).to_string();
            out.entry(stem).or_default().push(ParetoPoint {
                tau_high: r.tau_high,
                nfe: r.summary.mean_nfe,
                accuracy: r.summary.accuracy.unwrap_or(f64::NAN),
            });
        }
        for pts in out.values_mut() {
            pts.sort_by(|a, b| a.tau_high.total_cmp(&b.tau_high));
        }
        out
    }

    /// Writes `runs.csv`, `summary.json` and `pareto.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> std::io::Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("runs.csv"), self.csv())?;
        std::fs::write(
            dir.join("summary.json"),
            serde_json::to_string_pretty(&self.rows).expect("rows serialize") + "\n",
        )?;
        std::fs::write(
            dir.join("pareto.json"),
            serde_json::to_string_pretty(&self.pareto()).expect("points serialize") + "\n",
        )
    }
}

/// Runs every spec over every corpus, in order.
pub fn run_matrix(
    corpora: &[Corpus],
    specs: &[RunSpec],
    planning: &PlanningSet,
    vocab: &Vocabulary,
) -> Result<MatrixResult, MatrixError> {
    let mut result = MatrixResult::default();
    let targets: Vec<Vec<_>> = corpora.iter().map(|c| c.target.clone()).collect();
    for spec in specs {
        let mut reports = Vec::with_capacity(corpora.len());
        for corpus in corpora {
            let run_id = format!("{}/{}", corpus.name, spec.label);
            match run_one(corpus, spec, planning, vocab) {
                Ok(r) => {
                    result
                        .runs
                        .push(CsvRow::from_report(&run_id, &spec.label, &r, Some(&corpus.target)));
                    reports.push(r);
                }
                Err(source) => {
                    return Err(MatrixError {
                        run_id,
                        partial: Box::new(result),
                        source,
                    })
                }
            }
        }
        let summary = aggregate(&reports, Some(&targets)).expect("non-empty suite with aligned targets");
        let extra = spec.ablation.as_ref().map(|_| {
            let (n, sum) = reports
                .iter()
                .filter_map(|r| r.ablation.as_ref())
                .fold((0usize, 0.0), |(n, s), a| {
                    (
                        n + a.extra_commits,
                        s + a.mean_extra_confidence * a.extra_commits as f64,
                    )
                });
            if n == 0 {
                0.0
            } else {
                sum / n as f64
            }
        });
        result.rows.push(MatrixRow {
            label: spec.label.clone(),
            strategy: spec.strategy,
            tau_high: spec.cfg.tau_high,
            max_candidates: spec.cfg.max_candidates,
            ablation_mode: spec.ablation.as_ref().map(|a| a.mode),
            band: spec.ablation.as_ref().map(|a| (a.band_lo, a.band_hi)),
            seed: spec.ablation.as_ref().map(|a| a.seed),
            summary,
            speedup_vs_threshold: None,
            mean_extra_confidence: extra,
        });
        result.reports.push(reports);
    }
    if corpora.is_empty() {
        return Ok(result);
    }
    let thresholds: Vec<(f64, f64)> = result
        .rows
        .iter()
        .filter(|r| r.strategy == Strategy::Threshold)
        .map(|r| (r.tau_high, r.summary.mean_nfe))
        .collect();
    for row in &mut result.rows {
        row.speedup_vs_threshold = thresholds
            .iter()
            .find(|(t, _)| *t == row.tau_high)
            .and_then(|&(_, nfe)| speedup_ratio(nfe, row.summary.mean_nfe).ok());
    }
    Ok(result)
}

/// Which corpora a sweep runs over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SuiteSpec {
    Default { count: usize, seed: u64 },
    Branched { count: usize, seed: u64 },
    Files { paths: Vec<PathBuf> },
}

impl SuiteSpec {
    pub fn build(&self) -> Result<Vec<Corpus>, super::SpecError> {
        match self {
            SuiteSpec::Default { count, seed } => Ok(default_suite(*count, *seed)),
            SuiteSpec::Branched { count, seed } => Ok(branched_suite(*count, *seed)),
            SuiteSpec::Files { paths } => paths.iter().map(Corpus::load).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationGrid {
    pub modes: Vec<AblationMode>,
    pub band_lo: Vec<f64>,
    pub band_hi: f64,
    pub seeds: Vec<u64>,
}

/// Sweep description read by `engine sweep --grid`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub suite: SuiteSpec,
    pub strategies: Vec<Strategy>,
    #[serde(default)]
    pub base: ConfigFile,
    #[serde(default)]
    pub tau_high: Vec<f64>,
    #[serde(default)]
    pub max_candidates: Vec<usize>,
    #[serde(default)]
    pub ablation: Option<AblationGrid>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

/// Sets `tau_high`; when the planning band would reach past it, the band
/// becomes `[0.4, 0.6)`.
pub fn config_at_tau(base: &ConfigFile, tau_high: f64) -> Result<DecodeConfig<f64>, DomainError> {
    let mut f = base.clone();
    f.tau_high = tau_high;
    if f.tau_plan_hi > tau_high {
        f.tau_plan_lo = 0.4;
        f.tau_plan_hi = 0.6;
    }
    let cfg = DecodeConfig::from_file_values(&f);
    cfg.validate()?;
    Ok(cfg)
}

impl SweepGrid {
    pub fn parse(text: &str) -> Result<Self, DomainError> {
        serde_json::from_str(text).map_err(|e| DomainError::InvalidConfig(format!("grid: {e}")))
    }

    /// Cross product of strategies, `tau_high` values, candidate counts and
    /// (for the ablation) modes, band floors and seeds.
    pub fn expand(&self) -> Result<Vec<RunSpec>, DomainError> {
        if self.strategies.is_empty() {
            return Err(DomainError::InvalidConfig("grid lists no strategies".into()));
        }
        let taus = if self.tau_high.is_empty() {
            vec![self.base.tau_high]
        } else {
            self.tau_high.clone()
        };
        let ks = if self.max_candidates.is_empty() {
            vec![self.base.max_candidates]
        } else {
            self.max_candidates.clone()
        };
        let mut specs = Vec::new();
        for &strategy in &self.strategies {
            for &tau in &taus {
                for &k in &ks {
                    let mut cfg = config_at_tau(&self.base, tau)?;
                    cfg.max_candidates = k;
                    cfg.validate()?;
                    let suffix = format!("@tau={tau}/k={k}");
                    if strategy == Strategy::Ablation {
                        let grid = self.ablation.as_ref().ok_or_else(|| {
                            DomainError::InvalidConfig("ablation strategy needs an ablation grid".into())
                        })?;
                        for &mode in &grid.modes {
                            for &lo in &grid.band_lo {
                                for &seed in &grid.seeds {
                                    let params = AblationParams {
                                        mode,
                                        band_lo: lo,
                                        band_hi: grid.band_hi,
                                        seed,
                                    };
                                    let spec = RunSpec::ablation(&cfg, params);
                                    let label =
                                        format!("{}{suffix}/band={lo}-{}/seed={seed}", spec.label, grid.band_hi);
                                    specs.push(spec.labeled(label));
                                }
                            }
                        }
                    } else {
                        let spec = RunSpec::new(strategy, &cfg);
                        let label = format!("{}{suffix}", spec.label);
                        specs.push(spec.labeled(label));
                    }
                }
            }
        }
        Ok(specs)
    }

    pub fn run(&self, planning: &PlanningSet) -> Result<MatrixResult, SweepError> {
        let corpora = self.suite.build().map_err(|e| SweepError::Config(e.to_string()))?;
        let specs = self.expand().map_err(|e| SweepError::Config(e.to_string()))?;
        let result = run_matrix(&corpora, &specs, planning, &desk_vocabulary()).map_err(SweepError::Run)?;
        Ok(result)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SweepError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Run(MatrixError),
}
