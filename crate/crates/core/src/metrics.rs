//! NFE accounting, route histograms, planning rate, and report files.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::decoders::{StepRoute, StepTrace, Strategy, TraceLine};
use crate::domain::{CommitRecord, NfeMode, Route, TokenId};
use crate::scalar::Probability;

/// Extra-commit statistics for the ablation decoder.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationStats {
    pub extra_commits: usize,
    pub planning_extra_commits: usize,
    /// Progress-guard commits on steps with neither threshold nor band tokens.
    pub guard_commits: usize,
    pub mean_extra_confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport<P> {
    pub strategy: Strategy,
    pub nfe_mode: NfeMode,
    /// Engine-issued predict calls.
    pub nfe: u64,
    /// Sum of oracle-reported forward costs.
    pub raw_forwards: u64,
    pub steps: usize,
    pub commits_by_route: BTreeMap<Route, usize>,
    pub planning_rate: f64,
    pub final_gen: Vec<TokenId>,
    pub truncated_at: Option<usize>,
    pub commits: Vec<CommitRecord<P>>,
    pub trace: Vec<StepTrace<P>>,
    pub ablation: Option<AblationStats>,
    pub trace_path: Option<PathBuf>,
}

fn histogram(routes: impl Iterator<Item = Route>) -> BTreeMap<Route, usize> {
    let mut h: BTreeMap<Route, usize> = Route::ALL.iter().map(|&r| (r, 0)).collect();
    for r in routes {
        *h.entry(r).or_default() += 1;
    }
    h
}

/// PLANNING / (PLANNING + AR_FALLBACK), zero when neither occurred.
pub fn planning_rate(hist: &BTreeMap<Route, usize>) -> f64 {
    let plan = hist.get(&Route::Planning).copied().unwrap_or(0);
    let ar = hist.get(&Route::ArFallback).copied().unwrap_or(0);
    if plan + ar == 0 {
        0.0
    } else {
        plan as f64 / (plan + ar) as f64
    }
}

impl<P: Probability> RunReport<P> {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        strategy: Strategy,
        nfe_mode: NfeMode,
        nfe: u64,
        raw_forwards: u64,
        final_gen: Vec<TokenId>,
        truncated_at: Option<usize>,
        commits: Vec<CommitRecord<P>>,
        trace: Vec<StepTrace<P>>,
    ) -> Self {
        let commits_by_route = histogram(commits.iter().map(|c| c.route));
        Self {
            strategy,
            nfe_mode,
            nfe,
            raw_forwards,
            steps: trace.len(),
            planning_rate: planning_rate(&commits_by_route),
            commits_by_route,
            final_gen,
            truncated_at,
            commits,
            trace,
            ablation: None,
            trace_path: None,
        }
    }

    /// NFE under the configured counting mode.
    pub fn headline_nfe(&self) -> u64 {
        match self.nfe_mode {
            NfeMode::BatchAsOne => self.nfe,
            NfeMode::RawForwards => self.raw_forwards,
        }
    }

    pub fn trace_lines(&self) -> Vec<TraceLine> {
        self.trace.iter().map(StepTrace::to_line).collect()
    }

    pub fn route_count(&self, route: Route) -> usize {
        self.commits_by_route.get(&route).copied().unwrap_or(0)
    }
}

/// Counters recomputed from a serialized trace alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub nfe: u64,
    pub raw_forwards: u64,
    pub steps: usize,
    pub commits_by_route: BTreeMap<Route, usize>,
    pub planning_rate: f64,
    /// Generation region after replaying the commits and applying the
    /// truncation rule.
    pub final_gen: Vec<TokenId>,
}

/// Rebuilds a run's counters and final text from its trace lines.
pub fn report_from_trace(
    lines: &[TraceLine],
    gen_length: usize,
    mask_id: TokenId,
    eos_id: TokenId,
    pad_id: TokenId,
) -> Result<TraceSummary, crate::domain::DomainError> {
    let commits: Vec<CommitRecord<f64>> = lines
        .iter()
        .flat_map(|l| {
            l.commits.iter().map(move |c| CommitRecord {
                step: l.t,
                position: c.pos,
                token: c.tok,
                route: c.why,
                confidence: c.p,
            })
        })
        .collect();
    let replayed = crate::domain::replay_commits(gen_length, mask_id, pad_id, &commits, None)?;
    let first_mask = replayed.iter().position(|&t| t == mask_id).unwrap_or(replayed.len());
    let truncated_at = replayed[..first_mask]
        .iter()
        .position(|&t| t == eos_id)
        .filter(|_| first_mask < replayed.len());
    let final_gen = crate::domain::replay_commits(gen_length, mask_id, pad_id, &commits, truncated_at)?;
    let hist = histogram(commits.iter().map(|c| c.route));
    let last = lines.last();
    Ok(TraceSummary {
        nfe: last.map_or(0, |l| l.nfe),
        raw_forwards: last.map_or(0, |l| l.forwards),
        steps: lines.len(),
        planning_rate: planning_rate(&hist),
        commits_by_route: hist,
        final_gen,
    })
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("aggregate needs at least one report")]
    EmptyInput,
    #[error("baseline NFE must be positive")]
    DivisionByZero,
    #[error("{reports} reports but {targets} targets")]
    TargetMismatch { reports: usize, targets: usize },
}

/// `baseline / subject`.
pub fn speedup_ratio(baseline_nfe: f64, subject_nfe: f64) -> Result<f64, MetricsError> {
    if !(baseline_nfe > 0.0) || !(subject_nfe > 0.0) {
        return Err(MetricsError::DivisionByZero);
    }
    Ok(baseline_nfe / subject_nfe)
}

pub fn speedup<P: Probability>(baseline: &RunReport<P>, subject: &RunReport<P>) -> Result<f64, MetricsError> {
    speedup_ratio(baseline.headline_nfe() as f64, subject.headline_nfe() as f64)
}

/// Means over a set of runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub runs: usize,
    pub mean_nfe: f64,
    pub mean_raw_forwards: f64,
    pub mean_steps: f64,
    pub mean_planning_rate: f64,
    /// Exact-match rate against the supplied targets, if any.
    pub accuracy: Option<f64>,
}

/// Arithmetic means of the headline NFE and friends. `targets`, when given,
/// must align with `reports`; accuracy is the exact-match rate.
pub fn aggregate<P: Probability>(
    reports: &[RunReport<P>],
    targets: Option<&[Vec<TokenId>]>,
) -> Result<Summary, MetricsError> {
    if reports.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    if let Some(t) = targets {
        if t.len() != reports.len() {
            return Err(MetricsError::TargetMismatch {
                reports: reports.len(),
                targets: t.len(),
            });
        }
    }
    let n = reports.len() as f64;
    let mean = |f: &dyn Fn(&RunReport<P>) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Ok(Summary {
        runs: reports.len(),
        mean_nfe: mean(&|r| r.headline_nfe() as f64),
        mean_raw_forwards: mean(&|r| r.raw_forwards as f64),
        mean_steps: mean(&|r| r.steps as f64),
        mean_planning_rate: mean(&|r| r.planning_rate),
        accuracy: targets.map(|t| reports.iter().zip(t).filter(|(r, t)| r.final_gen == **t).count() as f64 / n),
    })
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub run_id: String,
    pub strategy: String,
    pub nfe: u64,
    pub raw_forwards: u64,
    pub steps: usize,
    pub planning_rate: f64,
    pub accuracy: f64,
}

pub const CSV_HEADER: &str = "run_id,strategy,nfe,raw_forwards,steps,planning_rate,accuracy";

impl CsvRow {
    pub fn from_report<P: Probability>(
        run_id: impl Into<String>,
        label: impl Into<String>,
        report: &RunReport<P>,
        target: Option<&[TokenId]>,
    ) -> Self {
        Self {
            run_id: run_id.into(),
            strategy: label.into(),
            nfe: report.headline_nfe(),
            raw_forwards: report.raw_forwards,
            steps: report.steps,
            planning_rate: report.planning_rate,
            accuracy: match target {
                Some(t) if report.final_gen == t => 1.0,
                Some(_) => 0.0,
                None => f64::NAN,
            },
        }
    }

    pub fn to_csv_line(&self) -> String {
        let acc = if self.accuracy.is_nan() {
            String::new()
        } else {
            format!("{}", self.accuracy)
        };
        format!(
            "{},{},{},{},{},{:.6},{}",
            self.run_id, self.strategy, self.nfe, self.raw_forwards, self.steps, self.planning_rate, acc
        )
    }
}

pub fn to_csv(rows: &[CsvRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv_line());
        out.push('\n');
    }
    out
}

/// One strategy's row of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub strategy: String,
    pub accuracy: Option<f64>,
    pub nfe: f64,
    pub raw_forwards: f64,
    pub planning_rate: f64,
    /// Mean NFE of the reference strategy divided by this row's.
    pub speedup: Option<f64>,
}

/// Strategy-by-strategy summary, accuracy and NFE side by side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub suite: String,
    pub reference: String,
    pub rows: Vec<TableRow>,
}

impl ComparisonTable {
    pub fn new(suite: impl Into<String>, reference: impl Into<String>, summaries: &[(String, Summary)]) -> Self {
        let reference = reference.into();
        let ref_nfe = summaries.iter().find(|(s, _)| *s == reference).map(|(_, s)| s.mean_nfe);
        Self {
            suite: suite.into(),
            rows: summaries
                .iter()
                .map(|(name, s)| TableRow {
                    strategy: name.clone(),
                    accuracy: s.accuracy,
                    nfe: s.mean_nfe,
                    raw_forwards: s.mean_raw_forwards,
                    planning_rate: s.mean_planning_rate,
                    speedup: ref_nfe.and_then(|r| speedup_ratio(r, s.mean_nfe).ok()),
                })
                .collect(),
            reference,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }
}

/// Step-route counts of a trace, for quick inspection.
pub fn step_route_counts<P: Probability>(trace: &[StepTrace<P>]) -> BTreeMap<&'static str, usize> {
    let mut m = BTreeMap::new();
    for s in trace {
        *m.entry(s.route.as_str()).or_default() += 1;
    }
    for r in [StepRoute::Planning, StepRoute::Ar, StepRoute::Base, StepRoute::Forced] {
        m.entry(r.as_str()).or_insert(0);
    }
    m
}
