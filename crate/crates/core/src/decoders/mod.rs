//! Decoding strategies: greedy static, confidence threshold, the one-extra
//! token ablation, and Plan-Verify-Fill.

mod baseline;
mod pvf;

pub use baseline::{decode_ablation, decode_static, decode_threshold, AblationMode, AblationParams};
pub use pvf::{
    ar_candidates, ar_verify, base_set, compute_base, decode_pvf, filter1_consistency, filter2_total_confidence,
    impact_set, plan_candidates, plan_trajectories, CandidateKind, CandidateTrajectory, StepContext,
};

use serde::{Deserialize, Serialize};

use crate::domain::{Canvas, CommitRecord, DecodeConfig, DomainError, Posterior, Route, TokenId, Vocabulary};
use crate::metrics::RunReport;
use crate::oracle::{Oracle, OracleError, OracleRequest};
use crate::scalar::{gt, Probability};
use crate::sched::{check_termination, working_set, BlockPlan, Termination};

#[derive(Debug, thiserror::Error)]
pub enum DecodeError {
    #[error("step limit of {max_steps} reached before termination")]
    StepLimit { max_steps: usize },
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

/// Decoder selector used by the harness and the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Static,
    Threshold,
    Ablation,
    Pvf,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Static => "static",
            Strategy::Threshold => "threshold",
            Strategy::Ablation => "ablation",
            Strategy::Pvf => "pvf",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "static" => Ok(Strategy::Static),
            "threshold" => Ok(Strategy::Threshold),
            "ablation" => Ok(Strategy::Ablation),
            "pvf" => Ok(Strategy::Pvf),
            _ => Err(format!("unknown strategy {s:?}")),
        }
    }
}

/// Step-level route label written to traces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StepRoute {
    /// A verified planning anchor was committed.
    Planning,
    /// The AR fallback batch ran (the accepted prefix may be empty).
    Ar,
    /// Only threshold commits (or nothing, on a pausing step).
    Base,
    /// The progress guard or a below-threshold baseline commit fired.
    Forced,
}

impl StepRoute {
    pub fn as_str(self) -> &'static str {
        match self {
            StepRoute::Planning => "PLANNING",
            StepRoute::Ar => "AR",
            StepRoute::Base => "BASE",
            StepRoute::Forced => "FORCED",
        }
    }
}

/// In-memory detail about one step, not written to trace files.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepDiagnostics {
    pub active_block: usize,
    pub working_set: Vec<usize>,
    pub expanded: bool,
    pub base_set: Vec<usize>,
    pub plan_candidates: Vec<(usize, TokenId)>,
    pub ar_eligible: Vec<usize>,
    pub impact_set: Vec<usize>,
    pub filter1: Vec<bool>,
    pub ar_accepted: Option<usize>,
    pub pause_before: bool,
    pub reused_preds: bool,
}

/// One committed state `y_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace<P> {
    pub t: usize,
    pub route: StepRoute,
    pub commits: Vec<CommitRecord<P>>,
    pub pause: bool,
    /// Cumulative engine-issued predict calls.
    pub nfe: u64,
    /// Cumulative oracle-reported forwards.
    pub forwards: u64,
    pub diag: StepDiagnostics,
}

/// Serialized trace line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub t: usize,
    pub route: StepRoute,
    pub commits: Vec<TraceCommit>,
    pub pause: bool,
    pub nfe: u64,
    pub forwards: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceCommit {
    pub pos: usize,
    pub tok: TokenId,
    pub why: Route,
    pub p: f64,
}

impl<P: Probability> StepTrace<P> {
    pub fn to_line(&self) -> TraceLine {
        TraceLine {
            t: self.t,
            route: self.route,
            commits: self
                .commits
                .iter()
                .map(|c| TraceCommit {
                    pos: c.position,
                    tok: c.token,
                    why: c.route,
                    p: c.confidence.as_f64(),
                })
                .collect(),
            pause: self.pause,
            nfe: self.nfe,
            forwards: self.forwards,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&self.to_line()).expect("trace lines serialize")
    }
}

/// Whole trace as JSON lines, newline-terminated.
pub fn trace_to_jsonl<P: Probability>(trace: &[StepTrace<P>]) -> String {
    trace.iter().map(|s| s.to_json_line() + "\n").collect()
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceLine>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

/// State shared by every decoder: the canvas, counters and the growing trace.
pub(crate) struct Session<'a, P: Probability, O: ?Sized> {
    oracle: &'a O,
    vocab: &'a Vocabulary,
    pub cfg: &'a DecodeConfig<P>,
    pub canvas: Canvas,
    nfe: u64,
    raw: u64,
    commits: Vec<CommitRecord<P>>,
    trace: Vec<StepTrace<P>>,
    truncated_at: Option<usize>,
    strategy: Strategy,
}

impl<'a, P: Probability, O: Oracle<P> + ?Sized> Session<'a, P, O> {
    pub fn new(
        strategy: Strategy,
        canvas: Canvas,
        oracle: &'a O,
        vocab: &'a Vocabulary,
        cfg: &'a DecodeConfig<P>,
    ) -> Result<Self, DecodeError> {
        cfg.validate()?;
        if canvas.len() != cfg.gen_length {
            return Err(DomainError::InvalidConfig(format!(
                "canvas generation length {} differs from gen_length {}",
                canvas.len(),
                cfg.gen_length
            ))
            .into());
        }
        if canvas.mask_id() != vocab.mask_id() {
            return Err(DomainError::InvalidConfig("canvas and vocabulary disagree on the mask id".into()).into());
        }
        Ok(Self {
            oracle,
            vocab,
            cfg,
            canvas,
            nfe: 0,
            raw: 0,
            commits: Vec::new(),
            trace: Vec::new(),
            truncated_at: None,
            strategy,
        })
    }

    /// Runs `step` until termination or the step cap.
    pub fn run(
        mut self,
        mut step: impl FnMut(&mut Self, BlockPlan) -> Result<(), DecodeError>,
    ) -> Result<(Canvas, RunReport<P>), DecodeError> {
        if self.settle() {
            return Ok(self.finish());
        }
        let max = self.cfg.max_steps();
        while self.trace.len() < max {
            let plan = working_set(&self.canvas, self.cfg).expect("unterminated canvas has a mask");
            step(&mut self, plan)?;
            if self.settle() {
                return Ok(self.finish());
            }
        }
        Err(DecodeError::StepLimit { max_steps: max })
    }

    /// Applies the termination rule; true once decoding has halted.
    fn settle(&mut self) -> bool {
        match check_termination(&self.canvas, self.vocab) {
            Termination::Continue => false,
            Termination::Done => true,
            Termination::Truncate(at) => {
                let pads: Vec<(usize, TokenId)> = (at + 1..self.canvas.len())
                    .filter(|&i| self.canvas.is_masked(i))
                    .map(|i| (i, self.vocab.pad_id()))
                    .collect();
                let step = self.canvas.step();
                self.canvas = self
                    .canvas
                    .apply_commits(&pads)
                    .expect("padding masked positions")
                    .with_step(step);
                self.truncated_at = Some(at);
                true
            }
        }
    }

    /// One engine-issued predict call; returns a posterior per state.
    pub fn query(&mut self, states: Vec<Canvas>, positions: Vec<Vec<usize>>) -> Result<Vec<Posterior<P>>, DecodeError> {
        let request = OracleRequest {
            states,
            query_positions: positions,
            want_full_dist: false,
        };
        let response = self.oracle.predict(&request)?;
        self.nfe += 1;
        self.raw += response.forward_cost;
        if response.predictions.len() != request.states.len() {
            return Err(OracleError::Protocol("response batch size differs from request".into()).into());
        }
        let mut out = Vec::with_capacity(response.predictions.len());
        for (preds, wanted) in response.predictions.into_iter().zip(&request.query_positions) {
            if preds.len() != wanted.len() || preds.iter().zip(wanted).any(|(p, &w)| p.position != w) {
                return Err(OracleError::Protocol("predictions misaligned with query positions".into()).into());
            }
            out.push(Posterior::new(preds));
        }
        Ok(out)
    }

    /// Fresh predictions on the current canvas over `positions`.
    pub fn query_current(&mut self, positions: &[usize]) -> Result<Posterior<P>, DecodeError> {
        let state = self.canvas.clone();
        Ok(self.query(vec![state], vec![positions.to_vec()])?.remove(0))
    }

    /// Records the state `next` as `y_t`; `commits` must be exactly the
    /// difference between the current canvas and `next`.
    pub fn commit(
        &mut self,
        route: StepRoute,
        mut commits: Vec<CommitRecord<P>>,
        pause: bool,
        diag: StepDiagnostics,
    ) -> Result<(), DecodeError> {
        let t = self.canvas.step() + 1;
        commits.sort_by_key(|c| c.position);
        for c in &mut commits {
            c.step = t;
        }
        let pairs: Vec<(usize, TokenId)> = commits.iter().map(|c| (c.position, c.token)).collect();
        self.canvas = self.canvas.apply_commits(&pairs)?.with_step(t);
        self.commits.extend(commits.iter().cloned());
        self.trace.push(StepTrace {
            t,
            route,
            commits,
            pause,
            nfe: self.nfe,
            forwards: self.raw,
            diag,
        });
        Ok(())
    }

    pub fn finish(self) -> (Canvas, RunReport<P>) {
        let report = RunReport::from_parts(
            self.strategy,
            self.cfg.nfe_mode,
            self.nfe,
            self.raw,
            self.canvas.gen().to_vec(),
            self.truncated_at,
            self.commits,
            self.trace,
        );
        (self.canvas, report)
    }
}

/// Most confident of `positions` under `preds`; lowest position on ties.
pub(crate) fn most_confident<P: Probability>(preds: &Posterior<P>, positions: &[usize]) -> Option<(usize, TokenId, P)> {
    let mut best: Option<(usize, TokenId, P)> = None;
    for &i in positions {
        if let Some(p) = preds.get(i) {
            if best.is_none_or(|b| gt(p.top_prob, b.2)) {
                best = Some((i, p.top_token, p.top_prob));
            }
        }
    }
    best
}

pub(crate) fn record<P>(position: usize, token: TokenId, route: Route, confidence: P) -> CommitRecord<P> {
    CommitRecord {
        step: 0,
        position,
        token,
        route,
        confidence,
    }
}
