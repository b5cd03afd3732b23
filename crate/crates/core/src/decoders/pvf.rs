use super::{most_confident, record, DecodeError, Session, StepDiagnostics, StepRoute, Strategy};
use crate::domain::{
    ArVerifyMode, Canvas, CommitRecord, DecodeConfig, DomainError, Posterior, Route, TokenId, Vocabulary,
};
use crate::metrics::RunReport;
use crate::oracle::Oracle;
use crate::scalar::{gt, Probability};
use crate::sched::working_set;
use crate::vocabplan::PlanningSet;

/// Per-step quantities derived from the predictions on `y_{t-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepContext<P> {
    /// Predictions conditioned on `y_{t-1}` over the masked working set.
    pub base_preds: Posterior<P>,
    pub base_set: Vec<usize>,
    pub base_state: Canvas,
    /// Filled by [`StepContext::attach_base_state_preds`].
    pub impact_set: Vec<usize>,
    pub pause_flag: bool,
}

impl<P: Probability> StepContext<P> {
    /// Threshold commits as `(position, token, confidence)` records.
    pub fn base_commits(&self) -> Vec<CommitRecord<P>> {
        self.base_set
            .iter()
            .map(|&i| {
                let p = self.base_preds.get(i).expect("base set is covered");
                record(i, p.top_token, Route::HighConf, p.top_prob)
            })
            .collect()
    }

    /// Computes the impact set from predictions conditioned on the base state.
    pub fn attach_base_state_preds(&mut self, base_state_preds: &Posterior<P>, working_set: &[usize], tau_high: P) {
        self.impact_set = impact_set(base_state_preds, &self.base_state, working_set, tau_high);
    }
}

/// Masked positions among `masked` whose top probability is at least `tau_high`.
pub fn base_set<P: Probability>(preds: &Posterior<P>, masked: &[usize], tau_high: P) -> Vec<usize> {
    masked
        .iter()
        .copied()
        .filter(|&i| preds.get(i).is_some_and(|p| p.top_prob >= tau_high))
        .collect()
}

/// Base set of the masked working set and the canvas with it committed.
pub fn compute_base<P: Probability>(
    preds: &Posterior<P>,
    canvas: &Canvas,
    working_set: &[usize],
    cfg: &DecodeConfig<P>,
) -> Result<StepContext<P>, DomainError> {
    let masked = canvas.masked_set(working_set.iter().copied());
    let base = base_set(preds, &masked, cfg.tau_high);
    let commits: Vec<(usize, TokenId)> = base
        .iter()
        .map(|&i| (i, preds.get(i).expect("filtered on presence").top_token))
        .collect();
    Ok(StepContext {
        base_preds: preds.restricted(&masked),
        base_state: canvas.apply_commits(&commits)?,
        base_set: base,
        impact_set: Vec::new(),
        pause_flag: false,
    })
}

/// Positions of the working set still masked in the base state whose
/// confidence under base-state conditioning is at least `tau_high`.
pub fn impact_set<P: Probability>(
    base_state_preds: &Posterior<P>,
    base_state: &Canvas,
    working_set: &[usize],
    tau_high: P,
) -> Vec<usize> {
    base_set(
        base_state_preds,
        &base_state.masked_set(working_set.iter().copied()),
        tau_high,
    )
}

/// Masked working-set positions whose top token is a planning token and whose
/// confidence lies in `[tau_plan_lo, tau_plan_hi)`, most confident first
/// (lower position on ties), at most `max_candidates`.
pub fn plan_candidates<P: Probability>(
    preds: &Posterior<P>,
    canvas: &Canvas,
    working_set: &[usize],
    planning: &PlanningSet,
    cfg: &DecodeConfig<P>,
) -> Vec<(usize, TokenId)> {
    let mut eligible: Vec<(usize, TokenId, P)> = canvas
        .masked_set(working_set.iter().copied())
        .into_iter()
        .filter_map(|i| preds.get(i).map(|p| (i, p.top_token, p.top_prob)))
        .filter(|&(_, tok, p)| planning.is_planning(tok) && p >= cfg.tau_plan_lo && p < cfg.tau_plan_hi)
        .collect();
    // stable sort keeps ascending position among equal confidences
    eligible.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap_or(std::cmp::Ordering::Equal));
    eligible.truncate(cfg.max_candidates);
    eligible.into_iter().map(|(i, tok, _)| (i, tok)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CandidateKind {
    Plan,
    Ar,
}

/// A hypothetical next state: the base state plus anchor commits.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateTrajectory<P> {
    pub kind: CandidateKind,
    pub state: Canvas,
    pub anchor_positions: Vec<usize>,
    pub anchor_tokens: Vec<TokenId>,
    /// Predictions conditioned on `state`, filled after the batched pass.
    pub preds: Option<Posterior<P>>,
}

impl<P: Probability> CandidateTrajectory<P> {
    fn new(kind: CandidateKind, base_state: &Canvas, anchors: &[(usize, TokenId)]) -> Result<Self, DomainError> {
        Ok(Self {
            kind,
            state: base_state.apply_commits(anchors)?,
            anchor_positions: anchors.iter().map(|a| a.0).collect(),
            anchor_tokens: anchors.iter().map(|a| a.1).collect(),
            preds: None,
        })
    }

    /// Argmax token at `pos` under this trajectory: the anchor itself when
    /// `pos` is resolved here, otherwise the recorded prediction.
    fn token_at(&self, pos: usize) -> Option<TokenId> {
        self.state
            .token_at(pos)
            .or_else(|| self.preds.as_ref().and_then(|p| p.get(pos)).map(|p| p.top_token))
    }
}

/// One trajectory per planning candidate, each the base state plus that
/// single anchor.
pub fn plan_trajectories<P: Probability>(
    base_state: &Canvas,
    candidates: &[(usize, TokenId)],
) -> Result<Vec<CandidateTrajectory<P>>, DomainError> {
    candidates
        .iter()
        .map(|&a| CandidateTrajectory::new(CandidateKind::Plan, base_state, &[a]))
        .collect()
}

/// True iff every impact-set position keeps its base-state argmax under the
/// candidate.
pub fn filter1_consistency<P: Probability>(
    base_state_preds: &Posterior<P>,
    candidate: &CandidateTrajectory<P>,
    impact_set: &[usize],
) -> bool {
    impact_set.iter().all(|&i| {
        let base = base_state_preds.get(i).map(|p| p.top_token);
        base.is_some() && base == candidate.token_at(i)
    })
}

/// Index of the candidate with the largest summed confidence over the
/// working-set positions still masked in it; the earliest wins ties.
pub fn filter2_total_confidence<P: Probability>(
    candidates: &[&CandidateTrajectory<P>],
    working_set: &[usize],
) -> Option<usize> {
    let mut best: Option<(usize, P)> = None;
    for (j, c) in candidates.iter().enumerate() {
        let remaining = c.state.masked_set(working_set.iter().copied());
        let score = c.preds.as_ref().map_or(P::zero(), |p| p.total_confidence(&remaining));
        if best.is_none_or(|(_, s)| gt(score, s)) {
            best = Some((j, score));
        }
    }
    best.map(|b| b.0)
}

/// Nested AR drafts: the leftmost working-set positions still masked in the
/// base state whose confidence exceeds `tau_ar_lo`, committed with their
/// top tokens as prefixes of length `1..=max_candidates`.
pub fn ar_candidates<P: Probability>(
    preds: &Posterior<P>,
    base_state: &Canvas,
    working_set: &[usize],
    cfg: &DecodeConfig<P>,
) -> Result<Vec<CandidateTrajectory<P>>, DomainError> {
    let drafts: Vec<(usize, TokenId)> = ar_eligible(preds, base_state, working_set, cfg)
        .into_iter()
        .take(cfg.max_candidates)
        .map(|i| (i, preds.get(i).expect("eligible is covered").top_token))
        .collect();
    (1..=drafts.len())
        .map(|k| CandidateTrajectory::new(CandidateKind::Ar, base_state, &drafts[..k]))
        .collect()
}

fn ar_eligible<P: Probability>(
    preds: &Posterior<P>,
    base_state: &Canvas,
    working_set: &[usize],
    cfg: &DecodeConfig<P>,
) -> Vec<usize> {
    base_state
        .masked_set(working_set.iter().copied())
        .into_iter()
        .filter(|&i| preds.get(i).is_some_and(|p| gt(p.top_prob, cfg.tau_ar_lo)))
        .collect()
}

/// Length of the longest verified draft prefix. In `Base` mode every draft
/// is checked against the base-state argmax; in `Chain` mode draft `j` is
/// checked under the candidate holding drafts `1..j`.
pub fn ar_verify<P: Probability>(
    base_state_preds: &Posterior<P>,
    candidates: &[CandidateTrajectory<P>],
    mode: ArVerifyMode,
) -> usize {
    let Some(longest) = candidates.last() else {
        return 0;
    };
    let mut k = 0;
    for (j, (&pos, &tok)) in longest.anchor_positions.iter().zip(&longest.anchor_tokens).enumerate() {
        let conditioning = match mode {
            ArVerifyMode::Base => Some(base_state_preds),
            ArVerifyMode::Chain if j == 0 => Some(base_state_preds),
            ArVerifyMode::Chain => candidates[j - 1].preds.as_ref(),
        };
        if conditioning.and_then(|p| p.get(pos)).map(|p| p.top_token) != Some(tok) {
            break;
        }
        k = j + 1;
    }
    k
}

/// Masked positions of `state` in the current working set and in the working
/// set `state` itself would have, so a committed candidate's predictions can
/// serve the following step.
fn query_positions(state: &Canvas, working: &[usize], cfg: &DecodeConfig<impl Probability>) -> Vec<usize> {
    let mut q = state.masked_set(working.iter().copied());
    if let Ok(next) = working_set(state, cfg) {
        q.extend(next.masked(state));
        q.sort_unstable();
        q.dedup();
    }
    q
}

/// Plan-Verify-Fill decoding.
pub fn decode_pvf<P: Probability, O: Oracle<P> + ?Sized>(
    canvas: Canvas,
    oracle: &O,
    planning: &PlanningSet,
    vocab: &Vocabulary,
    cfg: &DecodeConfig<P>,
) -> Result<(Canvas, RunReport<P>), DecodeError> {
    let mut pause = false;
    let mut cached: Option<Posterior<P>> = None;
    Session::new(Strategy::Pvf, canvas, oracle, vocab, cfg)?.run(|s, plan| {
        let ws = plan.working_set.clone();
        let masked = plan.masked(&s.canvas);
        let mut diag = StepDiagnostics {
            active_block: plan.active_block,
            working_set: ws.clone(),
            expanded: plan.expanded,
            pause_before: pause,
            ..Default::default()
        };
        let preds = match cached.take() {
            Some(p) if cfg.posterior_reuse && p.covers(&masked) => {
                diag.reused_preds = true;
                p.restricted(&masked)
            }
            _ => s.query_current(&masked)?,
        };
        let mut ctx = compute_base(&preds, &s.canvas, &ws, cfg)?;
        ctx.pause_flag = pause;
        let candidates = plan_candidates(&preds, &s.canvas, &ws, planning, cfg);
        diag.base_set = ctx.base_set.clone();
        diag.plan_candidates = candidates.clone();
        diag.ar_eligible = ar_eligible(&preds, &ctx.base_state, &ws, cfg);
        let mut commits = ctx.base_commits();

        if !candidates.is_empty() && !pause {
            let mut trajs = plan_trajectories::<P>(&ctx.base_state, &candidates)?;
            let mut states = vec![ctx.base_state.clone()];
            states.extend(trajs.iter().map(|c| c.state.clone()));
            let positions = states.iter().map(|st| query_positions(st, &ws, cfg)).collect();
            let mut posts = s.query(states, positions)?.into_iter();
            let base_post = posts.next().expect("base state in batch");
            for (c, p) in trajs.iter_mut().zip(posts) {
                c.preds = Some(p);
            }
            ctx.attach_base_state_preds(&base_post, &ws, cfg.tau_high);
            diag.impact_set = ctx.impact_set.clone();
            diag.filter1 = trajs
                .iter()
                .map(|c| filter1_consistency(&base_post, c, &ctx.impact_set))
                .collect();
            let survivors: Vec<&CandidateTrajectory<P>> = trajs
                .iter()
                .zip(&diag.filter1)
                .filter_map(|(c, &ok)| ok.then_some(c))
                .collect();
            return match filter2_total_confidence(&survivors, &ws) {
                None => {
                    pause = true;
                    cached = Some(base_post);
                    s.commit(StepRoute::Base, commits, true, diag)
                }
                Some(w) => {
                    let winner = survivors[w];
                    let (pos, tok) = (winner.anchor_positions[0], winner.anchor_tokens[0]);
                    commits.push(record(
                        pos,
                        tok,
                        Route::Planning,
                        preds.get(pos).expect("candidate covered").top_prob,
                    ));
                    cached = winner.preds.clone();
                    s.commit(StepRoute::Planning, commits, false, diag)
                }
            };
        }

        pause = false;
        let drafts = ar_candidates(&preds, &ctx.base_state, &ws, cfg)?;
        if drafts.is_empty() {
            if commits.is_empty() {
                let (pos, tok, p) = most_confident(&preds, &masked).expect("working set has a mask");
                return s.commit(StepRoute::Forced, vec![record(pos, tok, Route::Forced, p)], false, diag);
            }
            return s.commit(StepRoute::Base, commits, false, diag);
        }
        let mut drafts = drafts;
        let mut states = vec![ctx.base_state.clone()];
        states.extend(drafts.iter().map(|c| c.state.clone()));
        let positions = states.iter().map(|st| query_positions(st, &ws, cfg)).collect();
        let mut posts = s.query(states, positions)?.into_iter();
        let base_post = posts.next().expect("base state in batch");
        for (c, p) in drafts.iter_mut().zip(posts) {
            c.preds = Some(p);
        }
        let k = ar_verify(&base_post, &drafts, cfg.ar_verify);
        diag.ar_accepted = Some(k);
        let accepted = if k == 0 { None } else { Some(&drafts[k - 1]) };
        match accepted {
            Some(c) => {
                for (&pos, &tok) in c.anchor_positions.iter().zip(&c.anchor_tokens) {
                    commits.push(record(
                        pos,
                        tok,
                        Route::ArFallback,
                        preds.get(pos).expect("draft covered").top_prob,
                    ));
                }
                cached = c.preds.clone();
            }
            None => cached = Some(base_post),
        }
        if commits.is_empty() {
            cached = None;
            let (pos, tok, p) = most_confident(&preds, &masked).expect("working set has a mask");
            return s.commit(StepRoute::Forced, vec![record(pos, tok, Route::Forced, p)], false, diag);
        }
        s.commit(StepRoute::Ar, commits, false, diag)
    })
}
