use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{most_confident, record, DecodeError, Session, StepDiagnostics, StepRoute, Strategy};
use crate::domain::{Canvas, DecodeConfig, Route, Vocabulary};
use crate::metrics::{AblationStats, RunReport};
use crate::oracle::Oracle;
use crate::scalar::Probability;
use crate::vocabplan::PlanningSet;

fn diag_for(plan: &crate::sched::BlockPlan) -> StepDiagnostics {
    StepDiagnostics {
        active_block: plan.active_block,
        working_set: plan.working_set.clone(),
        expanded: plan.expanded,
        ..Default::default()
    }
}

/// One forward per step; commits the single most confident masked position.
pub fn decode_static<P: Probability, O: Oracle<P> + ?Sized>(
    canvas: Canvas,
    oracle: &O,
    vocab: &Vocabulary,
    cfg: &DecodeConfig<P>,
) -> Result<(Canvas, RunReport<P>), DecodeError> {
    Session::new(Strategy::Static, canvas, oracle, vocab, cfg)?.run(|s, plan| {
        let masked = plan.masked(&s.canvas);
        let preds = s.query_current(&masked)?;
        let (pos, tok, p) = most_confident(&preds, &masked).expect("working set has a mask");
        s.commit(
            StepRoute::Forced,
            vec![record(pos, tok, Route::Forced, p)],
            false,
            diag_for(&plan),
        )
    })
}

/// Commits every masked working-set position whose top probability clears
/// `tau_high`; falls back to the single most confident one.
pub fn decode_threshold<P: Probability, O: Oracle<P> + ?Sized>(
    canvas: Canvas,
    oracle: &O,
    vocab: &Vocabulary,
    cfg: &DecodeConfig<P>,
) -> Result<(Canvas, RunReport<P>), DecodeError> {
    Session::new(Strategy::Threshold, canvas, oracle, vocab, cfg)?.run(|s, plan| {
        let masked = plan.masked(&s.canvas);
        let preds = s.query_current(&masked)?;
        let base = super::base_set(&preds, &masked, cfg.tau_high);
        let mut diag = diag_for(&plan);
        diag.base_set = base.clone();
        if base.is_empty() {
            let (pos, tok, p) = most_confident(&preds, &masked).expect("working set has a mask");
            return s.commit(StepRoute::Forced, vec![record(pos, tok, Route::Forced, p)], false, diag);
        }
        let commits = base
            .iter()
            .map(|&i| {
                let p = preds.get(i).expect("covered");
                record(i, p.top_token, Route::HighConf, p.top_prob)
            })
            .collect();
        s.commit(StepRoute::Base, commits, false, diag)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AblationMode {
    Random,
    Planning,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationParams<P> {
    pub mode: AblationMode,
    pub band_lo: P,
    pub band_hi: P,
    pub seed: u64,
}

/// Threshold commits plus one extra token drawn uniformly from the masked
/// positions whose confidence lies in the closed band. `Planning` mode draws
/// from the planning-token subset when it is non-empty.
pub fn decode_ablation<P: Probability, O: Oracle<P> + ?Sized>(
    canvas: Canvas,
    oracle: &O,
    planning: &PlanningSet,
    vocab: &Vocabulary,
    cfg: &DecodeConfig<P>,
    params: &AblationParams<P>,
) -> Result<(Canvas, RunReport<P>), DecodeError> {
    if !(params.band_lo < params.band_hi) || params.band_hi > cfg.tau_high {
        return Err(
            crate::domain::DomainError::InvalidConfig("ablation band must satisfy lo < hi <= tau_high".into()).into(),
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut stats = AblationStats::default();
    let mut conf_sum = 0.0;
    let (canvas, mut report) = Session::new(Strategy::Ablation, canvas, oracle, vocab, cfg)?.run(|s, plan| {
        let masked = plan.masked(&s.canvas);
        let preds = s.query_current(&masked)?;
        let base = super::base_set(&preds, &masked, cfg.tau_high);
        let mut diag = diag_for(&plan);
        diag.base_set = base.clone();
        let mut commits: Vec<_> = base
            .iter()
            .map(|&i| {
                let p = preds.get(i).expect("covered");
                record(i, p.top_token, Route::HighConf, p.top_prob)
            })
            .collect();
        let band: Vec<usize> = masked
            .iter()
            .copied()
            .filter(|i| !base.contains(i))
            .filter(|&i| {
                let p = preds.get(i).expect("covered").top_prob;
                p >= params.band_lo && p <= params.band_hi
            })
            .collect();
        let pool: Vec<usize> = match params.mode {
            AblationMode::Random => band,
            AblationMode::Planning => {
                let plan_pool: Vec<usize> = band
                    .iter()
                    .copied()
                    .filter(|&i| planning.is_planning(preds.get(i).expect("covered").top_token))
                    .collect();
                if plan_pool.is_empty() {
                    band
                } else {
                    plan_pool
                }
            }
        };
        let route = if let Some(&i) = (!pool.is_empty()).then(|| &pool[rng.gen_range(0..pool.len())]) {
            let p = preds.get(i).expect("covered");
            stats.extra_commits += 1;
            if planning.is_planning(p.top_token) {
                stats.planning_extra_commits += 1;
            }
            conf_sum += p.top_prob.as_f64();
            commits.push(record(i, p.top_token, Route::Forced, p.top_prob));
            StepRoute::Forced
        } else if commits.is_empty() {
            let (pos, tok, p) = most_confident(&preds, &masked).expect("working set has a mask");
            stats.guard_commits += 1;
            commits.push(record(pos, tok, Route::Forced, p));
            StepRoute::Forced
        } else {
            StepRoute::Base
        };
        s.commit(route, commits, false, diag)
    })?;
    if stats.extra_commits > 0 {
        stats.mean_extra_confidence = conf_sum / stats.extra_commits as f64;
    }
    report.ablation = Some(stats);
    Ok((canvas, report))
}
