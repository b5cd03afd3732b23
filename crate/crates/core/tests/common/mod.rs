//! Shared test support: reference computations written independently of the
//! library, a post-hoc trace checker, and adversarial oracles.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::hash::{DefaultHasher, Hash, Hasher};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use pvf_core::bench::{
    config_at_tau, gen_branched_corpus, gen_structured_corpus, BranchedCorpusSpec, Corpus, StructuredCorpusSpec,
};
use pvf_core::domain::{Canvas, ConfigFile, DecodeConfig, Posterior, Prediction, Route, TokenId, Vocabulary};
use pvf_core::oracle::{Oracle, OracleError, OracleRequest, OracleResponse};
use pvf_core::vocabplan::PlanningSet;
use pvf_core::{RunReport, StepRoute};

/// Conditional marginals by direct counting over the support: for every
/// masked position, token by token, the weight of consistent sequences
/// holding that token over the weight of all consistent sequences. `None`
/// when nothing in the support is consistent.
pub fn brute_force_marginals(
    support: &[(Vec<TokenId>, f64)],
    vocab: usize,
    gen: &[TokenId],
    mask: TokenId,
) -> Option<Vec<Option<Vec<f64>>>> {
    let consistent = |s: &Vec<TokenId>| (0..gen.len()).all(|j| gen[j] == mask || s[j] == gen[j]);
    let total: f64 = support.iter().filter(|(s, _)| consistent(s)).map(|(_, w)| *w).sum();
    if total == 0.0 {
        return None;
    }
    let mut out = Vec::with_capacity(gen.len());
    for i in 0..gen.len() {
        if gen[i] != mask {
            out.push(None);
            continue;
        }
        let mut dist = Vec::with_capacity(vocab);
        for w in 0..vocab as TokenId {
            let num: f64 = support
                .iter()
                .filter(|(s, _)| s[i] == w && consistent(s))
                .map(|(_, wt)| *wt)
                .sum();
            dist.push(num / total);
        }
        out.push(Some(dist));
    }
    Some(out)
}

/// First block holding a mask, the working set and whether it was expanded,
/// straight from the block rule.
pub fn reference_working_set(
    gen: &[TokenId],
    mask: TokenId,
    s: usize,
    n_s: usize,
) -> Option<(usize, Vec<usize>, bool)> {
    let first = gen.iter().position(|&t| t == mask)?;
    let k = first / s;
    let nblocks = gen.len().div_ceil(s);
    let block = |b: usize| (b * s)..((b + 1) * s).min(gen.len());
    let active: Vec<usize> = block(k).filter(|&i| gen[i] == mask).collect();
    if active.len() <= n_s && k + 1 < nblocks {
        let mut ws = active;
        ws.extend(block(k + 1));
        Some((k, ws, true))
    } else {
        Some((k, active, false))
    }
}

pub fn query(oracle: &dyn Oracle<f64>, state: &Canvas, positions: &[usize]) -> Posterior<f64> {
    let req = OracleRequest::single(state.clone(), positions.to_vec());
    let mut resp = oracle.predict(&req).expect("oracle answers checker query");
    resp.predictions.remove(0).into_iter().collect()
}

/// Re-derives every step of a PVF trace from fresh oracle queries and
/// returns a description of each violated invariant.
pub fn check_pvf_trace(
    oracle: &dyn Oracle<f64>,
    start: &Canvas,
    cfg: &DecodeConfig<f64>,
    planning: &PlanningSet,
    vocab: &Vocabulary,
    report: &RunReport<f64>,
) -> Vec<String> {
    let mut v = Vec::new();
    let mask = vocab.mask_id();
    let mut y = start.clone();
    let mut prev_pause = false;
    let mut prev_nfe = 0;
    for (idx, step) in report.trace.iter().enumerate() {
        let t = step.t;
        let mut bad = |msg: String| v.push(format!("step {t}: {msg}"));
        if t != idx + 1 {
            bad(format!("step counter {t} at index {idx}"));
        }
        if step.nfe < prev_nfe {
            bad("nfe decreased".into());
        }
        prev_nfe = step.nfe;
        let Some((k, ws, expanded)) = reference_working_set(y.gen(), mask, cfg.block_size, cfg.n_sparsity) else {
            bad("step taken on a resolved canvas".into());
            break;
        };
        let masked_ws: Vec<usize> = ws.iter().copied().filter(|&i| y.is_masked(i)).collect();
        let preds = query(oracle, &y, &masked_ws);

        // monotone resolution and block causality
        let mut seen = BTreeSet::new();
        for c in &step.commits {
            if !y.is_masked(c.position) || !seen.insert(c.position) {
                bad(format!("position {} committed while resolved or twice", c.position));
            }
            let b = c.position / cfg.block_size;
            if b != k && !(expanded && b == k + 1) {
                bad(format!(
                    "commit at {} in block {b} while block {k} is active",
                    c.position
                ));
            }
            if !ws.contains(&c.position) {
                bad(format!("commit at {} outside the working set", c.position));
            }
        }

        // threshold part equals the base set exactly
        let base: Vec<(usize, TokenId)> = masked_ws
            .iter()
            .filter_map(|&i| {
                preds
                    .get(i)
                    .filter(|p| p.top_prob >= cfg.tau_high)
                    .map(|p| (i, p.top_token))
            })
            .collect();
        let high: Vec<(usize, TokenId)> = step
            .commits
            .iter()
            .filter(|c| c.route == Route::HighConf)
            .map(|c| (c.position, c.token))
            .collect();
        if high != base {
            bad(format!("HIGH_CONF commits {high:?} differ from base set {base:?}"));
        }
        let z_base = y.apply_commits(&base).expect("base set is masked");
        let base_masked: Vec<usize> = ws.iter().copied().filter(|&i| z_base.is_masked(i)).collect();

        let candidates: Vec<usize> = masked_ws
            .iter()
            .copied()
            .filter(|&i| {
                preds.get(i).is_some_and(|p| {
                    planning.is_planning(p.top_token) && p.top_prob >= cfg.tau_plan_lo && p.top_prob < cfg.tau_plan_hi
                })
            })
            .collect();
        let eligible: Vec<usize> = base_masked
            .iter()
            .copied()
            .filter(|&i| preds.get(i).is_some_and(|p| p.top_prob > cfg.tau_ar_lo))
            .collect();

        let of = |r: Route| step.commits.iter().filter(|c| c.route == r).collect::<Vec<_>>();
        let (plan, ar, forced) = (of(Route::Planning), of(Route::ArFallback), of(Route::Forced));
        let groups = [!plan.is_empty(), !ar.is_empty(), !forced.is_empty()]
            .iter()
            .filter(|&&g| g)
            .count();
        if groups > 1 {
            bad("commits mix PLANNING, AR_FALLBACK and FORCED".into());
        }
        if plan.len() > 1 || forced.len() > 1 {
            bad("more than one PLANNING or FORCED commit".into());
        }

        if let Some(anchor) = plan.first() {
            if prev_pause {
                bad("planning commit right after a pause".into());
            }
            if !candidates.contains(&anchor.position)
                || preds.get(anchor.position).map(|p| p.top_token) != Some(anchor.token)
            {
                bad(format!("anchor {} is not a planning candidate", anchor.position));
            }
            // impact-set preservation
            let base_post = query(oracle, &z_base, &base_masked);
            let impact: Vec<usize> = base_masked
                .iter()
                .copied()
                .filter(|&i| base_post.get(i).is_some_and(|p| p.top_prob >= cfg.tau_high))
                .collect();
            let committed = z_base
                .apply_commits(&[(anchor.position, anchor.token)])
                .expect("anchor is masked");
            let rest: Vec<usize> = impact.iter().copied().filter(|&i| i != anchor.position).collect();
            let cand_post = query(oracle, &committed, &rest);
            for &i in &impact {
                let before = base_post.get(i).map(|p| p.top_token);
                let after = if i == anchor.position {
                    Some(anchor.token)
                } else {
                    cand_post.get(i).map(|p| p.top_token)
                };
                if before != after {
                    bad(format!("impact position {i} changed argmax {before:?} -> {after:?}"));
                }
            }
            if step.route != StepRoute::Planning {
                bad(format!("planning commit under step route {:?}", step.route));
            }
        } else if step.route == StepRoute::Planning {
            bad("PLANNING step without an anchor".into());
        }

        if !ar.is_empty() {
            let positions: Vec<usize> = ar.iter().map(|c| c.position).collect();
            let n = positions.len();
            if n > cfg.max_candidates || eligible.len() < n || positions[..] != eligible[..n] {
                bad(format!(
                    "AR anchors {positions:?} are not a prefix of eligible {eligible:?}"
                ));
            }
            let base_post = query(oracle, &z_base, &positions);
            for c in &ar {
                if base_post.get(c.position).map(|p| p.top_token) != Some(c.token) {
                    bad(format!("AR commit at {} is not the base-state argmax", c.position));
                }
            }
            if step.route != StepRoute::Ar {
                bad(format!("AR commits under step route {:?}", step.route));
            }
        }

        if let Some(f) = forced.first() {
            if step.commits.len() != 1 {
                bad("FORCED commit on a step that committed other tokens".into());
            }
            if !base.is_empty() || !(candidates.is_empty() || prev_pause) || !eligible.is_empty() {
                bad(format!(
                    "FORCED with base {base:?}, candidates {candidates:?} (paused {prev_pause}), eligible {eligible:?}"
                ));
            }
            let best = masked_ws
                .iter()
                .filter_map(|&i| preds.get(i).map(|p| (i, p.top_token, p.top_prob)))
                .fold(None::<(usize, TokenId, f64)>, |b, c| match b {
                    Some(b) if b.2 >= c.2 => Some(b),
                    _ => Some(c),
                });
            if best.map(|b| (b.0, b.1)) != Some((f.position, f.token)) {
                bad(format!(
                    "FORCED commit {:?} is not the most confident {best:?}",
                    (f.position, f.token)
                ));
            }
        }

        // pause semantics
        if step.pause
            && (prev_pause || !plan.is_empty() || !ar.is_empty() || !forced.is_empty() || candidates.is_empty())
        {
            bad("pause set outside a rejected planning step".into());
        }
        if prev_pause && (step.route == StepRoute::Planning || step.pause) {
            bad("paused step did not take the AR route".into());
        }
        if step.route == StepRoute::Ar && step.pause {
            bad("pause still set after an AR step".into());
        }
        if step.commits.is_empty() && !step.pause {
            bad("empty step without a pause".into());
        }
        prev_pause = step.pause;

        let pairs: Vec<(usize, TokenId)> = step.commits.iter().map(|c| (c.position, c.token)).collect();
        match y.apply_commits(&pairs) {
            Ok(next) => y = next,
            Err(e) => {
                bad(format!("commits do not apply: {e}"));
                break;
            }
        }
    }
    v.extend(check_final(&y, vocab, report));
    v
}

/// The report's final sequence is the replayed canvas, settled by the
/// termination rule.
pub fn check_final(last: &Canvas, vocab: &Vocabulary, report: &RunReport<f64>) -> Vec<String> {
    let mut v = Vec::new();
    let gen = last.gen();
    let mask = vocab.mask_id();
    if last.is_resolved() {
        if report.final_gen != gen || report.truncated_at.is_some() {
            v.push("resolved canvas reported differently".into());
        }
        return v;
    }
    let first_mask = gen.iter().position(|&t| t == mask).expect("unresolved");
    let eos = gen[..first_mask].iter().position(|&t| t == vocab.eos_id());
    match eos {
        Some(at) => {
            let mut padded = gen.to_vec();
            for t in padded.iter_mut().skip(at + 1) {
                if *t == mask {
                    *t = vocab.pad_id();
                }
            }
            if report.truncated_at != Some(at) || report.final_gen != padded {
                v.push(format!("expected truncation at {at}, got {:?}", report.truncated_at));
            }
        }
        None => v.push("decode stopped on an unresolved canvas without an end token".into()),
    }
    v
}

/// Oracle defined by a closure over `(state, gen position)`.
pub struct FnOracle<F>(pub F);

impl<F> Oracle<f64> for FnOracle<F>
where
    F: Fn(&Canvas, usize) -> (TokenId, f64) + Send + Sync,
{
    fn predict(&self, req: &OracleRequest) -> Result<OracleResponse<f64>, OracleError> {
        let predictions = req
            .states
            .iter()
            .zip(&req.query_positions)
            .map(|(s, ps)| {
                ps.iter()
                    .map(|&i| {
                        let (tok, p) = (self.0)(s, i);
                        Prediction::top1(i, tok, p)
                    })
                    .collect()
            })
            .collect();
        Ok(OracleResponse {
            predictions,
            forward_cost: 1,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Adversary {
    /// Every token equally likely; the reported top token is a hashed tie-break.
    Uniform,
    /// Two tokens near 0.5 each.
    NearTie,
    /// Random confidences strictly below `tau_high`.
    AllBelow,
    /// Random confidence tiers with tokens that change with every state.
    Chaotic,
}

/// Deterministic adversarial oracle over a vocabulary of `vocab` tokens
/// with the mask at 0 and the end token at 1.
pub struct AdversarialOracle {
    pub kind: Adversary,
    pub vocab: usize,
    pub seed: u64,
    pub tau_high: f64,
}

impl AdversarialOracle {
    fn hash(&self, state: &Canvas, pos: usize, salt: u64) -> u64 {
        let mut h = DefaultHasher::new();
        self.seed.hash(&mut h);
        salt.hash(&mut h);
        pos.hash(&mut h);
        if self.kind == Adversary::Chaotic {
            state.gen().hash(&mut h);
        } else {
            // depends on the resolved count only, so the same position keeps
            // its prediction across most trajectories of one step
            (state.len() - state.mask_count()).hash(&mut h);
        }
        h.finish()
    }

    fn unit(x: u64) -> f64 {
        (x >> 11) as f64 / (1u64 << 53) as f64
    }

    fn token(&self, h: u64) -> TokenId {
        if h.is_multiple_of(23) {
            1
        } else {
            3 + (h % (self.vocab as u64 - 3)) as TokenId
        }
    }

    fn answer(&self, state: &Canvas, pos: usize) -> (TokenId, f64) {
        let h = self.hash(state, pos, 0);
        let u = Self::unit(self.hash(state, pos, 1));
        let tok = self.token(h);
        let p = match self.kind {
            Adversary::Uniform => 1.0 / (self.vocab - 1) as f64,
            Adversary::NearTie => 0.5 + 0.01 * u * if h.is_multiple_of(3) { 0.0 } else { 1.0 },
            Adversary::AllBelow => self.tau_high * u,
            Adversary::Chaotic => match h % 4 {
                0 => self.tau_high + (1.0 - self.tau_high) * u,
                1 => 0.2 + 0.45 * u,
                2 => 0.1 * u,
                _ => u,
            },
        };
        (tok, p)
    }
}

impl Oracle<f64> for AdversarialOracle {
    fn predict(&self, req: &OracleRequest) -> Result<OracleResponse<f64>, OracleError> {
        FnOracle(|s: &Canvas, i: usize| self.answer(s, i)).predict(req)
    }
}

// ------------------------------------------------------ random instances

/// Random structured or branched corpus with `L` in {4, 8, 12, 16}.
pub fn random_corpus(rng: &mut ChaCha8Rng, idx: usize) -> Corpus {
    let l = 4 * rng.gen_range(1..=4);
    // everything after the end token is padding
    let eos_at = if rng.gen_bool(0.3) {
        Some(rng.gen_range(2..l))
    } else {
        None
    };
    let mut positions: Vec<usize> = (0..eos_at.unwrap_or(l)).collect();
    positions.shuffle(rng);
    if idx.is_multiple_of(2) {
        let n_content = rng.gen_range(1..=positions.len().clamp(1, 4));
        let content = positions[..n_content].to_vec();
        let scaffold = positions[n_content..].to_vec();
        let num = rng.gen_range(1..=6);
        let weights = (0..num).map(|_| rng.gen_range(0.05..1.0)).collect();
        gen_structured_corpus(&StructuredCorpusSpec {
            num_templates: num,
            template_length: l,
            scaffold_positions: scaffold,
            content_positions: content,
            weights,
            rng_seed: rng.gen(),
            eos_at,
        })
        .unwrap()
    } else {
        let nb = rng.gen_range(1..=3.min(positions.len()));
        let branch = positions[..nb].to_vec();
        let rest = &positions[nb..];
        let nc = rng.gen_range(0..=rest.len().min(3));
        let content = rest[..nc].to_vec();
        let scaffold = rest[nc..].to_vec();
        gen_branched_corpus(&BranchedCorpusSpec {
            template_length: l,
            branch_weights: (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(0.1..1.0)).collect(),
            branch_positions: branch,
            scaffold_positions: scaffold,
            content_positions: content,
            content_weights: (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(0.1..1.0)).collect(),
            rng_seed: rng.gen(),
            eos_at,
        })
        .unwrap()
    }
}

/// Random decode settings for generation length `l`.
pub fn random_cfg(rng: &mut ChaCha8Rng, l: usize) -> DecodeConfig<f64> {
    let base = ConfigFile::default();
    let tau = *[0.7, 0.8, 0.9, 0.95].choose(rng).unwrap();
    let mut cfg = config_at_tau(&base, tau).unwrap();
    cfg.gen_length = l;
    cfg.block_size = rng.gen_range(1..=l);
    cfg.n_sparsity = rng.gen_range(0..=6);
    cfg.max_candidates = rng.gen_range(1..=4);
    cfg
}
