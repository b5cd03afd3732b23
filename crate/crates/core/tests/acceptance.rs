//! Acceptance criteria. Each test checks one criterion at its stated
//! tolerance and writes a single PASS/FAIL line to stdout (uncaptured).

mod common;

use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use pvf_core::bench::{
    branched_suite, config_at_tau, default_suite, desk_planning_set, desk_vocabulary, Corpus, BRANCHED_SUITE_SEED,
    BRANCHED_SUITE_SIZE, DEFAULT_SUITE_SEED, DEFAULT_SUITE_SIZE,
};
use pvf_core::decoders::{
    ar_candidates, ar_verify, compute_base, decode_ablation, decode_pvf, decode_static, decode_threshold,
    filter1_consistency, filter2_total_confidence, plan_candidates, plan_trajectories, trace_to_jsonl, AblationMode,
    AblationParams, CandidateTrajectory, DecodeError,
};
use pvf_core::domain::{ArVerifyMode, Canvas, ConfigFile, DecodeConfig, Posterior, Prediction, Route, TokenId};
use pvf_core::oracle::{
    Conditioning, EnumerationOracle, ExplicitDistribution, Oracle, OracleError, OracleRequest, OracleResponse,
};
use pvf_core::sched::working_set;
use pvf_core::{RunReport, StepRoute};

const MASK: TokenId = 0;

fn verdict(name: &str, pass: bool, elapsed: Duration, detail: &str) {
    let mut out = std::io::stdout().lock();
    let tag = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(out, "\n{tag} {name} ({:.2}s): {detail}", elapsed.as_secs_f64());
    drop(out);
    assert!(pass, "{name}: {detail}");
}

fn summarize(violations: &[String]) -> String {
    let shown: Vec<&str> = violations.iter().take(5).map(String::as_str).collect();
    format!("{} violations, first: {shown:?}", violations.len())
}

// ---------------------------------------------------------------- oracle

#[test]
fn oracle_exactness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut max_err = 0.0f64;
    let mut checked = 0usize;
    let mut problems = Vec::new();
    for case in 0..200 {
        let l = rng.gen_range(1..=8);
        let v = rng.gen_range(2..=10usize);
        let n = rng.gen_range(1..=32);
        let support: Vec<(Vec<TokenId>, f64)> = (0..n)
            .map(|_| {
                let seq = (0..l).map(|_| rng.gen_range(1..v as TokenId)).collect();
                (seq, rng.gen_range(0.01..1.0))
            })
            .collect();
        let oracle = EnumerationOracle::new(ExplicitDistribution::new(v, MASK, support.clone()).unwrap());
        let mut states = vec![vec![MASK; l]];
        for _ in 0..4 {
            let (seq, _) = support.choose(&mut rng).unwrap();
            states.push(seq.iter().map(|&t| if rng.gen_bool(0.5) { MASK } else { t }).collect());
        }
        // an arbitrary state, usually inconsistent with the support
        states.push((0..l).map(|_| rng.gen_range(0..v as TokenId)).collect());
        for gen in states {
            let canvas = Canvas::new(vec![], l, MASK).unwrap().apply_commits(
                &gen.iter()
                    .enumerate()
                    .filter(|(_, &t)| t != MASK)
                    .map(|(i, &t)| (i, t))
                    .collect::<Vec<_>>(),
            );
            let canvas = canvas.unwrap();
            let masked: Vec<usize> = (0..l).filter(|&i| gen[i] == MASK).collect();
            let req = OracleRequest {
                states: vec![canvas],
                query_positions: vec![masked.clone()],
                want_full_dist: true,
            };
            let got = oracle.predict(&req);
            match (brute_force_marginals(&support, v, &gen, MASK), got) {
                (None, Err(OracleError::InconsistentState { .. })) => {}
                (Some(expect), Ok(resp)) => {
                    for pred in &resp.predictions[0] {
                        let want = expect[pred.position].as_ref().unwrap();
                        let dist = pred.dist.as_ref().unwrap();
                        for (a, b) in dist.iter().zip(want) {
                            max_err = max_err.max((a - b).abs());
                        }
                        let best = want.iter().cloned().fold(0.0, f64::max);
                        max_err = max_err.max((pred.top_prob - best).abs());
                        max_err = max_err.max((want[pred.top_token as usize] - best).abs());
                        checked += 1;
                    }
                    if resp.predictions[0].len() != masked.len() {
                        problems.push(format!(
                            "case {case}: answered {} of {}",
                            resp.predictions[0].len(),
                            masked.len()
                        ));
                    }
                }
                (e, g) => problems.push(format!(
                    "case {case}: reference {:?} vs oracle {:?}",
                    e.is_some(),
                    g.is_ok()
                )),
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = max_err <= 1e-12 && problems.is_empty() && elapsed < Duration::from_secs(10);
    verdict(
        "oracle exactness",
        pass,
        elapsed,
        &format!(
            "200 distributions, {checked} positions, max abs error {max_err:.3e} (tol 1e-12), {} mismatches {:?}",
            problems.len(),
            problems.first()
        ),
    );
}

// ------------------------------------------------------ step-level rules

/// Probabilities on a 1/64 grid so sums are exact and ties are real.
fn grid_prob(rng: &mut ChaCha8Rng) -> f64 {
    rng.gen_range(0..=64) as f64 / 64.0
}

/// Either one of `specials` or a grid probability.
fn edgy_prob(rng: &mut ChaCha8Rng, specials: &[f64]) -> f64 {
    if !specials.is_empty() && rng.gen_bool(0.25) {
        *specials.choose(rng).unwrap()
    } else {
        grid_prob(rng)
    }
}

fn random_canvas(rng: &mut ChaCha8Rng, l: usize, resolved: f64, vocab: TokenId) -> Canvas {
    let mut commits: Vec<(usize, TokenId)> = Vec::new();
    for i in 0..l {
        if rng.gen_bool(resolved) {
            commits.push((i, rng.gen_range(1..vocab)));
        }
    }
    Canvas::new(vec![], l, MASK).unwrap().apply_commits(&commits).unwrap()
}

fn random_subset(rng: &mut ChaCha8Rng, l: usize) -> Vec<usize> {
    (0..l).filter(|_| rng.gen_bool(0.6)).collect()
}

fn random_posterior(rng: &mut ChaCha8Rng, positions: &[usize], vocab: TokenId, specials: &[f64]) -> Posterior<f64> {
    positions
        .iter()
        .map(|&i| Prediction::top1(i, rng.gen_range(1..vocab), edgy_prob(rng, specials)))
        .collect()
}

fn masked_in(canvas: &Canvas, ws: &[usize]) -> Vec<usize> {
    ws.iter().copied().filter(|&i| canvas.is_masked(i)).collect()
}

#[test]
fn step_rule_conformance() {
    let start = Instant::now();
    let mut v: Vec<String> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let planning = desk_planning_set();
    let vocab = desk_vocabulary().len() as TokenId;
    v.extend(tabulated_examples());

    for case in 0..1000 {
        // working set
        let l = rng.gen_range(1..=16);
        let cfg = random_cfg(&mut rng, l);
        let resolved = rng.gen_range(0.0..1.0);
        let canvas = random_canvas(&mut rng, l, resolved, vocab);
        match (
            working_set(&canvas, &cfg),
            reference_working_set(canvas.gen(), MASK, cfg.block_size, cfg.n_sparsity),
        ) {
            (Ok(plan), Some((k, ws, expanded))) => {
                if (plan.active_block, &plan.working_set, plan.expanded) != (k, &ws, expanded) {
                    v.push(format!("working_set case {case}: {plan:?} vs {:?}", (k, ws, expanded)));
                }
            }
            (Err(_), None) => {}
            (a, b) => v.push(format!("working_set case {case}: {a:?} vs {b:?}")),
        }

        // base set, base state, impact set
        let l = rng.gen_range(2..=16);
        let cfg = random_cfg(&mut rng, l);
        let canvas = random_canvas(&mut rng, l, 0.3, vocab);
        let ws = random_subset(&mut rng, l);
        let m = masked_in(&canvas, &ws);
        let preds = random_posterior(&mut rng, &m, vocab, &[cfg.tau_high, 1.0]);
        let mut ctx = compute_base(&preds, &canvas, &ws, &cfg).unwrap();
        let want: Vec<usize> = m
            .iter()
            .copied()
            .filter(|&i| preds.get(i).unwrap().top_prob >= cfg.tau_high)
            .collect();
        let mut z = canvas.gen().to_vec();
        for &i in &want {
            z[i] = preds.get(i).unwrap().top_token;
        }
        if ctx.base_set != want || ctx.base_state.gen() != &z[..] {
            v.push(format!("compute_base case {case}: {:?} vs {want:?}", ctx.base_set));
        }
        let zm: Vec<usize> = (0..l).filter(|&i| z[i] == MASK && ws.contains(&i)).collect();
        let zpreds = random_posterior(&mut rng, &zm, vocab, &[cfg.tau_high]);
        ctx.attach_base_state_preds(&zpreds, &ws, cfg.tau_high);
        let want_impact: Vec<usize> = zm
            .iter()
            .copied()
            .filter(|&i| zpreds.get(i).unwrap().top_prob >= cfg.tau_high)
            .collect();
        if ctx.impact_set != want_impact {
            v.push(format!(
                "impact set case {case}: {:?} vs {want_impact:?}",
                ctx.impact_set
            ));
        }

        // planning candidates
        let canvas = random_canvas(&mut rng, l, 0.3, vocab);
        let ws = random_subset(&mut rng, l);
        let m = masked_in(&canvas, &ws);
        let preds = random_posterior(&mut rng, &m, vocab, &[cfg.tau_plan_lo, cfg.tau_plan_hi]);
        let got = plan_candidates(&preds, &canvas, &ws, &planning, &cfg);
        let mut want: Vec<(usize, TokenId, f64)> = m
            .iter()
            .map(|&i| {
                let p = preds.get(i).unwrap();
                (i, p.top_token, p.top_prob)
            })
            .filter(|&(_, t, p)| planning.is_planning(t) && cfg.tau_plan_lo <= p && p < cfg.tau_plan_hi)
            .collect();
        want.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
        let want: Vec<(usize, TokenId)> = want
            .into_iter()
            .take(cfg.max_candidates)
            .map(|(i, t, _)| (i, t))
            .collect();
        if got != want {
            v.push(format!("plan_candidates case {case}: {got:?} vs {want:?}"));
        }

        // filter 1
        let base_state = random_canvas(&mut rng, l, 0.3, vocab);
        let bm: Vec<usize> = (0..l).filter(|&i| base_state.is_masked(i)).collect();
        if let Some(&anchor) = bm.choose(&mut rng) {
            let tok = rng.gen_range(1..vocab);
            let mut cand = plan_trajectories::<f64>(&base_state, &[(anchor, tok)])
                .unwrap()
                .remove(0);
            let base_preds = random_posterior(&mut rng, &bm, 4, &[]);
            let rest: Vec<usize> = bm.iter().copied().filter(|&i| i != anchor).collect();
            let cand_preds = random_posterior(&mut rng, &rest, 4, &[]);
            cand.preds = Some(cand_preds.clone());
            let impact = random_subset(&mut rng, l)
                .into_iter()
                .filter(|i| bm.contains(i))
                .collect::<Vec<_>>();
            let want = impact.iter().all(|&i| {
                let after = if i == anchor {
                    tok
                } else {
                    cand_preds.get(i).unwrap().top_token
                };
                base_preds.get(i).unwrap().top_token == after
            });
            if filter1_consistency(&base_preds, &cand, &impact) != want {
                v.push(format!("filter1 case {case}: expected {want}"));
            }
        }

        // filter 2
        let base_state = random_canvas(&mut rng, l, 0.3, vocab);
        let bm: Vec<usize> = (0..l).filter(|&i| base_state.is_masked(i)).collect();
        if !bm.is_empty() {
            let ws = random_subset(&mut rng, l);
            let n = rng.gen_range(1..=4);
            let anchors: Vec<(usize, TokenId)> = (0..n)
                .map(|_| (*bm.choose(&mut rng).unwrap(), rng.gen_range(1..vocab)))
                .collect();
            let mut cands = plan_trajectories::<f64>(&base_state, &anchors).unwrap();
            let mut scores = Vec::new();
            for c in &mut cands {
                let cm: Vec<usize> = (0..l).filter(|&i| c.state.is_masked(i)).collect();
                // coarse grid so equal sums happen
                let post: Posterior<f64> = cm
                    .iter()
                    .map(|&i| Prediction::top1(i, 1, rng.gen_range(0..=4) as f64 / 4.0))
                    .collect();
                let mut s = 0.0;
                for &i in &ws {
                    if c.state.is_masked(i) {
                        s += post.get(i).unwrap().top_prob;
                    }
                }
                scores.push(s);
                c.preds = Some(post);
            }
            let mut want = 0;
            for (j, &s) in scores.iter().enumerate() {
                if s > scores[want] {
                    want = j;
                }
            }
            let refs: Vec<&CandidateTrajectory<f64>> = cands.iter().collect();
            if filter2_total_confidence(&refs, &ws) != Some(want) {
                v.push(format!("filter2 case {case}: scores {scores:?}"));
            }
        }

        // AR drafts and verification
        let base_state = random_canvas(&mut rng, l, 0.3, vocab);
        let ws = random_subset(&mut rng, l);
        let m = masked_in(&base_state, &ws);
        let preds = random_posterior(&mut rng, &m, 5, &[cfg.tau_ar_lo, 0.0]);
        let drafts = ar_candidates(&preds, &base_state, &ws, &cfg).unwrap();
        let eligible: Vec<usize> = m
            .iter()
            .copied()
            .filter(|&i| preds.get(i).unwrap().top_prob > cfg.tau_ar_lo)
            .collect();
        let take = eligible.len().min(cfg.max_candidates);
        let shape_ok = drafts.len() == take
            && drafts.iter().enumerate().all(|(j, d)| {
                d.anchor_positions == eligible[..=j]
                    && d.anchor_tokens
                        .iter()
                        .zip(&d.anchor_positions)
                        .all(|(&t, &i)| preds.get(i).unwrap().top_token == t)
                    && d.anchor_positions
                        .iter()
                        .all(|&i| d.state.token_at(i) == Some(preds.get(i).unwrap().top_token))
            });
        if !shape_ok {
            v.push(format!(
                "ar_candidates case {case}: eligible {eligible:?}, got {} drafts",
                drafts.len()
            ));
        }
        let mut drafts = drafts;
        // base-state argmaxes agreeing with the drafts most of the time
        let verify_post: Posterior<f64> = m
            .iter()
            .map(|&i| {
                let draft = preds.get(i).unwrap().top_token;
                let tok = if rng.gen_bool(0.75) { draft } else { rng.gen_range(1..5) };
                Prediction::top1(i, tok, 0.5)
            })
            .collect();
        let want_base = drafts
            .last()
            .map(|d| {
                d.anchor_positions
                    .iter()
                    .zip(&d.anchor_tokens)
                    .take_while(|(&i, &t)| verify_post.get(i).unwrap().top_token == t)
                    .count()
            })
            .unwrap_or(0);
        if ar_verify(&verify_post, &drafts, ArVerifyMode::Base) != want_base {
            v.push(format!("ar_verify case {case}: expected {want_base}"));
        }
        for d in &mut drafts {
            let dm: Vec<usize> = (0..l).filter(|&i| d.state.is_masked(i)).collect();
            let mut post: Vec<Prediction<f64>> = Vec::new();
            for &i in &dm {
                let agree = preds.get(i).map(|p| p.top_token).filter(|_| rng.gen_bool(0.75));
                post.push(Prediction::top1(i, agree.unwrap_or(1), 0.5));
            }
            d.preds = Some(post.into_iter().collect());
        }
        let want_chain = drafts
            .last()
            .map(|d| {
                let mut k = 0;
                for (j, (&i, &t)) in d.anchor_positions.iter().zip(&d.anchor_tokens).enumerate() {
                    let cond = if j == 0 {
                        Some(&verify_post)
                    } else {
                        drafts[j - 1].preds.as_ref()
                    };
                    if cond.and_then(|p| p.get(i)).map(|p| p.top_token) != Some(t) {
                        break;
                    }
                    k += 1;
                }
                k
            })
            .unwrap_or(0);
        if ar_verify(&verify_post, &drafts, ArVerifyMode::Chain) != want_chain {
            v.push(format!("ar_verify chain case {case}: expected {want_chain}"));
        }
    }
    let elapsed = start.elapsed();
    let pass = v.is_empty() && elapsed < Duration::from_secs(30);
    verdict(
        "step-rule conformance",
        pass,
        elapsed,
        &format!("tabulated examples + 1000 random cases per rule; {}", summarize(&v)),
    );
}

/// The worked examples for each step rule.
fn tabulated_examples() -> Vec<String> {
    let mut v = Vec::new();
    let mut check = |ok: bool, what: &str| {
        if !ok {
            v.push(format!("example: {what}"));
        }
    };
    let vocab = desk_vocabulary();
    let planning = desk_planning_set();
    let id = |s: &str| vocab.id_of(s).unwrap();
    let post = |e: &[(usize, TokenId, f64)]| {
        e.iter()
            .map(|&(i, t, p)| Prediction::top1(i, t, p))
            .collect::<Posterior<f64>>()
    };
    let mut cfg = DecodeConfig::<f64>::desk_default();
    cfg.gen_length = 8;
    cfg.block_size = 4;

    // working set
    let c = Canvas::new(vec![], 8, MASK)
        .unwrap()
        .apply_commits(&[(0, 23), (1, 24)])
        .unwrap();
    let p = working_set(&c, &cfg).unwrap();
    check(
        p.working_set == vec![2, 3, 4, 5, 6, 7] && p.expanded,
        "N_s=5 expands into the next block",
    );
    let strict = DecodeConfig {
        n_sparsity: 0,
        ..cfg.clone()
    };
    let p = working_set(&c, &strict).unwrap();
    check(
        p.working_set == vec![2, 3] && !p.expanded,
        "N_s=0 keeps the active block",
    );
    let last = Canvas::new(vec![], 8, MASK)
        .unwrap()
        .apply_commits(&(0..7).map(|i| (i, 23)).collect::<Vec<_>>())
        .unwrap();
    check(
        working_set(&last, &cfg).unwrap().working_set == vec![7],
        "last block does not expand",
    );

    // base set and impact set
    let mut wide = cfg.clone();
    wide.gen_length = 12;
    let c = Canvas::new(vec![], 12, MASK).unwrap();
    let mut ctx = compute_base(
        &post(&[(3, 5, 0.95), (5, 6, 0.40), (7, 7, 0.92)]),
        &c,
        &[3, 5, 7, 9],
        &wide,
    )
    .unwrap();
    check(ctx.base_set == vec![3, 7], "base set {3, 7}");
    ctx.attach_base_state_preds(&post(&[(5, 6, 0.91), (9, 4, 0.30)]), &[3, 5, 7, 9], 0.9);
    check(ctx.impact_set == vec![5], "impact set {5}");
    let c2 = Canvas::new(vec![], 2, MASK).unwrap();
    let mut all = compute_base(&post(&[(0, 5, 0.97), (1, 6, 0.93)]), &c2, &[0, 1], &cfg).unwrap();
    all.attach_base_state_preds(&Posterior::default(), &[0, 1], 0.9);
    check(
        all.impact_set.is_empty() && all.base_state.is_resolved(),
        "full base set leaves no impact set",
    );

    // planning candidates
    let preds = post(&[(2, id("Therefore"), 0.50), (4, id("cat"), 0.50), (6, id(":"), 0.30)]);
    let c = Canvas::new(vec![], 8, MASK).unwrap();
    let ws = [2, 4, 6];
    check(
        plan_candidates(&preds, &c, &ws, &planning, &cfg) == vec![(2, id("Therefore")), (6, id(":"))],
        "candidates ordered by confidence",
    );
    check(
        plan_candidates(&post(&[(2, id(":"), 0.65)]), &c, &[2], &planning, &cfg).is_empty(),
        "upper bound excluded",
    );
    check(
        plan_candidates(&post(&[(2, id("cat"), 0.5)]), &c, &[2], &planning, &cfg).is_empty(),
        "no planning tokens",
    );

    // filter 1
    let base = Canvas::new(vec![], 8, MASK).unwrap();
    let mut cand = plan_trajectories::<f64>(&base, &[(2, id(":"))]).unwrap().remove(0);
    let (x, y) = (id("cat"), id("dog"));
    cand.preds = Some(post(&[(7, x, 0.6)]));
    check(
        filter1_consistency(&post(&[(7, x, 0.95)]), &cand, &[7]),
        "same argmax passes",
    );
    cand.preds = Some(post(&[(7, y, 0.6)]));
    check(
        !filter1_consistency(&post(&[(7, x, 0.95)]), &cand, &[7]),
        "changed argmax fails",
    );
    check(filter1_consistency(&post(&[]), &cand, &[]), "empty impact set passes");

    // filter 2
    let mut two = plan_trajectories::<f64>(&base, &[(0, id(":")), (1, id("="))]).unwrap();
    two[0].preds = Some(post(&[(1, x, 0.3), (2, x, 0.4)]));
    two[1].preds = Some(post(&[(0, x, 0.5), (2, x, 0.4)]));
    check(
        filter2_total_confidence(&[&two[0], &two[1]], &[0, 1, 2]) == Some(1),
        "larger total wins",
    );
    check(
        filter2_total_confidence(&[&two[0]], &[0, 1, 2]) == Some(0),
        "single survivor",
    );
    two[1].preds = Some(post(&[(0, x, 0.3), (2, x, 0.4)]));
    check(
        filter2_total_confidence(&[&two[0], &two[1]], &[0, 1, 2]) == Some(0),
        "tie goes to the earlier",
    );

    // AR drafts
    let mut c12 = cfg.clone();
    c12.gen_length = 12;
    let b12 = Canvas::new(vec![], 12, MASK).unwrap();
    let preds = post(&[(4, 8, 0.5), (6, 9, 0.5), (9, 10, 0.5)]);
    let drafts = ar_candidates(&preds, &b12, &[4, 6, 9], &c12).unwrap();
    check(
        drafts.len() == 3 && drafts[1].anchor_positions == vec![4, 6],
        "second draft anchors {4, 6}",
    );
    check(
        ar_candidates(&post(&[(4, 8, 0.05)]), &b12, &[4], &c12)
            .unwrap()
            .is_empty(),
        "nothing above the AR floor",
    );
    check(
        ar_candidates(&post(&[(4, 8, 0.5), (6, 9, 0.05)]), &b12, &[4, 6], &c12)
            .unwrap()
            .len()
            == 1,
        "one eligible",
    );

    // AR verification
    let verify = |e: &[(usize, TokenId, f64)]| ar_verify(&post(e), &drafts, ArVerifyMode::Base);
    check(
        verify(&[(4, 8, 0.9), (6, 1, 0.9), (9, 10, 0.9)]) == 1,
        "mismatch at second draft",
    );
    check(
        verify(&[(4, 8, 0.9), (6, 9, 0.9), (9, 10, 0.9)]) == 3,
        "all drafts match",
    );
    check(
        verify(&[(4, 1, 0.9), (6, 9, 0.9), (9, 10, 0.9)]) == 0,
        "mismatch at first draft",
    );
    v
}

// --------------------------------------------------------- trace checks

#[test]
fn pvf_trace_invariants() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let vocab = desk_vocabulary();
    let planning = desk_planning_set();
    let mut v = Vec::new();
    let mut routes = [0usize; 4];
    let mut pauses = 0;
    for run in 0..500 {
        let corpus = random_corpus(&mut rng, run);
        let l = corpus.gen_length();
        let mut cfg = random_cfg(&mut rng, l);
        let sizes: Vec<usize> = [1, 2, 4, 8, 16].into_iter().filter(|s| l.is_multiple_of(*s)).collect();
        cfg.block_size = *sizes.choose(&mut rng).unwrap();
        cfg.posterior_reuse = rng.gen_bool(0.7);
        let prompt: Vec<TokenId> = (0..rng.gen_range(0..3)).map(|_| rng.gen_range(3..45)).collect();
        let oracle = corpus.oracle_with(Conditioning::NearestBackoff);
        let canvas = Canvas::new(prompt, l, MASK).unwrap();
        let first = decode_pvf(canvas.clone(), &oracle, &planning, &vocab, &cfg);
        let second = decode_pvf(canvas.clone(), &oracle, &planning, &vocab, &cfg);
        let (Ok((_, a)), Ok((_, b))) = (first, second) else {
            v.push(format!("run {run}: decode failed"));
            continue;
        };
        if trace_to_jsonl(&a.trace) != trace_to_jsonl(&b.trace) || a.final_gen != b.final_gen {
            v.push(format!("run {run}: two runs differ"));
        }
        for r in check_pvf_trace(&oracle, &canvas, &cfg, &planning, &vocab, &a) {
            v.push(format!("run {run} ({}): {r}", corpus.name));
        }
        for s in &a.trace {
            routes[s.route as usize] += 1;
            pauses += s.pause as usize;
        }
    }
    let elapsed = start.elapsed();
    let pass = v.is_empty() && elapsed < Duration::from_secs(120);
    verdict(
        "pvf trace invariants",
        pass,
        elapsed,
        &format!(
            "500 decodes, step routes PLANNING/AR/BASE/FORCED = {routes:?}, {pauses} pauses; {}",
            summarize(&v)
        ),
    );
}

// ---------------------------------------------------------- baselines

/// Records the raw response of every call.
struct Logged<O> {
    inner: O,
    calls: Mutex<Vec<(OracleRequest, OracleResponse<f64>)>>,
}

impl<O: Oracle<f64>> Oracle<f64> for Logged<O> {
    fn predict(&self, req: &OracleRequest) -> Result<OracleResponse<f64>, OracleError> {
        let resp = self.inner.predict(req)?;
        self.calls.lock().unwrap().push((req.clone(), resp.clone()));
        Ok(resp)
    }
}

#[test]
fn baseline_equivalences() {
    let start = Instant::now();
    let vocab = desk_vocabulary();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut corpora = default_suite(DEFAULT_SUITE_SIZE, DEFAULT_SUITE_SEED);
    corpora.extend(branched_suite(BRANCHED_SUITE_SIZE, BRANCHED_SUITE_SEED));
    corpora.extend((0..100).map(|i| random_corpus(&mut rng, i)));
    let mut v = Vec::new();
    let (mut static_checked, mut steps_checked) = (0, 0);
    for corpus in &corpora {
        let l = corpus.gen_length();
        let mut cfg = DecodeConfig::<f64>::desk_default().strict_blocks();
        cfg.gen_length = l;
        let canvas = Canvas::new(corpus.prompt.clone(), l, MASK).unwrap();
        let oracle = corpus.oracle_with(Conditioning::NearestBackoff);

        let (_, r) = decode_static(canvas.clone(), &oracle, &vocab, &cfg).unwrap();
        // committed pad tokens count; truncation padding never happens here
        let resolved = r.final_gen.iter().filter(|&&t| t != MASK).count();
        if r.truncated_at.is_none() {
            static_checked += 1;
            if r.nfe as usize != resolved || r.nfe as usize != r.commits.len() {
                v.push(format!("{}: static NFE {} vs {resolved} resolved", corpus.name, r.nfe));
            }
        }

        let logged = Logged {
            inner: &oracle,
            calls: Mutex::new(Vec::new()),
        };
        let (_, r) = decode_threshold(canvas.clone(), &logged, &vocab, &cfg).unwrap();
        let calls = logged.calls.into_inner().unwrap();
        if calls.len() != r.trace.len() {
            v.push(format!(
                "{}: {} calls for {} steps",
                corpus.name,
                calls.len(),
                r.trace.len()
            ));
            continue;
        }
        for ((req, resp), step) in calls.iter().zip(&r.trace) {
            steps_checked += 1;
            let preds = &resp.predictions[0];
            let mut want: Vec<(usize, TokenId, Route)> = preds
                .iter()
                .filter(|p| p.top_prob >= cfg.tau_high)
                .map(|p| (p.position, p.top_token, Route::HighConf))
                .collect();
            if want.is_empty() {
                let best = preds.iter().fold(None::<&Prediction<f64>>, |b, p| match b {
                    Some(b) if b.top_prob >= p.top_prob => Some(b),
                    _ => Some(p),
                });
                want.extend(best.map(|p| (p.position, p.top_token, Route::Forced)));
            }
            want.sort();
            let got: Vec<(usize, TokenId, Route)> =
                step.commits.iter().map(|c| (c.position, c.token, c.route)).collect();
            let ws = reference_working_set(req.states[0].gen(), MASK, cfg.block_size, cfg.n_sparsity)
                .unwrap()
                .1;
            let masked: Vec<usize> = ws.into_iter().filter(|&i| req.states[0].is_masked(i)).collect();
            if got != want || req.query_positions[0] != masked {
                v.push(format!("{} step {}: {got:?} vs {want:?}", corpus.name, step.t));
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        "baseline equivalences",
        v.is_empty(),
        elapsed,
        &format!(
            "{} corpora, static NFE checked on {static_checked} non-truncating, {steps_checked} threshold steps recomputed; {}",
            corpora.len(),
            summarize(&v)
        ),
    );
}

// ------------------------------------------------------ desk-scale claims

fn suite_reports(
    corpora: &[Corpus],
    run: impl Fn(Canvas, &EnumerationOracle<f64>, &DecodeConfig<f64>) -> Result<RunReport<f64>, DecodeError>,
    cfg: &DecodeConfig<f64>,
) -> Vec<RunReport<f64>> {
    corpora
        .iter()
        .map(|c| {
            let mut cfg = cfg.clone();
            cfg.gen_length = c.gen_length();
            let canvas = Canvas::new(c.prompt.clone(), cfg.gen_length, MASK).unwrap();
            run(canvas, &c.oracle_with(Conditioning::NearestBackoff), &cfg).unwrap()
        })
        .collect()
}

fn mean_nfe(reports: &[RunReport<f64>]) -> f64 {
    reports.iter().map(|r| r.headline_nfe() as f64).sum::<f64>() / reports.len() as f64
}

fn accuracy(reports: &[RunReport<f64>], corpora: &[Corpus]) -> f64 {
    reports
        .iter()
        .zip(corpora)
        .filter(|(r, c)| r.final_gen == c.target)
        .count() as f64
        / corpora.len() as f64
}

#[test]
fn directional_nfe() {
    let start = Instant::now();
    let vocab = desk_vocabulary();
    let planning = desk_planning_set();
    let corpora = default_suite(DEFAULT_SUITE_SIZE, DEFAULT_SUITE_SEED);
    let min_mode = corpora.iter().map(Corpus::mode_weight).fold(1.0, f64::min);
    let cfg = config_at_tau(&ConfigFile::default(), 0.9).unwrap();
    let thr = suite_reports(
        &corpora,
        |c, o, k| decode_threshold(c, o, &vocab, &k.strict_blocks()).map(|r| r.1),
        &cfg,
    );
    let pvf = suite_reports(
        &corpora,
        |c, o, k| decode_pvf(c, o, &planning, &vocab, k).map(|r| r.1),
        &cfg,
    );
    let (nt, np) = (mean_nfe(&thr), mean_nfe(&pvf));
    let (at, ap) = (accuracy(&thr, &corpora), accuracy(&pvf, &corpora));
    let per_corpus_same = thr.iter().zip(&pvf).all(|(a, b)| a.final_gen == b.final_gen);
    let elapsed = start.elapsed();
    let pass = corpora.len() >= 50
        && min_mode >= 0.9
        && np <= 0.8 * nt
        && at == ap
        && per_corpus_same
        && elapsed < Duration::from_secs(120);
    verdict(
        "directional nfe",
        pass,
        elapsed,
        &format!(
            "{} corpora (min mode weight {min_mode:.3}); mean NFE pvf {np:.3} vs threshold {nt:.3} (ratio {:.3}, need <= 0.8); accuracy {ap:.3} vs {at:.3}",
            corpora.len(),
            np / nt
        ),
    );
}

#[test]
fn ablation_ordering() {
    let start = Instant::now();
    let vocab = desk_vocabulary();
    let planning = desk_planning_set();
    let corpora = branched_suite(BRANCHED_SUITE_SIZE, BRANCHED_SUITE_SEED);
    let cfg = config_at_tau(&ConfigFile::default(), 0.9).unwrap().strict_blocks();
    let thr = suite_reports(&corpora, |c, o, k| decode_threshold(c, o, &vocab, k).map(|r| r.1), &cfg);
    let base_nfe = mean_nfe(&thr);
    let mut stats = Vec::new();
    for mode in [AblationMode::Random, AblationMode::Planning] {
        let (mut speed, mut acc, mut extra) = (0.0, 0.0, 0usize);
        for seed in 0..10 {
            let params = AblationParams {
                mode,
                band_lo: 0.2,
                band_hi: 0.6,
                seed,
            };
            let reports = suite_reports(
                &corpora,
                |c, o, k| decode_ablation(c, o, &planning, &vocab, k, &params).map(|r| r.1),
                &cfg,
            );
            speed += base_nfe / mean_nfe(&reports) / 10.0;
            acc += accuracy(&reports, &corpora) / 10.0;
            extra += reports
                .iter()
                .filter_map(|r| r.ablation.as_ref())
                .map(|a| a.extra_commits)
                .sum::<usize>();
        }
        stats.push((speed, acc, extra));
    }
    let [(rs, ra, re), (ps, pa, pe)] = [stats[0], stats[1]];
    let elapsed = start.elapsed();
    let pass = ps >= rs && pa >= ra && re > 0 && pe > 0 && elapsed < Duration::from_secs(180);
    verdict(
        "ablation ordering",
        pass,
        elapsed,
        &format!(
            "{} branched corpora x 10 seeds, band [0.2, 0.6]: speedup planning {ps:.4} vs random {rs:.4}, accuracy {pa:.3} vs {ra:.3}, extra commits {pe} / {re}",
            corpora.len()
        ),
    );
}

#[test]
fn termination_under_adversaries() {
    let start = Instant::now();
    let vocab = desk_vocabulary();
    let planning = desk_planning_set();
    let mut v = Vec::new();
    let mut runs = 0;
    let mut max_steps_seen = 0;
    let mut forced = 0;
    let mut pauses = 0;
    let l = 16;
    for kind in [
        Adversary::Uniform,
        Adversary::NearTie,
        Adversary::AllBelow,
        Adversary::Chaotic,
    ] {
        for seed in 0..40u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut cfg = random_cfg(&mut rng, l);
            cfg.block_size = *[1, 4, 8, 16].choose(&mut rng).unwrap();
            cfg.posterior_reuse = seed % 2 == 0;
            let oracle = AdversarialOracle {
                kind,
                vocab: vocab.len(),
                seed,
                tau_high: cfg.tau_high,
            };
            let canvas = Canvas::new(vec![], l, MASK).unwrap();
            let params = AblationParams {
                mode: AblationMode::Planning,
                band_lo: 0.1,
                band_hi: 0.6,
                seed,
            };
            let outcomes = [
                decode_static(canvas.clone(), &oracle, &vocab, &cfg.strict_blocks()),
                decode_threshold(canvas.clone(), &oracle, &vocab, &cfg.strict_blocks()),
                decode_ablation(
                    canvas.clone(),
                    &oracle,
                    &planning,
                    &vocab,
                    &cfg.strict_blocks(),
                    &params,
                ),
                decode_pvf(canvas.clone(), &oracle, &planning, &vocab, &cfg),
            ];
            for (d, out) in outcomes.into_iter().enumerate() {
                runs += 1;
                match out {
                    Ok((_, r)) => {
                        max_steps_seen = max_steps_seen.max(r.steps);
                        if r.steps > 4 * l {
                            v.push(format!("{kind:?}/{seed}/decoder {d}: {} steps", r.steps));
                        }
                        if d == 1 {
                            v.extend(check_threshold_forced(&oracle, &canvas, &cfg.strict_blocks(), &r));
                        }
                        if d == 3 {
                            forced += r.route_count(Route::Forced);
                            pauses += r.trace.iter().filter(|s| s.pause).count();
                            for e in check_pvf_trace(&oracle, &canvas, &cfg, &planning, &vocab, &r) {
                                v.push(format!("{kind:?}/{seed}: {e}"));
                            }
                        }
                    }
                    Err(e) => v.push(format!("{kind:?}/{seed}/decoder {d}: {e}")),
                }
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        "termination",
        v.is_empty(),
        elapsed,
        &format!(
            "{runs} adversarial decodes, max steps {max_steps_seen} (cap {}), {forced} PVF FORCED commits all on empty steps, {pauses} pauses; {}",
            4 * l,
            summarize(&v)
        ),
    );
}

/// Threshold decoding commits FORCED only when nothing clears `tau_high`.
fn check_threshold_forced(
    oracle: &dyn Oracle<f64>,
    start: &Canvas,
    cfg: &DecodeConfig<f64>,
    r: &RunReport<f64>,
) -> Vec<String> {
    let mut v = Vec::new();
    let mut y = start.clone();
    for step in &r.trace {
        let (_, ws, _) = reference_working_set(y.gen(), MASK, cfg.block_size, cfg.n_sparsity).unwrap();
        let m: Vec<usize> = ws.into_iter().filter(|&i| y.is_masked(i)).collect();
        let preds = query(oracle, &y, &m);
        let any_high = m.iter().any(|&i| preds.get(i).unwrap().top_prob >= cfg.tau_high);
        let has_forced = step.commits.iter().any(|c| c.route == Route::Forced);
        if has_forced && (any_high || step.commits.len() != 1) || (!has_forced && !any_high) {
            v.push(format!(
                "threshold step {}: forced {has_forced} with high-confidence {any_high}",
                step.t
            ));
        }
        if step.route == StepRoute::Forced && !has_forced {
            v.push(format!("threshold step {}: route label", step.t));
        }
        let pairs: Vec<(usize, TokenId)> = step.commits.iter().map(|c| (c.position, c.token)).collect();
        y = y.apply_commits(&pairs).unwrap();
    }
    v
}
