use std::collections::BTreeMap;

use super::TokenId;
use crate::scalar::{gt, Probability};

/// Top-1 prediction at one masked generation position.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<P> {
    pub position: usize,
    pub top_token: TokenId,
    pub top_prob: P,
    pub dist: Option<Vec<P>>,
}

impl<P: Probability> Prediction<P> {
    pub fn top1(position: usize, top_token: TokenId, top_prob: P) -> Self {
        Self {
            position,
            top_token,
            top_prob,
            dist: None,
        }
    }

    /// Builds a prediction from a full distribution. Ties go to the lowest
    /// token index.
    pub fn from_dist(position: usize, dist: Vec<P>) -> Self {
        let (top_token, top_prob) = argmax(&dist);
        Self {
            position,
            top_token,
            top_prob,
            dist: Some(dist),
        }
    }

    pub fn without_dist(mut self) -> Self {
        self.dist = None;
        self
    }

    /// Checks the distribution invariants with `tol` slack on the sum.
    pub fn is_consistent(&self, tol: f64) -> bool {
        let p = self.top_prob.as_f64();
        if !(0.0..=1.0).contains(&p) {
            return false;
        }
        match &self.dist {
            None => true,
            Some(d) => {
                let sum: f64 = d.iter().map(|x| x.as_f64()).sum();
                let (tok, prob) = argmax(d);
                d.iter().all(|x| x.as_f64() >= 0.0)
                    && (sum - 1.0).abs() <= tol
                    && tok == self.top_token
                    && prob == self.top_prob
            }
        }
    }
}

/// Least index attaining the maximum; `(0, 0)` for an empty slice.
pub fn argmax<P: Probability>(dist: &[P]) -> (TokenId, P) {
    let mut best = (0 as TokenId, P::zero());
    for (i, &p) in dist.iter().enumerate() {
        if i == 0 || gt(p, best.1) {
            best = (i as TokenId, p);
        }
    }
    best
}

/// Predictions conditioned on one canvas state, keyed by generation position.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior<P> {
    preds: BTreeMap<usize, Prediction<P>>,
}

impl<P> Default for Posterior<P> {
    fn default() -> Self {
        Self { preds: BTreeMap::new() }
    }
}

impl<P: Probability> Posterior<P> {
    pub fn new(preds: impl IntoIterator<Item = Prediction<P>>) -> Self {
        Self {
            preds: preds.into_iter().map(|p| (p.position, p)).collect(),
        }
    }

    pub fn get(&self, pos: usize) -> Option<&Prediction<P>> {
        self.preds.get(&pos)
    }

    pub fn covers(&self, positions: &[usize]) -> bool {
        positions.iter().all(|p| self.preds.contains_key(p))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Prediction<P>> {
        self.preds.values()
    }

    pub fn len(&self) -> usize {
        self.preds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.preds.is_empty()
    }

    /// Sum of top-1 confidences over `positions` that have a prediction.
    pub fn total_confidence(&self, positions: &[usize]) -> P {
        positions
            .iter()
            .filter_map(|p| self.preds.get(p))
            .fold(P::zero(), |acc, p| acc + p.top_prob)
    }

    /// Retains only predictions at `positions`.
    pub fn restricted(&self, positions: &[usize]) -> Self {
        Self {
            preds: positions
                .iter()
                .filter_map(|p| self.preds.get(p).map(|x| (*p, x.clone())))
                .collect(),
        }
    }
}

impl<P: Probability> FromIterator<Prediction<P>> for Posterior<P> {
    fn from_iter<I: IntoIterator<Item = Prediction<P>>>(iter: I) -> Self {
        Self::new(iter)
    }
}
