use crate::domain::{Canvas, Prediction, TokenId};
use crate::scalar::Probability;

use super::{Oracle, OracleError, OracleRequest, OracleResponse};

/// A finite weighted set of complete generation regions. Weights are
/// normalized to sum to one on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplicitDistribution<P> {
    gen_length: usize,
    vocab_size: usize,
    mask_id: TokenId,
    support: Vec<(Vec<TokenId>, P)>,
}

impl<P: Probability> ExplicitDistribution<P> {
    pub fn new(vocab_size: usize, mask_id: TokenId, support: Vec<(Vec<TokenId>, P)>) -> Result<Self, OracleError> {
        let bad = |m: String| Err(OracleError::InvalidDistribution(m));
        let Some(gen_length) = support.first().map(|(s, _)| s.len()) else {
            return bad("empty support".into());
        };
        for (i, (seq, w)) in support.iter().enumerate() {
            if seq.len() != gen_length {
                return bad(format!("sequence {i} has length {} != {gen_length}", seq.len()));
            }
            if seq.contains(&mask_id) {
                return bad(format!("sequence {i} contains the mask id"));
            }
            if let Some(t) = seq.iter().find(|&&t| t as usize >= vocab_size) {
                return bad(format!("sequence {i} holds token {t} outside vocabulary"));
            }
            if !(*w > P::zero()) {
                return bad(format!("sequence {i} has non-positive weight"));
            }
        }
        let total: P = support.iter().map(|(_, w)| *w).sum();
        let support = support.into_iter().map(|(s, w)| (s, w / total)).collect();
        Ok(Self {
            gen_length,
            vocab_size,
            mask_id,
            support,
        })
    }

    pub fn gen_length(&self) -> usize {
        self.gen_length
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn mask_id(&self) -> TokenId {
        self.mask_id
    }

    pub fn support(&self) -> &[(Vec<TokenId>, P)] {
        &self.support
    }

    /// Highest-weight sequence; earliest listed wins ties.
    pub fn mode(&self) -> &[TokenId] {
        let mut best = &self.support[0];
        for entry in &self.support[1..] {
            if crate::scalar::gt(entry.1, best.1) {
                best = entry;
            }
        }
        &best.0
    }

    fn agreement(seq: &[TokenId], gen: &[TokenId], mask_id: TokenId) -> (usize, bool) {
        let mut agree = 0;
        let mut all = true;
        for (&s, &g) in seq.iter().zip(gen) {
            if g == mask_id {
                continue;
            }
            if s == g {
                agree += 1;
            } else {
                all = false;
            }
        }
        (agree, all)
    }
}

/// What the enumeration oracle does when no support sequence matches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Conditioning {
    /// Fail with [`OracleError::InconsistentState`].
    #[default]
    Strict,
    /// Condition on the sequences agreeing with the most resolved positions.
    NearestBackoff,
}

/// Exact conditional `P(y_i = w | resolved positions)` computed by summing
/// support weights. Reports a forward cost of one per call.
#[derive(Debug, Clone)]
pub struct EnumerationOracle<P> {
    dist: ExplicitDistribution<P>,
    conditioning: Conditioning,
}

impl<P: Probability> EnumerationOracle<P> {
    pub fn new(dist: ExplicitDistribution<P>) -> Self {
        Self {
            dist,
            conditioning: Conditioning::Strict,
        }
    }

    pub fn with_conditioning(mut self, conditioning: Conditioning) -> Self {
        self.conditioning = conditioning;
        self
    }

    pub fn distribution(&self) -> &ExplicitDistribution<P> {
        &self.dist
    }

    fn matching(&self, state: &Canvas, index: usize) -> Result<Vec<usize>, OracleError> {
        let gen = state.gen();
        let scored: Vec<(usize, bool)> = self
            .dist
            .support
            .iter()
            .map(|(seq, _)| ExplicitDistribution::<P>::agreement(seq, gen, self.dist.mask_id))
            .collect();
        let exact: Vec<usize> = (0..scored.len()).filter(|&i| scored[i].1).collect();
        if !exact.is_empty() {
            return Ok(exact);
        }
        match self.conditioning {
            Conditioning::Strict => Err(OracleError::InconsistentState { state: index }),
            Conditioning::NearestBackoff => {
                let best = scored.iter().map(|s| s.0).max().unwrap_or(0);
                Ok((0..scored.len()).filter(|&i| scored[i].0 == best).collect())
            }
        }
    }

    fn predict_state(
        &self,
        state: &Canvas,
        index: usize,
        positions: &[usize],
        full: bool,
    ) -> Result<Vec<Prediction<P>>, OracleError> {
        if state.len() != self.dist.gen_length {
            return Err(OracleError::InvalidRequest(format!(
                "state {index} has generation length {} but the distribution has {}",
                state.len(),
                self.dist.gen_length
            )));
        }
        let matching = self.matching(state, index)?;
        let total: P = matching.iter().map(|&i| self.dist.support[i].1).sum();
        positions
            .iter()
            .map(|&pos| {
                let mut mass = vec![P::zero(); self.dist.vocab_size];
                for &i in &matching {
                    let (seq, w) = &self.dist.support[i];
                    mass[seq[pos] as usize] = mass[seq[pos] as usize] + *w;
                }
                let dist: Vec<P> = mass.into_iter().map(|m| m / total).collect();
                let pred = Prediction::from_dist(pos, dist);
                Ok(if full { pred } else { pred.without_dist() })
            })
            .collect()
    }
}

impl<P: Probability> Oracle<P> for EnumerationOracle<P> {
    fn predict(&self, request: &OracleRequest) -> Result<OracleResponse<P>, OracleError> {
        request.validate()?;
        let predictions = request
            .states
            .iter()
            .zip(&request.query_positions)
            .enumerate()
            .map(|(i, (state, positions))| self.predict_state(state, i, positions, request.want_full_dist))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(OracleResponse {
            predictions,
            forward_cost: 1,
        })
    }
}
