//! The model interface and its implementations.
//!
//! An [`Oracle`] answers batched top-1 queries over canvas states. Three
//! implementations ship here: exact enumeration over an explicit
//! distribution, replay from a recorded table, and a client for the
//! newline-delimited JSON bridge protocol (see `docs/bridge-protocol.md`).

mod bridge;
mod enumeration;
mod table;

pub use bridge::{
    bridge_connect, serve_connection, BridgeOracle, Frame, ServeOptions, ServerInfo, WirePrediction, DEFAULT_TIMEOUT,
};
pub use enumeration::{Conditioning, EnumerationOracle, ExplicitDistribution};
pub use table::{load_table_oracle, ForwardCost, RecordingOracle, TableEntry, TableOracle};

use crate::domain::{Canvas, Prediction};
use crate::scalar::Probability;

/// A batch of canvas states with the positions (generation-relative) to predict in each.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleRequest {
    pub states: Vec<Canvas>,
    pub query_positions: Vec<Vec<usize>>,
    pub want_full_dist: bool,
}

impl OracleRequest {
    pub fn single(state: Canvas, positions: Vec<usize>) -> Self {
        Self {
            states: vec![state],
            query_positions: vec![positions],
            want_full_dist: false,
        }
    }

    pub fn validate(&self) -> Result<(), OracleError> {
        if self.states.is_empty() {
            return Err(OracleError::InvalidRequest("empty batch".into()));
        }
        if self.states.len() != self.query_positions.len() {
            return Err(OracleError::InvalidRequest(format!(
                "{} states but {} position lists",
                self.states.len(),
                self.query_positions.len()
            )));
        }
        for (s, (state, positions)) in self.states.iter().zip(&self.query_positions).enumerate() {
            if let Some(&p) = positions.iter().find(|&&p| !state.is_masked(p)) {
                return Err(OracleError::InvalidRequest(format!(
                    "state {s}: query position {p} is not masked"
                )));
            }
        }
        Ok(())
    }
}

/// Predictions aligned 1:1 with the request's query positions.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleResponse<P> {
    pub predictions: Vec<Vec<Prediction<P>>>,
    /// Underlying model forwards represented by this call.
    pub forward_cost: u64,
}

/// Model interface `P(. | state)`. Implementations must be safe to call
/// concurrently from independent decode sessions.
pub trait Oracle<P: Probability>: Send + Sync {
    fn predict(&self, request: &OracleRequest) -> Result<OracleResponse<P>, OracleError>;
}

impl<P: Probability, O: Oracle<P> + ?Sized> Oracle<P> for &O {
    fn predict(&self, request: &OracleRequest) -> Result<OracleResponse<P>, OracleError> {
        (**self).predict(request)
    }
}

impl<P: Probability, O: Oracle<P> + ?Sized> Oracle<P> for Box<O> {
    fn predict(&self, request: &OracleRequest) -> Result<OracleResponse<P>, OracleError> {
        (**self).predict(request)
    }
}

impl<P: Probability, O: Oracle<P> + ?Sized> Oracle<P> for std::sync::Arc<O> {
    fn predict(&self, request: &OracleRequest) -> Result<OracleResponse<P>, OracleError> {
        (**self).predict(request)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum OracleError {
    #[error("no support sequence matches the resolved positions of state {state}")]
    InconsistentState { state: usize },
    #[error("no recorded prediction for fingerprint {fingerprint} at position {position}")]
    MissingEntry { fingerprint: String, position: usize },
    #[error("bridge protocol error: {0}")]
    Protocol(String),
    #[error("bridge timed out")]
    Timeout,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("table: {0}")]
    Table(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
