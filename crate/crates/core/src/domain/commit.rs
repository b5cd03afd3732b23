use serde::{Deserialize, Serialize};

use super::{Canvas, DomainError, TokenId};

/// Why a token was committed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Route {
    /// Cleared `tau_high` under the previous state.
    HighConf,
    /// Verified planning anchor.
    Planning,
    /// Accepted AR fallback draft.
    ArFallback,
    /// Committed below threshold without verification: progress guard,
    /// greedy baseline, or ablation exploration.
    Forced,
}

impl Route {
    pub const ALL: [Route; 4] = [Route::HighConf, Route::Planning, Route::ArFallback, Route::Forced];

    pub fn as_str(self) -> &'static str {
        match self {
            Route::HighConf => "HIGH_CONF",
            Route::Planning => "PLANNING",
            Route::ArFallback => "AR_FALLBACK",
            Route::Forced => "FORCED",
        }
    }
}

/// One committed token with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct CommitRecord<P> {
    pub step: usize,
    pub position: usize,
    pub token: TokenId,
    pub route: Route,
    pub confidence: P,
}

/// Rebuilds a final generation region from commit records over an all-mask
/// canvas, then pads everything right of `truncated_at`.
pub fn replay_commits<P>(
    gen_length: usize,
    mask_id: TokenId,
    pad_id: TokenId,
    commits: &[CommitRecord<P>],
    truncated_at: Option<usize>,
) -> Result<Vec<TokenId>, DomainError> {
    let pairs: Vec<(usize, TokenId)> = commits.iter().map(|c| (c.position, c.token)).collect();
    let canvas = Canvas::new(vec![], gen_length, mask_id)?.apply_commits(&pairs)?;
    let mut gen = canvas.gen().to_vec();
    if let Some(at) = truncated_at {
        for slot in gen.iter_mut().skip(at + 1) {
            if *slot == mask_id {
                *slot = pad_id;
            }
        }
    }
    Ok(gen)
}
