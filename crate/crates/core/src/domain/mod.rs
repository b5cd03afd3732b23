//! Domain types shared by every decoder: vocabulary, canvas state,
//! predictions, configuration and commit provenance.

mod canvas;
mod commit;
mod config;
mod prediction;
mod vocab;

pub use canvas::Canvas;
pub use commit::{replay_commits, CommitRecord, Route};
pub use config::{ArVerifyMode, ConfigFile, DecodeConfig, NfeMode};
pub use prediction::{argmax, Posterior, Prediction};
pub use vocab::Vocabulary;

/// Dense token index into a [`Vocabulary`].
pub type TokenId = u32;

#[derive(Debug, thiserror::Error)]
pub enum DomainError {
    #[error("position {position} already holds token {existing}")]
    Overwrite { position: usize, existing: TokenId },
    #[error("attempted to commit the mask sentinel at position {position}")]
    MaskWrite { position: usize },
    #[error("position {position} outside generation region of length {len}")]
    PositionOutOfRange { position: usize, len: usize },
    #[error("prompt contains the mask sentinel")]
    MaskInPrompt,
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
