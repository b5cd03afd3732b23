//! Desk-scale corpora and experiment drivers.

mod corpus;
mod harness;

pub use corpus::{
    branched_suite, default_suite, desk_planning_set, desk_vocabulary, gen_branched_corpus, gen_structured_corpus,
    BranchedCorpusSpec, Corpus, CorpusFile, SpecError, StructuredCorpusSpec, SupportEntry, EOS, MASK, PAD,
};
pub use harness::{
    config_at_tau, run_matrix, run_one, run_with_oracle, AblationGrid, MatrixError, MatrixResult, MatrixRow,
    ParetoPoint, RunSpec, SuiteSpec, SweepError, SweepGrid,
};

/// Size and seed of the shipped default suite.
pub const DEFAULT_SUITE_SIZE: usize = 60;
pub const DEFAULT_SUITE_SEED: u64 = 2024;
pub const BRANCHED_SUITE_SIZE: usize = 40;
pub const BRANCHED_SUITE_SEED: u64 = 77;
