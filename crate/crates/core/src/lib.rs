//! Decoding engine for masked-diffusion language models.
//!
//! The engine talks to a model only through the [`oracle::Oracle`] trait and
//! offers four decoders over it: greedy static decoding, confidence-threshold
//! parallel decoding, a one-extra-token ablation, and Plan-Verify-Fill
//! ([`decoders::decode_pvf`]), which commits structural anchor tokens early
//! after checking that they leave the model's confident predictions intact,
//! and otherwise falls back to verified left-to-right drafts.
//!
//! Everything is generic over the probability scalar ([`Probability`]);
//! `f64` is the default and `Ratio<i64>` gives exact arithmetic.
//!
//! ```
//! use pvf_core::bench::{desk_planning_set, desk_vocabulary, gen_structured_corpus, StructuredCorpusSpec};
//! use pvf_core::oracle::Conditioning;
//! use pvf_core::{decode_pvf, decode_threshold, Canvas, Config64};
//!
//! let corpus = gen_structured_corpus(&StructuredCorpusSpec {
//!     num_templates: 2,
//!     template_length: 8,
//!     scaffold_positions: vec![0, 2, 3, 5, 6],
//!     content_positions: vec![1, 4],
//!     weights: vec![0.95, 0.05],
//!     rng_seed: 1,
//!     eos_at: Some(7),
//! })?;
//! let vocab = desk_vocabulary();
//! let oracle = corpus.oracle_with(Conditioning::NearestBackoff);
//! let cfg = Config64 { gen_length: 8, ..Config64::desk_default() };
//! let canvas = Canvas::new(corpus.prompt.clone(), 8, vocab.mask_id())?;
//!
//! let (_, pvf) = decode_pvf(canvas.clone(), &oracle, &desk_planning_set(), &vocab, &cfg)?;
//! let (_, threshold) = decode_threshold(canvas, &oracle, &vocab, &cfg.strict_blocks())?;
//! assert_eq!(pvf.final_gen, corpus.target);
//! assert!(pvf.nfe <= threshold.nfe);
//! # Ok::<(), Box<dyn std::error::Error>>(())
//! ```

// Negated comparisons (`!(a < b)`) are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod decoders;
pub mod domain;
pub mod metrics;
pub mod oracle;
pub mod scalar;
pub mod sched;
pub mod vocabplan;

pub use decoders::{
    decode_ablation, decode_pvf, decode_static, decode_threshold, AblationMode, AblationParams, DecodeError, StepRoute,
    StepTrace, Strategy,
};
pub use domain::{Canvas, CommitRecord, DecodeConfig, Prediction, Route, TokenId, Vocabulary};
pub use metrics::RunReport;
pub use oracle::{Oracle, OracleError, OracleRequest, OracleResponse};
pub use scalar::Probability;
pub use vocabplan::{build_planning_set, PlanningSet};

/// Exact rational probabilities.
pub type Exact = num_rational::Ratio<i64>;

pub type Prediction64 = Prediction<f64>;
pub type PredictionExact = Prediction<Exact>;
pub type Config64 = DecodeConfig<f64>;
pub type ConfigExact = DecodeConfig<Exact>;
pub type Report64 = RunReport<f64>;
pub type ReportExact = RunReport<Exact>;
pub type EnumOracle64 = oracle::EnumerationOracle<f64>;
pub type EnumOracleExact = oracle::EnumerationOracle<Exact>;
pub type Distribution64 = oracle::ExplicitDistribution<f64>;
pub type DistributionExact = oracle::ExplicitDistribution<Exact>;
