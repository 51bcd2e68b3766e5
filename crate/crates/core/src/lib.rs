//! Simulated annotators, crowd aggregation, recalibration and calibration
//! metrics for prevalence-biased labelling.
//!
//! The modules follow the data: [`corpus`] builds the items, [`sim`] turns
//! annotator profiles into [`judgments`], [`aggregation`] resamples crowds,
//! [`recalibration`] fits linear-in-log-odds corrections, [`metrics`] scores
//! everything and [`downstream`] trains a small model on the crowd labels.
//! [`study`] wires the whole thing together from one config.

/// Library version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod aggregation;
pub mod corpus;
pub mod downstream;
pub mod judgments;
pub mod math;
pub mod metrics;
pub mod recalibration;
pub mod seed;
pub mod sim;
pub mod study;

pub use aggregation::{classify, generate_replicates, ResamplingPlan, Sampling, WocDataset, WocVariant};
pub use corpus::{build_corpus, Corpus, CorpusSpec, Item, ItemId, ItemSet, SourceId};
pub use judgments::{AnnotatorId, Condition, Judgment, JudgmentTable, ResponseMode};
pub use metrics::{ece, error_rates, CalibrationCurve, ConfidenceInterval, EceConfig, ErrorRates};
pub use recalibration::{fit_llo_mle, llo_transform, ClampPolicy, LloFit, LloParams};

// The guide's chapters run as doctests so their snippets stay current.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    pub struct Overview;
    #[doc = include_str!("../../../book/src/simulation.md")]
    pub struct Simulation;
    #[doc = include_str!("../../../book/src/aggregation.md")]
    pub struct Aggregation;
    #[doc = include_str!("../../../book/src/recalibration.md")]
    pub struct Recalibration;
    #[doc = include_str!("../../../book/src/metrics.md")]
    pub struct Metrics;
    #[doc = include_str!("../../../book/src/downstream.md")]
    pub struct Downstream;
    #[doc = include_str!("../../../book/src/studies.md")]
    pub struct Studies;
}
