//! Emotion-recognition prompt benchmark.
//!
//! The pipeline renders prompts ([`prompt`]), submits them to model backends
//! ([`gateway`]), normalizes the replies into labels ([`normalize`]), scores
//! them ([`metrics`]) and writes reports ([`report`]). [`runner`] drives the
//! whole grid from a JSON configuration.

pub mod dataset;
pub mod gateway;
pub mod metrics;
pub mod normalize;
pub mod prompt;
pub mod report;
pub mod runner;
pub mod taxonomy;

pub use dataset::{LabelFormat, Sample, SplitSpec, SplitStrategy};
pub use gateway::{BackendConfig, Gateway, Protocol, RetryPolicy};
pub use metrics::{Averaging, ConfusionMatrix, DeltaKind, MetricSet, ScoringMode};
pub use normalize::{Normalizer, OutcomeKind, ParseOutcome};
pub use prompt::{DialectKind, ModelDialect, PromptEngine, PromptStrategy, RenderedPrompt};
pub use runner::{ExperimentPlan, RunConfig, RunRecord};
pub use taxonomy::{scheme_for, Emotion, GroupingScheme, Involution, LabelDistribution};
