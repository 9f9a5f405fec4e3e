//! Temporal relation classification harness: corpus handling, prompt
//! protocols for generative models, an encoder-based classifier, KernelShap
//! attribution and evaluation.

pub mod attribution;
pub mod commands;
pub mod corpus;
pub mod encoder;
pub mod evaluation;
pub mod fixtures;
pub mod inference;
pub mod prompting;
pub mod scalar;

pub use scalar::Scalar;

pub type ClassifierHeadF64 = encoder::ClassifierHead<f64>;
pub type ClassifierHeadF32 = encoder::ClassifierHead<f32>;
pub type StubProviderF64 = encoder::StubProvider<f64>;
pub type StubProviderF32 = encoder::StubProvider<f32>;
pub type TrainOutcomeF64 = encoder::TrainOutcome<f64>;
pub type AttributionResultF64 = attribution::AttributionResult<f64>;
pub type AttributionResultF32 = attribution::AttributionResult<f32>;
pub type ClassScoreF64 = evaluation::ClassScore<f64>;
