//! Desk-scale laboratory for long-context in-context learning experiments.
//!
//! The pieces, bottom-up: dense tensors with masked softmax ([`tensor`]),
//! example-block attention masks ([`masks`]), a small analytically
//! constructed attention-only model ([`model`]), datasets and the synthetic
//! signature task ([`datasets`]), prompt rendering and tokenization
//! ([`prompting`]), demonstration selection ([`selection`]), label decoding
//! ([`decoding`]), metrics ([`metrics`]) and the experiment driver
//! ([`harness`]).

pub mod datasets;
pub mod decoding;
pub mod harness;
pub mod masks;
pub mod metrics;
pub mod model;
pub mod prompting;
pub mod selection;
pub mod tensor;

pub use harness::{run_experiment, ExperimentConfig, ExperimentOutcome, HarnessError};
