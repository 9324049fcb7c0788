//! Instrumented training harness for measuring MLP activation sparsity in
//! decoder-only ReLU transformers.

pub mod tensor;
pub mod model;
pub mod metrics;
pub mod harness;
pub mod interventions;
