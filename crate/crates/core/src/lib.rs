//! Local causal explanations for black-box classifiers.
//!
//! Given a model, training data and one observation, the engine produces a
//! local causal equation fitted on a synthetic neighbourhood, the
//! counterfactual instances that equation must support, per-point fidelity
//! errors, and a certificate stating whether the equation is a minimal
//! interventionist explanation of the prediction.

pub mod counterfactual;
pub mod error;
pub mod explain;
mod linalg;
pub mod model;
pub mod sampling;
pub mod report;
pub mod schema;
pub mod surrogate;
pub mod woodward;

pub use error::{Error, Result};
pub use explain::{explain, EngineConfig, ExplainError, Stage};
pub use report::{ExplanationReport, Level};
