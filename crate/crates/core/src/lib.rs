//! Domain expert classifiers trained with domain prototype contrastive
//! learning, and simplex-weighted ensemble inference on unseen domains.
//!
//! The numeric core is generic over the floating-point [`Scalar`]; the
//! aliases at the crate root pin the `f64` instantiation used by the
//! experiment runner and the test suites.

pub mod autodiff;
pub mod error;
pub mod inference;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod trainer;

pub use error::{DdnError, Result};
pub use scalar::Scalar;

pub type Tape = autodiff::Tape<f64>;
pub type Tensor = autodiff::Tensor<f64>;
pub type Model = model::DdnModel<f64>;
pub type Bank = model::PrototypeBank<f64>;
pub type Weights = inference::SimplexWeights<f64>;
pub type Prediction = inference::Prediction<f64>;
pub type Outcome = trainer::TrainOutcome<f64>;
