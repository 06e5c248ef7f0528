//! Preference-pair bridging, confidence-weighted token rewards, and the
//! direct preference objectives built on them, on tiny autoregressive models.

pub mod analysis;
pub mod bridging;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod model;
pub mod objectives;
pub mod scalar;
pub mod synthetic;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision policy model.
pub type PolicyModel = model::Model<f64>;
pub type PolicyModelF32 = model::Model<f32>;
pub type ReferenceModel = model::FrozenModel<f64>;
pub type ScoreTable64 = model::ScoreTable<f64>;
pub type ObjectiveConfig64 = objectives::ObjectiveConfig<f64>;
pub type LossBreakdown64 = objectives::LossBreakdown<f64>;
