//! Energy-adaptive mixup, frame-level attention pooling and a four-term
//! multi-loss for utterance-level speech emotion recognition.
//!
//! Numeric code is generic over [`scalar::Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision for callers that don't care.

pub mod checks;
pub mod cli;
pub mod data_io;
pub mod eam;
pub mod losses;
pub mod nn;
pub mod scalar;
pub mod signal;
pub mod synthetic;
pub mod trainer;

pub type Matrix32 = nn::Matrix<f32>;
pub type Matrix64 = nn::Matrix<f64>;
pub type ModelParams32 = trainer::ModelParams<f32>;
pub type ModelParams64 = trainer::ModelParams<f64>;
pub type Example32 = trainer::Example<f32>;
pub type Example64 = trainer::Example<f64>;
pub type Centers32 = losses::Centers<f32>;
pub type Centers64 = losses::Centers<f64>;
