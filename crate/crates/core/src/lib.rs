//! Zero-input intent prediction: synthetic multi-modal signals, preprocessing,
//! contrastive fusion, a variational transformer predictor, PPO adaptation,
//! an edge cost model and information-theoretic diagnostics.
//!
//! Numerical code is generic over [`scalar::Scalar`]; the aliases below fix
//! the common precisions.

pub mod adapt;
pub mod attention;
pub mod autodiff;
pub mod edgecost;
pub mod error;
pub mod fusion;
pub mod infomet;
pub mod matrix;
pub mod params;
pub mod pipeline;
pub mod predictor;
pub mod preprocess;
pub mod rng;
pub mod scalar;
pub mod signals;

pub use error::{Result, ZiaError};

pub type Matrix64 = matrix::Matrix<f64>;
pub type Matrix32 = matrix::Matrix<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type Tape32 = autodiff::Tape<f32>;
pub type ParamSet64 = params::ParamSet<f64>;
pub type ParamSet32 = params::ParamSet<f32>;
pub type EpisodeTrace64 = signals::EpisodeTrace<f64>;
pub type EmbeddingSequence64 = fusion::EmbeddingSequence<f64>;
pub type VariationalPosterior64 = predictor::VariationalPosterior<f64>;
