//! Regression with predictive uncertainty: sparse variational Gaussian
//! processes and mixture density networks, plus training loops, synthetic
//! data and density plots.

pub mod datagen;
pub mod error;
pub mod kernels;
pub mod mdn;
pub mod modelfile;
pub mod numerics;
pub mod predplot;
pub mod svgp;
pub mod training;

pub use datagen::{Dataset, ModeSpec, Standardizer};
pub use error::{Error, Result};
pub use mdn::{MdnParams, MixtureParams, PredictionStrategy};
pub use modelfile::{Model, ModelFile, TrainingMetadata};
pub use numerics::{Matrix, RngStream};
pub use svgp::{GaussianPrediction, SvgpState};
pub use training::{TrainConfig, TrainHistory};
