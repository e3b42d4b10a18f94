//! Numerical laboratory for Littlewood-Paley-Stein functionals and
//! multiplicative Riesz-type inequalities on finite sub-Markovian models.

pub mod corpus;
pub mod error;
pub mod functionals;
pub mod gallery;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod quadrature;
pub mod rbound;
pub mod scalar;
pub mod spectral;

pub use error::{LabError, Result};
pub use scalar::Real;

pub type Model64 = model::Model<f64>;
pub type Model32 = model::Model<f32>;
pub type Generator64 = model::Generator<f64>;
pub type Generator32 = model::Generator<f32>;
pub type Spectral64 = spectral::SpectralDecomposition<f64>;
pub type Spectral32 = spectral::SpectralDecomposition<f32>;
pub type Carre64 = model::CarreOperator<f64>;
pub type Carre32 = model::CarreOperator<f32>;
pub type Instance64 = gallery::Instance<f64>;
pub type Instance32 = gallery::Instance<f32>;
