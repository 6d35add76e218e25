pub mod cli;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod inference;
pub mod lbfgs;
pub mod masking;
pub mod plot;
pub mod ppca;
pub mod priors;
pub mod record;
pub mod scalar;
pub mod synth;

pub use error::{Error, Result};

pub type Vec3d = geometry::Vec3<f64>;
pub type Dipole = geometry::DipoleState<f64>;
pub type Layout = geometry::ElectrodeLayout<f64>;
pub type Priors = priors::ElectrodePriorSet<f64>;
pub type DipoleFitConfig = inference::FitConfig<f64>;
pub type DipoleFit = inference::FitResult<f64>;
