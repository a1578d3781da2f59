//! Learning stable Koopman models of nonlinear dynamical systems.

pub mod certify;
pub mod data;
pub mod embed;
pub mod error;
pub mod linalg;
pub mod params;
pub mod scalar;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

// Double-precision instantiations used by the CLI and most callers.
pub type Matrix = linalg::Mat<f64>;
pub type Model = embed::KoopmanModel<f64>;
pub type Traj = data::Trajectory<f64>;
pub type DataScaler = data::Scaler<f64>;
pub type Tape64 = tape::Tape<f64>;
pub type Adam = train::AdamState<f64>;
pub type Fit = train::FitOutcome<f64>;
