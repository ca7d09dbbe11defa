pub mod baselines;
pub mod cluster;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod nn;
pub mod par;
pub mod policy;
pub mod seeding;
pub mod styles;
pub mod trafficsim;

pub use error::{DsdpError, Result};
