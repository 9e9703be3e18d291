//! Rigid-body models of the payload and the robots, plus the implicit integrator
//! and its linearization.

mod dynamics;
mod integrator;
pub mod rotation;

pub use dynamics::*;
pub use integrator::*;
pub use rotation::{euler_rate_map, rotation, world_inertia};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("euler-angle singularity: pitch {pitch} is too close to +-pi/2")]
    Singularity { pitch: f64 },
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("implicit step did not converge after {iterations} iterations (residual {residual:e})")]
    Integration { iterations: usize, residual: f64 },
    #[error("implicit step Jacobian is singular")]
    Linearization,
}
