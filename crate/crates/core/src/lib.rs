//! Distributed model predictive control for a team of legged manipulators carrying
//! one rigidly grasped payload.
//!
//! The joint optimal control problem is split into a payload subproblem and one
//! subproblem per robot. They agree on the interaction wrenches through consensus
//! ADMM, and each subproblem is solved by a Riccati-based SQP. A centralized
//! baseline solves the undecomposed problem with the same solver, and a
//! non-physical simulator closes the loop for experiments.

pub mod admm;
pub mod centralized;
pub mod cli;
pub mod config;
pub mod constraints;
pub mod cost;
pub mod gait;
pub mod model;
pub mod problem;
pub mod sim;
pub mod sqp;
pub mod stats;

pub use nalgebra;
