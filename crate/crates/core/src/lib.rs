//! Control-oriented optimal sensor placement for a linear advection–diffusion
//! control problem whose source term is inferred from sensor data.

pub mod bayes;
pub mod config;
pub mod control;
pub mod counter;
pub mod dense;
pub mod error;
pub mod fem;
pub mod heat;
pub mod linalg;
pub mod lowrank;
pub mod oed;
pub mod pipeline;
pub mod problem;
pub mod uq;

pub use counter::SolveCounter;
pub use error::{Error, Result};
