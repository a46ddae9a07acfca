//! Numerical lab for stochastic Vlasov-Poisson-Fokker-Planck systems on the
//! periodic torus.

pub mod ensemble;
pub mod error;
pub mod eulerian;
pub mod fft;
pub mod hypo;
pub mod field_solver;
pub mod lagrangian;
pub mod noise_model;
pub mod phase_space;
pub mod picard;
pub mod rng;

pub use error::{Error, Result};
