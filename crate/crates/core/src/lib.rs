//! Purified quantum random oracle simulator with a heavy-query learner, an
//! active attack on classical-communication-one-quantum-message key
//! agreement, and an empirical compatibility checker.

pub mod algebra;
pub mod attack;
pub mod circuit;
pub mod cli;
pub mod error;
pub mod learner;
pub mod oracle;
pub mod pcc;
pub mod protocol;
pub mod qstate;
pub mod zoo;

pub use error::{Error, Result};

/// Dense complex matrix used for gates, Fourier transforms and density operators.
pub type Matrix = nalgebra::DMatrix<num_complex::Complex64>;
