//! Discrete-time decoherence of an open quantum system coupled to a bandlimited
//! bosonic chain environment.
//!
//! The pipeline runs in stages:
//!
//! 1. [`chain_env`] propagates the one-particle wavepacket of the environment chain.
//! 2. [`significance`] integrates it into the significance matrices.
//! 3. [`mode_streams`] sweeps those matrices to extract incoming and outgoing modes
//!    together with the piecewise effective Hamiltonian.
//! 4. [`fock_dynamics`] evolves the system plus relevant modes in a truncated Fock register.
//! 5. [`jump_monte_carlo`] unravels detachments into quantum-jump histories.
//!
//! [`exact_reference`] and [`classical_sampling`] provide independent oracles.

pub mod chain_env;
pub mod classical_sampling;
pub mod error;
pub mod exact_reference;
pub mod fock;
pub mod fock_dynamics;
pub mod jump_monte_carlo;
pub mod linalg;
pub mod mode_streams;
mod ode;
pub mod schedule_format;
pub mod significance;

pub use error::{Error, Result};

/// Complex scalar used throughout.
pub type C64 = num_complex::Complex64;
/// Dense complex matrix.
pub type CMatrix = nalgebra::DMatrix<C64>;
/// Dense complex column vector.
pub type CVector = nalgebra::DVector<C64>;
