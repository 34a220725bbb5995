//! Numerical toolkit for the long-time dynamics of a small quantum system
//! weakly coupled to a Gaussian bosonic bath.
//!
//! The crate builds the Markov (Davies) generator from bath correlation
//! functions, evaluates truncated Dyson expansions of the reduced dynamics
//! with explicit error certificates, resums the non-Markovian corrections as
//! a polymer expansion over macroscopic time cells, and cross-checks
//! everything against a brute-force finite-bath simulator.
//!
//! All superoperators use the column-stacking vectorization convention
//! documented in [`linalg`].

pub mod bath;
pub mod cli;
pub mod config;
pub mod dyson;
pub mod lindblad;
pub mod error;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod polymer;
pub mod qmc;
pub mod quad;
pub mod special;

pub use error::{Error, Result};

/// Binary entry point.
pub fn cli_main() {
    std::process::exit(cli::main_entry());
}
