//! Solver and verification suite for first-order mean field games with local
//! coupling on the flat torus.

pub mod checker;
pub mod cli;
pub mod error;
pub mod functionals;
pub mod grid;
pub mod io;
pub mod model;
pub mod nash;
pub mod solver;

pub use error::{Error, Result};
