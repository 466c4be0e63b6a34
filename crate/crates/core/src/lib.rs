//! Allen-Cahn solution spaces on flat tori: discretization, Morse indices,
//! branch continuation, gradient flow and Z2 Morse homology.
//!
//! The sign convention is fixed throughout: the energy is
//! `E(u) = ∫ ε/2 |∇u|² + F(u) dVol`, the residual is its gradient
//! `R(u) = -εΔ_g u + f(u)`, the Hessian is `H(u) = -εΔ_g + f'(u)`, and the
//! Morse index counts negative eigenvalues of `H`.

pub mod cli;
pub mod error;
pub mod flow;
pub mod grid;
pub mod homology;
pub mod linalg;
pub mod operator;
pub mod potential;
pub mod solver;
pub mod spectrum;

pub use error::{Error, Result};
pub use grid::{MetricField, ScalarField, SymTensorField, TorusGrid};
pub use operator::Problem;
pub use potential::Potential;
