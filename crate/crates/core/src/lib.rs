//! First-passage functionals of Ornstein-Uhlenbeck processes driven by compound
//! Poisson jumps with two-sided exponential-mixture laws.
//!
//! Eigenfunctions of the generator are built as contour integrals of an algebraic
//! kernel; solving small linear systems for their coefficients yields ruin
//! probabilities, the joint Laplace transform of the undershoot, and the
//! probability of creeping across the level. A path simulator provides an
//! independent check.

pub mod cli;
pub mod contour;
pub mod eigensystem;
pub mod kernel;
pub mod model;
pub mod quadrature;
pub mod ruin;
pub mod simulate;
