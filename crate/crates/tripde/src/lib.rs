//! Monotone trinomial schemes for fully nonlinear parabolic PDEs.
//!
//! The crate builds one-step operators from a bounded three-point increment
//! law, selects scheme parameters that keep the operator monotone, and
//! provides two solvers on top: an exact recombining-lattice solver for low
//! dimension and a least-squares regression Monte Carlo solver for high
//! dimension. A library of generator constructors covers interval-volatility
//! HJB equations, an Isaacs equation, coupled FBSDE drivers and tridiagonal
//! Hessian dependence, with manufactured closed-form solutions for
//! benchmarking where available.

pub mod error;
pub mod generator;
pub mod kernels;
pub mod lattice;
pub mod lsmc;
pub mod params;
pub mod symmat;

pub use error::{Error, Result};
pub use generator::{PdeProblem, RegistryEntry};
pub use kernels::{SparsityMask, TrinomialSpec};
pub use lattice::{solve_tree, TreeSolution};
pub use lsmc::{run_repeats, BasisSet, RunReport};
pub use params::{build_params, GeneratorBounds, MonotonicityParams};
pub use symmat::SymMatrix;
