//! Sampling-based dual stochastic model predictive control.
//!
//! The plant is one of several candidate operating modes, each an
//! affine-in-parameters stochastic difference equation
//! `x_{k+1} = g(x_k, u_k) + Φ(x_k, u_k)·γ + w_k`. Which mode is active and
//! the value of each mode's parameter vector `γ` are both unknown;
//! closed-form Bayesian filters track a joint belief over them. The dual
//! controller optimizes its input plan over a scenario tree whose branches
//! re-run those filters on sampled futures, so the optimized plan carries an
//! incentive to excite the system exactly when identification pays for
//! itself. A certainty-equivalence baseline, a Monte Carlo simulation
//! harness, and a CLI wrap the same machinery.
//!
//! Module map:
//! - [`model`]: mode dynamics, model sets, quadratic tracking costs.
//! - [`config`]: JSON schema, benchmark loading, serialization.
//! - [`belief`]: conjugate parameter updates and mode-probability updates.
//! - [`tree`]: scenario-tree topology, common random numbers, expansion.
//! - [`objective`]: input plans and the scenario-tree objective.
//! - [`optimizer`]: projected-gradient / L-BFGS box-constrained minimizer.
//! - [`controller`]: receding-horizon dual and certainty-equivalence loops.
//! - [`sim`]: closed-loop runs, Monte Carlo statistics, CSV logs.
//! - [`svg`]: dependency-free SVG charts for the summary statistics.

pub mod belief;
pub mod config;
pub mod controller;
pub mod error;
pub mod linalg;
pub mod model;
pub mod objective;
pub mod optimizer;
pub mod rng;
pub mod sim;
pub mod svg;
pub mod tree;

pub use error::{Error, Result};
