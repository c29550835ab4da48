//! Numerical toolkit for infinite-horizon optimal control.
//!
//! - [`problem`]: control systems, admissible signals and trajectories.
//! - [`value`]: semi-Lagrangian finite-horizon value tables and DPP residuals.
//! - [`limits`]: `V^all`, `V^infty` and `V^inf` estimates along growing horizons.
//! - [`pmp`]: costate arcs, the maximum condition and superdifferential tests.
//! - [`criteria`]: agreeable, weakly agreeable and constrained optimality checks.
//! - [`regularity`]: steering times, hull and separation tests, Lipschitz region maps.

pub mod error;
pub mod problem;
pub mod value;
pub mod limits;
pub mod pmp;
pub mod criteria;
pub mod regularity;

pub use error::{LabError, Result};
pub use problem::{builtin_problem, builtin_problem_with, ControlProblem, ControlSignal, Trajectory};
pub use value::{solve_finite_horizon, GridSpec, ValueField, ValueGrid};
