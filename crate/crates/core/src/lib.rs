//! Numerical solvers for backward stochastic differential equations
//! reflected between two continuous barriers, on a binomial lattice.
//!
//! A scaled ±1 random walk stands in for the driving Brownian motion; the
//! terminal payoff, the generator `g(t, y, z)` and the two barriers are
//! discretized onto the recombining tree and the equation
//!
//! ```text
//! y_j = y_{j+1} + g(t_j, ·, z_j)·delta + a_j - k_j - z_j·sqrt(delta)·e_{j+1}
//! ```
//!
//! is solved backward, with `a` pushing up at the lower barrier and `k`
//! pushing down at the upper one (never both at once). Four kernels are
//! provided: implicit and implicit-explicit penalization, and implicit and
//! explicit reflection; see [`schemes`].
//!
//! The companion [`oracle`] module solves the same recursion over all `2^n`
//! individual paths; for Markovian data it must agree with the lattice node
//! for node, and it is the only mode that supports path-functional terminal
//! values and barriers with state-dependent Itô coefficients. [`sim`] draws
//! seeded trajectories and builds refinement tables; [`expr`] and [`config`]
//! let problems be written as text; [`cli`] backs the `rbsde` binary.
//!
//! ```
//! use rbsde::{
//!     solve_backward, BarrierSpec, GeneratorSpec, PointFn, Problem, SchemeKind, SurfaceFn,
//!     TerminalSpec,
//! };
//!
//! let problem = Problem::new(
//!     1.0,
//!     GeneratorSpec::parse("-5*abs(y+z)-1", 5.0)?,
//!     TerminalSpec::Markovian(PointFn::parse("abs(x)")?),
//! )
//! .with_lower(BarrierSpec::Functional(SurfaceFn::parse("-3*(x-2)^2+3")?))
//! .with_upper(BarrierSpec::Functional(SurfaceFn::parse("(x+1)^2+3*t-2.5")?));
//!
//! assert!(rbsde::validate(&problem, 400).is_ok());
//! let solution = solve_backward(&problem, 400, SchemeKind::ExplicitReflected)?;
//! assert!((solution.root_value() - (-1.7312)).abs() < 1e-3);
//! # Ok::<(), Box<dyn std::error::Error>>(())
//! ```

pub mod cli;
pub mod config;
pub mod expr;
pub mod lattice;
pub mod model;
pub mod oracle;
pub mod schemes;
pub mod sim;

pub use lattice::{NodeField, NodeIndex, WalkGrid};
pub use model::{
    validate, validate_scheme, BarrierSpec, GeneratorSpec, PathFn, PointFn, Problem, SchemeKind,
    SurfaceFn, TerminalSpec, ValidationReport,
};
pub use schemes::{solve_backward, solve_root, SolutionGrid, SolveError};
