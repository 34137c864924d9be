//! Granular pile equilibria on a table with partially open edges.
//!
//! The table is a convex region `Omega` (rectangle or disk) whose boundary
//! splits into open arcs `Gamma`, where sand falls off, and walls, where it
//! is retained. Sand poured at rate `f >= 0` organizes into a standing layer
//! `u` (the pile surface, with |Du| <= 1 and u = 0 on `Gamma`) and a rolling
//! layer `v` that transports mass down the slope and off the open edges.
//!
//! The crate has two independent routes to the equilibrium pair `(u, v)`:
//!
//! * [`equilibrium`] evaluates it in closed form along transport rays: `u`
//!   is a maximum of cones over the source support and `v` is a line
//!   integral of `f` against a ray-spreading multiplier.
//! * [`dynamics`] evolves the two-layer PDE system with an explicit
//!   finite-difference scheme until the pair stops changing.
//!
//! [`geometry`] supplies the shared substrate (distance to `Gamma`,
//! projections, transport rays, ridge detection), [`analytic`] the exact
//! solution of a reference configuration used to validate both routes, and
//! [`grid`] the uniform-lattice scalar fields everything is sampled on.

pub mod analytic;
pub mod dynamics;
pub mod equilibrium;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod source;

pub use error::SandtableError;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, SandtableError>;
