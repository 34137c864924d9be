//! Error type shared by all modules.

use thiserror::Error;

/// Errors raised by geometry queries, equilibrium quadrature and the
/// time-stepping scheme.
#[derive(Error, Debug)]
pub enum SandtableError {
    /// A query point lies outside the closed table region.
    #[error("point ({x}, {y}) lies outside the closed domain")]
    OutsideDomain { x: f64, y: f64 },

    /// Invalid domain or open-boundary description.
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    /// A transport ray was requested at a point of `Gamma` itself, where
    /// the ray direction is undefined.
    #[error("degenerate transport ray at ({x}, {y}): point lies on the open boundary")]
    DegenerateRay { x: f64, y: f64 },

    /// The ray-spreading multiplier is singular (endpoint projection with
    /// zero base distance).
    #[error("singular multiplier: endpoint projection with d = 0")]
    SingularMultiplier,

    /// A multiplier was evaluated outside its valid parameter range.
    #[error("multiplier parameter t = {t} outside [0, {tau}]")]
    MultiplierRange { t: f64, tau: f64 },

    /// The source has empty support, so no standing layer is determined.
    #[error("source has empty support")]
    EmptySupport,

    /// An integral identity has a vanishing reference side.
    #[error("undefined relative residual: reference integral is zero")]
    ZeroReference,

    /// Two fields that must share a lattice do not.
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    /// An error-norm mask excludes every lattice point.
    #[error("mask excludes all lattice points")]
    EmptyMask,

    /// A test function violates the support condition required by the
    /// weak formulation.
    #[error("test function support too close to the open boundary: {0}")]
    TestFunctionSupport(String),

    /// Offset-curve machinery is only implemented for rectangular tables.
    #[error("unsupported domain for this operation: {0}")]
    UnsupportedDomain(String),

    /// Invalid offset width.
    #[error("offset width eps = {eps} outside (0, {max}]")]
    InvalidOffset { eps: f64, max: f64 },

    /// Invalid scheme or source parameter.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// The explicit scheme produced a non-finite or negative state.
    #[error("scheme unstable at step {step}")]
    Unstable {
        step: usize,
        /// Last finite state before the blow-up was detected.
        state: Box<crate::dynamics::SimState>,
    },

    /// A subregion partition does not cover the grid.
    #[error("partition does not cover the grid: {0}")]
    PartitionGap(String),
}
