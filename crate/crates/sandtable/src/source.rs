//! Source densities `f >= 0` (the pouring rate).

use crate::error::SandtableError;
use crate::geometry::Point;
use crate::grid::{Grid, ScalarField};
use crate::Result;

/// Compactly supported C^2 radial profile
/// `amplitude * (1 - (r/radius)^2)^3` for `r < radius`, zero outside.
/// With unit amplitude this is also the test-function family of the weak
/// formulation.
#[derive(Clone, Copy, Debug)]
pub struct RadialBump {
    pub center: Point,
    pub radius: f64,
    pub amplitude: f64,
}

impl RadialBump {
    pub fn new(center: Point, radius: f64, amplitude: f64) -> Result<Self> {
        if !(radius.is_finite() && radius > 0.0) || !amplitude.is_finite() {
            return Err(SandtableError::InvalidParameter(format!(
                "bump radius {radius}, amplitude {amplitude}"
            )));
        }
        Ok(RadialBump { center, radius, amplitude })
    }

    pub fn eval(&self, p: Point) -> f64 {
        let q = p.dist(self.center) / self.radius;
        if q >= 1.0 {
            0.0
        } else {
            let w = 1.0 - q * q;
            self.amplitude * w * w * w
        }
    }

    /// Gradient; smooth across the support boundary (the profile is C^2).
    pub fn grad(&self, p: Point) -> [f64; 2] {
        let dx = p.x - self.center.x;
        let dy = p.y - self.center.y;
        let r2 = dx * dx + dy * dy;
        let rho2 = self.radius * self.radius;
        if r2 >= rho2 {
            return [0.0, 0.0];
        }
        let w = 1.0 - r2 / rho2;
        let c = -6.0 * self.amplitude * w * w / rho2;
        [c * dx, c * dy]
    }
}

/// Pouring density. Evaluable everywhere; nonnegative by construction.
#[derive(Clone, Debug)]
pub enum SourceSpec {
    /// Spatially constant rate.
    Constant(f64),
    /// Sum of radial bumps.
    Bumps(Vec<RadialBump>),
    /// Grid-sampled field, evaluated by bilinear interpolation.
    Sampled(ScalarField),
}

impl SourceSpec {
    pub fn constant(c: f64) -> Result<Self> {
        if !(c.is_finite() && c >= 0.0) {
            return Err(SandtableError::InvalidParameter(format!("constant source rate {c}")));
        }
        Ok(SourceSpec::Constant(c))
    }

    pub fn bumps(bumps: Vec<RadialBump>) -> Result<Self> {
        for b in &bumps {
            if b.amplitude < 0.0 {
                return Err(SandtableError::InvalidParameter(
                    "bump amplitude must be nonnegative".into(),
                ));
            }
        }
        Ok(SourceSpec::Bumps(bumps))
    }

    pub fn sampled(field: ScalarField) -> Result<Self> {
        if field.data().iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(SandtableError::InvalidParameter(
                "sampled source must be finite and nonnegative".into(),
            ));
        }
        Ok(SourceSpec::Sampled(field))
    }

    pub fn eval(&self, p: Point) -> f64 {
        match self {
            SourceSpec::Constant(c) => *c,
            SourceSpec::Bumps(bumps) => bumps.iter().map(|b| b.eval(p)).sum(),
            SourceSpec::Sampled(field) => field.sample(p),
        }
    }

    /// Whether the support is empty (no sand is poured anywhere).
    pub fn is_empty_support(&self) -> bool {
        match self {
            SourceSpec::Constant(c) => *c == 0.0,
            SourceSpec::Bumps(bumps) => bumps.iter().all(|b| b.amplitude == 0.0),
            SourceSpec::Sampled(field) => field.data().iter().all(|v| *v == 0.0),
        }
    }

    /// Lattice points carrying positive source, the sampled stand-in for
    /// the support.
    pub fn support_points(&self, grid: &Grid) -> Vec<Point> {
        grid.points().filter(|p| self.eval(*p) > 0.0).collect()
    }
}
