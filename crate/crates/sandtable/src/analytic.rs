//! Closed-form fields for the reference configuration: the unit square
//! whose open boundary is the left half of the south side.
//!
//! With a uniform source, the standing layer is the boundary distance and
//! the rolling layer splits in two: vertical transport `1 - y` left of
//! the opening, and a polar fan about the opening's right endpoint `P` on
//! the right, where the density `(l^2 - r^2) / (2 r)` blows up at the
//! apex and jumps by 0.25 across the vertical segment PQ. The fan's ray
//! cutoff `l(theta)` switches from the east wall to the north wall along
//! the ray through `S = (1, 1)`, so the density gradient is discontinuous
//! across PS. These formulas serve as oracles for quadrature and scheme
//! output.
//!
//! Masked error norms compare a grid field against any pointwise oracle,
//! skipping an exclusion region (singular points, discontinuity bands).

use crate::error::SandtableError;
use crate::geometry::{BoundaryArc, Domain, GammaGeometry, Point};
use crate::grid::{Grid, MaskField, ScalarField};
use crate::Result;

/// Right endpoint of the open boundary segment (the fan apex).
pub const P: Point = Point::new(0.5, 0.0);
/// Top of the density jump segment PQ.
pub const Q: Point = Point::new(0.5, 1.0);
/// Corner where the ray cutoff switches walls.
pub const S: Point = Point::new(1.0, 1.0);

/// Default exclusion radius around the fan apex.
pub const APEX_EXCLUSION_RADIUS: f64 = 0.05;

/// Unit square with the open boundary `{0 <= x <= 0.5, y = 0}`.
pub fn test_example_geometry() -> GammaGeometry {
    let domain = Domain::rect(0.0, 0.0, 1.0, 1.0).expect("unit square");
    let arc = BoundaryArc::Segment { a: Point::new(0.0, 0.0), b: Point::new(0.5, 0.0) };
    GammaGeometry::new(domain, vec![arc]).expect("segment lies on the south side")
}

/// Equilibrium standing layer: the distance to the open boundary.
/// `y` left of the opening's end, `|x - P|` right of it.
pub fn exact_standing(p: Point) -> f64 {
    if p.x <= P.x {
        p.y
    } else {
        (p.x - P.x).hypot(p.y)
    }
}

/// Length of the fan ray from `P` at angle `theta in [0, pi/2]` from the
/// horizontal: it ends on the east wall while `tan theta <= 2` and on the
/// north wall beyond.
pub fn l_theta(theta: f64) -> f64 {
    debug_assert!((-1e-12..=std::f64::consts::FRAC_PI_2 + 1e-12).contains(&theta));
    if theta <= 2.0f64.atan() {
        0.5 / theta.cos()
    } else {
        1.0 / theta.sin()
    }
}

/// Equilibrium rolling layer for the uniform unit source: `1 - y` left of
/// PQ; on the right, `(l^2 - r^2) / (2 r)` in polar coordinates about
/// `P`. Unbounded at the apex: evaluating exactly at `P` is an error. On
/// PQ itself the left branch (the lower limit) is returned.
pub fn exact_rolling(p: Point) -> Result<f64> {
    if p.x == P.x && p.y == P.y {
        return Err(SandtableError::DegenerateRay { x: p.x, y: p.y });
    }
    if p.x <= P.x {
        return Ok(1.0 - p.y);
    }
    let (dx, dy) = (p.x - P.x, p.y - P.y);
    let r = dx.hypot(dy);
    let l = l_theta(dy.atan2(dx));
    Ok((l * l - r * r) / (2.0 * r))
}

/// Masked error norms. `l1` and `l2` are relative (scaled by the same
/// norm of the oracle); `linf` is the plain maximum deviation.
#[derive(Clone, Copy, Debug)]
pub struct ErrorNorms {
    pub l1: f64,
    pub l2: f64,
    pub linf: f64,
}

/// Compare a grid field against a pointwise oracle outside an exclusion
/// mask (`true` = skip the node). Every included node carries the `h^2`
/// weight of its cell, the midpoint rule on cell-centered lattices.
pub fn error_report(
    field: &ScalarField,
    oracle: impl Fn(Point) -> f64,
    exclusion: &MaskField,
) -> Result<ErrorNorms> {
    if field.grid() != exclusion.grid() {
        return Err(SandtableError::GridMismatch("exclusion mask on a different lattice".into()));
    }
    let grid = field.grid();
    let cell = grid.h * grid.h;
    let mut included = 0usize;
    let (mut num1, mut den1, mut num2, mut den2, mut linf) = (0.0, 0.0, 0.0, 0.0, 0.0f64);
    for k in 0..grid.len() {
        if exclusion.data()[k] {
            continue;
        }
        included += 1;
        let want = oracle(grid.point_of(k));
        let e = field.data()[k] - want;
        num1 += e.abs() * cell;
        den1 += want.abs() * cell;
        num2 += e * e * cell;
        den2 += want * want * cell;
        linf = linf.max(e.abs());
    }
    if included == 0 {
        return Err(SandtableError::EmptyMask);
    }
    if den1 == 0.0 {
        return Err(SandtableError::ZeroReference);
    }
    Ok(ErrorNorms { l1: num1 / den1, l2: (num2 / den2).sqrt(), linf })
}

/// Exclusion mask from a pointwise predicate (`true` = exclude).
pub fn exclusion_from(grid: &Grid, excluded: impl Fn(Point) -> bool) -> MaskField {
    let data = (0..grid.len()).map(|k| excluded(grid.point_of(k))).collect();
    MaskField::new(grid.clone(), data)
}

/// Default exclusion for comparisons against the closed forms: disks of
/// radius 0.05 around both endpoints of the open edge (the ray formula is
/// unbounded near each of them), plus an optional band `|x - 0.5| <=
/// half_width` around the jump segment PQ (used for scheme output, which
/// smears the jump over a few cells).
pub fn default_exclusion(grid: &Grid, pq_band_half_width: Option<f64>) -> MaskField {
    let band = pq_band_half_width.unwrap_or(-1.0);
    exclusion_from(grid, |p| {
        p.dist(P) <= APEX_EXCLUSION_RADIUS
            || p.dist(Point::new(0.0, 0.0)) <= APEX_EXCLUSION_RADIUS
            || (p.x - P.x).abs() <= band
    })
}
