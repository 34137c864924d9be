//! Table geometry and transport rays.
//!
//! The table `Omega` is an open convex region, here a rectangle or a disk.
//! Its boundary carries finitely many disjoint open arcs `Gamma` (the edges
//! sand can fall off); the rest of the boundary is a wall. Everything in the
//! equilibrium construction reduces to the distance function
//!
//! ```text
//!     d(x) = dist(x, Gamma),
//! ```
//!
//! its projection set `Pi(x)` (closest points on `Gamma`), and the transport
//! ray through `x`: the maximal segment `[y, m(x)]` starting at a projection
//! `y`, passing through `x`, on which `y` stays a closest point of `Gamma`.
//! Its length is
//!
//! ```text
//!     l(x) = d(x) * sup { t > 0 : y + t(x - y) in Omega,
//!                         y in Pi(y + t(x - y)) },
//! ```
//!
//! the far end is `m(x) = y + l(x) (x-y)/|x-y|` and `tau(x) = l(x) - d(x)`
//! is the remaining run from `x` to the ray end. Points where `d(x) = l(x)`
//! (ray ends) form the extended ridge; sand cannot roll past them.
//!
//! Projections are classified by where they land: the interior of an arc
//! (rays arrive as a locally parallel or focusing family, curvature
//! `kappa`), or an arc endpoint (rays fan out of one point). The
//! classification selects the spreading multiplier used by the transport
//! density, so it is carried on every projection.

use crate::error::SandtableError;
use crate::grid::{Grid, LabelField, MaskField, ScalarField};
use crate::Result;
use rayon::prelude::*;

/// Bisection iterations for the ray-length search. 60 halvings of a
/// bracket no longer than the diameter reach machine precision.
const RAY_BISECT_ITERS: usize = 60;

/// Relative projection tolerance; scaled by the domain diameter to get the
/// spatial tolerance used for projection ties and on-boundary tests.
const PROJ_TOL_REL: f64 = 1e-9;

/// A point of the plane; also used for direction vectors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn sub(self, other: Point) -> Point {
        Point::new(self.x - other.x, self.y - other.y)
    }

    pub fn add_scaled(self, dir: Point, s: f64) -> Point {
        Point::new(self.x + s * dir.x, self.y + s * dir.y)
    }

    pub fn dot(self, other: Point) -> f64 {
        self.x * other.x + self.y * other.y
    }
}

/// The table region.
#[derive(Clone, Copy, Debug)]
pub enum Domain {
    /// Axis-aligned open rectangle `(x0, x1) x (y0, y1)`.
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    /// Open disk of radius `r` centered at `(cx, cy)`.
    Disk { cx: f64, cy: f64, r: f64 },
}

impl Domain {
    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        if !(x0.is_finite() && y0.is_finite() && x1.is_finite() && y1.is_finite()) || x1 <= x0 || y1 <= y0 {
            return Err(SandtableError::InvalidGeometry(format!(
                "degenerate rectangle ({x0}, {y0}) -- ({x1}, {y1})"
            )));
        }
        Ok(Domain::Rect { x0, y0, x1, y1 })
    }

    pub fn disk(cx: f64, cy: f64, r: f64) -> Result<Self> {
        if !(cx.is_finite() && cy.is_finite() && r.is_finite()) || r <= 0.0 {
            return Err(SandtableError::InvalidGeometry(format!("degenerate disk radius {r}")));
        }
        Ok(Domain::Disk { cx, cy, r })
    }

    pub fn diameter(&self) -> f64 {
        match *self {
            Domain::Rect { x0, y0, x1, y1 } => (x1 - x0).hypot(y1 - y0),
            Domain::Disk { r, .. } => 2.0 * r,
        }
    }

    pub fn area(&self) -> f64 {
        match *self {
            Domain::Rect { x0, y0, x1, y1 } => (x1 - x0) * (y1 - y0),
            Domain::Disk { r, .. } => std::f64::consts::PI * r * r,
        }
    }

    /// Bounding box `(x0, y0, x1, y1)`.
    pub fn bbox(&self) -> (f64, f64, f64, f64) {
        match *self {
            Domain::Rect { x0, y0, x1, y1 } => (x0, y0, x1, y1),
            Domain::Disk { cx, cy, r } => (cx - r, cy - r, cx + r, cy + r),
        }
    }

    /// Membership in the closed region, with absolute slack `tol`.
    pub fn contains_closure(&self, p: Point, tol: f64) -> bool {
        match *self {
            Domain::Rect { x0, y0, x1, y1 } => {
                p.x >= x0 - tol && p.x <= x1 + tol && p.y >= y0 - tol && p.y <= y1 + tol
            }
            Domain::Disk { cx, cy, r } => p.dist(Point::new(cx, cy)) <= r + tol,
        }
    }

    /// Membership in the open region, with absolute margin `tol`.
    pub fn contains_open(&self, p: Point, tol: f64) -> bool {
        match *self {
            Domain::Rect { x0, y0, x1, y1 } => {
                p.x > x0 + tol && p.x < x1 - tol && p.y > y0 + tol && p.y < y1 - tol
            }
            Domain::Disk { cx, cy, r } => p.dist(Point::new(cx, cy)) < r - tol,
        }
    }

    /// Nearest point of the closed region. Lattice points of a disk's
    /// bounding box can fall outside the table; field evaluation clamps
    /// them onto the boundary.
    pub fn clamp(&self, p: Point) -> Point {
        match *self {
            Domain::Rect { x0, y0, x1, y1 } => {
                Point::new(p.x.clamp(x0, x1), p.y.clamp(y0, y1))
            }
            Domain::Disk { cx, cy, r } => {
                let c = Point::new(cx, cy);
                let rho = p.dist(c);
                if rho <= r {
                    p
                } else {
                    c.add_scaled(Point::new((p.x - cx) / rho, (p.y - cy) / rho), r)
                }
            }
        }
    }
}

/// One open arc of the boundary.
#[derive(Clone, Debug)]
pub enum BoundaryArc {
    /// Straight segment on a rectangle side, from `a` to `b`.
    Segment { a: Point, b: Point },
    /// Arc of the disk boundary between angles `start` and `end`
    /// (counterclockwise, `end > start`). A span of a full turn means the
    /// whole circle, which has no endpoints.
    CircleArc {
        center: Point,
        radius: f64,
        start: f64,
        end: f64,
    },
}

impl BoundaryArc {
    /// Signed curvature of the arc seen from inside the table: straight
    /// walls have `kappa = 0`; a disk boundary bends toward the interior,
    /// `kappa = 1/r > 0`.
    pub fn curvature(&self) -> f64 {
        match self {
            BoundaryArc::Segment { .. } => 0.0,
            BoundaryArc::CircleArc { radius, .. } => 1.0 / radius,
        }
    }

    /// Endpoints `(A, B)`, absent for a full circle.
    pub fn endpoints(&self) -> Option<(Point, Point)> {
        match self {
            BoundaryArc::Segment { a, b } => Some((*a, *b)),
            BoundaryArc::CircleArc { center, radius, start, end } => {
                if self.is_full_circle() {
                    None
                } else {
                    let at = |t: f64| center.add_scaled(Point::new(t.cos(), t.sin()), *radius);
                    Some((at(*start), at(*end)))
                }
            }
        }
    }

    pub fn is_full_circle(&self) -> bool {
        match self {
            BoundaryArc::Segment { .. } => false,
            BoundaryArc::CircleArc { start, end, .. } => {
                (end - start) >= 2.0 * std::f64::consts::PI - 1e-12
            }
        }
    }

    pub fn length(&self) -> f64 {
        match self {
            BoundaryArc::Segment { a, b } => a.dist(*b),
            BoundaryArc::CircleArc { radius, start, end, .. } => radius * (end - start),
        }
    }
}

/// Where a projection lands on its arc.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProjectionKind {
    /// Interior of arc `i`: rays arrive as a family with curvature
    /// `kappa` at the foot.
    ArcInterior(usize),
    /// First endpoint of arc `i`: rays fan out of the endpoint.
    EndpointA(usize),
    /// Second endpoint of arc `i`.
    EndpointB(usize),
}

impl ProjectionKind {
    pub fn arc(&self) -> usize {
        match *self {
            ProjectionKind::ArcInterior(i)
            | ProjectionKind::EndpointA(i)
            | ProjectionKind::EndpointB(i) => i,
        }
    }

    pub fn is_endpoint(&self) -> bool {
        !matches!(self, ProjectionKind::ArcInterior(_))
    }
}

/// A single closest point of `Gamma`.
#[derive(Clone, Copy, Debug)]
pub struct ProjectionPoint {
    pub point: Point,
    pub kind: ProjectionKind,
}

/// Full projection data at a query point: the distance and every closest
/// point within the projection tolerance (deduplicated by location).
#[derive(Clone, Debug)]
pub struct Projection {
    pub distance: f64,
    pub points: Vec<ProjectionPoint>,
}

impl Projection {
    /// Points with more than one projection lie on the ridge.
    pub fn is_multiple(&self) -> bool {
        self.points.len() >= 2
    }
}

/// The maximal transport ray through a point off `Gamma`.
#[derive(Clone, Copy, Debug)]
pub struct TransportRay {
    /// Base of the ray on `Gamma`.
    pub y: Point,
    /// Unit direction from `y` through the query point (equals `Dd` at
    /// regular points).
    pub dir: Point,
    /// Distance from the query point to `Gamma`.
    pub d: f64,
    /// Total ray length from `y` to the ridge end `m`.
    pub l: f64,
    /// Remaining run from the query point to `m`: `tau = l - d`.
    pub tau: f64,
    /// Far end of the ray (a point of the extended ridge).
    pub m: Point,
    /// Classification of the base projection.
    pub kind: ProjectionKind,
}

/// Classification of a point of `Gamma` for curvature queries.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GammaPointKind {
    /// Arc interior with the stated curvature.
    Interior { kappa: f64 },
    /// Arc endpoint; the fan multiplier applies instead of a curvature.
    Endpoint,
}

/// Per-node region label produced by [`GammaGeometry::region_labels`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegionLabel {
    /// On the extended ridge (or flagged by the `tau < delta` proxy).
    Ridge,
    /// Projects to the interior of arc `i`.
    Interior(usize),
    /// Projects to endpoint A of arc `i`.
    EndA(usize),
    /// Projects to endpoint B of arc `i`.
    EndB(usize),
}

/// A table together with its open boundary arcs.
#[derive(Clone, Debug)]
pub struct GammaGeometry {
    pub domain: Domain,
    pub arcs: Vec<BoundaryArc>,
    diam: f64,
    tol: f64,
}

impl GammaGeometry {
    pub fn new(domain: Domain, arcs: Vec<BoundaryArc>) -> Result<Self> {
        if arcs.is_empty() {
            return Err(SandtableError::InvalidGeometry("no open boundary arcs".into()));
        }
        let diam = domain.diameter();
        let tol = PROJ_TOL_REL * diam;
        for (i, arc) in arcs.iter().enumerate() {
            if arc.length() <= tol {
                return Err(SandtableError::InvalidGeometry(format!("arc {i} has zero length")));
            }
            match (&domain, arc) {
                (Domain::Rect { x0, y0, x1, y1 }, BoundaryArc::Segment { a, b }) => {
                    let on_side = (a.y == b.y && (a.y == *y0 || a.y == *y1)
                        && a.x >= *x0 - tol && a.x <= *x1 + tol
                        && b.x >= *x0 - tol && b.x <= *x1 + tol)
                        || (a.x == b.x && (a.x == *x0 || a.x == *x1)
                            && a.y >= *y0 - tol && a.y <= *y1 + tol
                            && b.y >= *y0 - tol && b.y <= *y1 + tol);
                    if !on_side {
                        return Err(SandtableError::InvalidGeometry(format!(
                            "arc {i} does not lie on a rectangle side"
                        )));
                    }
                }
                (Domain::Disk { cx, cy, r }, BoundaryArc::CircleArc { center, radius, start, end }) => {
                    if center.dist(Point::new(*cx, *cy)) > tol || (radius - r).abs() > tol {
                        return Err(SandtableError::InvalidGeometry(format!(
                            "arc {i} does not lie on the disk boundary"
                        )));
                    }
                    if !(end > start) || (end - start) > 2.0 * std::f64::consts::PI + 1e-12 {
                        return Err(SandtableError::InvalidGeometry(format!(
                            "arc {i} has invalid angular range [{start}, {end}]"
                        )));
                    }
                }
                _ => {
                    return Err(SandtableError::InvalidGeometry(format!(
                        "arc {i} kind does not match the domain kind"
                    )));
                }
            }
        }
        Ok(GammaGeometry { domain, arcs, diam, tol })
    }

    /// Domain diameter (scale for every tolerance).
    pub fn diameter(&self) -> f64 {
        self.diam
    }

    /// Spatial tolerance for projection ties and on-`Gamma` tests.
    pub fn tol(&self) -> f64 {
        self.tol
    }

    /// Closest point(s) of `Gamma`, with the realized distance. All
    /// minimizers within the projection tolerance are listed, deduplicated
    /// by location; the first entry is the deterministic representative
    /// used by ray construction.
    pub fn project(&self, x: Point) -> Result<Projection> {
        if !self.domain.contains_closure(x, self.tol) {
            return Err(SandtableError::OutsideDomain { x: x.x, y: x.y });
        }
        let mut candidates: Vec<(f64, ProjectionPoint)> = Vec::new();
        for (i, arc) in self.arcs.iter().enumerate() {
            arc_closest(arc, i, x, &mut candidates);
        }
        let best = candidates
            .iter()
            .map(|(d, _)| *d)
            .fold(f64::INFINITY, f64::min);
        let mut points: Vec<ProjectionPoint> = Vec::new();
        for (d, pp) in &candidates {
            if *d <= best + self.tol {
                points.push(*pp);
            }
        }
        purge_points(&mut points, self.tol);
        Ok(Projection { distance: best, points })
    }

    /// Distance to `Gamma`.
    pub fn dist(&self, x: Point) -> Result<f64> {
        Ok(self.project(x)?.distance)
    }

    /// Classify a point known to lie on `Gamma` (within tolerance):
    /// arc-interior with its curvature, or endpoint.
    pub fn curvature_at(&self, y: Point) -> Result<GammaPointKind> {
        let proj = self.project(y)?;
        if proj.distance > self.tol {
            return Err(SandtableError::InvalidGeometry(format!(
                "point ({}, {}) is not on the open boundary",
                y.x, y.y
            )));
        }
        let pp = proj.points[0];
        Ok(match pp.kind {
            ProjectionKind::ArcInterior(i) => GammaPointKind::Interior {
                kappa: self.arcs[i].curvature(),
            },
            _ => GammaPointKind::Endpoint,
        })
    }

    /// Length of the maximal ray from base `y` (on `Gamma`) in direction
    /// `dir`, i.e. the largest `s` with `y + s dir` in the closed domain
    /// and `y` still a closest point of `Gamma` there. `s_lo` must already
    /// satisfy the predicate.
    pub(crate) fn ray_extent(&self, y: Point, dir: Point, s_lo: f64) -> f64 {
        let holds = |s: f64| -> bool {
            let z = y.add_scaled(dir, s);
            if !self.domain.contains_closure(z, self.tol) {
                return false;
            }
            match self.dist(z) {
                Ok(d) => d >= s - self.tol,
                Err(_) => false,
            }
        };
        let mut lo = s_lo.max(self.tol);
        let mut hi = lo;
        let cap = self.diam * 1.5;
        loop {
            hi = (hi * 2.0).max(lo + self.diam / 16.0);
            if hi >= cap {
                hi = cap;
                if holds(hi) {
                    return hi;
                }
                break;
            }
            if !holds(hi) {
                break;
            }
            lo = hi;
        }
        for _ in 0..RAY_BISECT_ITERS {
            let mid = 0.5 * (lo + hi);
            if holds(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    /// Maximal transport ray through `x`. Uses the first (deterministic)
    /// projection; for ridge points with several projections the resulting
    /// `l` and `m` do not depend on the choice.
    pub fn transport_ray(&self, x: Point) -> Result<TransportRay> {
        let proj = self.project(x)?;
        let d = proj.distance;
        if d <= self.tol {
            return Err(SandtableError::DegenerateRay { x: x.x, y: x.y });
        }
        let base = proj.points[0];
        let y = base.point;
        let dir = Point::new((x.x - y.x) / d, (x.y - y.y) / d);
        let l = self.ray_extent(y, dir, d);
        let m = y.add_scaled(dir, l);
        Ok(TransportRay {
            y,
            dir,
            d,
            l,
            tau: (l - d).max(0.0),
            m,
            kind: base.kind,
        })
    }

    /// Distance field on a lattice. Lattice points outside the closed
    /// domain (bounding-box corners of a disk) are clamped onto it.
    pub fn dist_field(&self, grid: &Grid) -> ScalarField {
        self.field_from_fn(grid, |geo, p| geo.dist(p).unwrap_or(0.0))
    }

    /// Extended-ridge mask on a lattice: a node is flagged when it has
    /// several projections, or as a proxy when its remaining ray run
    /// satisfies `tau < delta` (ray ends cannot be hit exactly on a grid).
    /// Nodes on `Gamma` itself are ray starts, never ridge.
    pub fn ridge_mask(&self, grid: &Grid, delta: f64) -> MaskField {
        let data: Vec<bool> = grid
            .par_points()
            .map(|p| self.is_ridge_point(p, delta))
            .collect();
        MaskField::new(grid.clone(), data)
    }

    /// Pointwise form of [`GammaGeometry::ridge_mask`].
    pub fn is_ridge_point(&self, p: Point, delta: f64) -> bool {
        let p = self.domain.clamp(p);
        let proj = match self.project(p) {
            Ok(pr) => pr,
            Err(_) => return false,
        };
        if proj.distance <= self.tol {
            return false;
        }
        if proj.is_multiple() {
            return true;
        }
        match self.transport_ray(p) {
            Ok(ray) => ray.tau < delta,
            Err(_) => false,
        }
    }

    /// Region decomposition on a lattice: ridge nodes, and otherwise the
    /// arc/endpoint class of the unique projection. Nodes on `Gamma` carry
    /// the class of their own location.
    pub fn region_labels(&self, grid: &Grid, delta: f64) -> LabelField {
        let data: Vec<RegionLabel> = grid
            .par_points()
            .map(|p| {
                let p = self.domain.clamp(p);
                if self.is_ridge_point(p, delta) {
                    return RegionLabel::Ridge;
                }
                match self.project(p) {
                    Ok(proj) => match proj.points[0].kind {
                        ProjectionKind::ArcInterior(i) => RegionLabel::Interior(i),
                        ProjectionKind::EndpointA(i) => RegionLabel::EndA(i),
                        ProjectionKind::EndpointB(i) => RegionLabel::EndB(i),
                    },
                    Err(_) => RegionLabel::Ridge,
                }
            })
            .collect();
        LabelField::new(grid.clone(), data)
    }

    fn field_from_fn(&self, grid: &Grid, f: impl Fn(&Self, Point) -> f64 + Sync) -> ScalarField {
        let data: Vec<f64> = grid
            .par_points()
            .map(|p| f(self, self.domain.clamp(p)))
            .collect();
        ScalarField::new(grid.clone(), data)
    }
}

/// Append the closest point(s) of one arc to the candidate list.
fn arc_closest(arc: &BoundaryArc, idx: usize, x: Point, out: &mut Vec<(f64, ProjectionPoint)>) {
    match arc {
        BoundaryArc::Segment { a, b } => {
            let ab = b.sub(*a);
            let len2 = ab.dot(ab);
            let t = x.sub(*a).dot(ab) / len2;
            let (point, kind) = if t <= 0.0 {
                (*a, ProjectionKind::EndpointA(idx))
            } else if t >= 1.0 {
                (*b, ProjectionKind::EndpointB(idx))
            } else {
                (a.add_scaled(ab, t), ProjectionKind::ArcInterior(idx))
            };
            out.push((x.dist(point), ProjectionPoint { point, kind }));
        }
        BoundaryArc::CircleArc { center, radius, start, end } => {
            let v = x.sub(*center);
            let rho = v.norm();
            if rho < 1e-300 {
                // Query at the exact center: every arc point is closest.
                // Return representatives so multiplicity is visible.
                let mid = 0.5 * (start + end);
                let at = |t: f64| center.add_scaled(Point::new(t.cos(), t.sin()), *radius);
                out.push((*radius, ProjectionPoint { point: at(mid), kind: ProjectionKind::ArcInterior(idx) }));
                if !arc.is_full_circle() {
                    out.push((*radius, ProjectionPoint { point: at(*start), kind: ProjectionKind::EndpointA(idx) }));
                    out.push((*radius, ProjectionPoint { point: at(*end), kind: ProjectionKind::EndpointB(idx) }));
                }
                return;
            }
            let phi = v.y.atan2(v.x);
            let span = end - start;
            let two_pi = 2.0 * std::f64::consts::PI;
            let rel = (phi - start).rem_euclid(two_pi);
            if arc.is_full_circle() || rel <= span {
                let point = center.add_scaled(Point::new(v.x / rho, v.y / rho), *radius);
                out.push((
                    (rho - radius).abs(),
                    ProjectionPoint { point, kind: ProjectionKind::ArcInterior(idx) },
                ));
            } else {
                // Off the angular range: nearer endpoint wins; push both on
                // an exact tie.
                let at = |t: f64| center.add_scaled(Point::new(t.cos(), t.sin()), *radius);
                let pa = at(*start);
                let pb = at(*end);
                let da = x.dist(pa);
                let db = x.dist(pb);
                if da <= db {
                    out.push((da, ProjectionPoint { point: pa, kind: ProjectionKind::EndpointA(idx) }));
                }
                if db <= da {
                    out.push((db, ProjectionPoint { point: pb, kind: ProjectionKind::EndpointB(idx) }));
                }
            }
        }
    }
}

/// Deduplicate projection points that coincide spatially (shared corners
/// of adjacent arcs produce one geometric point through two arcs; it must
/// count once). First occurrence wins, so arc declaration order is the
/// deterministic tie-break.
fn purge_points(points: &mut Vec<ProjectionPoint>, tol: f64) {
    let mut kept: Vec<ProjectionPoint> = Vec::with_capacity(points.len());
    for p in points.iter() {
        if !kept.iter().any(|q| q.point.dist(p.point) <= tol) {
            kept.push(*p);
        }
    }
    *points = kept;
}
