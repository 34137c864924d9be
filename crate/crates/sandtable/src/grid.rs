//! Uniform lattices and grid-sampled fields.
//!
//! A [`Grid`] is a uniform lattice `(x0 + i h, y0 + j h)` with `0 <= i < nx`,
//! `0 <= j < ny`, stored row-major (`i` fastest). Two lattice placements are
//! used: node lattices include the domain boundary (field export, the
//! finite-difference scheme), cell-center lattices sit at midpoints of the
//! `h x h` cells (midpoint quadrature; centers never land on boundary lines
//! or on the measure-zero branch lines of the transport density, which keeps
//! quadrature clean near jumps).

use crate::error::SandtableError;
use crate::geometry::{Point, RegionLabel};
use crate::Result;
use rayon::prelude::*;

/// Relative slack for the "h divides the extent" check.
const DIVISIBILITY_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub nx: usize,
    pub ny: usize,
    pub h: f64,
    pub x0: f64,
    pub y0: f64,
}

impl Grid {
    /// Node lattice over the rectangle `[x0, x1] x [y0, y1]`, boundary
    /// included. `h` must divide both extents.
    pub fn nodes(x0: f64, y0: f64, x1: f64, y1: f64, h: f64) -> Result<Self> {
        let (nx, ny) = Self::counts(x0, y0, x1, y1, h)?;
        Ok(Grid { nx: nx + 1, ny: ny + 1, h, x0, y0 })
    }

    /// Cell-center lattice over the same rectangle: `nx x ny` cells of side
    /// `h`, one lattice point at each cell midpoint.
    pub fn centers(x0: f64, y0: f64, x1: f64, y1: f64, h: f64) -> Result<Self> {
        let (nx, ny) = Self::counts(x0, y0, x1, y1, h)?;
        Ok(Grid { nx, ny, h, x0: x0 + 0.5 * h, y0: y0 + 0.5 * h })
    }

    fn counts(x0: f64, y0: f64, x1: f64, y1: f64, h: f64) -> Result<(usize, usize)> {
        if !(h.is_finite() && h > 0.0) {
            return Err(SandtableError::InvalidParameter(format!("grid step h = {h}")));
        }
        let check = |ext: f64| -> Result<usize> {
            let n = ext / h;
            let r = n.round();
            if r < 1.0 || (n - r).abs() > DIVISIBILITY_TOL * r.max(1.0) {
                return Err(SandtableError::InvalidParameter(format!(
                    "grid step {h} does not divide extent {ext}"
                )));
            }
            Ok(r as usize)
        };
        Ok((check(x1 - x0)?, check(y1 - y0)?))
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn idx(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    pub fn point(&self, i: usize, j: usize) -> Point {
        Point::new(self.x0 + i as f64 * self.h, self.y0 + j as f64 * self.h)
    }

    pub fn point_of(&self, k: usize) -> Point {
        self.point(k % self.nx, k / self.nx)
    }

    /// Lattice points in storage order.
    pub fn points(&self) -> impl Iterator<Item = Point> + '_ {
        (0..self.len()).map(|k| self.point_of(k))
    }

    /// Lattice points in storage order, in parallel (order-preserving).
    pub fn par_points(&self) -> impl IndexedParallelIterator<Item = Point> + '_ {
        (0..self.len()).into_par_iter().map(|k| self.point_of(k))
    }

    /// Nearest lattice index to a point (for probing fields in tests).
    pub fn nearest(&self, p: Point) -> (usize, usize) {
        let i = ((p.x - self.x0) / self.h).round().clamp(0.0, (self.nx - 1) as f64) as usize;
        let j = ((p.y - self.y0) / self.h).round().clamp(0.0, (self.ny - 1) as f64) as usize;
        (i, j)
    }
}

/// Scalar values on a lattice.
#[derive(Clone, Debug)]
pub struct ScalarField {
    grid: Grid,
    data: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Grid, data: Vec<f64>) -> Self {
        assert_eq!(grid.len(), data.len(), "field data does not match lattice size");
        ScalarField { grid, data }
    }

    pub fn zeros(grid: Grid) -> Self {
        let n = grid.len();
        ScalarField { grid, data: vec![0.0; n] }
    }

    /// Sample a function at every lattice point (parallel, order kept).
    pub fn from_fn(grid: Grid, f: impl Fn(Point) -> f64 + Sync + Send) -> Self {
        let data: Vec<f64> = grid.par_points().map(f).collect();
        ScalarField { grid, data }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[self.grid.idx(i, j)]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = self.grid.idx(i, j);
        self.data[k] = v;
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn min(&self) -> f64 {
        self.data.iter().fold(f64::INFINITY, |m, v| m.min(*v))
    }

    pub fn max(&self) -> f64 {
        self.data.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v))
    }

    /// Bilinear interpolation; points outside the lattice hull are clamped
    /// to it.
    pub fn sample(&self, p: Point) -> f64 {
        let g = &self.grid;
        let fx = ((p.x - g.x0) / g.h).clamp(0.0, (g.nx - 1) as f64);
        let fy = ((p.y - g.y0) / g.h).clamp(0.0, (g.ny - 1) as f64);
        let i = (fx.floor() as usize).min(g.nx.saturating_sub(2));
        let j = (fy.floor() as usize).min(g.ny.saturating_sub(2));
        if g.nx == 1 || g.ny == 1 {
            return self.data[0];
        }
        let tx = fx - i as f64;
        let ty = fy - j as f64;
        let v00 = self.get(i, j);
        let v10 = self.get(i + 1, j);
        let v01 = self.get(i, j + 1);
        let v11 = self.get(i + 1, j + 1);
        (1.0 - tx) * (1.0 - ty) * v00 + tx * (1.0 - ty) * v10
            + (1.0 - tx) * ty * v01 + tx * ty * v11
    }

    /// Resample onto another lattice by bilinear interpolation.
    pub fn resample(&self, target: &Grid) -> ScalarField {
        ScalarField::from_fn(target.clone(), |p| self.sample(p))
    }

    pub fn same_grid(&self, other: &ScalarField) -> bool {
        self.grid == other.grid
    }
}

/// Plane vectors on a lattice (gradients).
#[derive(Clone, Debug)]
pub struct VectorField {
    grid: Grid,
    data: Vec<[f64; 2]>,
}

impl VectorField {
    pub fn new(grid: Grid, data: Vec<[f64; 2]>) -> Self {
        assert_eq!(grid.len(), data.len(), "field data does not match lattice size");
        VectorField { grid, data }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &[[f64; 2]] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> [f64; 2] {
        self.data[self.grid.idx(i, j)]
    }
}

/// Boolean flags on a lattice (ridge masks, exclusion masks).
#[derive(Clone, Debug)]
pub struct MaskField {
    grid: Grid,
    data: Vec<bool>,
}

impl MaskField {
    pub fn new(grid: Grid, data: Vec<bool>) -> Self {
        assert_eq!(grid.len(), data.len(), "mask data does not match lattice size");
        MaskField { grid, data }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[self.grid.idx(i, j)]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|b| **b).count()
    }
}

/// Region labels on a lattice.
#[derive(Clone, Debug)]
pub struct LabelField {
    grid: Grid,
    data: Vec<RegionLabel>,
}

impl LabelField {
    pub fn new(grid: Grid, data: Vec<RegionLabel>) -> Self {
        assert_eq!(grid.len(), data.len(), "label data does not match lattice size");
        LabelField { grid, data }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &[RegionLabel] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> RegionLabel {
        self.data[self.grid.idx(i, j)]
    }

    /// Distinct non-ridge labels in first-appearance order.
    pub fn regions(&self) -> Vec<RegionLabel> {
        let mut out: Vec<RegionLabel> = Vec::new();
        for l in &self.data {
            if *l != RegionLabel::Ridge && !out.contains(l) {
                out.push(*l);
            }
        }
        out
    }
}
