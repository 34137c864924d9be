//! Explicit finite-difference evolution of the two-layer system.
//!
//! The pair of heights (standing layer `u`, rolling layer `v`) evolves by
//!
//! ```text
//!     v' = v + dt [ v D2u + Dbar v . Du - (1 - |Du|) v + f ]
//!     u' = u + dt (1 - |Du|) v
//! ```
//!
//! from the zero state, with `Du` the pile-slope (maxmod) gradient,
//! `Dbar v . Du` the upwind advection product, and `D2u` the five-point
//! Laplacian. After each step the boundary treatments apply: `u` is
//! forced to 0 on open-boundary (Gamma) nodes and their `v` is copied
//! from the inward neighbor (transport points outward there, so the
//! rolling layer needs no boundary value and takes the interior trace);
//! at wall nodes, where the one-sided outward slope of the new `u` is
//! strictly positive (ray ends; sand cannot leave) the rolling layer is
//! zeroed, elsewhere it is copied from the inward neighbor (no-flux).
//! Equilibria of this evolution approximate the closed-form pair built in
//! the equilibrium module.
//!
//! The outflow copy at Gamma matters at open-boundary endpoints: the
//! interior stencil there reads standing-layer neighbors from across the
//! seam, making `v D2u` a growth term of order `v/h` that nothing
//! balances (no advection leaves a pinned corner), so evolving `v` in
//! place at such nodes overflows long before the rest of the grid reaches
//! steady state. Ghost values for the wall-node Laplacian mirror the
//! inward neighbor (even reflection, zero normal slope).
//!
//! The scheme runs on an arbitrary active mask over the grid. A node
//! whose neighbor on some side is missing (off-grid, or inactive in a
//! decomposed run) treats that side as a wall: one-sided maxmod, zero
//! upwind contribution, reflected Laplacian ghost. Full-grid runs and
//! single-region decomposed runs therefore execute identical arithmetic.
//! Each step reads one buffer and writes another, so node updates are
//! order-independent and results do not depend on thread count.

use crate::error::SandtableError;
use crate::geometry::{Domain, GammaGeometry, ProjectionKind, RegionLabel};
use crate::grid::{Grid, LabelField, MaskField, ScalarField, VectorField};
use crate::source::SourceSpec;
use crate::Result;
use rayon::prelude::*;

/// A height below `-NEG_TOL` marks the run unstable. The update preserves
/// exact nonnegativity at `v = 0` nodes, so anything beyond rounding
/// slack signals genuine blow-up.
const NEG_TOL: f64 = 1e-12;

/// Grids smaller than this update sequentially; per-step thread fan-out
/// costs more than the row work below it.
const PAR_MIN_NODES: usize = 2048;

/// Missing-neighbor bits.
const MISS_W: u8 = 1;
const MISS_E: u8 = 2;
const MISS_S: u8 = 4;
const MISS_N: u8 = 8;

/// Discrete state of the two layers.
#[derive(Clone, Debug)]
pub struct SimState {
    pub u: ScalarField,
    pub v: ScalarField,
    /// Steps taken since the zero state.
    pub step: usize,
    /// Simulated time `step * dt`.
    pub time: f64,
}

impl SimState {
    pub fn zero(grid: Grid) -> Self {
        SimState {
            u: ScalarField::zeros(grid.clone()),
            v: ScalarField::zeros(grid),
            step: 0,
            time: 0.0,
        }
    }
}

/// Scheme parameters. The time step is `dt = c h^2`; the `v D2u` term
/// scales like `v / h^2`, so `c` bounds its growth per step.
#[derive(Clone, Copy, Debug)]
pub struct SchemeParams {
    /// Time-step safety factor.
    pub c: f64,
    /// Convergence threshold on the rate `max |change| / dt`.
    pub steady_tol: f64,
    /// Step budget; `None` derives one from the grid (60 time units,
    /// capped at 1e7 steps).
    pub max_steps: Option<usize>,
    /// Wall sign test fires when the outward slope exceeds this.
    pub wall_threshold: f64,
}

impl Default for SchemeParams {
    fn default() -> Self {
        SchemeParams {
            c: 0.1,
            steady_tol: 1e-6,
            max_steps: None,
            wall_threshold: 0.0,
        }
    }
}

impl SchemeParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(SandtableError::InvalidParameter(format!("c = {}", self.c)));
        }
        if !(self.steady_tol > 0.0 && self.steady_tol.is_finite()) {
            return Err(SandtableError::InvalidParameter(format!(
                "steady_tol = {}",
                self.steady_tol
            )));
        }
        if !self.wall_threshold.is_finite() {
            return Err(SandtableError::InvalidParameter(format!(
                "wall_threshold = {}",
                self.wall_threshold
            )));
        }
        Ok(())
    }

    pub fn dt(&self, h: f64) -> f64 {
        self.c * h * h
    }

    pub fn step_budget(&self, h: f64) -> usize {
        self.max_steps
            .unwrap_or_else(|| ((60.0 / self.dt(h)).ceil() as usize).min(10_000_000))
    }
}

/// Node classification for one run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeKind {
    /// Outside the active mask; carries zeros and is never read.
    Exterior,
    Interior,
    /// On an open-boundary arc (endpoints included): `u` pinned to 0.
    Gamma,
    /// Active node with a missing or inactive neighbor, not on Gamma.
    Wall,
}

/// Wall-node bookkeeping for the post-step policy.
#[derive(Clone, Debug)]
struct WallNode {
    k: usize,
    /// Inward neighbors across each missing side (the sign-test probes).
    tests: Vec<usize>,
    /// Node the no-flux copy reads from (diagonal inward at corners;
    /// itself when no inward neighbor exists).
    copy_src: usize,
}

/// Per-node classification and neighbor availability for a masked run.
#[derive(Clone, Debug)]
pub struct NodeClasses {
    grid: Grid,
    kind: Vec<NodeKind>,
    missing: Vec<u8>,
    wall_nodes: Vec<WallNode>,
    /// Gamma nodes with the inward neighbor their `v` is copied from.
    gamma_nodes: Vec<(usize, usize)>,
    active_count: usize,
}

impl NodeClasses {
    /// Classify every node of `grid` under the given active mask.
    /// Rectangle tables only: wall normals must be axis vectors.
    pub fn build(geo: &GammaGeometry, grid: &Grid, active: &MaskField) -> Result<Self> {
        if !matches!(geo.domain, Domain::Rect { .. }) {
            return Err(SandtableError::UnsupportedDomain(
                "the finite-difference scheme runs on rectangle tables".into(),
            ));
        }
        if active.grid() != grid {
            return Err(SandtableError::GridMismatch("active mask on a different lattice".into()));
        }
        if active.count() == 0 {
            return Err(SandtableError::EmptyMask);
        }
        let (nx, ny) = (grid.nx, grid.ny);
        let on = |i: isize, j: isize| -> bool {
            i >= 0
                && j >= 0
                && (i as usize) < nx
                && (j as usize) < ny
                && active.data()[j as usize * nx + i as usize]
        };
        let mut kind = vec![NodeKind::Exterior; grid.len()];
        let mut missing = vec![0u8; grid.len()];
        let mut wall_nodes = Vec::new();
        let mut gamma_nodes = Vec::new();
        let mut active_count = 0usize;
        for j in 0..ny {
            for i in 0..nx {
                let k = j * nx + i;
                if !active.data()[k] {
                    continue;
                }
                active_count += 1;
                let (ii, jj) = (i as isize, j as isize);
                // Sides: (bit, inward neighbor offset as coordinates).
                let sides = [
                    (MISS_W, (ii - 1, jj), (ii + 1, jj)),
                    (MISS_E, (ii + 1, jj), (ii - 1, jj)),
                    (MISS_S, (ii, jj - 1), (ii, jj + 1)),
                    (MISS_N, (ii, jj + 1), (ii, jj - 1)),
                ];
                let mut miss = 0u8;
                let mut tests = Vec::new();
                let (mut ci, mut cj) = (ii, jj);
                for (bit, outward, inward) in sides {
                    if !on(outward.0, outward.1) {
                        miss |= bit;
                        ci += inward.0 - ii;
                        cj += inward.1 - jj;
                        if on(inward.0, inward.1) {
                            tests.push(inward.1 as usize * nx + inward.0 as usize);
                        }
                    }
                }
                missing[k] = miss;
                let p = grid.point(i, j);
                let gamma = geo.dist(p).map(|d| d <= geo.tol()).unwrap_or(false);
                let copy_src = if on(ci, cj) { cj as usize * nx + ci as usize } else { k };
                kind[k] = if gamma {
                    gamma_nodes.push((k, copy_src));
                    NodeKind::Gamma
                } else if miss != 0 {
                    wall_nodes.push(WallNode { k, tests, copy_src });
                    NodeKind::Wall
                } else {
                    NodeKind::Interior
                };
            }
        }
        Ok(NodeClasses { grid: grid.clone(), kind, missing, wall_nodes, gamma_nodes, active_count })
    }

    /// Classes for a run on the whole grid.
    pub fn full(geo: &GammaGeometry, grid: &Grid) -> Result<Self> {
        let all = MaskField::new(grid.clone(), vec![true; grid.len()]);
        Self::build(geo, grid, &all)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn kind(&self, k: usize) -> NodeKind {
        self.kind[k]
    }

    pub fn is_active(&self, k: usize) -> bool {
        self.kind[k] != NodeKind::Exterior
    }

    pub fn active_count(&self) -> usize {
        self.active_count
    }

    /// `(interior, gamma, wall)` counts; they partition the active set.
    pub fn counts(&self) -> (usize, usize, usize) {
        let mut n = (0, 0, 0);
        for k in &self.kind {
            match k {
                NodeKind::Interior => n.0 += 1,
                NodeKind::Gamma => n.1 += 1,
                NodeKind::Wall => n.2 += 1,
                NodeKind::Exterior => {}
            }
        }
        n
    }

    /// Wall nodes whose sign-test slopes of `field` are all exactly zero
    /// (nodes on boundary transport rays; the no-flux copy is a no-op
    /// there in the limit).
    fn neutral_wall_count(&self, field: &[f64]) -> usize {
        let h = self.grid.h;
        self.wall_nodes
            .iter()
            .filter(|w| {
                !w.tests.is_empty()
                    && w.tests.iter().all(|&n| (field[w.k] - field[n]) / h == 0.0)
            })
            .count()
    }
}

/// Pile-slope gradient of `u`: per component the one-sided difference
/// with the larger descent away from the node (backward when the node
/// sits above its west/south neighbor, forward when above the east/north
/// one), ties to backward, zero where the node sits at or below both
/// neighbors. Upward kinks (both neighbors higher) carry no slope; the
/// plain largest-magnitude pick would overestimate `|Du|` there
/// permanently, and where the rolling layer is large that excess drains
/// the standing layer below zero.
pub fn maxmod_gradient(u: &ScalarField) -> VectorField {
    let g = u.grid().clone();
    let (nx, ny, h) = (g.nx, g.ny, g.h);
    let d = u.data();
    let data: Vec<[f64; 2]> = (0..g.len())
        .into_par_iter()
        .map(|k| {
            let (i, j) = (k % nx, k / nx);
            let gx = maxmod_1d(
                if i > 0 { Some((d[k] - d[k - 1]) / h) } else { None },
                if i + 1 < nx { Some((d[k + 1] - d[k]) / h) } else { None },
            );
            let gy = maxmod_1d(
                if j > 0 { Some((d[k] - d[k - nx]) / h) } else { None },
                if j + 1 < ny { Some((d[k + nx] - d[k]) / h) } else { None },
            );
            [gx, gy]
        })
        .collect();
    VectorField::new(g, data)
}

fn maxmod_1d(back: Option<f64>, fwd: Option<f64>) -> f64 {
    // Descents: `back` positive when the node is above its backward
    // neighbor, `-fwd` when above the forward one.
    let db = back.map_or(0.0, |b| b.max(0.0));
    let df = fwd.map_or(0.0, |f| (-f).max(0.0));
    if db >= df {
        if db > 0.0 {
            back.unwrap()
        } else {
            0.0
        }
    } else {
        fwd.unwrap()
    }
}

/// Upwind advection product `Dbar v . Du`: per component, the difference
/// of `v` taken on the side the gradient component points toward (forward
/// when positive); a missing neighbor on the chosen side contributes 0.
pub fn upwind_advect(v: &ScalarField, du: &VectorField) -> ScalarField {
    assert!(v.grid() == du.grid(), "fields on different lattices");
    let g = v.grid().clone();
    let (nx, ny, h) = (g.nx, g.ny, g.h);
    let d = v.data();
    let data: Vec<f64> = (0..g.len())
        .into_par_iter()
        .map(|k| {
            let (i, j) = (k % nx, k / nx);
            let [gx, gy] = du.data()[k];
            let x = upwind_1d(
                gx,
                if i > 0 { Some(d[k - 1]) } else { None },
                d[k],
                if i + 1 < nx { Some(d[k + 1]) } else { None },
                h,
            );
            let y = upwind_1d(
                gy,
                if j > 0 { Some(d[k - nx]) } else { None },
                d[k],
                if j + 1 < ny { Some(d[k + nx]) } else { None },
                h,
            );
            x + y
        })
        .collect();
    ScalarField::new(g, data)
}

fn upwind_1d(g: f64, back: Option<f64>, mid: f64, fwd: Option<f64>, h: f64) -> f64 {
    if g > 0.0 {
        match fwd {
            Some(f) => (f - mid) / h * g,
            None => 0.0,
        }
    } else if g < 0.0 {
        match back {
            Some(b) => (mid - b) / h * g,
            None => 0.0,
        }
    } else {
        0.0
    }
}

/// Five-point Laplacian with even-reflected ghosts at grid edges (exact
/// for quadratics at interior nodes).
pub fn laplacian_5pt(u: &ScalarField) -> ScalarField {
    let g = u.grid().clone();
    let (nx, ny, h) = (g.nx, g.ny, g.h);
    let d = u.data();
    let data: Vec<f64> = (0..g.len())
        .into_par_iter()
        .map(|k| {
            let (i, j) = (k % nx, k / nx);
            let uw = if i > 0 { d[k - 1] } else if i + 1 < nx { d[k + 1] } else { d[k] };
            let ue = if i + 1 < nx { d[k + 1] } else if i > 0 { d[k - 1] } else { d[k] };
            let us = if j > 0 { d[k - nx] } else if j + 1 < ny { d[k + nx] } else { d[k] };
            let un = if j + 1 < ny { d[k + nx] } else if j > 0 { d[k - nx] } else { d[k] };
            (uw + ue + us + un - 4.0 * d[k]) / (h * h)
        })
        .collect();
    ScalarField::new(g, data)
}

/// Per-step reduction values.
#[derive(Clone, Copy)]
struct StepStats {
    max_du: f64,
    max_dv: f64,
    bad: bool,
}

impl StepStats {
    fn zero() -> Self {
        StepStats { max_du: 0.0, max_dv: 0.0, bad: false }
    }

    fn join(self, o: StepStats) -> Self {
        StepStats {
            max_du: self.max_du.max(o.max_du),
            max_dv: self.max_dv.max(o.max_dv),
            bad: self.bad || o.bad,
        }
    }
}

/// One fused node update: pile-slope gradient, Laplacian with even
/// reflected ghosts, upwind advection, exchange and source terms.
/// Returns (u', v').
#[inline]
fn node_update(
    k: usize,
    u: &[f64],
    v: &[f64],
    fsrc: &[f64],
    miss: u8,
    nx: usize,
    h: f64,
    dt: f64,
) -> (f64, f64) {
    let uk = u[k];
    let vk = v[k];
    let w = miss & MISS_W == 0;
    let e = miss & MISS_E == 0;
    let s = miss & MISS_S == 0;
    let n = miss & MISS_N == 0;

    let gx = maxmod_1d(
        if w { Some((uk - u[k - 1]) / h) } else { None },
        if e { Some((u[k + 1] - uk) / h) } else { None },
    );
    let gy = maxmod_1d(
        if s { Some((uk - u[k - nx]) / h) } else { None },
        if n { Some((u[k + nx] - uk) / h) } else { None },
    );
    let slope = (gx * gx + gy * gy).sqrt();

    let uw = if w { u[k - 1] } else if e { u[k + 1] } else { uk };
    let ue = if e { u[k + 1] } else if w { u[k - 1] } else { uk };
    let us = if s { u[k - nx] } else if n { u[k + nx] } else { uk };
    let un = if n { u[k + nx] } else if s { u[k - nx] } else { uk };
    let lap = (uw + ue + us + un - 4.0 * uk) / (h * h);

    let upx = upwind_1d(
        gx,
        if w { Some(v[k - 1]) } else { None },
        vk,
        if e { Some(v[k + 1]) } else { None },
        h,
    );
    let upy = upwind_1d(
        gy,
        if s { Some(v[k - nx]) } else { None },
        vk,
        if n { Some(v[k + nx]) } else { None },
        h,
    );

    let exchange = (1.0 - slope) * vk;
    let vn = vk + dt * (vk * lap + upx + upy - exchange + fsrc[k]);
    (uk + dt * exchange, vn)
}

/// Advance one step: read `(u, v)`, write `(un, vn)`, then apply the
/// boundary passes to `vn` (wall policy, then Gamma outflow copies).
/// Rates and stability count the post-policy values; wall copy decisions
/// read the pre-policy buffer, so the pass order over wall nodes is
/// immaterial.
fn step_into(
    u: &[f64],
    v: &[f64],
    un: &mut [f64],
    vn: &mut [f64],
    fsrc: &[f64],
    classes: &NodeClasses,
    params: &SchemeParams,
) -> StepStats {
    let grid = &classes.grid;
    let (nx, h) = (grid.nx, grid.h);
    let dt = params.dt(h);

    let row_stats = |j: usize, urow: &mut [f64], vrow: &mut [f64]| -> StepStats {
        let mut st = StepStats::zero();
        for i in 0..nx {
            let k = j * nx + i;
            match classes.kind[k] {
                NodeKind::Exterior => {
                    urow[i] = 0.0;
                    vrow[i] = 0.0;
                }
                NodeKind::Gamma => {
                    // u pinned; v placeholder until the copy pass.
                    st.max_du = st.max_du.max(u[k].abs());
                    urow[i] = 0.0;
                    vrow[i] = v[k];
                }
                kind => {
                    let (nu, nv) = node_update(k, u, v, fsrc, classes.missing[k], nx, h, dt);
                    st.max_du = st.max_du.max((nu - u[k]).abs());
                    if !nu.is_finite() || nu < -NEG_TOL {
                        st.bad = true;
                    }
                    // Wall rolling values are provisional (the policy
                    // pass replaces them); their deltas count there.
                    if kind != NodeKind::Wall {
                        st.max_dv = st.max_dv.max((nv - v[k]).abs());
                        if !nv.is_finite() || nv < -NEG_TOL {
                            st.bad = true;
                        }
                    }
                    urow[i] = nu;
                    vrow[i] = nv;
                }
            }
        }
        st
    };

    let mut stats = if grid.len() >= PAR_MIN_NODES {
        un.par_chunks_mut(nx)
            .zip(vn.par_chunks_mut(nx))
            .enumerate()
            .map(|(j, (urow, vrow))| row_stats(j, urow, vrow))
            .reduce(StepStats::zero, StepStats::join)
    } else {
        un.chunks_mut(nx)
            .zip(vn.chunks_mut(nx))
            .enumerate()
            .map(|(j, (urow, vrow))| row_stats(j, urow, vrow))
            .fold(StepStats::zero(), StepStats::join)
    };

    // Wall policy on the new state: outward slope of u' strictly positive
    // on any missing side zeroes v', otherwise no-flux copy.
    let decisions: Vec<(usize, f64)> = classes
        .wall_nodes
        .iter()
        .map(|wnode| {
            let k = wnode.k;
            let fire = wnode
                .tests
                .iter()
                .any(|&inw| (un[k] - un[inw]) / h > params.wall_threshold);
            if fire {
                (k, 0.0)
            } else {
                (k, vn[wnode.copy_src])
            }
        })
        .collect();
    for (k, val) in decisions {
        stats.max_dv = stats.max_dv.max((val - v[k]).abs());
        if !val.is_finite() || val < -NEG_TOL {
            stats.bad = true;
        }
        vn[k] = val;
    }
    // Gamma outflow: v takes the inward trace after the wall pass, so a
    // fired wall source propagates its zero.
    for &(k, src) in &classes.gamma_nodes {
        let val = vn[src];
        stats.max_dv = stats.max_dv.max((val - v[k]).abs());
        if !val.is_finite() || val < -NEG_TOL {
            stats.bad = true;
        }
        vn[k] = val;
    }
    stats
}

/// One explicit step (allocating form).
pub fn scheme_step(
    state: &SimState,
    f: &ScalarField,
    params: &SchemeParams,
    classes: &NodeClasses,
) -> Result<SimState> {
    params.validate()?;
    if state.u.grid() != classes.grid() || f.grid() != classes.grid() {
        return Err(SandtableError::GridMismatch("state, source and classes differ".into()));
    }
    let mut un = vec![0.0f64; classes.grid.len()];
    let mut vn = vec![0.0f64; classes.grid.len()];
    let stats = step_into(state.u.data(), state.v.data(), &mut un, &mut vn, f.data(), classes, params);
    let next = SimState {
        u: ScalarField::new(classes.grid.clone(), un),
        v: ScalarField::new(classes.grid.clone(), vn),
        step: state.step + 1,
        time: state.time + params.dt(classes.grid.h),
    };
    if stats.bad {
        return Err(SandtableError::Unstable { step: next.step, state: Box::new(next) });
    }
    Ok(next)
}

/// Run record: rate samples, convergence flag, mass balance, field
/// ranges, and the neutral wall set size.
#[derive(Clone, Debug)]
pub struct RunDiagnostics {
    pub converged: bool,
    pub steps: usize,
    pub final_rate: f64,
    /// `(step, rate)` samples, subsampled on long runs, final step
    /// included.
    pub rate_history: Vec<(usize, f64)>,
    pub u_range: (f64, f64),
    pub v_range: (f64, f64),
    /// Time-integrated source mass `t * sum f h^2`.
    pub mass_source: f64,
    /// Final stored mass `sum (u + v) h^2` over active nodes.
    pub mass_storage: f64,
    /// Time-integrated discrete outflux through Gamma nodes.
    pub mass_outflux: f64,
    /// Wall nodes whose sign-test slopes ended exactly zero (boundary
    /// transport rays).
    pub neutral_wall_nodes: usize,
}

/// A finished (or stopped) run.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub state: SimState,
    pub diagnostics: RunDiagnostics,
}

/// Iterate the scheme from the zero state on an active mask until the
/// rate drops below `steady_tol` or the step budget runs out (the state
/// is still returned, flagged unconverged).
fn masked_run(
    geo: &GammaGeometry,
    grid: &Grid,
    f: &SourceSpec,
    params: &SchemeParams,
    active: &MaskField,
) -> Result<RunOutput> {
    params.validate()?;
    let classes = NodeClasses::build(geo, grid, active)?;
    let fsrc: Vec<f64> = (0..grid.len())
        .map(|k| if classes.is_active(k) { f.eval(grid.point_of(k)) } else { 0.0 })
        .collect();
    let dt = params.dt(grid.h);
    let h = grid.h;
    let budget = params.step_budget(h);
    let cell = h * h;

    let mut u = vec![0.0f64; grid.len()];
    let mut v = vec![0.0f64; grid.len()];
    let mut un = vec![0.0f64; grid.len()];
    let mut vn = vec![0.0f64; grid.len()];

    let source_rate: f64 = fsrc.iter().sum::<f64>() * cell;
    // Gamma nodes with an inward probe neighbor for the outflux estimate
    // (vertical preferred, horizontal fallback).
    let gamma_nodes: Vec<(usize, usize)> = (0..grid.len())
        .filter(|&k| classes.kind[k] == NodeKind::Gamma)
        .filter_map(|k| {
            let m = classes.missing[k];
            let nxs = grid.nx;
            [
                (m & MISS_N == 0).then(|| k + nxs),
                (m & MISS_S == 0).then(|| k - nxs),
                (m & MISS_E == 0).then(|| k + 1),
                (m & MISS_W == 0).then(|| k - 1),
            ]
            .into_iter()
            .flatten()
            .next()
            .map(|n| (k, n))
        })
        .collect();

    let mut rate_history: Vec<(usize, f64)> = Vec::new();
    let stride = (budget / 2000).max(1);
    let mut outflux = 0.0f64;
    let mut converged = false;
    let mut rate = f64::INFINITY;
    let mut step = 0usize;

    while step < budget {
        let stats = step_into(&u, &v, &mut un, &mut vn, &fsrc, &classes, params);
        step += 1;
        if stats.bad {
            let state = SimState {
                u: ScalarField::new(grid.clone(), un),
                v: ScalarField::new(grid.clone(), vn),
                step,
                time: step as f64 * dt,
            };
            return Err(SandtableError::Unstable { step, state: Box::new(state) });
        }
        // Rolling mass crossing Gamma per unit time, estimated from the
        // inward slope of the new standing layer.
        let mut flux = 0.0;
        for &(k, inw) in &gamma_nodes {
            let s = (un[inw] - un[k]) / h;
            if s > 0.0 {
                flux += vn[k] * s * h;
            }
        }
        outflux += flux * dt;

        rate = stats.max_du.max(stats.max_dv) / dt;
        if step % stride == 0 {
            rate_history.push((step, rate));
        }
        std::mem::swap(&mut u, &mut un);
        std::mem::swap(&mut v, &mut vn);
        if rate < params.steady_tol {
            converged = true;
            break;
        }
    }
    if rate_history.last().map(|&(s, _)| s) != Some(step) {
        rate_history.push((step, rate));
    }

    let neutral = classes.neutral_wall_count(&u);
    let storage: f64 = (0..grid.len())
        .map(|k| if classes.is_active(k) { (u[k] + v[k]) * cell } else { 0.0 })
        .sum();
    let fold_range = |xs: &[f64]| {
        xs.iter().enumerate().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (k, &x)| {
            if classes.is_active(k) {
                (lo.min(x), hi.max(x))
            } else {
                (lo, hi)
            }
        })
    };
    let u_range = fold_range(&u);
    let v_range = fold_range(&v);

    Ok(RunOutput {
        state: SimState {
            u: ScalarField::new(grid.clone(), u),
            v: ScalarField::new(grid.clone(), v),
            step,
            time: step as f64 * dt,
        },
        diagnostics: RunDiagnostics {
            converged,
            steps: step,
            final_rate: rate,
            rate_history,
            u_range,
            v_range,
            mass_source: step as f64 * dt * source_rate,
            mass_storage: storage,
            mass_outflux: outflux,
            neutral_wall_nodes: neutral,
        },
    })
}

/// Evolve the full grid from the zero state to (approximate) equilibrium.
pub fn run_to_equilibrium(
    geo: &GammaGeometry,
    grid: &Grid,
    f: &SourceSpec,
    params: &SchemeParams,
) -> Result<RunOutput> {
    let all = MaskField::new(grid.clone(), vec![true; grid.len()]);
    masked_run(geo, grid, f, params, &all)
}

/// Output of a decomposed run: the merged state plus per-region records.
#[derive(Clone, Debug)]
pub struct DecomposedOutput {
    pub state: SimState,
    pub regions: Vec<(RegionLabel, RunDiagnostics)>,
}

/// Run the scheme independently on each region of the partition (cut
/// edges become walls) and merge the results. Ridge-labeled nodes join
/// the region their own projection selects, so the partition covers the
/// grid; a node that resolves to no declared region is an error.
pub fn decomposed_run(
    geo: &GammaGeometry,
    grid: &Grid,
    f: &SourceSpec,
    params: &SchemeParams,
    partition: &LabelField,
) -> Result<DecomposedOutput> {
    if partition.grid() != grid {
        return Err(SandtableError::GridMismatch("partition on a different lattice".into()));
    }
    let regions = partition.regions();
    if regions.is_empty() {
        return Err(SandtableError::PartitionGap("partition has no regions".into()));
    }
    let resolved: Vec<RegionLabel> = partition
        .data()
        .iter()
        .enumerate()
        .map(|(k, &lab)| {
            if lab != RegionLabel::Ridge {
                return Ok(lab);
            }
            let p = geo.domain.clamp(grid.point_of(k));
            let proj = geo
                .project(p)
                .map_err(|_| SandtableError::PartitionGap(format!("node {k} projects nowhere")))?;
            let lab = match proj.points[0].kind {
                ProjectionKind::ArcInterior(i) => RegionLabel::Interior(i),
                ProjectionKind::EndpointA(i) => RegionLabel::EndA(i),
                ProjectionKind::EndpointB(i) => RegionLabel::EndB(i),
            };
            if regions.contains(&lab) {
                Ok(lab)
            } else {
                Err(SandtableError::PartitionGap(format!(
                    "ridge node {k} resolves to {lab:?}, not a declared region"
                )))
            }
        })
        .collect::<Result<_>>()?;

    let mut merged_u = vec![0.0f64; grid.len()];
    let mut merged_v = vec![0.0f64; grid.len()];
    let mut outputs = Vec::new();
    let mut max_step = 0usize;
    let mut max_time = 0.0f64;
    for &label in &regions {
        let mask_data: Vec<bool> = resolved.iter().map(|&l| l == label).collect();
        if !mask_data.iter().any(|&b| b) {
            continue;
        }
        let mask = MaskField::new(grid.clone(), mask_data.clone());
        let out = masked_run(geo, grid, f, params, &mask)?;
        for (k, &inside) in mask_data.iter().enumerate() {
            if inside {
                merged_u[k] = out.state.u.data()[k];
                merged_v[k] = out.state.v.data()[k];
            }
        }
        max_step = max_step.max(out.state.step);
        max_time = max_time.max(out.state.time);
        outputs.push((label, out.diagnostics));
    }
    Ok(DecomposedOutput {
        state: SimState {
            u: ScalarField::new(grid.clone(), merged_u),
            v: ScalarField::new(grid.clone(), merged_v),
            step: max_step,
            time: max_time,
        },
        regions: outputs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic;
    use crate::geometry::Point;

    fn geo() -> GammaGeometry {
        analytic::test_example_geometry()
    }

    fn square_grid(h: f64) -> Grid {
        Grid::nodes(0.0, 0.0, 1.0, 1.0, h).unwrap()
    }

    #[test]
    fn maxmod_picks_steeper_descent_tie_backward() {
        let g = Grid::nodes(0.0, 0.0, 0.2, 0.1, 0.1).unwrap();
        let col = |vals: [f64; 3]| {
            let mut u = ScalarField::zeros(g.clone());
            for (i, val) in vals.into_iter().enumerate() {
                u.set(i, 0, val);
                u.set(i, 1, val);
            }
            maxmod_gradient(&u).get(1, 0)[0]
        };
        // h=0.1; u = [0.4, 0.5, 0.55]: backward descent 1.0, forward side
        // ascends: backward difference 1.0.
        assert!((col([0.4, 0.5, 0.55]) - 1.0).abs() < 1e-12);
        // Local maximum with equal descents: backward wins the tie.
        assert!((col([0.4, 0.5, 0.4]) - 1.0).abs() < 1e-12);
        // Forward descent steeper: signed forward difference.
        assert!((col([0.45, 0.5, 0.3]) - (-2.0)).abs() < 1e-12);
        // Upward kink (both neighbors higher): no pile slope.
        assert_eq!(col([0.6, 0.5, 0.6]), 0.0);
        // Constant field: zero vector.
        let uc = ScalarField::from_fn(g, |_| 3.0);
        assert!(maxmod_gradient(&uc).data().iter().all(|g| g[0] == 0.0 && g[1] == 0.0));
    }

    #[test]
    fn maxmod_eikonal_on_distance_field() {
        let geo = geo();
        let h = 1.0 / 32.0;
        let grid = square_grid(h);
        let d = geo.dist_field(&grid);
        let du = maxmod_gradient(&d);
        // Left-half interior node: gradient (0, 1), unit magnitude.
        let (i, j) = grid.nearest(Point::new(0.25, 0.5));
        let g = du.get(i, j);
        assert!(g[0].abs() < 1e-12 && (g[1] - 1.0).abs() < 1e-12);
        assert!((g[0].hypot(g[1]) - 1.0).abs() < 5.0 * h);
    }

    #[test]
    fn upwind_forward_when_positive() {
        // h=1: v = [1, 2, 4], Du_x = +1: contribution (4-2)/1 * 1 = 2.
        let g = Grid::nodes(0.0, 0.0, 2.0, 1.0, 1.0).unwrap();
        let mut v = ScalarField::zeros(g.clone());
        for (i, val) in [1.0, 2.0, 4.0].into_iter().enumerate() {
            v.set(i, 0, val);
            v.set(i, 1, val);
        }
        let du = VectorField::new(g.clone(), vec![[1.0, 0.0]; g.len()]);
        assert!((upwind_advect(&v, &du).get(1, 0) - 2.0).abs() < 1e-12);
        // Zero gradient field: zero product.
        let du0 = VectorField::new(g.clone(), vec![[0.0, 0.0]; g.len()]);
        assert!(upwind_advect(&v, &du0).data().iter().all(|&x| x == 0.0));
        // Constant v: zero whatever the slope.
        let vc = ScalarField::from_fn(g.clone(), |_| 2.5);
        let dun = VectorField::new(g, vec![[-1.0, 1.0]; vc.grid().len()]);
        assert!(upwind_advect(&vc, &dun).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn laplacian_exact_for_quadratic() {
        let g = Grid::nodes(0.0, 0.0, 1.0, 1.0, 0.125).unwrap();
        let u = ScalarField::from_fn(g.clone(), |p| p.x * p.x);
        let lap = laplacian_5pt(&u);
        for j in 1..g.ny - 1 {
            for i in 1..g.nx - 1 {
                assert!((lap.get(i, j) - 2.0).abs() < 1e-9);
            }
        }
        // Harmonic polynomial: zero.
        let uh = ScalarField::from_fn(g.clone(), |p| p.x + p.y);
        let laph = laplacian_5pt(&uh);
        for j in 1..g.ny - 1 {
            for i in 1..g.nx - 1 {
                assert!(laph.get(i, j).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_state_is_fixed_without_source() {
        let geo = geo();
        let grid = square_grid(0.125);
        let classes = NodeClasses::full(&geo, &grid).unwrap();
        let f = ScalarField::zeros(grid.clone());
        let s1 = scheme_step(&SimState::zero(grid), &f, &SchemeParams::default(), &classes).unwrap();
        assert!(s1.u.data().iter().all(|&x| x == 0.0));
        assert!(s1.v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn first_step_deposits_dt_of_source() {
        // From the zero state every gradient term vanishes, so v1 = dt*f
        // exactly and u1 = 0; the wall copies preserve the constant.
        let geo = geo();
        let grid = square_grid(1.0 / 16.0);
        let classes = NodeClasses::full(&geo, &grid).unwrap();
        let f = ScalarField::from_fn(grid.clone(), |_| 1.0);
        let params = SchemeParams::default();
        let dt = params.dt(grid.h);
        let s1 = scheme_step(&SimState::zero(grid), &f, &params, &classes).unwrap();
        assert!(s1.v.data().iter().all(|&x| x == dt));
        assert!(s1.u.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn unit_slope_freezes_standing_layer() {
        // u = y descends south with slope exactly 1 at every node with a
        // south neighbor, so the exchange term vanishes and u is
        // reproduced bitwise there. The flat south row right of the
        // opening has no descent at all and grows by dt * v.
        let geo = geo();
        let grid = square_grid(0.125);
        let classes = NodeClasses::full(&geo, &grid).unwrap();
        let u = ScalarField::from_fn(grid.clone(), |p| p.y);
        let v = ScalarField::from_fn(grid.clone(), |_| 0.5);
        let f = ScalarField::zeros(grid.clone());
        let state = SimState { u: u.clone(), v, step: 0, time: 0.0 };
        let params = SchemeParams::default();
        let s1 = scheme_step(&state, &f, &params, &classes).unwrap();
        for j in 1..grid.ny {
            for i in 0..grid.nx {
                assert_eq!(s1.u.get(i, j), u.get(i, j), "node ({i},{j})");
            }
        }
        for i in 0..grid.nx {
            let p = grid.point(i, 0);
            let want = if p.x <= 0.5 { 0.0 } else { params.dt(grid.h) * 0.5 };
            assert_eq!(s1.u.get(i, 0), want, "south node {i}");
        }
    }

    #[test]
    fn wall_sign_test_zeroes_ray_end_rolling_layer() {
        // u = y: north wall nodes see outward slope +1 and lose v; west
        // wall nodes see slope 0 and copy the inward value.
        let geo = geo();
        let grid = square_grid(0.125);
        let classes = NodeClasses::full(&geo, &grid).unwrap();
        let u = ScalarField::from_fn(grid.clone(), |p| p.y);
        let v = ScalarField::from_fn(grid.clone(), |_| 0.5);
        let f = ScalarField::zeros(grid.clone());
        let state = SimState { u, v, step: 0, time: 0.0 };
        let s1 = scheme_step(&state, &f, &SchemeParams::default(), &classes).unwrap();
        let top = grid.ny - 1;
        for i in 0..grid.nx {
            assert_eq!(s1.v.get(i, top), 0.0, "north wall column {i}");
        }
        let jmid = grid.ny / 2;
        assert!(s1.v.get(0, jmid) > 0.0);
        assert_eq!(s1.v.get(0, jmid), s1.v.get(1, jmid));
    }

    #[test]
    fn overflow_reports_unstable_with_state() {
        let geo = geo();
        let grid = square_grid(0.25);
        let classes = NodeClasses::full(&geo, &grid).unwrap();
        let mut u = ScalarField::zeros(grid.clone());
        u.set(2, 2, 1e308);
        let v = ScalarField::from_fn(grid.clone(), |_| 1.0);
        let f = ScalarField::zeros(grid.clone());
        let state = SimState { u, v, step: 7, time: 0.0 };
        match scheme_step(&state, &f, &SchemeParams::default(), &classes) {
            Err(SandtableError::Unstable { step, state }) => {
                assert_eq!(step, 8);
                let any_bad = state
                    .u
                    .data()
                    .iter()
                    .chain(state.v.data())
                    .any(|x| !x.is_finite() || *x < 0.0);
                assert!(any_bad);
            }
            other => panic!("expected instability, got {other:?}"),
        }
    }

    #[test]
    fn run_without_source_converges_immediately() {
        let geo = geo();
        let grid = square_grid(0.25);
        let f = SourceSpec::constant(0.0).unwrap();
        let out = run_to_equilibrium(&geo, &grid, &f, &SchemeParams::default()).unwrap();
        assert!(out.diagnostics.converged);
        assert_eq!(out.diagnostics.steps, 1);
        assert!(out.state.u.data().iter().all(|&x| x == 0.0));
        assert!(out.state.v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_region_decomposition_matches_plain_run() {
        let geo = geo();
        let grid = square_grid(1.0 / 16.0);
        let f = SourceSpec::constant(1.0).unwrap();
        let params = SchemeParams { max_steps: Some(20_000), ..SchemeParams::default() };
        let plain = run_to_equilibrium(&geo, &grid, &f, &params).unwrap();
        let one = LabelField::new(grid.clone(), vec![RegionLabel::Interior(0); grid.len()]);
        let dec = decomposed_run(&geo, &grid, &f, &params, &one).unwrap();
        assert_eq!(plain.state.u.data(), dec.state.u.data());
        assert_eq!(plain.state.v.data(), dec.state.v.data());
    }

    #[test]
    fn node_kinds_partition_the_grid() {
        let geo = geo();
        let grid = square_grid(0.125);
        let classes = NodeClasses::full(&geo, &grid).unwrap();
        let (interior, gamma, wall) = classes.counts();
        assert_eq!(interior + gamma + wall, grid.len());
        // 9x9 grid: the open-boundary row y=0, x in [0, 0.5] holds 5
        // nodes; the remaining 27 edge nodes are walls.
        assert_eq!(gamma, 5);
        assert_eq!(wall, 27);
    }

    #[test]
    fn converged_run_approximates_distance_on_left_half() {
        let geo = geo();
        let grid = square_grid(1.0 / 16.0);
        let f = SourceSpec::constant(1.0).unwrap();
        let out = run_to_equilibrium(&geo, &grid, &f, &SchemeParams::default()).unwrap();
        assert!(out.diagnostics.converged, "rate {}", out.diagnostics.final_rate);
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                let p = grid.point(i, j);
                if p.x <= 0.45 {
                    assert!(
                        (out.state.u.get(i, j) - p.y).abs() < 0.1,
                        "u({}, {}) = {}",
                        p.x,
                        p.y,
                        out.state.u.get(i, j)
                    );
                }
            }
        }
        assert!(out.state.v.data().iter().all(|&x| x >= 0.0));
        assert!(out.diagnostics.neutral_wall_nodes > 0);
    }
}
