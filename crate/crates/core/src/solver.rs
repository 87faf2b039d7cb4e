//! Backward Euler time stepping for `u_t = div A(z, Du)` on the grid box with
//! Dirichlet data, and the discrete weak-form residual of a computed field.
//!
//! Each step freezes the regularized diffusivity
//! `D_eps(s, z) = (s^2 + eps^2)^((p-2)/2) + a(z) (s^2 + eps^2)^((q-2)/2)`
//! at the previous Picard iterate and solves the resulting symmetric
//! M-matrix system with Jacobi-preconditioned conjugate gradients. Diffusivities
//! live on cells; edge coefficients average the cells adjacent to an edge.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::doublephase::FluxModel;
use crate::mesh::{cell_means, slice_gradient, CylinderQuadrature, Field, MeshError, SpaceTimeGrid};
use crate::scalar::{dot2, norm2, Point, Real};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("Picard iteration did not converge at slice {slice}")]
    PicardDiverged { slice: usize, trace: Box<SolveTrace> },
    #[error("conjugate gradients stalled at slice {slice}")]
    CgStalled { slice: usize, trace: Box<SolveTrace> },
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("initial data has {got} values, a slice has {expected}")]
    IncompatibleInitial { expected: usize, got: usize },
    #[error("step at slice {slice} left the data bounds by {amount:e}")]
    MaxPrincipleViolated { slice: usize, amount: f64 },
    #[error("test function does not vanish on the boundary of the grid cover")]
    TestNotCompactlySupported,
    #[error("test field lives on a different grid")]
    GridMismatch,
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

/// How the time step is tied to the mesh size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DtRule<T> {
    Fixed { dt: T },
    /// `dt = c * h^p`.
    Intrinsic { c: T },
}

impl<T: Real> DtRule<T> {
    pub fn dt(&self, h: T, p: T) -> T {
        match *self {
            DtRule::Fixed { dt } => dt,
            DtRule::Intrinsic { c } => c * h.powf(p),
        }
    }

    /// Number of slices so that the step does not exceed the rule over `time_length`.
    pub fn time_slices(&self, h: T, p: T, time_length: T) -> usize {
        let steps = (time_length / self.dt(h, p)).ceil().to_usize().unwrap_or(1).max(1);
        steps + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig<T> {
    /// `None` selects `eps = h`.
    pub regularization_eps: Option<T>,
    pub picard_tol: T,
    pub picard_max: usize,
    pub cg_tol: T,
    pub cg_max: usize,
    pub dt_rule: DtRule<T>,
}

impl<T: Real> Default for SolverConfig<T> {
    fn default() -> Self {
        SolverConfig {
            regularization_eps: None,
            picard_tol: T::lit(1e-8),
            picard_max: 200,
            cg_tol: T::lit(1e-11),
            cg_max: 10_000,
            dt_rule: DtRule::Intrinsic { c: T::one() },
        }
    }
}

impl<T: Real> SolverConfig<T> {
    pub fn validate(&self) -> Result<(), SolverError> {
        let unit = |v: T| v > T::zero() && v < T::one();
        if !unit(self.picard_tol) {
            return Err(SolverError::InvalidConfig("picard_tol must lie in (0, 1)"));
        }
        if !unit(self.cg_tol) {
            return Err(SolverError::InvalidConfig("cg_tol must lie in (0, 1)"));
        }
        if self.picard_max == 0 || self.cg_max == 0 {
            return Err(SolverError::InvalidConfig("iteration limits must be at least 1"));
        }
        if let Some(eps) = self.regularization_eps {
            if !(eps >= T::zero()) || !eps.is_finite() {
                return Err(SolverError::InvalidConfig("regularization_eps must be finite and nonnegative"));
            }
        }
        match self.dt_rule {
            DtRule::Fixed { dt } if !(dt > T::zero()) => Err(SolverError::InvalidConfig("fixed dt must be positive")),
            DtRule::Intrinsic { c } if !(c > T::zero()) => Err(SolverError::InvalidConfig("dt rule factor must be positive")),
            _ => Ok(()),
        }
    }

    pub fn eps(&self, h: T) -> T {
        self.regularization_eps.unwrap_or(h)
    }
}

/// Per-step solver statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub picard_iters: usize,
    pub cg_iters: usize,
    /// Relative nonlinear residual of the accepted iterate.
    pub residual: f64,
    pub seconds: f64,
    /// Largest correction needed to bring the linear-solver output back inside the data bounds.
    pub clamp: f64,
    /// Discrete spatial L2 energy `h^dim Σ u^2` after the step.
    pub energy: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveTrace {
    pub initial_energy: f64,
    pub steps: Vec<StepRecord>,
}

impl SolveTrace {
    pub fn max_clamp(&self) -> f64 {
        self.steps.iter().fold(0.0, |m, s| m.max(s.clamp))
    }

    /// Whether the energy never increased from one slice to the next.
    pub fn energy_nonincreasing(&self) -> bool {
        let mut prev = self.initial_energy;
        for s in &self.steps {
            if s.energy > prev {
                return false;
            }
            prev = s.energy;
        }
        true
    }

    pub fn total_seconds(&self) -> f64 {
        self.steps.iter().map(|s| s.seconds).sum()
    }
}

/// Dirichlet data on the lateral boundary of the grid box.
#[derive(Clone)]
pub enum BoundaryData<T> {
    Zero,
    Constant(T),
    Function(Arc<dyn Fn(Point<T>) -> T + Send + Sync>),
}

impl<T: Real> std::fmt::Debug for BoundaryData<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BoundaryData::Zero => write!(f, "Zero"),
            BoundaryData::Constant(c) => write!(f, "Constant({c})"),
            BoundaryData::Function(_) => write!(f, "Function(..)"),
        }
    }
}

impl<T: Real> BoundaryData<T> {
    pub fn function(f: impl Fn(Point<T>) -> T + Send + Sync + 'static) -> Self {
        BoundaryData::Function(Arc::new(f))
    }

    pub fn eval(&self, z: Point<T>) -> T {
        match self {
            BoundaryData::Zero => T::zero(),
            BoundaryData::Constant(c) => *c,
            BoundaryData::Function(f) => f(z),
        }
    }

    /// Full slice whose boundary entries carry the data at time `t`; interior entries are zero.
    pub fn slice(&self, grid: &SpaceTimeGrid<T>, t: T) -> Vec<T> {
        (0..grid.nodes_per_slice())
            .map(|n| if grid.is_boundary_node(n) { self.eval(Point::new(grid.node_coords(n), t)) } else { T::zero() })
            .collect()
    }
}

/// Discrete spatial L2 energy of a slice.
pub fn slice_energy<T: Real>(grid: &SpaceTimeGrid<T>, u: &[T]) -> T {
    grid.cell_volume() * u.iter().map(|&v| v * v).sum::<T>()
}

/// Edge conductances of the frozen diffusion operator, scaled by `1/h^2`.
struct Conductances<T> {
    east: Vec<T>,
    north: Vec<T>,
}

fn conductances<T: Real>(grid: &SpaceTimeGrid<T>, diff: &[T]) -> Conductances<T> {
    let nodes = grid.nodes_per_slice();
    let nx = grid.nx;
    let m = nx - 1;
    let inv_h2 = T::one() / (grid.h * grid.h);
    let half = T::lit(0.5);
    let mut east = vec![T::zero(); nodes];
    let mut north = vec![T::zero(); if grid.dim == 2 { nodes } else { 0 }];
    if grid.dim == 1 {
        for i in 0..m {
            east[i] = diff[i] * inv_h2;
        }
        return Conductances { east, north };
    }
    for iy in 0..nx {
        for ix in 0..m {
            // cells below and above the horizontal edge
            let below = if iy > 0 { Some(diff[ix + m * (iy - 1)]) } else { None };
            let above = if iy < m { Some(diff[ix + m * iy]) } else { None };
            let d = match (below, above) {
                (Some(a), Some(b)) => half * (a + b),
                (Some(a), None) | (None, Some(a)) => a,
                (None, None) => T::zero(),
            };
            east[ix + nx * iy] = d * inv_h2;
        }
    }
    for iy in 0..m {
        for ix in 0..nx {
            let left = if ix > 0 { Some(diff[ix - 1 + m * iy]) } else { None };
            let right = if ix < m { Some(diff[ix + m * iy]) } else { None };
            let d = match (left, right) {
                (Some(a), Some(b)) => half * (a + b),
                (Some(a), None) | (None, Some(a)) => a,
                (None, None) => T::zero(),
            };
            north[ix + nx * iy] = d * inv_h2;
        }
    }
    Conductances { east, north }
}

/// `(I/dt + L) x` restricted to interior rows; boundary entries of `x` must be zero.
struct StepOperator<'a, T> {
    grid: &'a SpaceTimeGrid<T>,
    cond: &'a Conductances<T>,
    inv_dt: T,
    interior: &'a [bool],
}

impl<'a, T: Real> StepOperator<'a, T> {
    fn diagonal(&self, n: usize) -> T {
        let g = self.grid;
        let c = self.cond;
        let mut d = self.inv_dt + c.east[n] + c.east[n - 1];
        if g.dim == 2 {
            d += c.north[n] + c.north[n - g.nx];
        }
        d
    }

    fn apply(&self, x: &[T], out: &mut [T]) {
        let g = self.grid;
        let c = self.cond;
        let nx = g.nx;
        for n in 0..x.len() {
            if !self.interior[n] {
                out[n] = T::zero();
                continue;
            }
            let mut v = self.diagonal(n) * x[n] - c.east[n] * x[n + 1] - c.east[n - 1] * x[n - 1];
            if g.dim == 2 {
                v -= c.north[n] * x[n + nx] + c.north[n - nx] * x[n - nx];
            }
            out[n] = v;
        }
    }

    /// Contribution of known boundary values to interior rows.
    fn boundary_rhs(&self, bc: &[T], out: &mut [T]) {
        let g = self.grid;
        let c = self.cond;
        let nx = g.nx;
        for n in 0..bc.len() {
            if !self.interior[n] {
                continue;
            }
            let mut v = T::zero();
            let mut add = |w: T, nb: usize| {
                if !self.interior[nb] {
                    v += w * bc[nb];
                }
            };
            add(c.east[n], n + 1);
            add(c.east[n - 1], n - 1);
            if g.dim == 2 {
                add(c.north[n], n + nx);
                add(c.north[n - nx], n - nx);
            }
            out[n] += v;
        }
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Jacobi-preconditioned CG; returns the iteration count or `None` if `cg_max` is hit.
fn pcg<T: Real>(op: &StepOperator<'_, T>, b: &[T], x: &mut [T], tol: T, max_iter: usize) -> Option<usize> {
    let n = b.len();
    let inv_diag: Vec<T> = (0..n).map(|i| if op.interior[i] { T::one() / op.diagonal(i) } else { T::zero() }).collect();
    let b_norm = dot(b, b).sqrt();
    if b_norm == T::zero() {
        x.iter_mut().for_each(|v| *v = T::zero());
        return Some(0);
    }
    let mut r = vec![T::zero(); n];
    op.apply(x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    let mut z: Vec<T> = r.iter().zip(&inv_diag).map(|(&a, &d)| a * d).collect();
    let mut p = z.clone();
    let mut ap = vec![T::zero(); n];
    let mut rz = dot(&r, &z);
    for it in 0..=max_iter {
        if dot(&r, &r).sqrt() <= tol * b_norm {
            return Some(it);
        }
        if it == max_iter {
            break;
        }
        op.apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > T::zero()) {
            return None;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    None
}

/// Failure of a single step, before the slice index is attached.
#[derive(Debug)]
pub enum StepFailure {
    Picard(StepRecord),
    Cg(StepRecord),
    Bounds(f64),
}

/// One backward Euler step with Picard linearization.
///
/// `bc_next` is a full slice whose boundary entries are the Dirichlet values at
/// `t_next`; its interior entries are ignored.
#[allow(clippy::too_many_arguments)]
pub fn step_implicit<T: Real>(
    grid: &SpaceTimeGrid<T>,
    u_prev: &[T],
    flux: &FluxModel<T>,
    cfg: &SolverConfig<T>,
    dt: T,
    t_next: T,
    bc_next: &[T],
) -> Result<(Vec<T>, StepRecord), StepFailure> {
    let started = Instant::now();
    let nodes = grid.nodes_per_slice();
    let interior: Vec<bool> = (0..nodes).map(|n| !grid.is_boundary_node(n)).collect();
    let eps = cfg.eps(grid.h);
    let inv_dt = T::one() / dt;

    let mut lo = T::infinity();
    let mut hi = T::neg_infinity();
    for n in 0..nodes {
        let v = if interior[n] { u_prev[n] } else { bc_next[n] };
        lo = lo.min(v);
        hi = hi.max(v);
    }

    let a_cells: Vec<T> = (0..grid.cells_per_slice()).map(|c| flux.coefficient(Point::new(grid.cell_center(c), t_next))).collect();
    let bc_only: Vec<T> = (0..nodes).map(|n| if interior[n] { T::zero() } else { bc_next[n] }).collect();
    let mut u_m: Vec<T> = (0..nodes).map(|n| if interior[n] { u_prev[n] } else { bc_next[n] }).collect();

    let diffusivities = |u: &[T]| -> Vec<T> {
        slice_gradient(grid, u).iter().zip(&a_cells).map(|(g, &a)| flux.diffusivity(a, norm2(g), eps)).collect()
    };

    let mut record = StepRecord {
        step: 0,
        picard_iters: 0,
        cg_iters: 0,
        residual: f64::NAN,
        seconds: 0.0,
        clamp: 0.0,
        energy: f64::NAN,
        converged: false,
    };
    let mut prev_change = T::infinity();
    let mut non_contracting = 0usize;
    let mut rhs = vec![T::zero(); nodes];
    let mut x = vec![T::zero(); nodes];
    let mut converged = false;

    for _ in 0..cfg.picard_max {
        record.picard_iters += 1;
        let cond = conductances(grid, &diffusivities(&u_m));
        let op = StepOperator { grid, cond: &cond, inv_dt, interior: &interior };
        for n in 0..nodes {
            rhs[n] = if interior[n] { u_prev[n] * inv_dt } else { T::zero() };
            x[n] = if interior[n] { u_m[n] } else { T::zero() };
        }
        op.boundary_rhs(&bc_only, &mut rhs);
        match pcg(&op, &rhs, &mut x, cfg.cg_tol, cfg.cg_max) {
            Some(it) => record.cg_iters += it,
            None => {
                record.cg_iters += cfg.cg_max;
                record.seconds = started.elapsed().as_secs_f64();
                return Err(StepFailure::Cg(record));
            }
        }
        let damp = non_contracting >= 10;
        let mut change = T::zero();
        let mut size = T::zero();
        for n in 0..nodes {
            if !interior[n] {
                continue;
            }
            let candidate = if damp { u_m[n] + T::lit(0.5) * (x[n] - u_m[n]) } else { x[n] };
            if !candidate.is_finite() {
                record.seconds = started.elapsed().as_secs_f64();
                return Err(StepFailure::Picard(record));
            }
            change = change.max((candidate - u_m[n]).abs());
            size = size.max(candidate.abs());
            u_m[n] = candidate;
        }
        let rel = if size > T::zero() { change / size } else { change };
        if rel < cfg.picard_tol {
            converged = true;
            break;
        }
        if rel >= prev_change {
            non_contracting += 1;
        }
        prev_change = rel;
    }
    if !converged {
        record.seconds = started.elapsed().as_secs_f64();
        return Err(StepFailure::Picard(record));
    }

    let mut clamp = T::zero();
    for n in 0..nodes {
        if interior[n] {
            let c = u_m[n].max(lo).min(hi);
            clamp = clamp.max((c - u_m[n]).abs());
            u_m[n] = c;
        }
    }
    let scale = T::one() + lo.abs().max(hi.abs());
    if clamp > T::lit(1e-6) * scale {
        return Err(StepFailure::Bounds(clamp.as_f64()));
    }

    // nonlinear residual with the diffusivity of the accepted iterate
    let cond = conductances(grid, &diffusivities(&u_m));
    let op = StepOperator { grid, cond: &cond, inv_dt, interior: &interior };
    let mut xi = u_m.clone();
    for n in 0..nodes {
        rhs[n] = if interior[n] { u_prev[n] * inv_dt } else { T::zero() };
        if !interior[n] {
            xi[n] = T::zero();
        }
    }
    op.boundary_rhs(&bc_only, &mut rhs);
    let mut au = vec![T::zero(); nodes];
    op.apply(&xi, &mut au);
    let res: T = au.iter().zip(&rhs).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>().sqrt();
    let rhs_norm = dot(&rhs, &rhs).sqrt();
    record.residual = if rhs_norm > T::zero() { (res / rhs_norm).as_f64() } else { res.as_f64() };
    record.clamp = clamp.as_f64();
    record.energy = slice_energy(grid, &u_m).as_f64();
    record.converged = true;
    record.seconds = started.elapsed().as_secs_f64();
    Ok((u_m, record))
}

/// Marches [`step_implicit`] over every slice of `grid`.
pub fn solve_cylinder<T: Real>(
    initial: &[T],
    flux: &FluxModel<T>,
    grid: &SpaceTimeGrid<T>,
    cfg: &SolverConfig<T>,
    bc: &BoundaryData<T>,
) -> Result<(Field<T>, SolveTrace), SolverError> {
    cfg.validate()?;
    let nodes = grid.nodes_per_slice();
    if initial.len() != nodes {
        return Err(SolverError::IncompatibleInitial { expected: nodes, got: initial.len() });
    }
    let mut values = Vec::with_capacity(grid.len());
    values.extend_from_slice(initial);
    let mut trace = SolveTrace { initial_energy: slice_energy(grid, initial).as_f64(), steps: Vec::with_capacity(grid.nt - 1) };
    for j in 1..grid.nt {
        let t_next = grid.time(j);
        let bc_next = bc.slice(grid, t_next);
        let prev = &values[(j - 1) * nodes..j * nodes];
        match step_implicit(grid, prev, flux, cfg, grid.dt, t_next, &bc_next) {
            Ok((next, mut record)) => {
                record.step = j;
                trace.steps.push(record);
                values.extend_from_slice(&next);
            }
            Err(StepFailure::Picard(mut record)) => {
                record.step = j;
                trace.steps.push(record);
                return Err(SolverError::PicardDiverged { slice: j, trace: Box::new(trace) });
            }
            Err(StepFailure::Cg(mut record)) => {
                record.step = j;
                trace.steps.push(record);
                return Err(SolverError::CgStalled { slice: j, trace: Box::new(trace) });
            }
            Err(StepFailure::Bounds(amount)) => return Err(SolverError::MaxPrincipleViolated { slice: j, amount }),
        }
    }
    Ok((Field::new(*grid, values)?, trace))
}

/// Discrete `∬ (-u φ_t + A(z, Du)·Dφ) dz` over the grid cover.
///
/// The test field must vanish on the lateral boundary and on the first and last slices.
pub fn weak_form_residual<T: Real>(u: &Field<T>, flux: &FluxModel<T>, test: &Field<T>) -> Result<T, SolverError> {
    let grid = u.grid();
    if test.grid() != grid {
        return Err(SolverError::GridMismatch);
    }
    let scale = test.max_abs();
    let tol = T::lit(1e-12) * scale;
    for j in 0..grid.nt {
        let s = test.slice(j);
        let whole = j == 0 || j == grid.nt - 1;
        for (n, &v) in s.iter().enumerate() {
            if (whole || grid.is_boundary_node(n)) && v.abs() > tol {
                return Err(SolverError::TestNotCompactlySupported);
            }
        }
    }
    let quad = CylinderQuadrature::cover(grid);
    let half = T::lit(0.5);
    let inv_dt = T::one() / grid.dt;
    let slice_data = |f: &Field<T>, j: usize| (cell_means(grid, f.slice(j)), slice_gradient(grid, f.slice(j)));
    let mut total = T::zero();
    let (mut u0, mut du0) = slice_data(u, 0);
    let (mut p0, mut dp0) = slice_data(test, 0);
    for &(j, wt) in quad.time_cells() {
        let (u1, du1) = slice_data(u, j + 1);
        let (p1, dp1) = slice_data(test, j + 1);
        let tc = grid.time_cell_center(j);
        let s = quad.integrate_spatial(|c| {
            let uc = half * (u0[c] + u1[c]);
            let phi_t = (p1[c] - p0[c]) * inv_dt;
            let du = [half * (du0[c][0] + du1[c][0]), half * (du0[c][1] + du1[c][1])];
            let dp = [half * (dp0[c][0] + dp1[c][0]), half * (dp0[c][1] + dp1[c][1])];
            let a = flux.coefficient(Point::new(grid.cell_center(c), tc));
            -uc * phi_t + dot2(&flux.flux_with(a, &du), &dp)
        });
        total += wt * s;
        u0 = u1;
        du0 = du1;
        p0 = p1;
        dp0 = dp1;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::doublephase::CoefficientFn;
    use std::f64::consts::PI;

    fn heat_flux() -> FluxModel<f64> {
        FluxModel::new(2.0, 2.0, CoefficientFn::constant(0.0).unwrap()).unwrap()
    }

    fn dp_flux(grid: &SpaceTimeGrid<f64>) -> FluxModel<f64> {
        FluxModel::new(2.0, 2.5, CoefficientFn::smooth_bump(1.0, grid).unwrap()).unwrap()
    }

    #[test]
    fn constants_are_stationary() {
        let g = SpaceTimeGrid::new(2, 9, 5, [0.0, 0.0], 0.1, 1.0, 0.1).unwrap();
        let flux = dp_flux(&g);
        let init = vec![1.5; g.nodes_per_slice()];
        let (u, trace) = solve_cylinder(&init, &flux, &g, &SolverConfig::default(), &BoundaryData::Constant(1.5)).unwrap();
        assert!(u.values().iter().all(|&v| (v - 1.5).abs() < 1e-12));
        assert_eq!(trace.steps.len(), 4);
    }

    #[test]
    fn affine_data_is_stationary() {
        let g = SpaceTimeGrid::new(2, 9, 5, [0.0, 0.0], 0.1, 1.0, 0.1).unwrap();
        let flux = FluxModel::new(3.0, 3.5, CoefficientFn::constant(0.7).unwrap()).unwrap();
        let affine = |x: [f64; 2]| 0.3 + 1.2 * x[0] - 0.4 * x[1];
        let init: Vec<f64> = (0..g.nodes_per_slice()).map(|n| affine(g.node_coords(n))).collect();
        let bc = BoundaryData::function(move |z: Point<f64>| affine(z.x));
        let (u, _) = solve_cylinder(&init, &flux, &g, &SolverConfig::default(), &bc).unwrap();
        for j in 0..g.nt {
            for (a, b) in u.slice(j).iter().zip(&init) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn zero_data_gives_zero_field() {
        let g = SpaceTimeGrid::new(2, 9, 4, [0.0, 0.0], 0.0, 1.0, 0.5).unwrap();
        let init = vec![0.0; g.nodes_per_slice()];
        let (u, trace) = solve_cylinder(&init, &dp_flux(&g), &g, &SolverConfig::default(), &BoundaryData::Zero).unwrap();
        assert!(u.values().iter().all(|&v| v == 0.0));
        assert!(trace.energy_nonincreasing());
    }

    fn heat_error(nx: usize) -> f64 {
        // x in (0, 1), t in (0, 0.1], dt = h^2
        let h = 1.0 / (nx - 1) as f64;
        let rule = DtRule::Intrinsic { c: 1.0 };
        let nt = rule.time_slices(h, 2.0, 0.1);
        let g = SpaceTimeGrid::new(1, nx, nt, [0.5, 0.0], 0.1, 0.5, 0.1).unwrap();
        let init: Vec<f64> = (0..nx).map(|n| (PI * g.node_coords(n)[0]).sin()).collect();
        let (u, _) = solve_cylinder(&init, &heat_flux(), &g, &SolverConfig::default(), &BoundaryData::Zero).unwrap();
        let mut err: f64 = 0.0;
        for j in 0..g.nt {
            let t = g.time(j) - g.t_start();
            for (n, v) in u.slice(j).iter().enumerate() {
                let exact = (-PI * PI * t).exp() * (PI * g.node_coords(n)[0]).sin();
                err = err.max((v - exact).abs());
            }
        }
        err
    }

    #[test]
    fn heat_kernel_second_order() {
        let e: Vec<f64> = [9, 17, 33].iter().map(|&n| heat_error(n)).collect();
        for w in e.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!(order > 1.8, "errors {e:?}");
        }
    }

    #[test]
    fn energy_decays_and_bounds_hold() {
        let g = SpaceTimeGrid::<f64>::new(2, 13, 11, [0.0, 0.0], 0.2, 1.0, 0.2).unwrap();
        let flux = FluxModel::new(2.0, 2.5, CoefficientFn::checkerboard(2.0, &g, 3).unwrap()).unwrap();
        let init: Vec<f64> = (0..g.nodes_per_slice())
            .map(|n| {
                let x = g.node_coords(n);
                (1.0 - x[0] * x[0]) * (1.0 - x[1] * x[1]) * (3.0 * x[0] + 1.0).sin()
            })
            .collect();
        let (u, trace) = solve_cylinder(&init, &flux, &g, &SolverConfig::default(), &BoundaryData::Zero).unwrap();
        assert!(trace.energy_nonincreasing());
        let lo = init.iter().cloned().fold(0.0, f64::min);
        let hi = init.iter().cloned().fold(0.0, f64::max);
        assert!(u.values().iter().all(|&v| v >= lo && v <= hi));
        assert!(trace.max_clamp() < 1e-9);
    }

    #[test]
    fn comparison_principle() {
        let g = SpaceTimeGrid::new(2, 11, 9, [0.0, 0.0], 0.1, 1.0, 0.1).unwrap();
        let flux = dp_flux(&g);
        let base: Vec<f64> = (0..g.nodes_per_slice()).map(|n| (2.0 * g.node_coords(n)[0]).cos()).collect();
        let upper: Vec<f64> = base.iter().enumerate().map(|(n, v)| v + 0.1 + 0.05 * (n % 3) as f64).collect();
        let cfg = SolverConfig::default();
        let (u1, _) = solve_cylinder(&base, &flux, &g, &cfg, &BoundaryData::Constant(0.2)).unwrap();
        let (u2, _) = solve_cylinder(&upper, &flux, &g, &cfg, &BoundaryData::Constant(0.3)).unwrap();
        for (a, b) in u1.values().iter().zip(u2.values()) {
            assert!(a <= b);
        }
    }

    #[test]
    fn deterministic_output() {
        let g = SpaceTimeGrid::new(2, 9, 6, [0.0, 0.0], 0.1, 1.0, 0.1).unwrap();
        let flux = dp_flux(&g);
        let init: Vec<f64> = (0..g.nodes_per_slice()).map(|n| (g.node_coords(n)[0] * 5.0).sin()).collect();
        let cfg = SolverConfig::default();
        let (a, _) = solve_cylinder(&init, &flux, &g, &cfg, &BoundaryData::Zero).unwrap();
        let (b, _) = solve_cylinder(&init, &flux, &g, &cfg, &BoundaryData::Zero).unwrap();
        assert!(a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn config_validation_and_errors() {
        let mut cfg = SolverConfig::<f64>::default();
        cfg.picard_tol = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = SolverConfig::<f64>::default();
        cfg.cg_max = 0;
        assert!(cfg.validate().is_err());
        let g = SpaceTimeGrid::new(1, 9, 3, [0.0, 0.0], 0.1, 1.0, 0.1).unwrap();
        let init = vec![0.0; 4];
        assert!(matches!(
            solve_cylinder(&init, &heat_flux(), &g, &SolverConfig::default(), &BoundaryData::Zero),
            Err(SolverError::IncompatibleInitial { .. })
        ));
        // a single CG iteration cannot reach the tolerance on a nontrivial system
        let mut tight = SolverConfig::default();
        tight.cg_max = 1;
        let init: Vec<f64> = (0..9).map(|n| (n as f64 * 0.7).sin()).collect();
        assert!(matches!(
            solve_cylinder(&init, &heat_flux(), &g, &tight, &BoundaryData::Zero),
            Err(SolverError::CgStalled { slice: 1, .. })
        ));
        let mut short = SolverConfig::default();
        short.picard_max = 1;
        let flux = FluxModel::new(3.0, 3.0, CoefficientFn::constant(0.0).unwrap()).unwrap();
        match solve_cylinder(&init, &flux, &g, &short, &BoundaryData::Zero) {
            Err(SolverError::PicardDiverged { slice, trace }) => {
                assert_eq!(slice, 1);
                assert_eq!(trace.steps.len(), 1);
            }
            other => panic!("expected Picard failure, got {other:?}"),
        }
    }

    fn bump(s: f64) -> f64 {
        if s.abs() >= 1.0 {
            0.0
        } else {
            (1.0 - 1.0 / (1.0 - s * s)).exp()
        }
    }

    #[test]
    fn weak_residual_of_zero_and_of_t() {
        let g = SpaceTimeGrid::new(2, 33, 33, [0.0, 0.0], 0.0, 1.0, 1.0).unwrap();
        let flux = dp_flux(&g);
        let phi = Field::from_fn(g, |z| bump(z.x[0] / 0.8) * bump(z.x[1] / 0.8) * bump((z.t + 0.5) / 0.45));
        let zero = Field::zeros(g);
        assert_eq!(weak_form_residual(&zero, &flux, &phi).unwrap(), 0.0);
        // u = t: residual = -∬ t φ_t = ∬ φ; oracle by fine tensor midpoint quadrature
        let u = Field::from_fn(g, |z| z.t);
        let r = weak_form_residual(&u, &flux, &phi).unwrap();
        let m = 400;
        let mut oracle = 0.0;
        let hq = 2.0 / m as f64;
        let mut sx = 0.0;
        for i in 0..m {
            sx += bump((-1.0 + (i as f64 + 0.5) * hq) / 0.8) * hq;
        }
        let mut st = 0.0;
        for i in 0..m {
            st += bump((-1.0 + (i as f64 + 0.5) / m as f64 + 0.5) / 0.45) / m as f64;
        }
        oracle += sx * sx * st;
        assert!(oracle > 0.01);
        assert!((r - oracle).abs() < 0.02 * oracle, "{r} vs {oracle}");
        let bad = Field::constant(g, 1.0);
        assert!(matches!(weak_form_residual(&u, &flux, &bad), Err(SolverError::TestNotCompactlySupported)));
    }
}
