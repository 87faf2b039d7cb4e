//! Discrete evaluation of both sides of the energy, embedding and sup-bound
//! inequalities, and the bookkeeping of the level-set iteration.
//!
//! All integrals use the midpoint rule of [`crate::mesh`]: a nodal function is
//! averaged over the `2^(dim+1)` corners of a space-time cell, nonlinearities
//! are applied to that average, and ball cells carry their exact overlap area.
//! Truncations `(u - k)_±` are taken at the nodes before averaging.
//!
//! Cylinders follow the calligraphic convention: `Cylinder::new(x0, t0, R, len)`
//! is `B_R(x0) x (t0 - len, t0)`. The iteration cylinders are
//!
//! ```text
//! R_n   = sigma rho + (1 - sigma) rho / 2^n
//! ell_n = (sigma + (1 - sigma) / 2^n) rho^(tilde_p / 2),   Q_n = B_{R_n} x (t0 - ell_n^2, t0)
//! k_n   = k - k / 2^n
//! ```
//!
//! so `Q_0` is the cylinder of radius `rho` and time length `rho^tilde_p` and the
//! limit is the cylinder of radius `sigma rho` and time length `sigma^2 rho^tilde_p`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::doublephase::FluxModel;
use crate::exponents::{ExponentError, ExponentSet, VarthetaConvention};
use crate::mesh::{CutoffPair, Cylinder, CylinderQuadrature, Field, MeshError, Sign, SpaceTimeGrid};
use crate::scalar::{norm2, Point, Real, Vec2};

#[derive(Debug, Error)]
pub enum EstimateError {
    #[error("level k = {k} is incompatible with the {sign} truncation")]
    LevelSignMismatch { k: f64, sign: &'static str },
    #[error("cylinder is not inside the grid: {0}")]
    CylinderOutOfRange(#[from] MeshError),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(&'static str),
    #[error("smallness condition fails (c lambda y0^vartheta = {product:e}); first failing step {first_failure:?}")]
    SmallnessViolated { product: f64, flags: Vec<bool>, first_failure: Option<usize> },
    #[error(transparent)]
    Exponent(#[from] ExponentError),
}

/// Grid resolution recorded with every report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridDescriptor {
    pub dim: usize,
    pub nx: usize,
    pub nt: usize,
    pub h: f64,
    pub dt: f64,
}

impl GridDescriptor {
    pub fn of<T: Real>(g: &SpaceTimeGrid<T>) -> Self {
        GridDescriptor { dim: g.dim, nx: g.nx, nt: g.nt, h: g.h.as_f64(), dt: g.dt.as_f64() }
    }
}

/// Growth exponents and, when the regime is validated, every derived exponent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportParams {
    pub p: f64,
    pub q: f64,
    pub exponents: Option<ExponentSet<f64>>,
}

impl ReportParams {
    fn from_exponents<T: Real>(exps: &ExponentSet<T>) -> Self {
        ReportParams { p: exps.p.as_f64(), q: exps.q.as_f64(), exponents: Some(exponents_f64(exps)) }
    }
}

fn exponents_f64<T: Real>(e: &ExponentSet<T>) -> ExponentSet<f64> {
    ExponentSet {
        n: e.n,
        p: e.p.as_f64(),
        q: e.q.as_f64(),
        nu: e.nu.as_f64(),
        ell_bound: e.ell_bound.as_f64(),
        a_sup: e.a_sup.as_f64(),
        tilde_p: e.tilde_p.as_f64(),
        theta: e.theta.as_f64(),
        embedding_theta: e.embedding_theta.as_f64(),
        vartheta: e.vartheta.as_f64(),
        lambda: e.lambda.as_f64(),
        ln_lambda: e.ln_lambda.as_f64(),
    }
}

/// One evaluation of an inequality: both sides with constants stripped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub name: String,
    pub lhs: f64,
    pub rhs_unconstant: f64,
    /// `lhs / rhs_unconstant`; absent when both sides vanish.
    pub empirical_c: Option<f64>,
    pub grid: GridDescriptor,
    pub params: ReportParams,
    pub seed: u64,
    /// Refinement level index within a ladder.
    pub level: usize,
    /// The swept parameter of the evaluation (level `k`, `sigma`, scale factor, ...).
    pub param: f64,
    /// Free-form case label, e.g. `plus` or `theorem`.
    pub aux: String,
    pub empty_level_set: bool,
}

pub const CSV_HEADER: &str = "name,level,h,dt,param,lhs,rhs_unconstant,empirical_c,seed,aux";

impl EstimateReport {
    fn new(name: &str, lhs: f64, rhs: f64, grid: GridDescriptor, params: ReportParams) -> Self {
        EstimateReport {
            name: name.to_string(),
            lhs,
            rhs_unconstant: rhs,
            empirical_c: ratio(lhs, rhs),
            grid,
            params,
            seed: 0,
            level: 0,
            param: 0.0,
            aux: String::new(),
            empty_level_set: false,
        }
    }

    /// Flat row matching [`CSV_HEADER`]; floats carry 17 significant digits.
    pub fn csv_row(&self) -> String {
        let c = self.empirical_c.map(|c| format!("{c:.16e}")).unwrap_or_default();
        format!(
            "{},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{},{},{}",
            self.name, self.level, self.grid.h, self.grid.dt, self.param, self.lhs, self.rhs_unconstant, c, self.seed, self.aux
        )
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_level(mut self, level: usize) -> Self {
        self.level = level;
        self
    }

    pub fn with_param(mut self, param: f64) -> Self {
        self.param = param;
        self
    }

    pub fn with_aux(mut self, aux: impl Into<String>) -> Self {
        self.aux = aux.into();
        self
    }
}

fn ratio(lhs: f64, rhs: f64) -> Option<f64> {
    if rhs > 0.0 {
        Some(lhs / rhs)
    } else if lhs > 0.0 {
        Some(f64::INFINITY)
    } else {
        None
    }
}

/// The eight corner values of space-time cell `(c, j)`; 1D grids repeat corners.
#[inline]
fn corners<T: Real>(grid: &SpaceTimeGrid<T>, values: &[T], c: usize, j: usize) -> [T; 8] {
    let k = grid.cell_corners(c);
    let n = grid.nodes_per_slice();
    let (a, b) = (j * n, (j + 1) * n);
    [
        values[a + k[0]],
        values[a + k[1]],
        values[a + k[2]],
        values[a + k[3]],
        values[b + k[0]],
        values[b + k[1]],
        values[b + k[2]],
        values[b + k[3]],
    ]
}

#[inline]
fn corner_mean<T: Real>(v: &[T; 8]) -> T {
    let s = (v[0] + v[1]) + (v[2] + v[3]) + (v[4] + v[5]) + (v[6] + v[7]);
    s * T::lit(0.125)
}

/// Gradient at the cell center: cell-centered differences averaged over both slices.
#[inline]
fn corner_gradient<T: Real>(v: &[T; 8], h: T) -> Vec2<T> {
    let w = T::lit(0.25) / h;
    let gx = (v[1] - v[0]) + (v[3] - v[2]) + (v[5] - v[4]) + (v[7] - v[6]);
    let gy = (v[2] - v[0]) + (v[3] - v[1]) + (v[6] - v[4]) + (v[7] - v[5]);
    [gx * w, gy * w]
}

/// Spatial corner values of cell `c` on slice `j`, repeated for 1D grids.
#[inline]
fn slice_corners<T: Real>(grid: &SpaceTimeGrid<T>, values: &[T], c: usize, j: usize) -> [T; 4] {
    let k = grid.cell_corners(c);
    let a = j * grid.nodes_per_slice();
    [values[a + k[0]], values[a + k[1]], values[a + k[2]], values[a + k[3]]]
}

/// Spatial mean over the ball at each slice of the quadrature, maximized.
fn sup_slice_mean<T: Real>(quad: &CylinderQuadrature<T>, mut f: impl FnMut(usize, usize) -> T) -> T {
    let mut best = T::zero();
    for &j in &quad.slices {
        let m = quad.integrate_spatial(|c| f(c, j)) / quad.ball_measure;
        best = best.max(m);
    }
    best
}

/// Both sides of the energy (Caccioppoli) inequality for the truncation `(u - k)_±`
/// on `outer`, with cutoffs `cut` built on `outer`.
///
/// ```text
/// lhs = sup_t avg_B W^2 eta^q zeta^2 / len  +  avg_Q H(z, eta |DW|) zeta^2
/// rhs = avg_Q H(z, W |D eta|) zeta^2        +  avg_Q W^2 eta^q zeta d_t zeta
/// ```
///
/// with `len` the time length of `outer`, `H(z, s) = s^p + a(z) s^q`, and the
/// exponent on `eta` the flux exponent `q`. `W` truncates the multilinear
/// interpolant of `u`, so `DW = Du` where `W > 0` and zero elsewhere; each
/// space-time cell is sampled at `sub^(dim+1)` sub-cell midpoints. The cutoffs
/// are evaluated exactly.
pub fn caccioppoli_sides<T: Real>(
    u: &Field<T>,
    flux: &FluxModel<T>,
    k: T,
    sign: Sign,
    outer: &Cylinder<T>,
    cut: &CutoffPair<T>,
) -> Result<EstimateReport, EstimateError> {
    caccioppoli_sides_sampled(u, flux, k, sign, outer, cut, CACCIOPPOLI_SUBSAMPLES)
}

/// Sub-cell samples per axis used by [`caccioppoli_sides`].
pub const CACCIOPPOLI_SUBSAMPLES: usize = 2;

/// [`caccioppoli_sides`] with an explicit number of sub-cell samples per axis.
pub fn caccioppoli_sides_sampled<T: Real>(
    u: &Field<T>,
    flux: &FluxModel<T>,
    k: T,
    sign: Sign,
    outer: &Cylinder<T>,
    cut: &CutoffPair<T>,
    sub: usize,
) -> Result<EstimateReport, EstimateError> {
    let mut out = caccioppoli_batch(u, flux, &[(k, sign)], outer, cut, sub)?;
    Ok(out.pop().expect("one level in, one report out"))
}

/// [`caccioppoli_sides`] for several `(level, sign)` pairs in one pass over the
/// field. Reports come back in input order.
pub fn caccioppoli_batch<T: Real>(
    u: &Field<T>,
    flux: &FluxModel<T>,
    levels: &[(T, Sign)],
    outer: &Cylinder<T>,
    cut: &CutoffPair<T>,
    sub: usize,
) -> Result<Vec<EstimateReport>, EstimateError> {
    if sub == 0 {
        return Err(EstimateError::InvalidSchedule("need at least one sample per axis"));
    }
    let grid = u.grid();
    let quad = CylinderQuadrature::new(grid, outer)?;
    let vals = u.values();
    let q = flux.q;
    let h = grid.h;
    let one = T::one();
    let half = T::lit(0.5);
    let frac: Vec<T> = (0..sub).map(|i| (T::from_usize_lossy(i) + half) / T::from_usize_lossy(sub)).collect();
    let ys: &[T] = if grid.dim == 2 { &frac } else { &frac[..1] };
    let ns = frac.len() * ys.len();
    let per_cell = T::from_usize_lossy(ns);
    let slope = cut.eta_slope();
    let zeta_rate = one / (cut.len_out - cut.len_in);
    let dzeta_at = |t: T| {
        let s = t - (cut.t0 - cut.len_out);
        if s > T::zero() && s < cut.len_out - cut.len_in {
            zeta_rate
        } else {
            T::zero()
        }
    };

    // exact cutoff data at the spatial sample points, cell by cell
    let mut eta_s = vec![T::zero(); grid.cells_per_slice() * ns];
    let mut eta_q = eta_s.clone();
    let mut d_eta = eta_s.clone();
    for &(c, _) in &quad.cells {
        let origin = grid.cell_center(c);
        for (iy, &fy) in ys.iter().enumerate() {
            for (ix, &fx) in frac.iter().enumerate() {
                let x = [origin[0] + (fx - half) * h, origin[1] + (fy - half) * h];
                let i = c * ns + iy * frac.len() + ix;
                let d = norm2(&[x[0] - cut.center[0], x[1] - cut.center[1]]);
                eta_s[i] = cut.eta(&x);
                eta_q[i] = eta_s[i].powf(q);
                d_eta[i] = if d > cut.r_in && d < cut.r_out { slope } else { T::zero() };
            }
        }
    }
    // the interpolant stays between its corner values, so a cell whose corners
    // all lie on the wrong side of a level contributes nothing to it
    let active = |v: &[T], (k, sign): (T, Sign)| v.iter().any(|&x| sign.part(x, k) > T::zero());

    let nl = levels.len();
    let mut sup = vec![T::zero(); nl];
    let mut slice_acc = vec![T::zero(); nl];
    for &j in &quad.slices {
        let z = cut.zeta(grid.time(j));
        if z == T::zero() {
            continue;
        }
        slice_acc.iter_mut().for_each(|a| *a = T::zero());
        for &(c, wc) in &quad.cells {
            let v = slice_corners(grid, vals, c, j);
            for (l, &lev) in levels.iter().enumerate() {
                if !active(&v, lev) {
                    continue;
                }
                let mut acc = T::zero();
                for (iy, &fy) in ys.iter().enumerate() {
                    for (ix, &fx) in frac.iter().enumerate() {
                        let val = (v[0] * (one - fx) + v[1] * fx) * (one - fy) + (v[2] * (one - fx) + v[3] * fx) * fy;
                        let w = lev.1.part(val, lev.0);
                        acc += w * w * eta_q[c * ns + iy * frac.len() + ix];
                    }
                }
                slice_acc[l] += wc * acc;
            }
        }
        for l in 0..nl {
            sup[l] = sup[l].max(slice_acc[l] / per_cell * z * z / quad.ball_measure);
        }
    }

    let mut energy = vec![T::zero(); nl];
    let mut h_eta = vec![T::zero(); nl];
    let mut time_term = vec![T::zero(); nl];
    let norm_cell = one / (per_cell * T::from_usize_lossy(frac.len()));
    let mut live = Vec::with_capacity(nl);
    for &(j, wt) in quad.time_cells() {
        let t_lo = grid.time(j);
        for &(c, wc) in &quad.cells {
            let v = corners(grid, vals, c, j);
            live.clear();
            live.extend((0..nl).filter(|&l| active(&v, levels[l])));
            if live.is_empty() {
                continue;
            }
            let origin = grid.cell_center(c);
            let scale = wt * wc * norm_cell;
            for &ft in &frac {
                let t = t_lo + ft * grid.dt;
                let (z, dz) = (cut.zeta(t), dzeta_at(t));
                if z == T::zero() {
                    continue;
                }
                let a = flux.coefficient(Point::new(origin, t));
                let (zz, zdz) = (scale * z * z, scale * z * dz);
                for (iy, &fy) in ys.iter().enumerate() {
                    for (ix, &fx) in frac.iter().enumerate() {
                        let (val, grad) = trilinear(&v, fx, fy, ft, h);
                        let i = c * ns + iy * frac.len() + ix;
                        let mut h_grad = None;
                        for &l in &live {
                            let (k, sign) = levels[l];
                            let w = sign.part(val, k);
                            if w == T::zero() {
                                continue;
                            }
                            let hg = *h_grad.get_or_insert_with(|| flux.h_with(a, eta_s[i] * norm2(&grad)));
                            energy[l] += hg * zz;
                            if d_eta[i] > T::zero() {
                                h_eta[l] += flux.h_with(a, w * d_eta[i]) * zz;
                            }
                            time_term[l] += w * w * eta_q[i] * zdz;
                        }
                    }
                }
            }
        }
    }

    let m = quad.measure();
    let gd = GridDescriptor::of(grid);
    Ok(levels
        .iter()
        .enumerate()
        .map(|(l, &(k, sign))| {
            let lhs = sup[l] / outer.length + energy[l] / m;
            let rhs = h_eta[l] / m + time_term[l] / m;
            let mut report = EstimateReport::new(
                "caccioppoli",
                lhs.as_f64(),
                rhs.as_f64(),
                gd.clone(),
                ReportParams { p: flux.p.as_f64(), q: q.as_f64(), exponents: None },
            )
            .with_param(k.as_f64())
            .with_aux(sign.as_str());
            report.empty_level_set = vals.iter().all(|&v| sign.part(v, k) == T::zero());
            report
        })
        .collect())
}

/// Value and spatial gradient of the multilinear interpolant of a space-time
/// cell at local coordinates `(fx, fy, ft)` in `[0, 1]^3`.
#[inline]
fn trilinear<T: Real>(v: &[T; 8], fx: T, fy: T, ft: T, h: T) -> (T, Vec2<T>) {
    let one = T::one();
    let plane = |o: usize| {
        let lo = v[o] * (one - fx) + v[o + 1] * fx;
        let hi = v[o + 2] * (one - fx) + v[o + 3] * fx;
        let val = lo * (one - fy) + hi * fy;
        let gx = ((v[o + 1] - v[o]) * (one - fy) + (v[o + 3] - v[o + 2]) * fy) / h;
        let gy = (hi - lo) / h;
        (val, gx, gy)
    };
    let (a, ax, ay) = plane(0);
    let (b, bx, by) = plane(4);
    let mix = |p: T, r: T| p * (one - ft) + r * ft;
    (mix(a, b), [mix(ax, bx), mix(ay, by)])
}

/// Both sides of the parabolic embedding on `cylinder` of radius `R`:
///
/// ```text
/// lhs = avg_Q |f/R|^q
/// rhs = (avg_Q [|Df|^p + |f/R|^p])^(q theta/p) * (sup_t avg_B |f/R|^2)^(q(1-theta)/2)
/// ```
///
/// with `theta = theta(n, p, q)` at the working `q`.
pub fn embedding_sides<T: Real>(f: &Field<T>, cylinder: &Cylinder<T>, exps: &ExponentSet<T>) -> Result<EstimateReport, EstimateError> {
    let grid = f.grid();
    let quad = CylinderQuadrature::new(grid, cylinder)?;
    let inv_r = T::one() / cylinder.radius;
    let (p, q, theta) = (exps.p, exps.q, exps.embedding_theta);
    let vals = f.values();
    let mut lhs = T::zero();
    let mut energy = T::zero();
    for &(j, wt) in quad.time_cells() {
        let (mut l, mut e) = (T::zero(), T::zero());
        for &(c, wc) in &quad.cells {
            let v = corners(grid, vals, c, j);
            let fr = (corner_mean(&v) * inv_r).abs();
            l += wc * fr.powf(q);
            e += wc * (norm2(&corner_gradient(&v, grid.h)).powf(p) + fr.powf(p));
        }
        lhs += wt * l;
        energy += wt * e;
    }
    let m = quad.measure();
    let lhs = lhs / m;
    let energy = energy / m;
    let sup = sup_slice_mean(&quad, |c, j| {
        let v = slice_corners(grid, vals, c, j);
        let fr = T::lit(0.25) * ((v[0] + v[1]) + (v[2] + v[3])) * inv_r;
        fr * fr
    });
    let two = T::lit(2.0);
    let rhs = energy.powf(q * theta / p) * sup.powf(q * (T::one() - theta) / two);
    Ok(EstimateReport::new("embedding", lhs.as_f64(), rhs.as_f64(), GridDescriptor::of(grid), ReportParams::from_exponents(exps)))
}

/// Shrinking cylinders and rising levels of the iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CylinderSchedule<T> {
    pub center: Vec2<T>,
    pub t0: T,
    pub sigma: T,
    pub rho: T,
    pub k: T,
    pub depth: usize,
    pub tilde_p: T,
    pub radii: Vec<T>,
    pub half_radii: Vec<T>,
    /// `ell_n`; the time length of `Q_n` is `ell_n^2`.
    pub ell: Vec<T>,
    pub half_ell: Vec<T>,
    pub time_lengths: Vec<T>,
    pub levels: Vec<T>,
}

/// Default number of iteration steps.
pub const DEFAULT_DEPTH: usize = 8;

impl<T: Real> CylinderSchedule<T> {
    /// Schedule with `depth + 1` cylinders `Q_0, ..., Q_depth` centered at `z0`.
    pub fn new(z0: Point<T>, rho: T, sigma: T, k: T, depth: usize, tilde_p: T) -> Result<Self, EstimateError> {
        if !(sigma > T::zero() && sigma < T::one()) {
            return Err(EstimateError::InvalidSchedule("sigma must lie in (0, 1)"));
        }
        if !(rho > T::zero() && rho <= T::one()) {
            return Err(EstimateError::InvalidSchedule("rho must lie in (0, 1]"));
        }
        if depth < 2 {
            return Err(EstimateError::InvalidSchedule("depth must be at least 2"));
        }
        if !k.is_finite() || !tilde_p.is_finite() || !(tilde_p > T::zero()) {
            return Err(EstimateError::InvalidSchedule("level and tilde_p must be finite"));
        }
        let two = T::lit(2.0);
        let time_scale = rho.powf(tilde_p / two);
        let contraction = |n: usize| sigma + (T::one() - sigma) / two.powi(n as i32);
        let radii: Vec<T> = (0..=depth + 1).map(|n| rho * contraction(n)).collect();
        let ell: Vec<T> = (0..=depth + 1).map(|n| time_scale * contraction(n)).collect();
        let half_radii = (0..=depth).map(|n| (radii[n] + radii[n + 1]) / two).collect();
        let half_ell = (0..=depth).map(|n| (ell[n] + ell[n + 1]) / two).collect();
        let levels = (0..=depth + 1).map(|n| k - k / two.powi(n as i32)).collect();
        let time_lengths = ell.iter().map(|&l| l * l).collect();
        Ok(CylinderSchedule { center: z0.x, t0: z0.t, sigma, rho, k, depth, tilde_p, radii, half_radii, ell, half_ell, time_lengths, levels })
    }

    /// `Q_n`, for `n <= depth + 1`.
    pub fn cylinder(&self, n: usize) -> Cylinder<T> {
        Cylinder::new(self.center, self.t0, self.radii[n], self.time_lengths[n])
    }

    /// The intermediate cylinder between `Q_{n+1}` and `Q_n`.
    pub fn half_cylinder(&self, n: usize) -> Cylinder<T> {
        Cylinder::new(self.center, self.t0, self.half_radii[n], self.half_ell[n] * self.half_ell[n])
    }

    /// Limit cylinder of radius `sigma rho` and time length `sigma^2 rho^tilde_p`.
    pub fn limit_cylinder(&self) -> Cylinder<T> {
        let l = self.sigma * self.rho.powf(self.tilde_p / T::lit(2.0));
        Cylinder::new(self.center, self.t0, self.sigma * self.rho, l * l)
    }

    /// Truncation direction implied by the sign of `k`.
    pub fn sign(&self) -> Result<Sign, EstimateError> {
        if self.k > T::zero() {
            Ok(Sign::Plus)
        } else if self.k < T::zero() {
            Ok(Sign::Minus)
        } else {
            Err(EstimateError::LevelSignMismatch { k: 0.0, sign: "plus or minus" })
        }
    }
}

/// Level-set energies of the iteration on one field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeGiorgiTrace {
    pub sign: Sign,
    pub k: f64,
    pub sigma: f64,
    pub lambda: f64,
    /// `Y_0, ..., Y_depth`.
    pub y: Vec<f64>,
    /// `|A_0|, ..., |A_depth|`.
    pub levelset_measures: Vec<f64>,
    /// Per step `Y_{n+1} / ((2^(tilde_p n) |k|^(q - tilde_p) / (1 - sigma)^q)^(1 + vartheta) Y_n^(1 + vartheta))`;
    /// `None` when `Y_n = 0`.
    pub recursion_constants: Vec<Option<f64>>,
    /// `Y_n <= Y_0 / lambda^n`.
    pub decay_flags: Vec<bool>,
    /// First step whose level set is empty, after which every `Y` is zero.
    pub empty_from: Option<usize>,
}

impl DeGiorgiTrace {
    /// Largest recursion constant, zero when none is defined.
    pub fn max_recursion_constant(&self) -> f64 {
        self.recursion_constants.iter().flatten().fold(0.0, |m: f64, &c| m.max(c))
    }

    pub fn all_decay(&self) -> bool {
        self.decay_flags.iter().all(|&f| f)
    }

    /// `|A_{n+1}| <= |A_n|` for every step.
    pub fn levelsets_nonincreasing(&self) -> bool {
        self.levelset_measures.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12))
    }
}

/// `(Y_n, |A_n|)` on `Q_n` for the level `k_n`.
fn level_energy<T: Real>(u: &Field<T>, cyl: &Cylinder<T>, level: T, sign: Sign, rho: T, tilde_p: T) -> Result<(T, T), EstimateError> {
    let grid = u.grid();
    let quad = CylinderQuadrature::new(grid, cyl)?;
    let vals = u.values();
    let inv_rho = T::one() / rho;
    let mut energy = T::zero();
    let mut measure = T::zero();
    for &(j, wt) in quad.time_cells() {
        let (mut e, mut a) = (T::zero(), T::zero());
        for &(c, wc) in &quad.cells {
            let v = corners(grid, vals, c, j);
            let tr = v.map(|x| sign.part(x, level));
            e += wc * (corner_mean(&tr) * inv_rho).powf(tilde_p);
            if sign.part(corner_mean(&v), level) > T::zero() {
                a += wc;
            }
        }
        energy += wt * e;
        measure += wt * a;
    }
    Ok((energy / quad.measure(), measure))
}

/// Level-set energies `Y_n`, measures `|A_n|`, recursion constants and decay
/// flags on the schedule's cylinders.
pub fn degiorgi_sequence<T: Real>(u: &Field<T>, sched: &CylinderSchedule<T>, exps: &ExponentSet<T>) -> Result<DeGiorgiTrace, EstimateError> {
    let sign = sched.sign()?;
    let depth = sched.depth;
    let tp = exps.tilde_p;
    let per_level: Vec<Result<(T, T), EstimateError>> = (0..=depth)
        .into_par_iter()
        .map(|n| level_energy(u, &sched.cylinder(n), sched.levels[n], sign, sched.rho, tp))
        .collect();
    let mut y = Vec::with_capacity(depth + 1);
    let mut measures = Vec::with_capacity(depth + 1);
    let mut empty_from = None;
    for (n, r) in per_level.into_iter().enumerate() {
        let (yn, an) = r?;
        if empty_from.is_none() && n > 0 && yn == T::zero() {
            empty_from = Some(n);
        }
        if empty_from.is_some() {
            y.push(0.0);
            measures.push(0.0);
        } else {
            y.push(yn.as_f64());
            measures.push(an.as_f64());
        }
    }
    let (q, vt) = (exps.q.as_f64(), exps.vartheta.as_f64());
    let tpf = tp.as_f64();
    let sigma = sched.sigma.as_f64();
    let kabs = sched.k.abs().as_f64();
    // ln of (|k|^(q - tilde_p) / (1 - sigma)^q)
    let ln_k_factor = (q - tpf) * kabs.ln() - q * (1.0 - sigma).ln();
    let recursion_constants = (0..depth)
        .map(|n| {
            if y[n] > 0.0 {
                let ln_den = (1.0 + vt) * (n as f64 * tpf * std::f64::consts::LN_2 + ln_k_factor + y[n].ln());
                Some(if y[n + 1] > 0.0 { (y[n + 1].ln() - ln_den).exp() } else { 0.0 })
            } else {
                None
            }
        })
        .collect();
    let ln_lambda = exps.ln_lambda.as_f64();
    let decay_flags = y
        .iter()
        .enumerate()
        .map(|(n, &yn)| yn == 0.0 || yn.ln() <= y[0].ln() - n as f64 * ln_lambda + 1e-12)
        .collect();
    Ok(DeGiorgiTrace {
        sign,
        k: sched.k.as_f64(),
        sigma,
        lambda: exps.lambda.as_f64(),
        y,
        levelset_measures: measures,
        recursion_constants,
        decay_flags,
        empty_from,
    })
}

/// Both sides of the Chebyshev bound on step `n`:
/// `(∬_{Q_n} (u - k_n)_±^s, |k|^s |A_{n+1}| / 2^((n+1)s))`. The first is never smaller.
pub fn levelset_chebyshev<T: Real>(u: &Field<T>, sched: &CylinderSchedule<T>, n: usize, s: T) -> Result<(T, T), EstimateError> {
    if n >= sched.depth {
        return Err(EstimateError::InvalidSchedule("step must be below the schedule depth"));
    }
    if !(s > T::zero()) {
        return Err(EstimateError::InvalidSchedule("power s must be positive"));
    }
    let sign = sched.sign()?;
    let grid = u.grid();
    let vals = u.values();
    let quad = CylinderQuadrature::new(grid, &sched.cylinder(n))?;
    let level = sched.levels[n];
    let first = quad.integrate(|c, j| corner_mean(&corners(grid, vals, c, j).map(|x| sign.part(x, level))).powf(s));
    let (_, measure) = level_energy(u, &sched.cylinder(n + 1), sched.levels[n + 1], sign, sched.rho, T::one())?;
    let second = sched.k.abs().powf(s) * measure / T::lit(2.0).powf(T::from_usize_lossy(n + 1) * s);
    Ok((first, second))
}

/// Both sides of the local sup bound around `z0`:
///
/// ```text
/// lhs = max |u| over nodes of the closed cylinder (sigma rho, sigma^2 rho^tilde_p)
/// rhs = (1 - sigma)^(q/(q - tilde_p)) E1^e1 E2^e2
/// E1  = avg_{Q(rho, rho^tilde_p)} [|Du|^p + |u|^p / rho^p],   E2 = sup_t avg_B |u|^2 / rho^2
/// e1  = chi tilde_p theta / p,  e2 = chi tilde_p (1 - theta) / 2,  chi = vartheta / ((tilde_p - q)(1 + vartheta))
/// ```
///
/// with `theta = theta(n, p, tilde_p)` and `vartheta` in the requested convention.
pub fn supbound_sides<T: Real>(
    u: &Field<T>,
    z0: Point<T>,
    rho: T,
    sigma: T,
    exps: &ExponentSet<T>,
    convention: VarthetaConvention,
) -> Result<EstimateReport, EstimateError> {
    if !(sigma > T::zero() && sigma < T::one()) {
        return Err(EstimateError::InvalidSchedule("sigma must lie in (0, 1)"));
    }
    if !(rho > T::zero()) {
        return Err(EstimateError::InvalidSchedule("rho must be positive"));
    }
    let grid = u.grid();
    let (p, q, tp, theta) = (exps.p, exps.q, exps.tilde_p, exps.theta);
    let outer = Cylinder::new(z0.x, z0.t, rho, rho.powf(tp));
    let quad = CylinderQuadrature::new(grid, &outer)?;
    let inner = Cylinder::new(z0.x, z0.t, sigma * rho, sigma * sigma * rho.powf(tp));
    let xtol = T::lit(1e-9) * grid.h;
    let ttol = T::lit(1e-9) * grid.dt;
    let mut lhs = T::zero();
    for j in 0..grid.nt {
        let t = grid.time(j);
        if t < inner.t_start() - ttol || t > inner.t0 + ttol {
            continue;
        }
        for (node, &v) in u.slice(j).iter().enumerate() {
            let x = grid.node_coords(node);
            if norm2(&[x[0] - z0.x[0], x[1] - z0.x[1]]) <= inner.radius + xtol {
                lhs = lhs.max(v.abs());
            }
        }
    }
    let vals = u.values();
    let inv_rho = T::one() / rho;
    let e1 = quad.integrate(|c, j| {
        let v = corners(grid, vals, c, j);
        norm2(&corner_gradient(&v, grid.h)).powf(p) + (corner_mean(&v).abs() * inv_rho).powf(p)
    }) / quad.measure();
    let e2 = sup_slice_mean(&quad, |c, j| {
        let v = slice_corners(grid, vals, c, j);
        let m = T::lit(0.25) * ((v[0] + v[1]) + (v[2] + v[3])) * inv_rho;
        m * m
    });
    let chi = exps.energy_exponent(convention);
    let ex1 = chi * tp * theta / p;
    let ex2 = chi * tp * (T::one() - theta) / T::lit(2.0);
    let rhs = (T::one() - sigma).powf(q / (q - tp)) * e1.powf(ex1) * e2.powf(ex2);
    Ok(EstimateReport::new("supbound", lhs.as_f64(), rhs.as_f64(), GridDescriptor::of(grid), ReportParams::from_exponents(exps))
        .with_param(sigma.as_f64())
        .with_aux(convention.as_str()))
}

/// The extremal sequence `Y_{n+1} = c b^(n(1+vartheta)) Y_n^(1+vartheta)` from `y0`,
/// in natural logarithms (`-inf` for zero terms), `depth + 1` terms.
pub fn replay_recursion(y0: f64, c: f64, b: f64, vartheta: f64, depth: usize) -> Vec<f64> {
    let mut ln_y = Vec::with_capacity(depth + 1);
    ln_y.push(y0.ln());
    for n in 0..depth {
        let prev = ln_y[n];
        ln_y.push(c.ln() + n as f64 * (1.0 + vartheta) * b.ln() + (1.0 + vartheta) * prev);
    }
    ln_y
}

/// Replays the induction on the recursion `Y_{n+1} <= c b^(n(1+vartheta)) Y_n^(1+vartheta)`,
/// where `c` already carries the level and `sigma` factors.
///
/// With `lambda = b^((1+vartheta)/vartheta)` the induction closes under
/// `c lambda Y_0^vartheta <= 1`; the extremal sequence then satisfies
/// `Y_n <= Y_0 / lambda^n` at every `n` (equality in the tight case). Flags
/// compare the extremal sequence with that bound to relative precision `1e-9`.
pub fn fast_convergence_check(y0: f64, c: f64, b: f64, vartheta: f64, depth: usize) -> Result<Vec<bool>, EstimateError> {
    if !(y0 >= 0.0) || !(c > 0.0) || !(b > 1.0) || !(vartheta > 0.0) {
        return Err(EstimateError::InvalidSchedule("need y0 >= 0, c > 0, b > 1, vartheta > 0"));
    }
    if y0 == 0.0 {
        return Ok(vec![true; depth + 1]);
    }
    let ln_lambda = (1.0 + vartheta) / vartheta * b.ln();
    let ln_y = replay_recursion(y0, c, b, vartheta, depth);
    let flags: Vec<bool> = ln_y.iter().enumerate().map(|(n, &l)| l <= ln_y[0] - n as f64 * ln_lambda + 1e-9).collect();
    let ln_product = c.ln() + ln_lambda + vartheta * y0.ln();
    if ln_product > 1e-12 {
        return Err(EstimateError::SmallnessViolated {
            product: ln_product.exp(),
            first_failure: flags.iter().position(|&f| !f),
            flags,
        });
    }
    Ok(flags)
}

/// `max(c_n)` needed for the smallness condition with the measured constants:
/// `c_emp lambda (|k|^(q - tilde_p) / (1 - sigma)^q)^(1 + vartheta) Y_0^vartheta`.
pub fn smallness_product(trace: &DeGiorgiTrace, exps: &ExponentSet<f64>) -> f64 {
    let y0 = trace.y[0];
    let c = trace.max_recursion_constant();
    if y0 == 0.0 || c == 0.0 {
        return 0.0;
    }
    let vt = exps.vartheta;
    let ln_k = (exps.q - exps.tilde_p) * trace.k.abs().ln() - exps.q * (1.0 - trace.sigma).ln();
    (c.ln() + exps.ln_lambda + (1.0 + vt) * ln_k + vt * y0.ln()).exp()
}
