//! Uniform tensor grids over parabolic cylinders and the discrete calculus
//! used by the solver and the estimates.
//!
//! Conventions:
//!
//! * Nodes of a slice are numbered `ix + nx * iy`; slices are stored one after
//!   another, so a [`Field`] value lives at `slice * nodes_per_slice + node`.
//! * Spatial cells are numbered by their lower-left node, `cx + (nx - 1) * cy`.
//!   Time cell `j` spans `[t_j, t_{j+1}]`.
//! * Nodal quantities are evaluated at space-time cell centers by averaging
//!   the `2^(dim+1)` corner values; gradients are cell-centered differences
//!   averaged over the two bounding slices.
//! * Ball integrals weight each cell by the exact measure of its intersection
//!   with the ball.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{norm2, Point, Real, Vec2};

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("invalid grid: {0}")]
    InvalidGrid(&'static str),
    #[error("field has {got} values, grid needs {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("field value at index {0} is not finite")]
    NonFinite(usize),
    #[error("region is empty")]
    EmptyRegion,
    #[error("region is not contained in the grid cover: {0}")]
    OutOfRange(&'static str),
    #[error("slice {slice} out of range (nt = {nt})")]
    SliceOutOfRange { slice: usize, nt: usize },
    #[error("cutoff gap is degenerate: inner cylinder touches the outer one")]
    DegenerateGap,
    #[error("cutoff cylinders must share their center")]
    CenterMismatch,
    #[error("malformed field file: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Uniform grid on the box circumscribing `B_R(center) x [t0 - time_length, t0]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpaceTimeGrid<T> {
    pub dim: usize,
    pub nx: usize,
    pub nt: usize,
    pub center: Vec2<T>,
    pub t0: T,
    pub radius: T,
    pub time_length: T,
    pub h: T,
    pub dt: T,
}

impl<T: Real> SpaceTimeGrid<T> {
    pub fn new(dim: usize, nx: usize, nt: usize, center: Vec2<T>, t0: T, radius: T, time_length: T) -> Result<Self, MeshError> {
        if dim != 1 && dim != 2 {
            return Err(MeshError::InvalidGrid("spatial dimension must be 1 or 2"));
        }
        if nx < 3 {
            return Err(MeshError::InvalidGrid("at least 3 nodes per axis"));
        }
        if nt < 2 {
            return Err(MeshError::InvalidGrid("at least 2 time slices"));
        }
        if !(radius > T::zero()) || !radius.is_finite() {
            return Err(MeshError::InvalidGrid("radius must be positive"));
        }
        if !(time_length > T::zero()) || !time_length.is_finite() {
            return Err(MeshError::InvalidGrid("time length must be positive"));
        }
        if !center[0].is_finite() || !center[1].is_finite() || !t0.is_finite() {
            return Err(MeshError::InvalidGrid("center must be finite"));
        }
        let center = if dim == 1 { [center[0], T::zero()] } else { center };
        Ok(SpaceTimeGrid {
            dim,
            nx,
            nt,
            center,
            t0,
            radius,
            time_length,
            h: T::lit(2.0) * radius / T::from_usize_lossy(nx - 1),
            dt: time_length / T::from_usize_lossy(nt - 1),
        })
    }

    /// Grid whose cover is the cylinder `cyl`.
    pub fn covering(dim: usize, nx: usize, nt: usize, cyl: &Cylinder<T>) -> Result<Self, MeshError> {
        Self::new(dim, nx, nt, cyl.center, cyl.t0, cyl.radius, cyl.length)
    }

    pub fn nodes_per_slice(&self) -> usize {
        self.nx.pow(self.dim as u32)
    }

    pub fn cells_per_slice(&self) -> usize {
        (self.nx - 1).pow(self.dim as u32)
    }

    pub fn len(&self) -> usize {
        self.nodes_per_slice() * self.nt
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn t_start(&self) -> T {
        self.t0 - self.time_length
    }

    /// Coordinate of node `i` along an axis, symmetric about the center bit for bit.
    #[inline]
    pub fn axis_node(&self, axis: usize, i: usize) -> T {
        let m = T::from_usize_lossy(self.nx - 1);
        let k = T::from_usize_lossy(2 * i) - m;
        self.center[axis] + self.radius * k / m
    }

    #[inline]
    fn axis_cell_center(&self, axis: usize, c: usize) -> T {
        let m = T::from_usize_lossy(self.nx - 1);
        let k = T::from_usize_lossy(2 * c + 1) - m;
        self.center[axis] + self.radius * k / m
    }

    #[inline]
    pub fn time(&self, slice: usize) -> T {
        let m = T::from_usize_lossy(self.nt - 1);
        self.t0 - self.time_length * T::from_usize_lossy(self.nt - 1 - slice) / m
    }

    /// Midpoint of time cell `j`.
    #[inline]
    pub fn time_cell_center(&self, j: usize) -> T {
        let m = T::from_usize_lossy(2 * (self.nt - 1));
        self.t0 - self.time_length * T::from_usize_lossy(2 * (self.nt - 1 - j) - 1) / m
    }

    #[inline]
    pub fn node_coords(&self, node: usize) -> Vec2<T> {
        let ix = node % self.nx;
        if self.dim == 1 {
            [self.axis_node(0, ix), T::zero()]
        } else {
            [self.axis_node(0, ix), self.axis_node(1, node / self.nx)]
        }
    }

    #[inline]
    pub fn cell_center(&self, cell: usize) -> Vec2<T> {
        let m = self.nx - 1;
        if self.dim == 1 {
            [self.axis_cell_center(0, cell), T::zero()]
        } else {
            [self.axis_cell_center(0, cell % m), self.axis_cell_center(1, cell / m)]
        }
    }

    /// Corner nodes of a spatial cell; the second pair is unused in 1D.
    #[inline]
    pub fn cell_corners(&self, cell: usize) -> [usize; 4] {
        let m = self.nx - 1;
        if self.dim == 1 {
            [cell, cell + 1, cell, cell + 1]
        } else {
            let (cx, cy) = (cell % m, cell / m);
            let n0 = cx + self.nx * cy;
            [n0, n0 + 1, n0 + self.nx, n0 + self.nx + 1]
        }
    }

    pub fn is_boundary_node(&self, node: usize) -> bool {
        let last = self.nx - 1;
        let ix = node % self.nx;
        if ix == 0 || ix == last {
            return true;
        }
        if self.dim == 2 {
            let iy = node / self.nx;
            return iy == 0 || iy == last;
        }
        false
    }

    /// Spatial measure of one full cell, `h^dim`.
    pub fn cell_volume(&self) -> T {
        self.h.powi(self.dim as i32)
    }

    pub fn cover(&self) -> Cylinder<T> {
        Cylinder { center: self.center, t0: self.t0, radius: self.radius, length: self.time_length }
    }

    /// Slice index whose time is closest to `t`.
    pub fn nearest_slice(&self, t: T) -> usize {
        let s = ((t - self.t_start()) / self.dt).round();
        let s = s.max(T::zero()).min(T::from_usize_lossy(self.nt - 1));
        s.to_usize().unwrap_or(0)
    }
}

/// Calligraphic cylinder `B_radius(center) x (t0 - length, t0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cylinder<T> {
    pub center: Vec2<T>,
    pub t0: T,
    pub radius: T,
    pub length: T,
}

impl<T: Real> Cylinder<T> {
    pub fn new(center: Vec2<T>, t0: T, radius: T, length: T) -> Self {
        Cylinder { center, t0, radius, length }
    }

    /// Square-time cylinder `B_radius x (t0 - ell^2, t0)`.
    pub fn square_time(center: Vec2<T>, t0: T, radius: T, ell: T) -> Self {
        Cylinder { center, t0, radius, length: ell * ell }
    }

    pub fn t_start(&self) -> T {
        self.t0 - self.length
    }

    pub fn contains(&self, x: &Vec2<T>, t: T, tol: T) -> bool {
        let d = norm2(&[x[0] - self.center[0], x[1] - self.center[1]]);
        d <= self.radius + tol && t >= self.t_start() - tol && t <= self.t0 + tol
    }
}

/// Nodal scalar values over every slice of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Field<T> {
    grid: SpaceTimeGrid<T>,
    values: Vec<T>,
}

impl<T: Real> Field<T> {
    pub fn new(grid: SpaceTimeGrid<T>, values: Vec<T>) -> Result<Self, MeshError> {
        if values.len() != grid.len() {
            return Err(MeshError::LengthMismatch { expected: grid.len(), got: values.len() });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(MeshError::NonFinite(i));
        }
        Ok(Field { grid, values })
    }

    pub fn zeros(grid: SpaceTimeGrid<T>) -> Self {
        Field { grid, values: vec![T::zero(); grid.len()] }
    }

    pub fn constant(grid: SpaceTimeGrid<T>, c: T) -> Self {
        Field { grid, values: vec![c; grid.len()] }
    }

    pub fn from_fn(grid: SpaceTimeGrid<T>, f: impl Fn(Point<T>) -> T) -> Self {
        let nodes = grid.nodes_per_slice();
        let mut values = Vec::with_capacity(grid.len());
        for j in 0..grid.nt {
            let t = grid.time(j);
            for node in 0..nodes {
                values.push(f(Point::new(grid.node_coords(node), t)));
            }
        }
        Field { grid, values }
    }

    pub fn grid(&self) -> &SpaceTimeGrid<T> {
        &self.grid
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn slice(&self, j: usize) -> &[T] {
        let n = self.grid.nodes_per_slice();
        &self.values[j * n..(j + 1) * n]
    }

    pub fn slice_mut(&mut self, j: usize) -> &mut [T] {
        let n = self.grid.nodes_per_slice();
        &mut self.values[j * n..(j + 1) * n]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Field { grid: self.grid, values: self.values.iter().map(|&v| f(v)).collect() }
    }

    pub fn scaled(&self, s: T) -> Self {
        self.map(|v| s * v)
    }

    pub fn max_abs(&self) -> T {
        self.values.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// Multilinear interpolation in space and time, clamped to the grid cover.
    pub fn sample(&self, z: Point<T>) -> T {
        let g = &self.grid;
        let locate = |coord: T, lo: T, step: T, n: usize| -> (usize, T) {
            let s = ((coord - lo) / step).max(T::zero()).min(T::from_usize_lossy(n - 1));
            let i = s.floor().to_usize().unwrap_or(0).min(n - 2);
            (i, s - T::from_usize_lossy(i))
        };
        let (ix, fx) = locate(z.x[0], g.center[0] - g.radius, g.h, g.nx);
        let (jt, ft) = locate(z.t, g.t_start(), g.dt, g.nt);
        let (iy, fy) = if g.dim == 2 { locate(z.x[1], g.center[1] - g.radius, g.h, g.nx) } else { (0, T::zero()) };
        let at = |j: usize| -> T {
            let s = self.slice(j);
            if g.dim == 1 {
                s[ix] * (T::one() - fx) + s[ix + 1] * fx
            } else {
                let n0 = ix + g.nx * iy;
                let lo = s[n0] * (T::one() - fx) + s[n0 + 1] * fx;
                let hi = s[n0 + g.nx] * (T::one() - fx) + s[n0 + g.nx + 1] * fx;
                lo * (T::one() - fy) + hi * fy
            }
        };
        at(jt) * (T::one() - ft) + at(jt + 1) * ft
    }

    /// Writes the text table format (see the crate README).
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<(), MeshError> {
        let g = &self.grid;
        let mut head = String::new();
        let _ = writeln!(head, "dplab-field 1");
        let _ = writeln!(head, "dim {}", g.dim);
        let _ = writeln!(head, "nx {}", g.nx);
        let _ = writeln!(head, "nt {}", g.nt);
        let _ = writeln!(head, "center {} {} {}", g.center[0], g.center[1], g.t0);
        let _ = writeln!(head, "radius {}", g.radius);
        let _ = writeln!(head, "time_length {}", g.time_length);
        let _ = writeln!(head, "values {}", self.values.len());
        w.write_all(head.as_bytes())?;
        let mut line = String::new();
        for v in &self.values {
            line.clear();
            let _ = writeln!(line, "{v}");
            w.write_all(line.as_bytes())?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Self, MeshError> {
        let mut lines = r.lines();
        let mut next = |what: &str| -> Result<String, MeshError> {
            match lines.next() {
                Some(line) => Ok(line?),
                None => Err(MeshError::Parse(format!("unexpected end of file, expected {what}"))),
            }
        };
        let magic = next("header")?;
        if magic.trim() != "dplab-field 1" {
            return Err(MeshError::Parse(format!("bad magic line {magic:?}")));
        }
        fn keyed<'a>(line: &'a str, key: &str) -> Result<Vec<&'a str>, MeshError> {
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some(k) if k == key => Ok(parts.collect()),
                _ => Err(MeshError::Parse(format!("expected key {key:?}, got {line:?}"))),
            }
        }
        fn num<T: Real>(s: &str) -> Result<T, MeshError> {
            let v: f64 = s.parse().map_err(|_| MeshError::Parse(format!("bad number {s:?}")))?;
            T::from_f64(v).ok_or_else(|| MeshError::Parse(format!("unrepresentable {s:?}")))
        }
        fn int(s: &str) -> Result<usize, MeshError> {
            s.parse().map_err(|_| MeshError::Parse(format!("bad integer {s:?}")))
        }
        let one = |v: Vec<&str>| -> Result<String, MeshError> {
            if v.len() == 1 {
                Ok(v[0].to_string())
            } else {
                Err(MeshError::Parse("expected exactly one value".into()))
            }
        };
        let dim = int(&one(keyed(&next("dim")?, "dim")?)?)?;
        let nx = int(&one(keyed(&next("nx")?, "nx")?)?)?;
        let nt = int(&one(keyed(&next("nt")?, "nt")?)?)?;
        let c_line = next("center")?;
        let c = keyed(&c_line, "center")?;
        if c.len() != 3 {
            return Err(MeshError::Parse("center needs three values".into()));
        }
        let center = [num::<T>(c[0])?, num::<T>(c[1])?];
        let t0 = num::<T>(c[2])?;
        let radius = num::<T>(&one(keyed(&next("radius")?, "radius")?)?)?;
        let time_length = num::<T>(&one(keyed(&next("time_length")?, "time_length")?)?)?;
        let count = int(&one(keyed(&next("values")?, "values")?)?)?;
        let grid = SpaceTimeGrid::new(dim, nx, nt, center, t0, radius, time_length)?;
        let mut values = Vec::with_capacity(count);
        for line in lines {
            let line = line?;
            let s = line.trim();
            if s.is_empty() {
                continue;
            }
            values.push(num::<T>(s)?);
        }
        if values.len() != count {
            return Err(MeshError::Parse(format!("header announces {count} values, found {}", values.len())));
        }
        Field::new(grid, values)
    }

    pub fn save(&self, path: &Path) -> Result<(), MeshError> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_text(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MeshError> {
        let f = std::fs::File::open(path)?;
        Self::read_text(std::io::BufReader::new(f))
    }
}

/// Average of the corner values of every spatial cell of one slice.
pub fn cell_means<T: Real>(grid: &SpaceTimeGrid<T>, slice: &[T]) -> Vec<T> {
    let quarter = T::lit(0.25);
    let half = T::lit(0.5);
    (0..grid.cells_per_slice())
        .map(|c| {
            let k = grid.cell_corners(c);
            if grid.dim == 1 {
                half * (slice[k[0]] + slice[k[1]])
            } else {
                quarter * (slice[k[0]] + slice[k[1]] + slice[k[2]] + slice[k[3]])
            }
        })
        .collect()
}

/// Cell-centered differences of nodal values of one slice; exact for affine data.
pub fn slice_gradient<T: Real>(grid: &SpaceTimeGrid<T>, slice: &[T]) -> Vec<Vec2<T>> {
    let inv_h = T::one() / grid.h;
    let half_inv_h = T::lit(0.5) * inv_h;
    (0..grid.cells_per_slice())
        .map(|c| {
            let k = grid.cell_corners(c);
            if grid.dim == 1 {
                [(slice[k[1]] - slice[k[0]]) * inv_h, T::zero()]
            } else {
                [
                    ((slice[k[1]] - slice[k[0]]) + (slice[k[3]] - slice[k[2]])) * half_inv_h,
                    ((slice[k[2]] - slice[k[0]]) + (slice[k[3]] - slice[k[1]])) * half_inv_h,
                ]
            }
        })
        .collect()
}

/// Discrete spatial gradient of `f` at time slice `slice`, one vector per cell.
pub fn gradient<T: Real>(f: &Field<T>, slice: usize) -> Result<Vec<Vec2<T>>, MeshError> {
    let nt = f.grid().nt;
    if slice >= nt {
        return Err(MeshError::SliceOutOfRange { slice, nt });
    }
    Ok(slice_gradient(f.grid(), f.slice(slice)))
}

/// Which truncation `(u - k)_+` or `(u - k)_-`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    pub fn as_str(self) -> &'static str {
        match self {
            Sign::Plus => "plus",
            Sign::Minus => "minus",
        }
    }

    #[inline]
    pub fn part<T: Real>(self, v: T, k: T) -> T {
        match self {
            Sign::Plus => (v - k).max(T::zero()),
            Sign::Minus => (k - v).max(T::zero()),
        }
    }
}

/// Pointwise `max(+-(f - k), 0)`.
pub fn truncate<T: Real>(f: &Field<T>, k: T, sign: Sign) -> Field<T> {
    f.map(|v| sign.part(v, k))
}

/// Exact length of `[a0, a1] ∩ [b0, b1]`.
fn overlap<T: Real>(a0: T, a1: T, b0: T, b1: T) -> T {
    (a1.min(b1) - a0.max(b0)).max(T::zero())
}

/// `∫_{x0}^{x1} sqrt(r^2 - x^2) dx` for `-r <= x0 <= x1 <= r`.
fn half_chord_integral<T: Real>(r: T, x0: T, x1: T) -> T {
    let g = |x: T| {
        let s = (r * r - x * x).max(T::zero()).sqrt();
        let ratio = (x / r).max(-T::one()).min(T::one());
        T::lit(0.5) * (x * s + r * r * ratio.asin())
    };
    g(x1) - g(x0)
}

/// Exact area of the disk of radius `r` centered at the origin intersected
/// with the rectangle `[x0, x1] x [y0, y1]`.
pub fn disk_rect_area<T: Real>(r: T, x0: T, x1: T, y0: T, y1: T) -> T {
    let lo = x0.max(-r);
    let hi = x1.min(r);
    if !(hi > lo) || !(y1 > y0) {
        return T::zero();
    }
    // breakpoints where the half chord crosses |y0| or |y1|
    let mut cuts = vec![lo, hi];
    for y in [y0, y1] {
        if y.abs() < r {
            let xc = (r * r - y * y).sqrt();
            for x in [-xc, xc] {
                if x > lo && x < hi {
                    cuts.push(x);
                }
            }
        }
    }
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut area = T::zero();
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        if !(b > a) {
            continue;
        }
        let mid = T::lit(0.5) * (a + b);
        let s = (r * r - mid * mid).max(T::zero()).sqrt();
        let upper_is_chord = s < y1;
        let lower_is_chord = -s > y0;
        let upper = if upper_is_chord { s } else { y1 };
        let lower = if lower_is_chord { -s } else { y0 };
        if !(upper > lower) {
            continue;
        }
        let chord = half_chord_integral(r, a, b);
        let upper_int = if upper_is_chord { chord } else { y1 * (b - a) };
        let lower_int = if lower_is_chord { -chord } else { y0 * (b - a) };
        area += upper_int - lower_int;
    }
    area.max(T::zero())
}

/// Precomputed quadrature weights of a cylinder (or the whole cover) on a grid.
#[derive(Debug, Clone)]
pub struct CylinderQuadrature<T> {
    grid: SpaceTimeGrid<T>,
    /// `(cell, weight)` for every cell meeting the ball.
    pub cells: Vec<(usize, T)>,
    /// `(time cell, weight)` for every time cell meeting the interval.
    pub time_cells: Vec<(usize, T)>,
    /// Slices whose time lies in the closed interval.
    pub slices: Vec<usize>,
    pub ball_measure: T,
    pub time_measure: T,
}

impl<T: Real> CylinderQuadrature<T> {
    /// Weights for `cyl`, which must lie inside the grid cover.
    pub fn new(grid: &SpaceTimeGrid<T>, cyl: &Cylinder<T>) -> Result<Self, MeshError> {
        if !(cyl.radius > T::zero()) || !(cyl.length > T::zero()) {
            return Err(MeshError::EmptyRegion);
        }
        let xtol = T::lit(1e-9) * grid.h;
        let ttol = T::lit(1e-9) * grid.dt;
        for axis in 0..grid.dim {
            if cyl.center[axis] - cyl.radius < grid.center[axis] - grid.radius - xtol
                || cyl.center[axis] + cyl.radius > grid.center[axis] + grid.radius + xtol
            {
                return Err(MeshError::OutOfRange("ball leaves the grid box"));
            }
        }
        if cyl.t_start() < grid.t_start() - ttol || cyl.t0 > grid.t0 + ttol {
            return Err(MeshError::OutOfRange("time interval leaves the grid"));
        }
        let half_h = T::lit(0.5) * grid.h;
        let mut cells = Vec::new();
        for c in 0..grid.cells_per_slice() {
            let cc = grid.cell_center(c);
            let w = if grid.dim == 1 {
                overlap(cc[0] - half_h, cc[0] + half_h, cyl.center[0] - cyl.radius, cyl.center[0] + cyl.radius)
            } else {
                let dx = cc[0] - cyl.center[0];
                let dy = cc[1] - cyl.center[1];
                // skip cells certainly outside the disk
                if dx.abs() - half_h > cyl.radius || dy.abs() - half_h > cyl.radius {
                    continue;
                }
                disk_rect_area(cyl.radius, dx - half_h, dx + half_h, dy - half_h, dy + half_h)
            };
            if w > T::zero() {
                cells.push((c, w));
            }
        }
        let mut time_cells = Vec::new();
        for j in 0..grid.nt - 1 {
            let w = overlap(grid.time(j), grid.time(j + 1), cyl.t_start(), cyl.t0);
            if w > T::zero() {
                time_cells.push((j, w));
            }
        }
        let slices: Vec<usize> = (0..grid.nt)
            .filter(|&j| {
                let t = grid.time(j);
                t >= cyl.t_start() - ttol && t <= cyl.t0 + ttol
            })
            .collect();
        if cells.is_empty() || time_cells.is_empty() || slices.is_empty() {
            return Err(MeshError::EmptyRegion);
        }
        let ball_measure = cells.iter().map(|&(_, w)| w).sum();
        let time_measure = time_cells.iter().map(|&(_, w)| w).sum();
        Ok(CylinderQuadrature { grid: *grid, cells, time_cells, slices, ball_measure, time_measure })
    }

    /// Weights for the full grid box and time range.
    pub fn cover(grid: &SpaceTimeGrid<T>) -> Self {
        let vol = grid.cell_volume();
        let cells: Vec<(usize, T)> = (0..grid.cells_per_slice()).map(|c| (c, vol)).collect();
        let time_cells: Vec<(usize, T)> = (0..grid.nt - 1).map(|j| (j, grid.dt)).collect();
        let ball_measure = cells.iter().map(|&(_, w)| w).sum();
        let time_measure = time_cells.iter().map(|&(_, w)| w).sum();
        CylinderQuadrature { grid: *grid, cells, time_cells, slices: (0..grid.nt).collect(), ball_measure, time_measure }
    }

    pub fn grid(&self) -> &SpaceTimeGrid<T> {
        &self.grid
    }

    pub fn measure(&self) -> T {
        self.ball_measure * self.time_measure
    }

    /// `Σ_j w_j Σ_c w_c f(c, j)` over space-time cells, traversed in a fixed order.
    pub fn integrate(&self, mut f: impl FnMut(usize, usize) -> T) -> T {
        let mut total = T::zero();
        for &(j, wt) in &self.time_cells {
            let mut s = T::zero();
            for &(c, wc) in &self.cells {
                s += wc * f(c, j);
            }
            total += wt * s;
        }
        total
    }

    /// `Σ_c w_c f(c)` over the ball at a single slice.
    pub fn integrate_spatial(&self, mut f: impl FnMut(usize) -> T) -> T {
        let mut s = T::zero();
        for &(c, wc) in &self.cells {
            s += wc * f(c);
        }
        s
    }

    /// Time cells of the interval paired with their weight, as a sub-slice view.
    pub fn time_cells(&self) -> &[(usize, T)] {
        &self.time_cells
    }
}

/// Space-time integral of a nodal field over a cylinder (not normalized).
pub fn integrate_cylinder<T: Real>(f: &Field<T>, region: &Cylinder<T>) -> Result<T, MeshError> {
    let quad = CylinderQuadrature::new(f.grid(), region)?;
    Ok(integrate_nodal(f, &quad))
}

/// Integral of a nodal field with precomputed weights: midpoint rule on space-time cells.
pub fn integrate_nodal<T: Real>(f: &Field<T>, quad: &CylinderQuadrature<T>) -> T {
    let grid = f.grid();
    let means: Vec<Vec<T>> = (0..grid.nt).map(|j| cell_means(grid, f.slice(j))).collect();
    let half = T::lit(0.5);
    quad.integrate(|c, j| half * (means[j][c] + means[j + 1][c]))
}

/// Largest spatial mean over the ball among slices in the interval.
pub fn sup_time_spatial_mean<T: Real>(f: &Field<T>, region: &Cylinder<T>) -> Result<T, MeshError> {
    let quad = CylinderQuadrature::new(f.grid(), region)?;
    Ok(sup_spatial_mean_with(f, &quad))
}

pub fn sup_spatial_mean_with<T: Real>(f: &Field<T>, quad: &CylinderQuadrature<T>) -> T {
    let grid = f.grid();
    let mut best = T::neg_infinity();
    for &j in &quad.slices {
        let m = cell_means(grid, f.slice(j));
        let mean = quad.integrate_spatial(|c| m[c]) / quad.ball_measure;
        best = best.max(mean);
    }
    best
}

/// Piecewise-linear cutoffs: `eta` radial in space, `zeta` nondecreasing in time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutoffPair<T> {
    pub center: Vec2<T>,
    pub t0: T,
    pub r_in: T,
    pub r_out: T,
    pub len_in: T,
    pub len_out: T,
}

impl<T: Real> CutoffPair<T> {
    pub fn eta(&self, x: &Vec2<T>) -> T {
        let d = norm2(&[x[0] - self.center[0], x[1] - self.center[1]]);
        ((self.r_out - d) / (self.r_out - self.r_in)).max(T::zero()).min(T::one())
    }

    /// Analytic gradient magnitude of `eta` (the constant slope inside the annulus).
    pub fn eta_slope(&self) -> T {
        T::one() / (self.r_out - self.r_in)
    }

    pub fn zeta(&self, t: T) -> T {
        let bottom = self.t0 - self.len_out;
        ((t - bottom) / (self.len_out - self.len_in)).max(T::zero()).min(T::one())
    }

    pub fn eta_nodal(&self, grid: &SpaceTimeGrid<T>) -> Vec<T> {
        (0..grid.nodes_per_slice()).map(|n| self.eta(&grid.node_coords(n))).collect()
    }

    pub fn zeta_slices(&self, grid: &SpaceTimeGrid<T>) -> Vec<T> {
        (0..grid.nt).map(|j| self.zeta(grid.time(j))).collect()
    }
}

/// Cutoffs equal to one on `inner` and vanishing outside `outer`.
pub fn build_cutoffs<T: Real>(outer: &Cylinder<T>, inner: &Cylinder<T>) -> Result<CutoffPair<T>, MeshError> {
    let tol = T::lit(1e-12) * (T::one() + outer.radius + outer.t0.abs());
    if (outer.center[0] - inner.center[0]).abs() > tol
        || (outer.center[1] - inner.center[1]).abs() > tol
        || (outer.t0 - inner.t0).abs() > tol
    {
        return Err(MeshError::CenterMismatch);
    }
    if !(inner.radius > T::zero()) || !(inner.length > T::zero()) {
        return Err(MeshError::EmptyRegion);
    }
    if !(inner.radius < outer.radius) || !(inner.length < outer.length) {
        return Err(MeshError::DegenerateGap);
    }
    Ok(CutoffPair {
        center: outer.center,
        t0: outer.t0,
        r_in: inner.radius,
        r_out: outer.radius,
        len_in: inner.length,
        len_out: outer.length,
    })
}
