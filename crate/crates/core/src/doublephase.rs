//! The double phase integrand `H(z, k) = k^p + a(z) k^q`, the model flux
//! `A(z, xi) = |xi|^(p-2) xi + a(z) |xi|^(q-2) xi`, the built-in coefficients
//! `a(x, t)`, and an empirical check of the growth/coercivity bounds.

use std::sync::Arc;

use thiserror::Error;

use crate::exponents::ExponentSet;
use crate::mesh::{Field, SpaceTimeGrid};
use crate::scalar::{dot2, norm2, Point, Real, Vec2};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FluxError {
    #[error("H is defined for nonnegative arguments only (got {0})")]
    NegativeArgument(f64),
    #[error("no sample with a nonzero gradient")]
    EmptySampleSet,
    #[error("invalid coefficient: {0}")]
    InvalidCoefficient(String),
    #[error("invalid growth exponents: need 2 <= p <= q (got p = {p}, q = {q})")]
    InvalidExponents { p: f64, q: f64 },
}

/// Below this gradient magnitude the flux is exactly zero.
const FLUX_FLOOR: f64 = 1e-150;

/// Nonnegative bounded coefficient `a(x, t)`.
#[derive(Debug, Clone)]
pub enum CoefficientFn<T> {
    Constant(T),
    /// `a_sup * exp(1 - 1/(1 - r^2))` with `r = |x - center| / width`, zero for `r >= 1`.
    SmoothBump { a_sup: T, center: Vec2<T>, width: T },
    /// Values in `{0, a_sup}` alternating on a space-time lattice of the given cell sizes.
    Checkerboard { a_sup: T, origin: Vec2<T>, t_origin: T, cell: T, time_cell: T },
    /// Multilinear interpolation of a sampled nodal field.
    Sampled { field: Arc<Field<T>>, a_sup: T },
}

impl<T: Real> CoefficientFn<T> {
    pub fn constant(a: T) -> Result<Self, FluxError> {
        if !(a >= T::zero()) || !a.is_finite() {
            return Err(FluxError::InvalidCoefficient(format!("constant {a} must be finite and nonnegative")));
        }
        Ok(CoefficientFn::Constant(a))
    }

    /// Bump supported in the right half of the grid box, so `{a = 0}` covers the left half.
    pub fn smooth_bump(a_sup: T, grid: &SpaceTimeGrid<T>) -> Result<Self, FluxError> {
        check_sup(a_sup)?;
        let half = T::lit(0.5) * grid.radius;
        Ok(CoefficientFn::SmoothBump { a_sup, center: [grid.center[0] + half, grid.center[1]], width: half })
    }

    /// Checkerboard with `cells` cells per spatial axis and per time length.
    pub fn checkerboard(a_sup: T, grid: &SpaceTimeGrid<T>, cells: usize) -> Result<Self, FluxError> {
        check_sup(a_sup)?;
        if cells == 0 {
            return Err(FluxError::InvalidCoefficient("checkerboard needs at least one cell".into()));
        }
        let n = T::from_usize_lossy(cells);
        Ok(CoefficientFn::Checkerboard {
            a_sup,
            origin: [grid.center[0] - grid.radius, grid.center[1] - grid.radius],
            t_origin: grid.t_start(),
            cell: T::lit(2.0) * grid.radius / n,
            time_cell: grid.time_length / n,
        })
    }

    pub fn sampled(field: Field<T>) -> Result<Self, FluxError> {
        let mut a_sup = T::zero();
        for &v in field.values() {
            if v < T::zero() {
                return Err(FluxError::InvalidCoefficient(format!("sampled coefficient has negative value {v}")));
            }
            a_sup = a_sup.max(v);
        }
        Ok(CoefficientFn::Sampled { field: Arc::new(field), a_sup })
    }

    pub fn a_sup(&self) -> T {
        match self {
            CoefficientFn::Constant(a) => *a,
            CoefficientFn::SmoothBump { a_sup, .. }
            | CoefficientFn::Checkerboard { a_sup, .. }
            | CoefficientFn::Sampled { a_sup, .. } => *a_sup,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CoefficientFn::Constant(_) => "constant",
            CoefficientFn::SmoothBump { .. } => "smooth_bump",
            CoefficientFn::Checkerboard { .. } => "checkerboard",
            CoefficientFn::Sampled { .. } => "sampled",
        }
    }

    /// `true` when `a` vanishes identically.
    pub fn is_zero(&self) -> bool {
        self.a_sup() == T::zero()
    }

    pub fn eval(&self, z: Point<T>) -> T {
        match self {
            CoefficientFn::Constant(a) => *a,
            CoefficientFn::SmoothBump { a_sup, center, width } => {
                let r = norm2(&[z.x[0] - center[0], z.x[1] - center[1]]) / *width;
                if r >= T::one() {
                    T::zero()
                } else {
                    let v = *a_sup * (T::one() - T::one() / (T::one() - r * r)).exp();
                    v.min(*a_sup)
                }
            }
            CoefficientFn::Checkerboard { a_sup, origin, t_origin, cell, time_cell } => {
                let ix = ((z.x[0] - origin[0]) / *cell).floor();
                let iy = ((z.x[1] - origin[1]) / *cell).floor();
                let it = ((z.t - *t_origin) / *time_cell).floor();
                let parity = (ix + iy + it).to_i64().unwrap_or(0).rem_euclid(2);
                if parity == 0 {
                    *a_sup
                } else {
                    T::zero()
                }
            }
            CoefficientFn::Sampled { field, a_sup } => field.sample(z).max(T::zero()).min(*a_sup),
        }
    }
}

fn check_sup<T: Real>(a_sup: T) -> Result<(), FluxError> {
    if !(a_sup >= T::zero()) || !a_sup.is_finite() {
        return Err(FluxError::InvalidCoefficient(format!("a_sup = {a_sup} must be finite and nonnegative")));
    }
    Ok(())
}

/// Model flux `scale * (|xi|^(p-2) + a(z) |xi|^(q-2)) xi`.
#[derive(Debug, Clone)]
pub struct FluxModel<T> {
    pub p: T,
    pub q: T,
    pub coeff: CoefficientFn<T>,
    pub scale: T,
}

impl<T: Real> FluxModel<T> {
    pub fn new(p: T, q: T, coeff: CoefficientFn<T>) -> Result<Self, FluxError> {
        if !(p >= T::lit(2.0)) || !(q >= p) || !q.is_finite() {
            return Err(FluxError::InvalidExponents { p: p.as_f64(), q: q.as_f64() });
        }
        Ok(FluxModel { p, q, coeff, scale: T::one() })
    }

    /// Flux for a validated regime; the coefficient must respect `exps.a_sup`.
    pub fn from_exponents(exps: &ExponentSet<T>, coeff: CoefficientFn<T>) -> Result<Self, FluxError> {
        if coeff.a_sup() > exps.a_sup * (T::one() + T::epsilon()) {
            return Err(FluxError::InvalidCoefficient(format!(
                "coefficient bound {} exceeds declared a_sup {}",
                coeff.a_sup(),
                exps.a_sup
            )));
        }
        Self::new(exps.p, exps.q, coeff)
    }

    /// The same flux multiplied by a positive constant.
    pub fn scaled(mut self, s: T) -> Self {
        self.scale = self.scale * s;
        self
    }

    #[inline]
    pub fn coefficient(&self, z: Point<T>) -> T {
        self.coeff.eval(z)
    }

    /// `kappa^p + a kappa^q` for a given coefficient value.
    #[inline]
    pub fn h_with(&self, a: T, kappa: T) -> T {
        kappa.powf(self.p) + a * kappa.powf(self.q)
    }

    pub fn h_integrand(&self, z: Point<T>, kappa: T) -> Result<T, FluxError> {
        if kappa < T::zero() {
            return Err(FluxError::NegativeArgument(kappa.as_f64()));
        }
        Ok(self.h_with(self.coefficient(z), kappa))
    }

    #[inline]
    pub fn flux_with(&self, a: T, xi: &Vec2<T>) -> Vec2<T> {
        let s = norm2(xi);
        if s < T::lit(FLUX_FLOOR) {
            return [T::zero(), T::zero()];
        }
        let m = self.scale * (s.powf(self.p - T::lit(2.0)) + a * s.powf(self.q - T::lit(2.0)));
        [m * xi[0], m * xi[1]]
    }

    pub fn model_flux(&self, z: Point<T>, xi: &Vec2<T>) -> Vec2<T> {
        self.flux_with(self.coefficient(z), xi)
    }

    /// Regularized diffusivity `(s^2 + eps^2)^((p-2)/2) + a (s^2 + eps^2)^((q-2)/2)`.
    #[inline]
    pub fn diffusivity(&self, a: T, s: T, eps: T) -> T {
        let r = s * s + eps * eps;
        let half = T::lit(0.5);
        let two = T::lit(2.0);
        self.scale * (r.powf(half * (self.p - two)) + a * r.powf(half * (self.q - two)))
    }
}

/// Tightest `(nu, L)` over the samples for the flux model itself.
pub fn check_structure<T: Real>(flux: &FluxModel<T>, samples: &[(Point<T>, Vec2<T>)]) -> Result<(T, T), FluxError> {
    let values: Vec<(T, Vec2<T>, Vec2<T>)> = samples
        .iter()
        .map(|(z, xi)| {
            let a = flux.coefficient(*z);
            (a, *xi, flux.flux_with(a, xi))
        })
        .collect();
    check_structure_values(flux.p, flux.q, &values)
}

/// Tightest `(nu, L)` for arbitrary sampled flux values `(a(z), xi, A(z, xi))`.
///
/// `nu` is the smallest ratio `A.xi / (|xi|^p + a|xi|^q)`, `L` the largest ratio
/// `|A| / (|xi|^(p-1) + a|xi|^(q-1))`. Samples with `xi = 0` carry no information.
pub fn check_structure_values<T: Real>(p: T, q: T, samples: &[(T, Vec2<T>, Vec2<T>)]) -> Result<(T, T), FluxError> {
    let mut nu = T::infinity();
    let mut ell = T::zero();
    let mut used = 0usize;
    for (a, xi, flux) in samples {
        let s = norm2(xi);
        if !(s > T::zero()) {
            continue;
        }
        used += 1;
        let coercive = s.powf(p) + *a * s.powf(q);
        let growth = s.powf(p - T::one()) + *a * s.powf(q - T::one());
        nu = nu.min(dot2(flux, xi) / coercive);
        ell = ell.max(norm2(flux) / growth);
    }
    if used == 0 {
        return Err(FluxError::EmptySampleSet);
    }
    Ok((nu, ell))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_grid() -> SpaceTimeGrid<f64> {
        SpaceTimeGrid::new(2, 17, 9, [0.0, 0.0], 0.0, 1.0, 1.0).unwrap()
    }

    fn model(p: f64, q: f64, a: f64) -> FluxModel<f64> {
        FluxModel::new(p, q, CoefficientFn::constant(a).unwrap()).unwrap()
    }

    fn origin() -> Point<f64> {
        Point::new([0.0, 0.0], 0.0)
    }

    #[test]
    fn h_examples() {
        let f = model(2.0, 3.0, 0.5);
        assert_eq!(f.h_integrand(origin(), 2.0).unwrap(), 8.0);
        assert_eq!(f.h_integrand(origin(), 0.0).unwrap(), 0.0);
        assert!(matches!(f.h_integrand(origin(), -1.0), Err(FluxError::NegativeArgument(_))));
        let p_only = model(2.3, 2.7, 0.0);
        assert_eq!(p_only.h_integrand(origin(), 1.7).unwrap().to_bits(), 1.7f64.powf(2.3).to_bits());
    }

    #[test]
    fn flux_examples() {
        let f = model(3.0, 4.0, 1.0);
        assert_eq!(f.model_flux(origin(), &[0.0, 0.0]), [0.0, 0.0]);
        assert_eq!(f.model_flux(origin(), &[1e-200, 0.0]), [0.0, 0.0]);
        // brute force: the two monomial phases evaluated separately
        let xi = [2.0, 0.0];
        let s: f64 = 2.0;
        let phase_p = [s.powf(1.0) * xi[0], s.powf(1.0) * xi[1]];
        let phase_q = [s.powf(2.0) * xi[0], s.powf(2.0) * xi[1]];
        let got = f.model_flux(origin(), &xi);
        assert_relative_eq!(got[0], phase_p[0] + phase_q[0], epsilon = 1e-14);
        assert_relative_eq!(got[0], 12.0, epsilon = 1e-14);
        assert_eq!(got[1], 0.0);
        let lin = model(2.0, 2.5, 0.0);
        assert_eq!(lin.model_flux(origin(), &[0.3, -1.1]), [0.3, -1.1]);
    }

    #[test]
    fn structure_constants_of_model_flux() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let grid = unit_grid();
        for coeff in [
            CoefficientFn::constant(0.7).unwrap(),
            CoefficientFn::smooth_bump(2.0, &grid).unwrap(),
            CoefficientFn::checkerboard(2.0, &grid, 4).unwrap(),
        ] {
            let f = FluxModel::new(2.0, 2.5, coeff).unwrap();
            let samples: Vec<_> = (0..500)
                .map(|_| {
                    let z = Point::new([rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)], rng.gen_range(-1.0..0.0));
                    let xi = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
                    (z, xi)
                })
                .collect();
            let (nu, ell) = check_structure(&f, &samples).unwrap();
            assert!((nu - 1.0).abs() < 1e-12, "nu = {nu}");
            assert!(ell <= 1.0 + 1e-12, "L = {ell}");
            let (nu2, ell2) = check_structure(&f.clone().scaled(2.0), &samples).unwrap();
            assert!((nu2 - 2.0).abs() < 1e-12 && (ell2 - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn structure_needs_samples() {
        let f = model(2.0, 2.5, 1.0);
        assert!(matches!(check_structure(&f, &[]), Err(FluxError::EmptySampleSet)));
        assert!(matches!(check_structure(&f, &[(origin(), [0.0, 0.0])]), Err(FluxError::EmptySampleSet)));
    }

    #[test]
    fn builtin_coefficients_respect_bounds() {
        let grid = unit_grid();
        let sampled_field = Field::from_fn(grid, |z| 1.5 * (z.x[0] * 3.0).sin().abs() * (-z.t).min(1.0));
        let coeffs = [
            CoefficientFn::constant(1.25).unwrap(),
            CoefficientFn::smooth_bump(2.0, &grid).unwrap(),
            CoefficientFn::checkerboard(2.0, &grid, 3).unwrap(),
            CoefficientFn::sampled(sampled_field).unwrap(),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for c in &coeffs {
            for _ in 0..10_000 {
                let z = Point::new([rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)], rng.gen_range(-1.0..0.0));
                let a = c.eval(z);
                assert!(a >= 0.0 && a <= c.a_sup(), "{} gave {a}", c.kind());
            }
        }
    }

    #[test]
    fn bump_vanishes_on_left_half_and_checkerboard_takes_both_values() {
        let grid = unit_grid();
        let bump = CoefficientFn::smooth_bump(1.0, &grid).unwrap();
        assert_eq!(bump.eval(Point::new([-0.3, 0.2], -0.5)), 0.0);
        assert_relative_eq!(bump.eval(Point::new([0.5, 0.0], -0.5)), 1.0, epsilon = 1e-15);
        let cb = CoefficientFn::checkerboard(2.0, &grid, 2).unwrap();
        let a = cb.eval(Point::new([-0.5, -0.5], -0.75));
        let b = cb.eval(Point::new([0.5, -0.5], -0.75));
        assert!((a == 0.0 && b == 2.0) || (a == 2.0 && b == 0.0));
    }

    #[test]
    fn coefficient_validation() {
        assert!(CoefficientFn::constant(-1.0).is_err());
        assert!(CoefficientFn::checkerboard(1.0, &unit_grid(), 0).is_err());
        let grid = unit_grid();
        assert!(CoefficientFn::sampled(Field::constant(grid, -0.5)).is_err());
        let exps = ExponentSet::model(2, 2.0, 2.5, 1.0).unwrap();
        assert!(FluxModel::from_exponents(&exps, CoefficientFn::constant(2.0).unwrap()).is_err());
        assert!(FluxModel::new(1.5, 2.0, CoefficientFn::constant(1.0).unwrap()).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn h_increasing(p in 2.0f64..4.0, dq in 0.0f64..1.0, a in 0.0f64..3.0, k in 1e-3f64..10.0, dk in 1e-3f64..1.0) {
                let f = model(p, p + dq, a);
                prop_assert!(f.h_with(a, k + dk) > f.h_with(a, k));
            }

            #[test]
            fn rotation_equivariance(p in 2.0f64..4.0, dq in 0.0f64..1.0, a in 0.0f64..3.0,
                                     x in -3.0f64..3.0, y in -3.0f64..3.0, ang in 0.0f64..6.3) {
                let f = model(p, p + dq, a);
                let (c, s) = (ang.cos(), ang.sin());
                let rot = |v: [f64; 2]| [c * v[0] - s * v[1], s * v[0] + c * v[1]];
                let lhs = f.model_flux(origin(), &rot([x, y]));
                let rhs = rot(f.model_flux(origin(), &[x, y]));
                let scale = 1.0 + rhs[0].abs() + rhs[1].abs();
                prop_assert!((lhs[0] - rhs[0]).abs() < 1e-12 * scale);
                prop_assert!((lhs[1] - rhs[1]).abs() < 1e-12 * scale);
            }

            #[test]
            fn flux_dot_xi_is_integrand(p in 2.0f64..4.0, dq in 0.0f64..1.0, a in 0.0f64..3.0,
                                        x in -3.0f64..3.0, y in -3.0f64..3.0) {
                let f = model(p, p + dq, a);
                let xi = [x, y];
                let lhs = dot2(&f.model_flux(origin(), &xi), &xi);
                let rhs = f.h_with(a, norm2(&xi));
                prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs));
            }
        }
    }
}
