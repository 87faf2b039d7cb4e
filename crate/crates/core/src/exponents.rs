//! Admissible exponent regime and the derived exponents driving the
//! embedding and the level-set iteration.
//!
//! The regime is `n >= 2` and `2 <= p < q < p + p/n`. From it we derive
//!
//! * `tilde_p = p + p/n`,
//! * the interpolation exponent `theta(n, p, q) = (2pqn - 4pn) / (2pqn - 4qn + 4q)`,
//! * the iteration exponent `vartheta = tilde_p*theta/p + tilde_p*(1-theta)/2 - 1`
//!   with `theta = theta(n, p, tilde_p)`,
//! * the decay ratio `lambda` defined by `lambda^vartheta = 2^(tilde_p*(1+vartheta))`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExponentError {
    #[error("spatial dimension n = {0} must be at least 2")]
    DimensionTooSmall(usize),
    #[error("exponents must satisfy 2 <= p < q (got p = {p}, q = {q})")]
    ExponentOrder { p: f64, q: f64 },
    #[error("q = {q} must lie strictly below tilde_p = p + p/n = {tilde_p}")]
    GapTooWide { q: f64, tilde_p: f64 },
    #[error("q = {q} must lie strictly below p + p/(n-1) = {bound} for the embedding")]
    GapTooWideForEmbedding { q: f64, bound: f64 },
    #[error("iteration exponent vartheta = {0} is not positive")]
    NonpositiveVartheta(f64),
    #[error("invalid constant: {0}")]
    InvalidConstant(&'static str),
}

/// Which definition of the iteration exponent to use.
///
/// `Theorem` is `tilde_p*theta/p + tilde_p*(1-theta)/2`; `Proof` subtracts one.
/// All iteration logic uses `Proof`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarthetaConvention {
    Theorem,
    Proof,
}

impl VarthetaConvention {
    pub const ALL: [VarthetaConvention; 2] = [VarthetaConvention::Theorem, VarthetaConvention::Proof];

    pub fn as_str(self) -> &'static str {
        match self {
            VarthetaConvention::Theorem => "theorem",
            VarthetaConvention::Proof => "proof",
        }
    }
}

/// Checks `n >= 2` and `2 <= p < q < p + p/n` with strict floating comparisons.
pub fn validate_params<T: Real>(n: usize, p: T, q: T) -> Result<(), ExponentError> {
    if n < 2 {
        return Err(ExponentError::DimensionTooSmall(n));
    }
    if !(p >= T::lit(2.0)) || !(q > p) {
        return Err(ExponentError::ExponentOrder { p: p.as_f64(), q: q.as_f64() });
    }
    let tilde_p = compute_tilde_p(n, p);
    if !(q < tilde_p) {
        return Err(ExponentError::GapTooWide { q: q.as_f64(), tilde_p: tilde_p.as_f64() });
    }
    Ok(())
}

/// `p + p/n`.
pub fn compute_tilde_p<T: Real>(n: usize, p: T) -> T {
    p + p / T::from_usize_lossy(n)
}

/// Interpolation exponent of the parabolic embedding; requires `2 <= p < q < p + p/(n-1)`.
pub fn compute_theta<T: Real>(n: usize, p: T, q: T) -> Result<T, ExponentError> {
    if n < 2 {
        return Err(ExponentError::DimensionTooSmall(n));
    }
    if !(p >= T::lit(2.0)) || !(q > p) {
        return Err(ExponentError::ExponentOrder { p: p.as_f64(), q: q.as_f64() });
    }
    let nf = T::from_usize_lossy(n);
    // theta < 1 is equivalent to (n-1) q < p n
    if !((nf - T::one()) * q < p * nf) {
        let bound = p + p / (nf - T::one());
        return Err(ExponentError::GapTooWideForEmbedding { q: q.as_f64(), bound: bound.as_f64() });
    }
    let two = T::lit(2.0);
    let four = T::lit(4.0);
    let num = two * p * q * nf - four * p * nf;
    let den = two * p * q * nf - four * q * nf + four * q;
    Ok(num / den)
}

/// Validated exponents and constants with every derived quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExponentSet<T> {
    pub n: usize,
    pub p: T,
    pub q: T,
    pub nu: T,
    pub ell_bound: T,
    pub a_sup: T,
    pub tilde_p: T,
    /// `theta(n, p, tilde_p)`, the exponent used in the iteration and the sup-bound.
    pub theta: T,
    /// `theta(n, p, q)`, the exponent of the embedding at the working `q`.
    pub embedding_theta: T,
    /// Iteration exponent, proof convention.
    pub vartheta: T,
    pub lambda: T,
    pub ln_lambda: T,
}

impl<T: Real> ExponentSet<T> {
    pub fn new(n: usize, p: T, q: T, nu: T, ell_bound: T, a_sup: T) -> Result<Self, ExponentError> {
        validate_params(n, p, q)?;
        if !(nu > T::zero()) || !nu.is_finite() {
            return Err(ExponentError::InvalidConstant("nu must be positive and finite"));
        }
        if !(ell_bound >= nu) || !ell_bound.is_finite() {
            return Err(ExponentError::InvalidConstant("L must be finite and at least nu"));
        }
        if !(a_sup >= T::zero()) || !a_sup.is_finite() {
            return Err(ExponentError::InvalidConstant("a_sup must be finite and nonnegative"));
        }
        let tilde_p = compute_tilde_p(n, p);
        let theta = compute_theta(n, p, tilde_p)?;
        let embedding_theta = compute_theta(n, p, q)?;
        let mut set = ExponentSet {
            n,
            p,
            q,
            nu,
            ell_bound,
            a_sup,
            tilde_p,
            theta,
            embedding_theta,
            vartheta: T::zero(),
            lambda: T::zero(),
            ln_lambda: T::zero(),
        };
        let (vartheta, lambda) = compute_vartheta_and_lambda(&set)?;
        set.vartheta = vartheta;
        set.lambda = lambda;
        set.ln_lambda = tilde_p * (T::one() + vartheta) / vartheta * T::LN_2();
        Ok(set)
    }

    /// Model-equation constants: `nu = L = 1`.
    pub fn model(n: usize, p: T, q: T, a_sup: T) -> Result<Self, ExponentError> {
        Self::new(n, p, q, T::one(), T::one(), a_sup)
    }

    /// Iteration exponent without the trailing `-1`.
    pub fn vartheta_theorem(&self) -> T {
        self.vartheta + T::one()
    }

    pub fn vartheta_for(&self, convention: VarthetaConvention) -> T {
        match convention {
            VarthetaConvention::Theorem => self.vartheta_theorem(),
            VarthetaConvention::Proof => self.vartheta,
        }
    }

    /// `vartheta / ((tilde_p - q)(1 + vartheta))`, the exponent applied to `Y_0`.
    pub fn energy_exponent(&self, convention: VarthetaConvention) -> T {
        let v = self.vartheta_for(convention);
        v / ((self.tilde_p - self.q) * (T::one() + v))
    }

    /// `q / (q - tilde_p)`, the predicted blow-up exponent in `1 - sigma`.
    pub fn blowup_exponent(&self) -> T {
        self.q / (self.q - self.tilde_p)
    }

    /// `2^tilde_p`, the per-step growth base of the level-set recursion.
    pub fn recursion_base(&self) -> T {
        T::lit(2.0).powf(self.tilde_p)
    }
}

/// Returns `(vartheta, lambda)` using `theta(n, p, tilde_p)` and the proof convention.
pub fn compute_vartheta_and_lambda<T: Real>(exps: &ExponentSet<T>) -> Result<(T, T), ExponentError> {
    let tp = exps.tilde_p;
    let theta = compute_theta(exps.n, exps.p, tp)?;
    let vartheta = tp * theta / exps.p + tp * (T::one() - theta) / T::lit(2.0) - T::one();
    if !(vartheta > T::zero()) {
        return Err(ExponentError::NonpositiveVartheta(vartheta.as_f64()));
    }
    let lambda = T::lit(2.0).powf(tp * (T::one() + vartheta) / vartheta);
    Ok((vartheta, lambda))
}

const LOG_SPACE_THRESHOLD: f64 = 27.631_021_115_928_547; // ln(1e12)

/// `|k| = c_star (1 - sigma)^(q/(q - tilde_p)) y0^(vartheta/((tilde_p - q)(1 + vartheta)))`
/// with the proof's `vartheta`. Returns zero when `y0 = 0`.
pub fn level_magnitude<T: Real>(exps: &ExponentSet<T>, sigma: T, y0: T, c_star: T) -> Result<T, ExponentError> {
    if !(sigma > T::zero() && sigma < T::one()) {
        return Err(ExponentError::InvalidConstant("sigma must lie in (0, 1)"));
    }
    if !(y0 >= T::zero()) || !y0.is_finite() {
        return Err(ExponentError::InvalidConstant("y0 must be finite and nonnegative"));
    }
    if !(c_star > T::one()) {
        return Err(ExponentError::InvalidConstant("c_star must exceed 1"));
    }
    if y0 == T::zero() {
        return Ok(T::zero());
    }
    let sigma_exp = exps.blowup_exponent();
    let energy_exp = exps.energy_exponent(VarthetaConvention::Proof);
    let log_k = c_star.ln() + sigma_exp * (T::one() - sigma).ln() + energy_exp * y0.ln();
    if log_k.abs() < T::lit(LOG_SPACE_THRESHOLD) {
        Ok(c_star * (T::one() - sigma).powf(sigma_exp) * y0.powf(energy_exp))
    } else {
        Ok(log_k.exp())
    }
}
