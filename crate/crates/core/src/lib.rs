//! Degenerate parabolic double phase equation
//! `u_t - div(|Du|^(p-2) Du + a(x,t) |Du|^(q-2) Du) = 0`:
//! an implicit solver on uniform grids and discrete evaluation of both sides of
//! the energy, embedding and local sup-bound inequalities, including the
//! bookkeeping of the level-set iteration.
//!
//! Numerical code is generic over [`Real`] (`f32` or `f64`); the aliases below
//! fix the scalar to `f64`, which the experiment harness uses throughout.

pub mod doublephase;
pub mod estimates;
pub mod exponents;
pub mod harness;
pub mod mesh;
pub mod scalar;
pub mod solver;

pub use doublephase::{CoefficientFn, FluxError, FluxModel};
pub use estimates::{
    caccioppoli_batch, caccioppoli_sides, degiorgi_sequence, embedding_sides, fast_convergence_check, levelset_chebyshev, supbound_sides, CylinderSchedule,
    DeGiorgiTrace, EstimateError, EstimateReport,
};
pub use exponents::{compute_theta, compute_tilde_p, level_magnitude, validate_params, ExponentError, ExponentSet, VarthetaConvention};
pub use harness::{fit_blowup_exponent, generate_field, run_experiment, ExperimentConfig, ExperimentKind, HarnessError, RandomFieldSpec};
pub use mesh::{build_cutoffs, CutoffPair, Cylinder, Field, MeshError, Sign, SpaceTimeGrid};
pub use scalar::{Point, Real, Vec2};
pub use solver::{solve_cylinder, BoundaryData, DtRule, SolveTrace, SolverConfig, SolverError};

pub type ExponentSet64 = ExponentSet<f64>;
pub type Grid64 = SpaceTimeGrid<f64>;
pub type Field64 = Field<f64>;
pub type Cylinder64 = Cylinder<f64>;
pub type FluxModel64 = FluxModel<f64>;
pub type CoefficientFn64 = CoefficientFn<f64>;
pub type SolverConfig64 = SolverConfig<f64>;
pub type Schedule64 = CylinderSchedule<f64>;
pub type Point64 = Point<f64>;
