//! Experiment driver: configuration, seeded random fields, solver runs across
//! refinement ladders, evaluation of the estimates, and report output.
//!
//! Every experiment produces a [`ReportBundle`]. Its CSV body and `summary.json`
//! depend only on the configuration; wall-clock timings go to `metadata.json`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::doublephase::{CoefficientFn, FluxError, FluxModel};
use crate::estimates::{
    caccioppoli_batch, degiorgi_sequence, embedding_sides, levelset_chebyshev, smallness_product, supbound_sides, CylinderSchedule,
    DeGiorgiTrace, EstimateError, EstimateReport, CACCIOPPOLI_SUBSAMPLES, CSV_HEADER,
};
use crate::exponents::{level_magnitude, ExponentError, ExponentSet, VarthetaConvention};
use crate::mesh::{build_cutoffs, CutoffPair, Cylinder, Field, MeshError, Sign, SpaceTimeGrid};
use crate::scalar::Point;
use crate::solver::{solve_cylinder, BoundaryData, DtRule, SolveTrace, SolverConfig, SolverError};

/// Version stamped into every JSON document this module writes.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("need at least 4 distinct sigma values with nonzero sides, got {got}")]
    InsufficientPoints { got: usize },
    #[error(transparent)]
    Exponent(#[from] ExponentError),
    #[error(transparent)]
    Flux(#[from] FluxError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Estimate(#[from] EstimateError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Solve,
    Embedding,
    Caccioppoli,
    Supbound,
    Degiorgi,
    Convergence,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::Solve => "solve",
            ExperimentKind::Embedding => "embedding",
            ExperimentKind::Caccioppoli => "caccioppoli",
            ExperimentKind::Supbound => "supbound",
            ExperimentKind::Degiorgi => "degiorgi",
            ExperimentKind::Convergence => "convergence",
        }
    }
}

/// Coefficient `a(x, t)` as written in a configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CoefficientSpec {
    Constant { a: f64 },
    SmoothBump { a_sup: f64 },
    Checkerboard { a_sup: f64, cells: usize },
    /// A field file (see the README for the format), interpolated multilinearly.
    Sampled { path: PathBuf },
}

impl CoefficientSpec {
    pub fn build(&self, grid: &SpaceTimeGrid<f64>) -> Result<CoefficientFn<f64>, HarnessError> {
        Ok(match self {
            CoefficientSpec::Constant { a } => CoefficientFn::constant(*a)?,
            CoefficientSpec::SmoothBump { a_sup } => CoefficientFn::smooth_bump(*a_sup, grid)?,
            CoefficientSpec::Checkerboard { a_sup, cells } => CoefficientFn::checkerboard(*a_sup, grid, *cells)?,
            CoefficientSpec::Sampled { path } => CoefficientFn::sampled(Field::load(path)?)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsSpec {
    pub n: usize,
    pub p: f64,
    pub q: f64,
    #[serde(default = "one")]
    pub nu: f64,
    #[serde(default = "one")]
    pub ell_bound: f64,
    pub coefficient: CoefficientSpec,
}

fn one() -> f64 {
    1.0
}

/// Grid box `B_radius(center) x (t0 - time_length, t0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub center: [f64; 2],
    pub t0: f64,
    pub radius: f64,
    pub time_length: f64,
}

impl Default for DomainSpec {
    fn default() -> Self {
        DomainSpec { center: [0.0, 0.0], t0: 0.25, radius: 1.0, time_length: 0.25 }
    }
}

/// One refinement level. Without `nt` the solver's time-step rule decides.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LadderLevel {
    pub nx: usize,
    #[serde(default)]
    pub nt: Option<usize>,
}

/// Seeded truncated Fourier series in space and time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomFieldSpec {
    /// Highest wave number per axis.
    pub fourier_modes: usize,
    /// Mode `(kx, ky, m)` has amplitude `(1 + kx^2 + ky^2 + m^2)^(-decay/2)`.
    pub decay: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldShape {
    pub fourier_modes: usize,
    pub decay: f64,
}

impl Default for FieldShape {
    fn default() -> Self {
        FieldShape { fourier_modes: 2, decay: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OutputSpec {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default)]
    pub svg: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub experiment: ExperimentKind,
    pub params: ParamsSpec,
    #[serde(default)]
    pub domain: DomainSpec,
    pub ladder: Vec<LadderLevel>,
    #[serde(default = "default_sigmas")]
    pub sigma_list: Vec<f64>,
    pub seed: u64,
    #[serde(default = "default_samples")]
    pub sample_count: usize,
    #[serde(default)]
    pub field: FieldShape,
    /// Radius of the sup-bound and iteration cylinders around `(center, t0)`.
    #[serde(default = "default_rho")]
    pub rho: f64,
    /// Number of truncation levels per sign in the energy experiment.
    #[serde(default = "default_levels")]
    pub levels_per_sign: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default)]
    pub solver: SolverConfig<f64>,
    #[serde(default)]
    pub output: OutputSpec,
}

fn default_sigmas() -> Vec<f64> {
    vec![0.2, 0.35, 0.5, 0.65, 0.8]
}
fn default_samples() -> usize {
    1
}
fn default_rho() -> f64 {
    0.6
}
fn default_levels() -> usize {
    5
}
fn default_depth() -> usize {
    crate::estimates::DEFAULT_DEPTH
}

impl ExperimentConfig {
    /// A small ready-to-run configuration for each experiment.
    pub fn preset(kind: ExperimentKind) -> Self {
        let ladder = match kind {
            ExperimentKind::Embedding => vec![LadderLevel { nx: 17, nt: Some(9) }, LadderLevel { nx: 33, nt: Some(17) }, LadderLevel { nx: 65, nt: Some(33) }],
            ExperimentKind::Convergence => vec![LadderLevel { nx: 9, nt: None }, LadderLevel { nx: 17, nt: None }, LadderLevel { nx: 33, nt: None }],
            _ => vec![LadderLevel { nx: 17, nt: None }, LadderLevel { nx: 33, nt: None }],
        };
        let domain = match kind {
            ExperimentKind::Embedding => DomainSpec { center: [0.0, 0.0], t0: 0.0, radius: 1.0, time_length: 1.0 },
            _ => DomainSpec::default(),
        };
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            experiment: kind,
            params: ParamsSpec { n: 2, p: 2.0, q: 2.5, nu: 1.0, ell_bound: 1.0, coefficient: CoefficientSpec::SmoothBump { a_sup: 1.0 } },
            domain,
            ladder,
            sigma_list: default_sigmas(),
            seed: 1,
            sample_count: if kind == ExperimentKind::Embedding { 8 } else { 1 },
            field: FieldShape::default(),
            rho: default_rho(),
            levels_per_sign: default_levels(),
            depth: default_depth(),
            solver: SolverConfig::default(),
            output: OutputSpec::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::ConfigInvalid(m.to_string()));
        if self.schema_version != SCHEMA_VERSION {
            return bad(&format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", self.schema_version));
        }
        if self.ladder.is_empty() {
            return bad("ladder must not be empty");
        }
        if self.ladder.iter().any(|l| l.nx < 3 || l.nt.is_some_and(|nt| nt < 2)) {
            return bad("ladder levels need nx >= 3 and nt >= 2");
        }
        if self.sample_count == 0 {
            return bad("sample_count must be at least 1");
        }
        if self.sigma_list.iter().any(|&s| !(s > 0.0 && s < 1.0)) {
            return bad("every sigma must lie in (0, 1)");
        }
        if self.field.fourier_modes == 0 || !(self.field.decay >= 0.0) {
            return bad("field needs fourier_modes >= 1 and decay >= 0");
        }
        let d = &self.domain;
        if !(d.radius > 0.0) || !(d.time_length > 0.0) || !d.t0.is_finite() {
            return bad("domain radius and time_length must be positive");
        }
        if self.depth < 2 {
            return bad("depth must be at least 2");
        }
        self.solver.validate()?;
        match self.experiment {
            ExperimentKind::Convergence => {}
            _ => {
                if self.params.n != 2 {
                    return bad("field experiments run on two-dimensional grids (n = 2)");
                }
                ExponentSet::new(self.params.n, self.params.p, self.params.q, self.params.nu, self.params.ell_bound, self.a_sup())?;
            }
        }
        if matches!(self.experiment, ExperimentKind::Supbound | ExperimentKind::Degiorgi) {
            let tp = self.params.p + self.params.p / self.params.n as f64;
            if !(self.rho > 0.0 && self.rho <= d.radius.min(1.0)) || self.rho.powf(tp) > d.time_length * (1.0 + 1e-12) {
                return bad("rho must satisfy rho <= min(1, radius) and rho^tilde_p <= time_length");
            }
            if self.sigma_list.is_empty() {
                return bad("sigma_list must not be empty");
            }
        }
        Ok(())
    }

    fn a_sup(&self) -> f64 {
        match &self.params.coefficient {
            CoefficientSpec::Constant { a } => *a,
            CoefficientSpec::SmoothBump { a_sup } | CoefficientSpec::Checkerboard { a_sup, .. } => *a_sup,
            // the bound of a sampled field is only known after loading it
            CoefficientSpec::Sampled { path } => Field::<f64>::load(path).map(|f| f.max_abs()).unwrap_or(0.0),
        }
    }

    pub fn exponents(&self) -> Result<ExponentSet<f64>, HarnessError> {
        Ok(ExponentSet::new(self.params.n, self.params.p, self.params.q, self.params.nu, self.params.ell_bound, self.a_sup())?)
    }

    /// Grid of one ladder level over the configured domain.
    pub fn grid(&self, level: &LadderLevel, dim: usize, p: f64) -> Result<SpaceTimeGrid<f64>, HarnessError> {
        let d = &self.domain;
        let h = 2.0 * d.radius / (level.nx - 1) as f64;
        let nt = level.nt.unwrap_or_else(|| self.solver.dt_rule.time_slices(h, p, d.time_length));
        Ok(SpaceTimeGrid::new(dim, level.nx, nt, d.center, d.t0, d.radius, d.time_length)?)
    }
}

/// Seeded field `sum_modes A c cos(pi kx X + a) cos(pi ky Y + b) cos(pi m S + c)` with
/// `X, Y, S` the grid coordinates rescaled to `[-1, 1]`, `c` standard normal and
/// phases uniform. Identical `(spec, grid)` give bitwise identical fields.
pub fn generate_field(spec: &RandomFieldSpec, grid: &SpaceTimeGrid<f64>) -> Field<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let m = spec.fourier_modes;
    let ky_max = if grid.dim == 2 { m } else { 0 };
    let nx = grid.nx;
    let nodes = grid.nodes_per_slice();
    let mut values = vec![0.0; grid.len()];
    let axis = |i: usize, n: usize| -1.0 + 2.0 * i as f64 / (n - 1) as f64;
    let mut xs = vec![0.0; nx];
    let mut ys = vec![0.0; nx];
    let mut plane = vec![0.0; nodes];
    for kt in 0..=m {
        for ky in 0..=ky_max {
            for kx in 0..=m {
                let coef: f64 = rng.sample(StandardNormal);
                let phases: [f64; 3] = [rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI)];
                let wave2 = (kx * kx + ky * ky + kt * kt) as f64;
                let amp = coef * (1.0 + wave2).powf(-0.5 * spec.decay);
                if amp == 0.0 {
                    continue;
                }
                for i in 0..nx {
                    xs[i] = (PI * kx as f64 * axis(i, nx) + phases[0]).cos();
                    ys[i] = if grid.dim == 2 { (PI * ky as f64 * axis(i, nx) + phases[1]).cos() } else { 1.0 };
                }
                for (node, v) in plane.iter_mut().enumerate() {
                    *v = if grid.dim == 2 { xs[node % nx] * ys[node / nx] } else { xs[node] * ys[0] };
                }
                for j in 0..grid.nt {
                    let tw = amp * (PI * kt as f64 * axis(j, grid.nt) + phases[2]).cos();
                    let row = &mut values[j * nodes..(j + 1) * nodes];
                    for (r, &pv) in row.iter_mut().zip(&plane) {
                        *r += tw * pv;
                    }
                }
            }
        }
    }
    Field::new(*grid, values).expect("finite Fourier sum")
}

/// Result of one named check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    /// Hard checks decide the exit code; soft checks are informational.
    pub hard: bool,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn hard(name: &str, passed: bool, detail: String) -> Self {
        Check { name: name.to_string(), hard: true, passed, detail }
    }

    pub fn soft(name: &str, passed: bool, detail: String) -> Self {
        Check { name: name.to_string(), hard: false, passed, detail }
    }
}

/// Everything an experiment produced.
#[derive(Debug, Clone, Default)]
pub struct ReportBundle {
    pub experiment: Option<ExperimentKind>,
    pub reports: Vec<EstimateReport>,
    pub checks: Vec<Check>,
    pub traces: Vec<DeGiorgiTrace>,
    /// Deterministic scalar results (fitted exponents, maxima per level, ...).
    pub values: BTreeMap<String, f64>,
    /// Solver outputs of the `solve` experiment, one per ladder level.
    pub solutions: Vec<(Field<f64>, SolveTrace)>,
    /// Wall-clock timings; written only to the metadata file.
    pub timings: BTreeMap<String, f64>,
}

impl ReportBundle {
    /// `true` iff every hard check passed.
    pub fn passed(&self) -> bool {
        self.checks.iter().filter(|c| c.hard).all(|c| c.passed)
    }

    pub fn failed_checks(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| c.hard && !c.passed).collect()
    }

    pub fn csv(&self) -> String {
        let mut s = String::with_capacity(128 * (self.reports.len() + 1));
        s.push_str(CSV_HEADER);
        s.push('\n');
        for r in &self.reports {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "schema_version": SCHEMA_VERSION,
            "experiment": self.experiment.map(|k| k.as_str()),
            "passed": self.passed(),
            "rows": self.reports.len(),
            "checks": self.checks,
            "values": self.values,
            "degiorgi_traces": self.traces,
        })
    }

    /// Writes `results.csv`, `summary.json`, `metadata.json` and optionally `plot.svg`.
    pub fn write(&self, dir: &Path, svg: bool) -> Result<(), HarnessError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("results.csv"), self.csv())?;
        std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&self.summary_json())?)?;
        let unix = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let meta = serde_json::json!({ "schema_version": SCHEMA_VERSION, "written_unix_seconds": unix, "timings_seconds": self.timings });
        std::fs::write(dir.join("metadata.json"), serde_json::to_string_pretty(&meta)?)?;
        for (field, trace) in &self.solutions {
            let nx = field.grid().nx;
            field.save(&dir.join(format!("field_{nx}.txt")))?;
            std::fs::write(dir.join(format!("trace_{nx}.json")), serde_json::to_string_pretty(&trace_json(trace))?)?;
        }
        if svg {
            std::fs::write(dir.join("plot.svg"), scatter_svg(&self.reports))?;
        }
        Ok(())
    }
}

/// Step table of a solve as JSON.
pub fn trace_json(trace: &SolveTrace) -> serde_json::Value {
    serde_json::json!({
        "schema_version": SCHEMA_VERSION,
        "initial_energy": trace.initial_energy,
        "steps": trace.steps,
    })
}

/// `log10 lhs` against `log10 rhs_unconstant` for every row with both sides positive.
fn scatter_svg(reports: &[EstimateReport]) -> String {
    let pts: Vec<(f64, f64)> =
        reports.iter().filter(|r| r.lhs > 0.0 && r.rhs_unconstant > 0.0).map(|r| (r.rhs_unconstant.log10(), r.lhs.log10())).collect();
    let (w, h, pad) = (480.0, 360.0, 40.0);
    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">"#);
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    if !pts.is_empty() {
        let lo = pts.iter().flat_map(|p| [p.0, p.1]).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().flat_map(|p| [p.0, p.1]).fold(f64::NEG_INFINITY, f64::max);
        let span = (hi - lo).max(1e-12);
        let sx = |v: f64| pad + (v - lo) / span * (w - 2.0 * pad);
        let sy = |v: f64| h - pad - (v - lo) / span * (h - 2.0 * pad);
        let _ = writeln!(out, r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="gray"/>"#, sx(lo), sy(lo), sx(hi), sy(hi));
        for (x, y) in pts {
            let _ = writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="steelblue"/>"#, sx(x), sy(y));
        }
        let _ = writeln!(out, r#"<text x="{pad}" y="{}" font-size="12">log10 rhs (x) vs log10 lhs (y)</text>"#, pad / 2.0);
    }
    out.push_str("</svg>\n");
    out
}

/// Seed of sample `s` in a run with base seed `seed`.
pub fn sample_seed(seed: u64, s: usize) -> u64 {
    seed.wrapping_add(s as u64)
}

/// Random initial data vanishing on the boundary of the grid box.
pub fn initial_data(grid: &SpaceTimeGrid<f64>, shape: &FieldShape, seed: u64) -> Vec<f64> {
    let flat = SpaceTimeGrid::new(grid.dim, grid.nx, 2, grid.center, grid.t0, grid.radius, grid.time_length).expect("grid already valid");
    let f = generate_field(&RandomFieldSpec { fourier_modes: shape.fourier_modes, decay: shape.decay, seed }, &flat);
    (0..grid.nodes_per_slice())
        .map(|n| {
            let x = grid.node_coords(n);
            let mut w = 1.0;
            for axis in 0..grid.dim {
                let s = (x[axis] - grid.center[axis]) / grid.radius;
                w *= (1.0 - s * s).max(0.0);
            }
            if grid.is_boundary_node(n) {
                0.0
            } else {
                w * f.slice(0)[n]
            }
        })
        .collect()
}

/// Solves the configured problem with zero boundary data on one ladder level.
pub fn solve_level(cfg: &ExperimentConfig, level: &LadderLevel, seed: u64) -> Result<(Field<f64>, SolveTrace), HarnessError> {
    let grid = cfg.grid(level, 2, cfg.params.p)?;
    let coeff = cfg.params.coefficient.build(&grid)?;
    let flux = FluxModel::new(cfg.params.p, cfg.params.q, coeff)?;
    let init = initial_data(&grid, &cfg.field, seed);
    Ok(solve_cylinder(&init, &flux, &grid, &cfg.solver, &BoundaryData::Zero)?)
}

/// Least-squares slope of `ln C(sigma)` against `ln(1 - sigma)`, where
/// `C = lhs (1 - sigma)^(q/(q - tilde_p)) / rhs_unconstant` is the constant the
/// sup bound needs once the predicted `sigma` factor is stripped from the right side.
/// A constant that scales exactly like the predicted factor gives slope `q/(q - tilde_p)`.
pub fn fit_blowup_exponent(reports: &[EstimateReport]) -> Result<f64, HarnessError> {
    let mut pts = Vec::new();
    for r in reports {
        let e = r.params.exponents.as_ref().ok_or_else(|| HarnessError::ConfigInvalid("report without exponents".into()))?;
        if r.lhs > 0.0 && r.rhs_unconstant > 0.0 && r.param > 0.0 && r.param < 1.0 {
            let gap = (1.0 - r.param).ln();
            let predicted = e.q / (e.q - e.tilde_p);
            pts.push((gap, r.lhs.ln() + predicted * gap - r.rhs_unconstant.ln()));
        }
    }
    let mut sigmas: Vec<f64> = pts.iter().map(|p| p.0).collect();
    sigmas.sort_by(|a, b| a.total_cmp(b));
    sigmas.dedup();
    if sigmas.len() < 4 {
        return Err(HarnessError::InsufficientPoints { got: sigmas.len() });
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    Ok(sxy / sxx)
}

/// Runs the configured experiment over every sample and ladder level.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ReportBundle, HarnessError> {
    cfg.validate()?;
    let started = Instant::now();
    let mut bundle = match cfg.experiment {
        ExperimentKind::Solve => run_solve(cfg)?,
        ExperimentKind::Embedding => run_embedding(cfg)?,
        ExperimentKind::Caccioppoli => run_caccioppoli(cfg)?,
        ExperimentKind::Supbound => run_supbound(cfg)?,
        ExperimentKind::Degiorgi => run_degiorgi(cfg)?,
        ExperimentKind::Convergence => run_convergence(cfg)?,
    };
    bundle.experiment = Some(cfg.experiment);
    bundle.timings.insert("total".into(), started.elapsed().as_secs_f64());
    if let Some(dir) = &cfg.output.dir {
        bundle.write(dir, cfg.output.svg)?;
    }
    Ok(bundle)
}

/// Runs `f` for every `(sample, level)` pair in parallel and concatenates the
/// results in `(sample, level)` order.
fn per_sample_level<R: Send>(
    cfg: &ExperimentConfig,
    f: impl Fn(u64, usize, &LadderLevel) -> Result<R, HarnessError> + Sync,
) -> Result<Vec<(u64, usize, R)>, HarnessError> {
    let jobs: Vec<(u64, usize)> = (0..cfg.sample_count).flat_map(|s| (0..cfg.ladder.len()).map(move |l| (sample_seed(cfg.seed, s), l))).collect();
    jobs.into_par_iter().map(|(seed, l)| f(seed, l, &cfg.ladder[l]).map(|r| (seed, l, r))).collect()
}

/// Largest finite `empirical_c` per ladder level among reports passing `keep`.
fn max_c_per_level(cfg: &ExperimentConfig, reports: &[EstimateReport], keep: impl Fn(&EstimateReport) -> bool) -> Vec<f64> {
    (0..cfg.ladder.len())
        .map(|l| {
            reports
                .iter()
                .filter(|r| r.level == l && keep(r))
                .filter_map(|r| r.empirical_c)
                .filter(|c| c.is_finite())
                .fold(0.0, f64::max)
        })
        .collect()
}

/// Relative change of the last two entries.
fn last_two_change(v: &[f64]) -> Option<f64> {
    match v {
        [.., a, b] if *a > 0.0 => Some((b - a).abs() / a),
        _ => None,
    }
}

fn run_solve(cfg: &ExperimentConfig) -> Result<ReportBundle, HarnessError> {
    let mut bundle = ReportBundle::default();
    for (l, level) in cfg.ladder.iter().enumerate() {
        let t = Instant::now();
        let (u, trace) = solve_level(cfg, level, cfg.seed)?;
        bundle.timings.insert(format!("solve_level_{l}"), t.elapsed().as_secs_f64());
        bundle.checks.push(Check::hard(
            "max_principle",
            trace.max_clamp() <= 1e-9 * (1.0 + u.max_abs()),
            format!("level {l}: largest correction {:e}", trace.max_clamp()),
        ));
        bundle.checks.push(Check::hard("energy_nonincreasing", trace.energy_nonincreasing(), format!("level {l}")));
        bundle.values.insert(format!("max_abs_level_{l}"), u.max_abs());
        bundle.solutions.push((u, trace));
    }
    Ok(bundle)
}

const SCALES: [f64; 2] = [1e-3, 1e3];

fn run_embedding(cfg: &ExperimentConfig) -> Result<ReportBundle, HarnessError> {
    let exps = cfg.exponents()?;
    let rows = per_sample_level(cfg, |seed, l, level| {
        let grid = cfg.grid(level, 2, cfg.params.p)?;
        let f = generate_field(&RandomFieldSpec { fourier_modes: cfg.field.fourier_modes, decay: cfg.field.decay, seed }, &grid);
        let cyl = grid.cover();
        let base = embedding_sides(&f, &cyl, &exps)?;
        let c0 = base.empirical_c.unwrap_or(0.0);
        let mut dev: f64 = 0.0;
        for s in SCALES {
            let c = embedding_sides(&f.scaled(s), &cyl, &exps)?.empirical_c.unwrap_or(0.0);
            dev = dev.max(if c0 > 0.0 { (c - c0).abs() / c0 } else { c.abs() });
        }
        Ok(base.with_seed(seed).with_level(l).with_param(1.0).with_aux(format!("{dev:.16e}")))
    })?;
    let mut bundle = ReportBundle::default();
    bundle.reports = rows.into_iter().map(|(_, _, r)| r).collect();
    let worst_dev = bundle.reports.iter().map(|r| r.aux.parse::<f64>().unwrap_or(f64::INFINITY)).fold(0.0, f64::max);
    bundle.checks.push(Check::hard("scale_invariance", worst_dev <= 1e-10, format!("largest relative change {worst_dev:e}")));
    let maxima = max_c_per_level(cfg, &bundle.reports, |_| true);
    let finite = bundle.reports.iter().all(|r| r.empirical_c.is_none_or(|c| c.is_finite()));
    bundle.checks.push(Check::hard("finite_constants", finite, format!("max c per level {maxima:?}")));
    if let Some(change) = last_two_change(&maxima) {
        bundle.checks.push(Check::soft("refinement_stability", change <= 0.05, format!("last two levels differ by {:.3}%", 100.0 * change)));
    }
    for (l, m) in maxima.iter().enumerate() {
        bundle.values.insert(format!("max_c_level_{l}"), *m);
    }
    Ok(bundle)
}

/// Outer and inner cylinders of the energy experiment on a grid box.
pub fn caccioppoli_cylinders(d: &DomainSpec) -> (Cylinder<f64>, Cylinder<f64>) {
    let outer = Cylinder::new(d.center, d.t0, 0.9 * d.radius, 0.9 * d.time_length);
    let inner = Cylinder::new(d.center, d.t0, 0.5 * d.radius, 0.5 * d.time_length);
    (outer, inner)
}

/// `count` levels evenly spaced strictly inside `(lo, hi)`.
pub fn interior_levels(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    (1..=count).map(|i| lo + (hi - lo) * i as f64 / (count + 1) as f64).collect()
}

/// Smallest and largest nodal value of `u` where `eta zeta > 0`.
pub fn cutoff_support_range(u: &Field<f64>, cut: &CutoffPair<f64>) -> (f64, f64) {
    let g = u.grid();
    let eta = cut.eta_nodal(g);
    let zeta = cut.zeta_slices(g);
    let mut range = (f64::INFINITY, f64::NEG_INFINITY);
    for j in (0..g.nt).filter(|&j| zeta[j] > 0.0) {
        for (v, _) in u.slice(j).iter().zip(&eta).filter(|(_, &e)| e > 0.0) {
            range = (range.0.min(*v), range.1.max(*v));
        }
    }
    range
}

/// Energy-inequality reports for one field: `levels_per_sign` levels per sign
/// spread over the range of `u` where both cutoffs are positive, plus one empty
/// level per sign.
pub fn caccioppoli_reports(
    u: &Field<f64>,
    flux: &FluxModel<f64>,
    domain: &DomainSpec,
    levels_per_sign: usize,
) -> Result<Vec<EstimateReport>, HarnessError> {
    let (outer, inner) = caccioppoli_cylinders(domain);
    let cut = build_cutoffs(&outer, &inner)?;
    let (lo, hi) = cutoff_support_range(u, &cut);
    let mut levels = Vec::new();
    for sign in [Sign::Plus, Sign::Minus] {
        let mut ks = interior_levels(lo, hi, levels_per_sign);
        // beyond the range of u everywhere, so the level set is empty
        let span = u.max_abs() + 1.0;
        ks.push(match sign {
            Sign::Plus => span,
            Sign::Minus => -span,
        });
        levels.extend(ks.into_iter().map(|k| (k, sign)));
    }
    Ok(caccioppoli_batch(u, flux, &levels, &outer, &cut, CACCIOPPOLI_SUBSAMPLES)?)
}

fn energy_checks(bundle: &mut ReportBundle, cfg: &ExperimentConfig) {
    let empties_zero = bundle.reports.iter().filter(|r| r.empty_level_set).all(|r| r.lhs == 0.0 && r.rhs_unconstant == 0.0);
    let nonneg = bundle.reports.iter().all(|r| r.lhs >= 0.0 && r.rhs_unconstant >= 0.0);
    let bounded = bundle.reports.iter().all(|r| r.empirical_c.is_none_or(|c| c.is_finite()));
    bundle.checks.push(Check::hard("empty_level_sets_vanish", empties_zero, String::new()));
    bundle.checks.push(Check::hard("sides_nonnegative", nonneg, String::new()));
    bundle.checks.push(Check::hard("finite_constants", bounded, String::new()));
    let maxima = max_c_per_level(cfg, &bundle.reports, |_| true);
    let trend = maxima.windows(2).all(|w| w[1] <= 1.1 * w[0]);
    bundle.checks.push(Check::soft("refinement_nonincreasing", trend, format!("max c per level {maxima:?}")));
    for (l, m) in maxima.iter().enumerate() {
        bundle.values.insert(format!("max_c_level_{l}"), *m);
    }
}

fn run_caccioppoli(cfg: &ExperimentConfig) -> Result<ReportBundle, HarnessError> {
    let rows = per_sample_level(cfg, |seed, l, level| {
        let (u, _) = solve_level(cfg, level, seed)?;
        let flux = FluxModel::new(cfg.params.p, cfg.params.q, cfg.params.coefficient.build(u.grid())?)?;
        let reps = caccioppoli_reports(&u, &flux, &cfg.domain, cfg.levels_per_sign)?;
        Ok(reps.into_iter().map(|r| r.with_seed(seed).with_level(l)).collect::<Vec<_>>())
    })?;
    let mut bundle = ReportBundle::default();
    bundle.reports = rows.into_iter().flat_map(|(_, _, r)| r).collect();
    energy_checks(&mut bundle, cfg);
    Ok(bundle)
}

/// Sup-bound reports of one field for every `sigma` and both conventions.
pub fn supbound_reports(u: &Field<f64>, z0: Point<f64>, rho: f64, sigmas: &[f64], exps: &ExponentSet<f64>) -> Result<Vec<EstimateReport>, HarnessError> {
    let mut out = Vec::new();
    for conv in VarthetaConvention::ALL {
        for &s in sigmas {
            out.push(supbound_sides(u, z0, rho, s, exps, conv)?);
        }
    }
    Ok(out)
}

fn run_supbound(cfg: &ExperimentConfig) -> Result<ReportBundle, HarnessError> {
    let exps = cfg.exponents()?;
    let z0 = Point::new(cfg.domain.center, cfg.domain.t0);
    let mut sigmas = cfg.sigma_list.clone();
    sigmas.sort_by(|a, b| a.total_cmp(b));
    let rows = per_sample_level(cfg, |seed, l, level| {
        let (u, _) = solve_level(cfg, level, seed)?;
        let reps = supbound_reports(&u, z0, cfg.rho, &sigmas, &exps)?;
        Ok(reps.into_iter().map(|r| r.with_seed(seed).with_level(l)).collect::<Vec<_>>())
    })?;
    let mut bundle = ReportBundle::default();
    bundle.reports = rows.into_iter().flat_map(|(_, _, r)| r).collect();
    // reports of one (seed, level, convention) are consecutive and sorted by sigma
    let monotone = bundle.reports.chunks(sigmas.len()).all(|c| c.windows(2).all(|w| w[1].lhs >= w[0].lhs));
    bundle.checks.push(Check::hard("lhs_monotone_in_sigma", monotone, String::new()));
    let finite = bundle.reports.iter().all(|r| r.empirical_c.is_none_or(|c| c.is_finite()));
    bundle.checks.push(Check::hard("finite_constants", finite, String::new()));
    for conv in VarthetaConvention::ALL {
        let maxima = max_c_per_level(cfg, &bundle.reports, |r| r.aux == conv.as_str());
        if let Some(change) = last_two_change(&maxima) {
            bundle.checks.push(Check::soft(
                &format!("refinement_stability_{}", conv.as_str()),
                change <= 0.2,
                format!("max c per level {maxima:?}"),
            ));
        }
        for (l, m) in maxima.iter().enumerate() {
            bundle.values.insert(format!("max_c_{}_level_{l}", conv.as_str()), *m);
        }
    }
    bundle.values.insert("predicted_blowup_exponent".into(), exps.blowup_exponent());
    let last = cfg.ladder.len() - 1;
    let finest: Vec<EstimateReport> = bundle.reports.iter().filter(|r| r.level == last && r.aux == "proof").cloned().collect();
    if let Ok(slope) = fit_blowup_exponent(&finest) {
        bundle.values.insert("fitted_blowup_exponent".into(), slope);
    }
    Ok(bundle)
}

/// Outcome of choosing the level for the iteration on one field and sign.
#[derive(Debug, Clone)]
pub struct DeGiorgiRun {
    pub trace: DeGiorgiTrace,
    pub c_star: f64,
    /// `c_emp lambda K^(1+vartheta) Y_0^vartheta` at the accepted level.
    pub smallness: f64,
    /// `(n, s, first, second)` for every Chebyshev evaluation.
    pub chebyshev: Vec<(usize, f64, f64, f64)>,
}

/// Chooses `|k| = level_magnitude(.., c_star)`, doubling `c_star` from 2 until the
/// measured recursion constants satisfy the smallness condition, then evaluates the
/// trace and the Chebyshev bounds at that level.
pub fn degiorgi_run(u: &Field<f64>, z0: Point<f64>, rho: f64, sigma: f64, sign: Sign, depth: usize, exps: &ExponentSet<f64>) -> Result<DeGiorgiRun, HarnessError> {
    let unit = match sign {
        Sign::Plus => 1.0,
        Sign::Minus => -1.0,
    };
    // Y_0 uses k_0 = 0, so any level of the right sign gives it
    let probe = CylinderSchedule::new(z0, rho, sigma, unit, depth, exps.tilde_p)?;
    let y0 = degiorgi_sequence(u, &probe, exps)?.y[0];
    if y0 == 0.0 {
        let trace = degiorgi_sequence(u, &probe, exps)?;
        return Ok(DeGiorgiRun { trace, c_star: 2.0, smallness: 0.0, chebyshev: Vec::new() });
    }
    let mut c_star = 2.0;
    for _ in 0..200 {
        let k = unit * level_magnitude(exps, sigma, y0, c_star)?;
        let sched = CylinderSchedule::new(z0, rho, sigma, k, depth, exps.tilde_p)?;
        let trace = degiorgi_sequence(u, &sched, exps)?;
        let smallness = smallness_product(&trace, exps);
        if smallness <= 1.0 {
            let mut chebyshev = Vec::new();
            for n in 0..depth {
                for s in [2.0, exps.p, exps.tilde_p] {
                    let (a, b) = levelset_chebyshev(u, &sched, n, s)?;
                    chebyshev.push((n, s, a, b));
                }
            }
            return Ok(DeGiorgiRun { trace, c_star, smallness, chebyshev });
        }
        c_star *= 2.0;
    }
    Err(HarnessError::ConfigInvalid("no level satisfied the smallness condition after 200 doublings".into()))
}

fn run_degiorgi(cfg: &ExperimentConfig) -> Result<ReportBundle, HarnessError> {
    let exps = cfg.exponents()?;
    let z0 = Point::new(cfg.domain.center, cfg.domain.t0);
    let rows = per_sample_level(cfg, |seed, _, level| {
        let (u, _) = solve_level(cfg, level, seed)?;
        let mut runs = Vec::new();
        for &sigma in &cfg.sigma_list {
            for sign in [Sign::Plus, Sign::Minus] {
                let run = degiorgi_run(&u, z0, cfg.rho, sigma, sign, cfg.depth, &exps)?;
                runs.push((sigma, sign, run));
            }
        }
        Ok((crate::estimates::GridDescriptor::of(u.grid()), runs))
    })?;
    let mut bundle = ReportBundle::default();
    let mut decay_ok = true;
    let mut cheb_ok = true;
    let mut monotone = true;
    for (seed, l, (grid, runs)) in rows {
        for (sigma, sign, run) in runs {
            let tr = &run.trace;
            decay_ok &= tr.all_decay();
            monotone &= tr.levelsets_nonincreasing();
            for (n, &y) in tr.y.iter().enumerate() {
                let bound = tr.y[0] / tr.lambda.powi(n as i32);
                bundle.reports.push(EstimateReport {
                    name: "degiorgi".into(),
                    lhs: y,
                    rhs_unconstant: bound,
                    empirical_c: if bound > 0.0 { Some(y / bound) } else { None },
                    grid,
                    params: crate::estimates::ReportParams { p: exps.p, q: exps.q, exponents: Some(exps.clone()) },
                    seed,
                    level: l,
                    param: n as f64,
                    aux: format!("{}:sigma={sigma}:k={:.16e}", sign.as_str(), tr.k),
                    empty_level_set: tr.empty_from.is_some_and(|e| n >= e),
                });
            }
            for &(n, s, a, b) in &run.chebyshev {
                cheb_ok &= a >= b * (1.0 - 1e-12);
                bundle.reports.push(EstimateReport {
                    name: "chebyshev".into(),
                    lhs: a,
                    rhs_unconstant: b,
                    empirical_c: if b > 0.0 { Some(a / b) } else { None },
                    grid,
                    params: crate::estimates::ReportParams { p: exps.p, q: exps.q, exponents: Some(exps.clone()) },
                    seed,
                    level: l,
                    param: s,
                    aux: format!("{}:sigma={sigma}:n={n}", sign.as_str()),
                    empty_level_set: b == 0.0,
                });
            }
            bundle.traces.push(run.trace);
        }
    }
    bundle.checks.push(Check::hard("decay", decay_ok, "Y_n <= Y_0 / lambda^n at every step".into()));
    bundle.checks.push(Check::hard("chebyshev", cheb_ok, "first >= second (1 - 1e-12)".into()));
    bundle.checks.push(Check::hard("levelsets_nonincreasing", monotone, String::new()));
    Ok(bundle)
}

/// The two closed-form oracles of the convergence experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Oracle {
    /// `u_t = u_xx` on `(0, 1)`, exact `exp(-pi^2 t) sin(pi x)`, `t in [0, 1/4]`.
    Heat,
    /// `p = 3` in one dimension: the self-similar source solution, `t in [1, 2]`.
    Barenblatt,
}

/// Source solution of `u_t = (|u_x| u_x)_x`:
/// `t^(-1/4) [C - (1/6) (|x| t^(-1/4))^(3/2)]_+^2` with `C = 1/6`, support `|x| <= t^(1/4)`.
pub fn barenblatt_p3(x: f64, t: f64) -> f64 {
    let c = 1.0 / 6.0;
    let s = t.powf(-0.25);
    let inner = c - (x.abs() * s).powf(1.5) / 6.0;
    s * inner.max(0.0).powi(2)
}

/// Largest nodal error against the oracle with `dt = h^2`.
pub fn oracle_error(oracle: Oracle, nx: usize, cfg: &SolverConfig<f64>) -> Result<(f64, SpaceTimeGrid<f64>), HarnessError> {
    let (center, radius, t_start, length, p) = match oracle {
        Oracle::Heat => (0.5, 0.5, 0.0, 0.25, 2.0),
        Oracle::Barenblatt => (0.0, 2.0, 1.0, 1.0, 3.0),
    };
    let h = 2.0 * radius / (nx - 1) as f64;
    let nt = DtRule::Fixed { dt: h * h }.time_slices(h, p, length);
    let grid = SpaceTimeGrid::new(1, nx, nt, [center, 0.0], t_start + length, radius, length)?;
    let exact = move |x: f64, t: f64| match oracle {
        Oracle::Heat => (-PI * PI * t).exp() * (PI * x).sin(),
        Oracle::Barenblatt => barenblatt_p3(x, t),
    };
    let flux = FluxModel::new(p, p, CoefficientFn::constant(0.0)?)?;
    let init: Vec<f64> = (0..nx).map(|n| exact(grid.node_coords(n)[0], t_start)).collect();
    let bc = BoundaryData::function(move |z: Point<f64>| exact(z.x[0], z.t));
    let mut local = *cfg;
    local.dt_rule = DtRule::Fixed { dt: grid.dt };
    let (u, _) = solve_cylinder(&init, &flux, &grid, &local, &bc)?;
    let mut err: f64 = 0.0;
    for j in 0..grid.nt {
        let t = grid.time(j);
        for (n, v) in u.slice(j).iter().enumerate() {
            err = err.max((v - exact(grid.node_coords(n)[0], t)).abs());
        }
    }
    Ok((err, grid))
}

fn run_convergence(cfg: &ExperimentConfig) -> Result<ReportBundle, HarnessError> {
    let mut bundle = ReportBundle::default();
    for oracle in [Oracle::Heat, Oracle::Barenblatt] {
        let name = match oracle {
            Oracle::Heat => "heat",
            Oracle::Barenblatt => "barenblatt",
        };
        let results: Vec<(f64, SpaceTimeGrid<f64>)> =
            cfg.ladder.par_iter().map(|l| oracle_error(oracle, l.nx, &cfg.solver)).collect::<Result<_, _>>()?;
        let errors: Vec<f64> = results.iter().map(|r| r.0).collect();
        for (l, (err, grid)) in results.iter().enumerate() {
            let order = if l > 0 { (errors[l - 1] / err).ln() / (results[l - 1].1.h / grid.h).ln() } else { f64::NAN };
            let mut r = EstimateReport {
                name: name.into(),
                lhs: *err,
                rhs_unconstant: grid.h * grid.h,
                empirical_c: Some(err / (grid.h * grid.h)),
                grid: crate::estimates::GridDescriptor::of(grid),
                params: crate::estimates::ReportParams { p: if oracle == Oracle::Heat { 2.0 } else { 3.0 }, q: 0.0, exponents: None },
                seed: cfg.seed,
                level: l,
                param: grid.h,
                aux: if order.is_nan() { String::new() } else { format!("{order:.16e}") },
                empty_level_set: false,
            };
            r.params.q = r.params.p;
            bundle.reports.push(r);
        }
        let n = errors.len();
        let decreasing = n < 3 || errors[n - 1] < errors[n - 2] && errors[n - 2] < errors[n - 3];
        bundle.checks.push(Check::hard(&format!("{name}_errors_decreasing"), decreasing, format!("{errors:?}")));
        if oracle == Oracle::Heat && n >= 2 {
            let order = (errors[n - 2] / errors[n - 1]).ln() / (results[n - 2].1.h / results[n - 1].1.h).ln();
            bundle.values.insert("heat_order".into(), order);
        }
    }
    Ok(bundle)
}
