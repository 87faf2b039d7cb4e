//! Acceptance suite. Prints one `[PASS]`/`[FAIL]` line per criterion and exits
//! nonzero when any criterion fails. Expensive solver outputs are computed once
//! and shared between the criteria that inspect them.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use dplab::estimates::{embedding_sides, fast_convergence_check};
use dplab::harness::{
    caccioppoli_reports, degiorgi_run, fit_blowup_exponent, generate_field, oracle_error, run_experiment, solve_level, supbound_reports,
    CoefficientSpec, ExperimentConfig, ExperimentKind, LadderLevel, Oracle, RandomFieldSpec,
};
use dplab::{compute_theta, EstimateError, EstimateReport, ExponentSet, Field, Point, Sign, SolverConfig, VarthetaConvention};

type Verdict = (bool, String);

/// Solver outputs keyed by `(seed, ladder index)`.
struct Shared {
    cfg: ExperimentConfig,
    fields: BTreeMap<(u64, usize), Field<f64>>,
}

const SHARED_SEEDS: [u64; 2] = [1, 2];

impl Shared {
    fn build() -> Self {
        let mut cfg = ExperimentConfig::preset(ExperimentKind::Caccioppoli);
        cfg.params.coefficient = CoefficientSpec::SmoothBump { a_sup: 1.0 };
        cfg.ladder = [33, 65, 129].iter().map(|&nx| LadderLevel { nx, nt: None }).collect();
        let mut fields = BTreeMap::new();
        for seed in SHARED_SEEDS {
            for (l, level) in cfg.ladder.iter().enumerate() {
                let (u, _) = solve_level(&cfg, level, seed).expect("shared solve");
                fields.insert((seed, l), u);
            }
        }
        Shared { cfg, fields }
    }

    fn z0(&self) -> Point<f64> {
        Point::new(self.cfg.domain.center, self.cfg.domain.t0)
    }
}

fn max_per_level(reports: &[(usize, &EstimateReport)], levels: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; levels];
    for (l, r) in reports {
        if let Some(c) = r.empirical_c.filter(|c| c.is_finite()) {
            out[*l] = out[*l].max(c);
        }
    }
    out
}

fn exponent_algebra() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut theta_ok = true;
    let mut count = 0;
    for n in [2usize, 3, 4] {
        for p in [2.0f64, 2.5, 3.0] {
            for i in 1..=5 {
                let q = p + (i as f64 / 6.0) * (p / n as f64);
                let theta = compute_theta(n, p, q).expect("admissible");
                let nf = n as f64;
                worst = worst.max(((nf - 1.0) * theta / nf + (1.0 - theta) * p / 2.0 - p / q).abs());
                theta_ok &= theta > 0.0 && theta < 1.0;
                count += 1;
            }
        }
    }
    (worst < 1e-12 && theta_ok, format!("{count} triples, largest identity residual {worst:.2e}, theta in (0,1): {theta_ok}"))
}

fn embedding() -> Verdict {
    let started = Instant::now();
    let mut cfg = ExperimentConfig::preset(ExperimentKind::Embedding);
    cfg.params.coefficient = CoefficientSpec::Constant { a: 0.0 };
    cfg.ladder = [(17, 9), (33, 17), (65, 33), (129, 65)].iter().map(|&(nx, nt)| LadderLevel { nx, nt: Some(nt) }).collect();
    cfg.sample_count = 200;
    let bundle = run_experiment(&cfg).expect("embedding run");
    let worst_dev = bundle.reports.iter().map(|r| r.aux.parse::<f64>().unwrap_or(f64::INFINITY)).fold(0.0, f64::max);

    // independent scale check on a subset, including the identity scale
    let exps = cfg.exponents().unwrap();
    let mut direct_dev: f64 = 0.0;
    for s in 0..5u64 {
        for level in &cfg.ladder {
            let grid = cfg.grid(level, 2, cfg.params.p).unwrap();
            let spec = RandomFieldSpec { fourier_modes: cfg.field.fourier_modes, decay: cfg.field.decay, seed: cfg.seed + s };
            let f = generate_field(&spec, &grid);
            let cyl = grid.cover();
            let c0 = embedding_sides(&f, &cyl, &exps).unwrap().empirical_c.unwrap();
            for lam in [1e-3, 1.0, 1e3] {
                let c = embedding_sides(&f.scaled(lam), &cyl, &exps).unwrap().empirical_c.unwrap();
                direct_dev = direct_dev.max((c - c0).abs() / c0);
            }
        }
    }
    let indexed: Vec<(usize, &EstimateReport)> = bundle.reports.iter().map(|r| (r.level, r)).collect();
    let maxima = max_per_level(&indexed, cfg.ladder.len());
    let change = (maxima[3] - maxima[2]).abs() / maxima[2];
    let rows_ok = bundle.reports.len() == 200 * 4;
    let passed = rows_ok && worst_dev <= 1e-10 && direct_dev <= 1e-10 && change <= 0.05 && maxima.iter().all(|m| m.is_finite());
    (
        passed,
        format!(
            "scale deviation {worst_dev:.2e} (direct {direct_dev:.2e}); max c per level {maxima:.4?}; last change {:.3}%; {:.0} s",
            100.0 * change,
            started.elapsed().as_secs_f64()
        ),
    )
}

fn convergence() -> Verdict {
    let solver = SolverConfig::default();
    let ladder = [9usize, 17, 33, 65];
    let heat: Vec<(f64, f64)> = ladder.iter().map(|&nx| oracle_error(Oracle::Heat, nx, &solver).map(|(e, g)| (e, g.h)).unwrap()).collect();
    let orders: Vec<f64> = heat.windows(2).map(|w| (w[0].0 / w[1].0).ln() / (w[0].1 / w[1].1).ln()).collect();
    let baren: Vec<f64> = ladder[..3].iter().map(|&nx| oracle_error(Oracle::Barenblatt, nx, &solver).unwrap().0).collect();
    let heat_ok = orders.iter().all(|&o| o >= 1.8);
    let baren_ok = baren.windows(2).all(|w| w[1] < w[0]);
    let heat_errs: Vec<f64> = heat.iter().map(|e| e.0).collect();
    (heat_ok && baren_ok, format!("heat errors {heat_errs:.3?} orders {orders:.3?}; source-solution errors {baren:.3?}"))
}

fn max_principle_and_energy() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let mut runs = 0;
    let mut bounds_ok = true;
    let mut energy_ok = true;
    let mut worst_clamp: f64 = 0.0;
    let mut worst_rise: f64 = 0.0;
    let base = ExperimentConfig::preset(ExperimentKind::Solve);
    let level = LadderLevel { nx: 17, nt: None };
    let grid = base.grid(&level, 2, base.params.p).unwrap();
    let a_path = dir.path().join("coefficient.txt");
    let spec = RandomFieldSpec { fourier_modes: 2, decay: 2.0, seed: 99 };
    generate_field(&spec, &grid).map(f64::abs).save(&a_path).unwrap();
    let coefficients = [
        CoefficientSpec::Constant { a: 1.0 },
        CoefficientSpec::SmoothBump { a_sup: 1.0 },
        CoefficientSpec::Checkerboard { a_sup: 2.0, cells: 4 },
        CoefficientSpec::Sampled { path: a_path },
    ];
    for coefficient in &coefficients {
        for seed in 1..=5u64 {
            let mut cfg = base.clone();
            cfg.params.coefficient = coefficient.clone();
            let (u, trace) = solve_level(&cfg, &level, seed).unwrap();
            let g = *u.grid();
            let init = u.slice(0);
            // zero boundary data, so the bounds always include 0
            let lo = init.iter().copied().fold(0.0, f64::min);
            let hi = init.iter().copied().fold(0.0, f64::max);
            bounds_ok &= u.values().iter().all(|&v| v >= lo && v <= hi);
            let energies: Vec<f64> = (0..g.nt).map(|j| u.slice(j).iter().map(|v| v * v).sum::<f64>()).collect();
            for w in energies.windows(2) {
                let rise = (w[1] - w[0]) / w[0].max(f64::MIN_POSITIVE);
                worst_rise = worst_rise.max(rise);
            }
            energy_ok &= trace.energy_nonincreasing();
            worst_clamp = worst_clamp.max(trace.max_clamp());
            runs += 1;
        }
    }
    energy_ok &= worst_rise <= 0.0;
    (
        bounds_ok && energy_ok && runs == 20,
        format!("{runs} runs; bounds exact: {bounds_ok}; energy nonincreasing: {energy_ok} (largest relative rise {worst_rise:.2e}); largest clamp {worst_clamp:.2e}"),
    )
}

fn caccioppoli(shared: &Shared) -> Verdict {
    let cfg = &shared.cfg;
    let mut all = Vec::new();
    for (&(seed, l), u) in &shared.fields {
        let flux = dplab::FluxModel::new(cfg.params.p, cfg.params.q, cfg.params.coefficient.build(u.grid()).unwrap()).unwrap();
        let reps = caccioppoli_reports(u, &flux, &cfg.domain, cfg.levels_per_sign).unwrap();
        all.extend(reps.into_iter().map(|r| (l, r.with_seed(seed))));
    }
    let empties: Vec<&EstimateReport> = all.iter().map(|(_, r)| r).filter(|r| r.empty_level_set).collect();
    let empties_ok = !empties.is_empty() && empties.iter().all(|r| r.lhs == 0.0 && r.rhs_unconstant == 0.0);
    let nonneg = all.iter().all(|(_, r)| r.lhs >= 0.0 && r.rhs_unconstant >= 0.0);
    let bounded = all.iter().all(|(_, r)| r.empirical_c.is_none_or(|c| r.lhs <= c * r.rhs_unconstant * (1.0 + 1e-12)));
    let indexed: Vec<(usize, &EstimateReport)> = all.iter().map(|(l, r)| (*l, r)).collect();
    let maxima = max_per_level(&indexed, cfg.ladder.len());
    let trend = maxima.windows(2).all(|w| w[1] <= 1.1 * w[0]);
    (
        empties_ok && nonneg && bounded && trend,
        format!("{} evaluations, {} empty (all 0 = 0: {empties_ok}); max c per level {maxima:.4?}", all.len(), empties.len()),
    )
}

struct IterationOutcome {
    chebyshev: Verdict,
    decay: Verdict,
}

fn iteration(shared: &Shared) -> IterationOutcome {
    let exps = shared.cfg.exponents().unwrap();
    let mut cheb_count = 0;
    let mut cheb_worst = f64::INFINITY;
    let mut traces = 0;
    let mut decay_ok = true;
    let mut c_stars = Vec::new();
    for (&(_, l), u) in &shared.fields {
        if l > 1 {
            continue;
        }
        for sigma in [0.25, 0.5, 0.75] {
            for sign in [Sign::Plus, Sign::Minus] {
                let run = degiorgi_run(u, shared.z0(), shared.cfg.rho, sigma, sign, 8, &exps).unwrap();
                for &(_, _, a, b) in &run.chebyshev {
                    cheb_count += 1;
                    if b > 0.0 {
                        cheb_worst = cheb_worst.min(a / b);
                    }
                }
                let tr = &run.trace;
                decay_ok &= run.smallness <= 1.0;
                for (n, &y) in tr.y.iter().enumerate() {
                    decay_ok &= y <= tr.y[0] / tr.lambda.powi(n as i32) * (1.0 + 1e-12);
                }
                c_stars.push(run.c_star);
                traces += 1;
            }
        }
    }
    let cheb_ok = cheb_count > 0 && cheb_worst >= 1.0 - 1e-12;

    // synthetic extremal sequence with the smallness condition tight
    let e = ExponentSet::model(2, 2.0, 2.5, 1.0).unwrap();
    let (vt, b) = (e.vartheta, 2f64.powf(e.tilde_p));
    let lambda = b.powf((1.0 + vt) / vt);
    let y0: f64 = 0.3;
    let c = 1.0 / (lambda * y0.powf(vt));
    let mut y = vec![y0];
    for n in 0..8 {
        let prev: f64 = y[n];
        y.push(c * b.powf(n as f64 * (1.0 + vt)) * prev.powf(1.0 + vt));
    }
    let margin = y.iter().enumerate().map(|(n, &v)| (v / (y0 / lambda.powi(n as i32)) - 1.0).abs()).fold(0.0, f64::max);
    let flags_ok = fast_convergence_check(y0, c, b, vt, 8).is_ok_and(|f| f.iter().all(|&x| x));
    let violated = matches!(fast_convergence_check(y0, 2.0 * c, b, vt, 8), Err(EstimateError::SmallnessViolated { .. }));
    let synth_ok = margin <= 1e-9 && flags_ok && violated;
    let c_max = c_stars.iter().copied().fold(0.0, f64::max);
    IterationOutcome {
        chebyshev: (cheb_ok, format!("{cheb_count} evaluations, smallest first/second {cheb_worst:.6}")),
        decay: (
            decay_ok && synth_ok && traces == 24,
            format!(
                "{traces} traces decay: {decay_ok}; largest c_star {c_max}; synthetic margin {margin:.2e}, flags pass: {flags_ok}, doubled c rejected: {violated}"
            ),
        ),
    }
}

fn supbound(shared: &Shared) -> Verdict {
    let cfg = &shared.cfg;
    let exps = cfg.exponents().unwrap();
    let sigmas = cfg.sigma_list.clone();
    let mut all = Vec::new();
    let mut monotone = true;
    for (&(seed, l), u) in &shared.fields {
        let reps = supbound_reports(u, shared.z0(), cfg.rho, &sigmas, &exps).unwrap();
        for chunk in reps.chunks(sigmas.len()) {
            monotone &= chunk.windows(2).all(|w| w[1].lhs >= w[0].lhs);
        }
        all.extend(reps.into_iter().map(|r| (l, r.with_seed(seed))));
    }
    let finite = all.iter().all(|(_, r)| r.empirical_c.is_some_and(f64::is_finite));
    let mut stable = true;
    let mut detail = String::new();
    for conv in VarthetaConvention::ALL {
        let indexed: Vec<(usize, &EstimateReport)> = all.iter().filter(|(_, r)| r.aux == conv.as_str()).map(|(l, r)| (*l, r)).collect();
        let m = max_per_level(&indexed, cfg.ladder.len());
        let change = (m[2] - m[1]).abs() / m[1];
        stable &= change <= 0.2;
        detail.push_str(&format!("{}: max c {m:.4?} ({:.1}%); ", conv.as_str(), 100.0 * change));
    }

    // generate-then-fit round trips
    let synthetic = |exponent: f64| {
        let reps: Vec<EstimateReport> = sigmas
            .iter()
            .map(|&s| {
                let energy = 0.7;
                let rhs = (1.0 - s).powf(exps.blowup_exponent()) * energy;
                let lhs = 3.0 * (1.0 - s).powf(exponent) * energy;
                let mut r = all[0].1.clone();
                r.lhs = lhs;
                r.rhs_unconstant = rhs;
                r.param = s;
                r
            })
            .collect();
        fit_blowup_exponent(&reps).unwrap()
    };
    let fit_err = [exps.blowup_exponent(), -3.0, 0.0].iter().map(|&e| (synthetic(e) - e).abs()).fold(0.0, f64::max);
    let finest: Vec<EstimateReport> = all.iter().filter(|(l, r)| *l == 2 && r.seed == 1 && r.aux == "proof").map(|(_, r)| r.clone()).collect();
    let fitted = fit_blowup_exponent(&finest).unwrap_or(f64::NAN);
    detail.push_str(&format!(
        "sigma monotone: {monotone}; fit round-trip error {fit_err:.2e}; predicted exponent {}, fitted {fitted:.3}",
        exps.blowup_exponent()
    ));
    (finite && stable && monotone && fit_err < 1e-8, detail)
}

fn reproducibility() -> Verdict {
    let mut kinds = Vec::new();
    for kind in [ExperimentKind::Embedding, ExperimentKind::Caccioppoli, ExperimentKind::Supbound, ExperimentKind::Degiorgi, ExperimentKind::Convergence] {
        let mut cfg = ExperimentConfig::preset(kind);
        if kind == ExperimentKind::Embedding {
            cfg.sample_count = 4;
        }
        let mut bodies = Vec::new();
        for _ in 0..2 {
            let dir = tempfile::tempdir().unwrap();
            run_experiment(&cfg).unwrap().write(dir.path(), false).unwrap();
            bodies.push(std::fs::read(dir.path().join("results.csv")).unwrap());
        }
        kinds.push((kind.as_str(), bodies[0] == bodies[1] && !bodies[0].is_empty()));
    }
    (kinds.iter().all(|k| k.1), format!("identical CSV: {kinds:?}"))
}

fn main() -> ExitCode {
    let started = Instant::now();
    let mut results: Vec<(usize, &str, Verdict)> = Vec::new();
    let mut record = |id: usize, name: &'static str, f: &mut dyn FnMut() -> Verdict| {
        let t = Instant::now();
        let (ok, detail) = f();
        println!("[{}] criterion {id}: {name}: {detail} ({:.1} s)", if ok { "PASS" } else { "FAIL" }, t.elapsed().as_secs_f64());
        results.push((id, name, (ok, detail)));
    };
    record(1, "exponent algebra", &mut exponent_algebra);
    record(3, "solver convergence", &mut convergence);
    record(4, "maximum principle and dissipativity", &mut max_principle_and_energy);
    record(9, "reproducibility", &mut reproducibility);
    record(2, "embedding", &mut embedding);
    let shared = Shared::build();
    record(5, "energy inequality", &mut || caccioppoli(&shared));
    let it = iteration(&shared);
    record(6, "Chebyshev bounds", &mut || it.chebyshev.clone());
    record(7, "level-set iteration decay", &mut || it.decay.clone());
    record(8, "sup bound", &mut || supbound(&shared));
    let failed = results.iter().filter(|r| !r.2 .0).count();
    println!("{} of {} criteria passed in {:.0} s", results.len() - failed, results.len(), started.elapsed().as_secs_f64());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
