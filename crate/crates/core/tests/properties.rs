use dplab::estimates::caccioppoli_batch;
use dplab::harness::{caccioppoli_cylinders, DomainSpec};
use dplab::{
    build_cutoffs, caccioppoli_sides, embedding_sides, generate_field, levelset_chebyshev, solve_cylinder, supbound_sides, BoundaryData, CoefficientFn,
    CylinderSchedule, DtRule, ExponentSet, Field, FluxModel, Point, RandomFieldSpec, Sign, SolverConfig, SpaceTimeGrid, VarthetaConvention,
};
use proptest::prelude::*;

fn box_grid(nx: usize, nt: usize) -> SpaceTimeGrid<f64> {
    let d = DomainSpec::default();
    SpaceTimeGrid::new(2, nx, nt, d.center, d.t0, d.radius, d.time_length).unwrap()
}

fn field(seed: u64, grid: &SpaceTimeGrid<f64>) -> Field<f64> {
    generate_field(&RandomFieldSpec { fourier_modes: 2, decay: 1.5, seed }, grid)
}

fn exps() -> ExponentSet<f64> {
    ExponentSet::model(2, 2.0, 2.5, 1.0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn embedding_constant_is_scale_free(seed in 0u64..10_000, log_scale in -3.0f64..3.0) {
        let g = box_grid(9, 5);
        let f = field(seed, &g);
        let cyl = g.cover();
        let c0 = embedding_sides(&f, &cyl, &exps()).unwrap().empirical_c.unwrap();
        let c1 = embedding_sides(&f.scaled(10f64.powf(log_scale)), &cyl, &exps()).unwrap().empirical_c.unwrap();
        prop_assert!((c1 - c0).abs() <= 1e-10 * c0);
    }

    #[test]
    fn energy_sides_are_nonnegative_and_batch_matches_single(seed in 0u64..10_000, k in -1.0f64..1.0) {
        let g = box_grid(9, 7);
        let u = field(seed, &g);
        let flux = FluxModel::new(2.0, 2.5, CoefficientFn::smooth_bump(1.0, &g).unwrap()).unwrap();
        let (outer, inner) = caccioppoli_cylinders(&DomainSpec::default());
        let cut = build_cutoffs(&outer, &inner).unwrap();
        let levels = [(k, Sign::Plus), (k, Sign::Minus)];
        let batch = caccioppoli_batch(&u, &flux, &levels, &outer, &cut, 2).unwrap();
        for (r, &(k, sign)) in batch.iter().zip(&levels) {
            let single = caccioppoli_sides(&u, &flux, k, sign, &outer, &cut).unwrap();
            prop_assert!(r.lhs >= 0.0 && r.rhs_unconstant >= 0.0);
            prop_assert_eq!(r.lhs, single.lhs);
            prop_assert_eq!(r.rhs_unconstant, single.rhs_unconstant);
        }
    }

    #[test]
    fn sup_side_grows_with_sigma(seed in 0u64..10_000, s1 in 0.05f64..0.9, ds in 0.0f64..0.09) {
        let g = box_grid(17, 9);
        let u = field(seed, &g);
        let z0 = Point::new([0.0, 0.0], 0.25);
        let a = supbound_sides(&u, z0, 0.6, s1, &exps(), VarthetaConvention::Proof).unwrap();
        let b = supbound_sides(&u, z0, 0.6, s1 + ds, &exps(), VarthetaConvention::Proof).unwrap();
        prop_assert!(b.lhs >= a.lhs);
    }

    #[test]
    fn chebyshev_first_dominates_second(seed in 0u64..10_000, k in 0.05f64..1.0, n in 0usize..4, neg in any::<bool>()) {
        let g = box_grid(17, 9);
        let u = field(seed, &g);
        let e = exps();
        let k = if neg { -k } else { k };
        let sched = CylinderSchedule::new(Point::new([0.0, 0.0], 0.25), 0.6, 0.5, k, 4, e.tilde_p).unwrap();
        for s in [2.0, e.p, e.tilde_p] {
            let (first, second) = levelset_chebyshev(&u, &sched, n, s).unwrap();
            prop_assert!(first >= second * (1.0 - 1e-12));
        }
    }
}

#[test]
fn random_fields_are_reproducible_and_round_trip_through_text() {
    let g = box_grid(9, 5);
    let spec = RandomFieldSpec { fourier_modes: 1, decay: 2.0, seed: 42 };
    let a = generate_field(&spec, &g);
    assert_eq!(a.values(), generate_field(&spec, &g).values());
    let mut buf = Vec::new();
    a.write_text(&mut buf).unwrap();
    let b = Field::<f64>::read_text(buf.as_slice()).unwrap();
    assert_eq!(a.values(), b.values());
    assert_eq!(a.grid(), b.grid());
}

#[test]
fn single_precision_solve_tracks_double_precision() {
    let g64 = SpaceTimeGrid::<f64>::new(2, 9, 9, [0.0, 0.0], 0.1, 1.0, 0.1).unwrap();
    let init: Vec<f64> = (0..g64.nodes_per_slice())
        .map(|i| {
            let x = g64.node_coords(i);
            (1.0 - x[0] * x[0]) * (1.0 - x[1] * x[1])
        })
        .collect();
    let cfg64 = SolverConfig { dt_rule: DtRule::Fixed { dt: g64.dt }, ..SolverConfig::default() };
    let flux64 = FluxModel::new(2.0, 2.5, CoefficientFn::constant(1.0).unwrap()).unwrap();
    let (u64_, _) = solve_cylinder(&init, &flux64, &g64, &cfg64, &BoundaryData::Zero).unwrap();

    let g32 = SpaceTimeGrid::<f32>::new(2, 9, 9, [0.0, 0.0], 0.1, 1.0, 0.1).unwrap();
    let init32: Vec<f32> = init.iter().map(|&v| v as f32).collect();
    let cfg32 = SolverConfig::<f32> { picard_tol: 1e-5, cg_tol: 1e-6, dt_rule: DtRule::Fixed { dt: g32.dt }, ..SolverConfig::default() };
    let flux32 = FluxModel::new(2.0f32, 2.5, CoefficientFn::constant(1.0f32).unwrap()).unwrap();
    let (u32_, _) = solve_cylinder(&init32, &flux32, &g32, &cfg32, &BoundaryData::Zero).unwrap();

    let worst = u64_.values().iter().zip(u32_.values()).map(|(a, &b)| (a - b as f64).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-3, "largest f32/f64 gap {worst}");

    let e32 = ExponentSet::<f32>::model(2, 2.0, 2.5, 1.0).unwrap();
    let r32 = embedding_sides(&u32_, &g32.cover(), &e32).unwrap();
    let r64 = embedding_sides(&u64_, &g64.cover(), &exps()).unwrap();
    let (c32, c64) = (r32.empirical_c.unwrap(), r64.empirical_c.unwrap());
    assert!((c32 - c64).abs() < 1e-3 * c64, "{c32} vs {c64}");
}
