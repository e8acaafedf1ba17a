use proptest::prelude::*;

use delaytube::path::Path;
use delaytube::polytope::HPolytope;
use delaytube::scenario::{
    builtin, carve_along, carve_convex_region, frenet_replan, Arm, FrenetConfig, Metrics, ObstacleBox, Prepared, Scenario,
};
use delaytube::vehicle::{VehicleParams, VehicleState};
use nalgebra::DVector;

fn obstacle() -> impl Strategy<Value = ObstacleBox> {
    (-20.0f64..20.0, -20.0f64..20.0, 0.2f64..3.0, 0.2f64..3.0, -3.2f64..3.2)
        .prop_map(|(x, y, hx, hy, th)| ObstacleBox::new([x, y], [hx, hy], th))
}

fn bounds() -> HPolytope {
    HPolytope::from_box(&[-40.0, -40.0], &[40.0, 40.0]).unwrap()
}

// grid of points strictly inside each box, in the box frame
fn interior_samples(ob: &ObstacleBox) -> Vec<[f64; 2]> {
    let (s, c) = ob.heading.sin_cos();
    let mut out = Vec::new();
    for i in -4..=4 {
        for j in -4..=4 {
            let (u, v) = (0.99 * ob.half_extents[0] * i as f64 / 4.0, 0.99 * ob.half_extents[1] * j as f64 / 4.0);
            out.push([ob.center[0] + c * u - s * v, ob.center[1] + s * u + c * v]);
        }
    }
    out
}

fn check_region(region: &HPolytope, seed: [f64; 2], obstacles: &[ObstacleBox]) -> Result<(), TestCaseError> {
    prop_assert!(region.contains_with_tol(&DVector::from_column_slice(&seed), 1e-9));
    for ob in obstacles {
        for p in interior_samples(ob) {
            // interior points may only touch the boundary through the tolerance
            prop_assert!(!region.contains_with_tol(&DVector::from_column_slice(&p), -1e-9), "{p:?} inside region");
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn carved_region_keeps_seed_and_excludes_obstacles(
        obstacles in proptest::collection::vec(obstacle(), 0..5),
        seed in (-30.0f64..30.0, -30.0f64..30.0),
    ) {
        let seed = [seed.0, seed.1];
        prop_assume!(obstacles.iter().all(|o| !o.contains(seed)));
        let region = carve_convex_region(seed, &obstacles, &bounds()).unwrap();
        check_region(&region, seed, &obstacles)?;
    }

    #[test]
    fn lookahead_carving_keeps_seed_and_excludes_obstacles(
        obstacles in proptest::collection::vec(obstacle(), 0..5),
        seed in (-30.0f64..30.0, -30.0f64..30.0),
        heading in -3.2f64..3.2,
    ) {
        let seed = [seed.0, seed.1];
        prop_assume!(obstacles.iter().all(|o| !o.contains(seed)));
        let ahead: Vec<[f64; 2]> = (1..=15)
            .map(|k| [seed[0] + k as f64 * heading.cos(), seed[1] + k as f64 * heading.sin()])
            .collect();
        let region = carve_along(seed, &ahead, &obstacles, &bounds()).unwrap();
        check_region(&region, seed, &obstacles)?;
    }

    #[test]
    fn replanner_is_deterministic(
        y in -1.0f64..1.0,
        theta in -0.2f64..0.2,
        lead_x in 10.0f64..40.0,
        lead_y in -2.0f64..4.0,
        t in 0.0f64..5.0,
    ) {
        let lane = Path::straight([0.0, 0.0], 0.0, 300.0, 0.5).unwrap();
        let params = VehicleParams::default();
        let state = VehicleState::new(5.0, y, theta, 12.0, 0.0);
        let obstacles = [ObstacleBox::new([lead_x, lead_y], [2.25, 0.9], 0.0)];
        let cfg = FrenetConfig::default();
        let a = frenet_replan(&state, &lane, &obstacles, t, 15, 0.1, 12.0, &cfg, &params).unwrap();
        let b = frenet_replan(&state, &lane, &obstacles, t, 15, 0.1, 12.0, &cfg, &params).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn metrics_are_a_function_of_the_log() {
    let mut scn = Scenario::from_toml(builtin("closed_track").unwrap()).unwrap();
    scn.duration = 1.0;
    let p = Prepared::new(scn).unwrap();
    // logs hold NaN before the first cycle completes, so compare serialized
    let csv = |log: &delaytube::sim::SimLog| {
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        buf
    };
    let a = p.simulate(Arm::Influence, 11).unwrap();
    let b = p.simulate(Arm::Influence, 11).unwrap();
    assert_eq!(csv(&a), csv(&b));
    assert_eq!(Metrics::from_log(&a), Metrics::from_log(&b));
    let other = p.simulate(Arm::Influence, 12).unwrap();
    assert_ne!(csv(&a), csv(&other));
}

#[test]
fn shipped_scenarios_round_trip_through_toml() {
    for name in ["static_obstacle", "overtaking", "closed_track"] {
        let scn = Scenario::from_toml(builtin(name).unwrap()).unwrap();
        let again = Scenario::from_toml(&scn.to_toml()).unwrap();
        assert_eq!(again, scn, "{name}");
    }
}

#[test]
fn config_errors_point_at_the_line() {
    let src = builtin("static_obstacle").unwrap();
    let bad = src.replacen("speed = ", "sped = ", 1);
    let err = Scenario::from_toml(&bad).unwrap_err();
    let line = src.lines().position(|l| l.starts_with("speed = ")).unwrap() + 1;
    assert_eq!(err.line(), Some(line), "{err}");
    assert!(err.to_string().contains("sped"), "{err}");
}
