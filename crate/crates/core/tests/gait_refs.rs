mod common;

use common::*;
use loco_admm::gait::{build_gait_schedule, in_stance, GaitPattern};
use loco_admm::nalgebra::Vector3;
use proptest::prelude::*;

fn base(x: &loco_admm::nalgebra::DVector<f64>) -> Vector3<f64> {
    Vector3::new(x[0], x[1], x[2])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn trot_flags_repeat_with_the_period(
        t_start in 0.0f64..20.0,
        phase_knots in 2usize..10,
        duty in prop::sample::select(vec![0.5, 0.25, 0.75]),
    ) {
        let dt = 0.05;
        let phase = phase_knots as f64 * dt;
        let period_knots = (phase_knots as f64 / duty).round() as usize;
        prop_assume!(((period_knots as f64) * duty - phase_knots as f64).abs() < 1e-9);
        let horizon = 3.0 * period_knots as f64 * dt;
        let g = build_gait_schedule(GaitPattern::Trot, t_start, horizon, dt, phase, duty, 4).unwrap();
        for k in 0..g.contact.len() - period_knots {
            prop_assert_eq!(&g.contact[k], &g.contact[k + period_knots], "knot {}", k);
        }
    }

    #[test]
    fn trot_keeps_one_diagonal_down(t in 0.0f64..50.0) {
        let flags: Vec<bool> = (0..4).map(|j| in_stance(GaitPattern::Trot, t, j, 0.35, 0.5)).collect();
        prop_assert_eq!(flags[0], flags[3]);
        prop_assert_eq!(flags[1], flags[2]);
        prop_assert_ne!(flags[0], flags[1]);
    }

    #[test]
    fn references_respect_attitude_bounds(t in 0.0f64..20.0, robots in 2usize..5) {
        for name in ["flat-turn-90", "slope-10deg", "gap-slope"] {
            let sc = scenario(name, robots);
            let w = loco_admm::sim::WorldState::initial(&sc);
            let window = sc.window(t, &w.robots);
            let all = window.refs.payload.iter().chain(window.refs.robots.iter().flatten());
            for x in all {
                prop_assert!(x[7].abs() <= 0.3 && x[8].abs() <= 0.3);
            }
        }
    }

    #[test]
    fn formation_spacing_is_rigid_on_flat_ground(t in 0.0f64..34.0, robots in 2usize..5) {
        let sc = scenario("flat-turn-90", robots);
        let w = loco_admm::sim::WorldState::initial(&sc);
        let window = sc.window(t, &w.robots);
        for k in 0..=window.horizon() {
            for i in 0..robots {
                for j in i + 1..robots {
                    let got = (base(&window.refs.robots[i][k]) - base(&window.refs.robots[j][k])).norm();
                    let nominal = (sc.formation[i] - sc.formation[j]).norm();
                    prop_assert!((got - nominal).abs() <= 1e-12, "k {} pair ({}, {}): {} vs {}", k, i, j, got, nominal);
                }
            }
        }
    }
}

#[test]
fn formation_spacing_is_rigid_in_plan_on_slopes() {
    let sc = scenario("slope-10deg", 3);
    let w = loco_admm::sim::WorldState::initial(&sc);
    for t in [0.0, 2.5, 5.0, 7.5] {
        let window = sc.window(t, &w.robots);
        for k in 0..=window.horizon() {
            let planar = |i: usize| base(&window.refs.robots[i][k]).xy();
            for (i, j) in [(0, 1), (0, 2), (1, 2)] {
                let got = (planar(i) - planar(j)).norm();
                let nominal = (sc.formation[i] - sc.formation[j]).xy().norm();
                assert!((got - nominal).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn robot_references_match_composed_payload_pose() {
    let sc = scenario("flat-turn-90", 2);
    let w = loco_admm::sim::WorldState::initial(&sc);
    let window = sc.window(12.0, &w.robots);
    for k in 0..=window.horizon() {
        let p = &window.refs.payload[k];
        let yaw = p[6];
        for (i, off) in sc.formation.iter().enumerate() {
            let rot = loco_admm::model::rotation(&Vector3::new(yaw, 0.0, 0.0));
            let want = base(p) + rot * off;
            assert!((base(&window.refs.robots[i][k]) - want).amax() <= 1e-12);
            assert_eq!(window.refs.robots[i][k][6], yaw);
        }
    }
}
