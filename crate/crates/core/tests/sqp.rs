mod common;

use common::lq::{dense_kkt, random_lq, LqInstance};
use common::*;
use loco_admm::nalgebra::{DVector, Vector6};
use loco_admm::problem::{stack_state, Scenario};
use loco_admm::sim::WorldState;
use loco_admm::sqp::{linear_rollout, riccati_backward_pass, solve_subproblem, OcpDefinition, SqpSettings, Trajectory};
use proptest::prelude::*;

fn riccati_error(lq: &LqInstance) -> f64 {
    let pass = riccati_backward_pass(&lq.stages, (&lq.vx, &lq.vxx)).unwrap();
    assert!(pass.regularization.iter().all(|r| *r == 0.0), "convex instance needed regularization");
    let (dxs, dus) = linear_rollout(&lq.stages, &pass);
    let (ox, ou) = dense_kkt(lq);
    let dx_err = dxs.iter().zip(&ox).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max);
    let du_err = dus.iter().zip(&ou).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max);
    dx_err.max(du_err)
}

/// QP objective `sum l_k + V_N` of a step.
fn objective(lq: &LqInstance, dxs: &[DVector<f64>], dus: &[DVector<f64>]) -> f64 {
    let mut v = 0.0;
    for (k, s) in lq.stages.iter().enumerate() {
        let (x, u) = (&dxs[k], &dus[k]);
        v += s.lx.dot(x) + s.lu.dot(u) + 0.5 * x.dot(&(&s.lxx * x)) + 0.5 * u.dot(&(&s.luu * u)) + u.dot(&(&s.lux * x));
    }
    let xn = &dxs[dxs.len() - 1];
    v + lq.vx.dot(xn) + 0.5 * xn.dot(&(&lq.vxx * xn))
}

#[test]
fn riccati_matches_dense_kkt_on_random_instances() {
    let mut rng = rng(21);
    for i in 0..20 {
        let nx = 2 + i % 19;
        let nu = 1 + (i * 7) % 8;
        let horizon = 1 + i % 10;
        let lq = random_lq(&mut rng, nx, nu, horizon, false);
        let err = riccati_error(&lq);
        assert!(err <= 1e-8, "instance {i} (nx {nx}, nu {nu}, N {horizon}): error {err:e}");
    }
}

#[test]
fn riccati_handles_defects() {
    let mut rng = rng(22);
    for i in 0..10 {
        let lq = random_lq(&mut rng, 6 + i, 3, 8, true);
        assert!(riccati_error(&lq) <= 1e-8);
    }
}

#[test]
fn predicted_decrease_equals_qp_objective() {
    let mut rng = rng(23);
    for _ in 0..10 {
        let lq = random_lq(&mut rng, 8, 4, 6, false);
        let pass = riccati_backward_pass(&lq.stages, (&lq.vx, &lq.vxx)).unwrap();
        let (dxs, dus) = linear_rollout(&lq.stages, &pass);
        let f = objective(&lq, &dxs, &dus);
        assert!((pass.predicted(1.0) - f).abs() <= 1e-8 * f.abs().max(1.0), "{} vs {f}", pass.predicted(1.0));
        assert!(f < 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn riccati_oracle_equivalence(seed in any::<u64>(), nx in 1usize..=20, nu in 1usize..=8, horizon in 1usize..=10) {
        let mut r = rng(seed);
        let lq = random_lq(&mut r, nx, nu, horizon, false);
        prop_assert!(riccati_error(&lq) <= 1e-8);
    }
}

fn first_window(sc: &Scenario) -> Vec<(&'static str, OcpDefinition, Trajectory)> {
    let world = WorldState::initial(sc);
    let window = sc.window(0.0, &world.robots);
    let guess = sc.initial_guess(&window, &world.payload, &world.robots);
    let duals = vec![vec![Vector6::zeros(); window.horizon()]; sc.robots];
    let joint = window.centralized_ocp(sc, &stack_state(&world.payload, &world.robots));
    let joint_guess = loco_admm::centralized::stack_trajectories(&guess);
    vec![
        ("payload", window.payload_ocp(sc, &world.payload, &guess.robots, &duals, 10.0), guess.payload.clone()),
        ("robot", window.robot_ocp(sc, 1, &world.robots[1], &guess.payload, &duals[1], 10.0), guess.robots[1].clone()),
        ("centralized", joint, joint_guess),
    ]
}

#[test]
fn accepted_iterations_never_raise_the_merit() {
    for name in ["flat-translate", "gap", "obstacle-field"] {
        let sc = scenario(name, 2);
        for (which, ocp, init) in first_window(&sc) {
            let settings = SqpSettings {
                max_iters: 15,
                project: false,
                ..SqpSettings::default()
            };
            let report = solve_subproblem(&ocp, &init, &settings).unwrap();
            assert!(!report.merit_steps.is_empty());
            for (i, (before, after)) in report.merit_steps.iter().enumerate() {
                assert!(after <= before, "{name}/{which} iteration {i}: {before} -> {after}");
            }
        }
    }
}

#[test]
fn returned_trajectories_are_dynamically_feasible() {
    for name in ["flat-translate", "gap", "slope-10deg"] {
        let sc = scenario(name, 2);
        for (which, ocp, init) in first_window(&sc) {
            for iters in [1, 5, 20] {
                let settings = SqpSettings {
                    max_iters: iters,
                    ..SqpSettings::default()
                };
                let report = solve_subproblem(&ocp, &init, &settings).unwrap();
                assert!(
                    report.max_defect <= 1e-8,
                    "{name}/{which} after {iters} iterations: defect {:e} (projected {})",
                    report.max_defect,
                    report.projected
                );
                assert_eq!(report.max_defect, ocp.max_defect(&report.trajectory));
            }
        }
    }
}

#[test]
fn solves_are_bitwise_deterministic() {
    let sc = scenario("gap", 2);
    for (which, ocp, init) in first_window(&sc) {
        let settings = SqpSettings {
            max_iters: 3,
            ..SqpSettings::default()
        };
        let a = solve_subproblem(&ocp, &init, &settings).unwrap();
        let b = solve_subproblem(&ocp, &init, &settings).unwrap();
        assert_eq!(a.trajectory, b.trajectory, "{which}");
        assert_eq!(a.merit.to_bits(), b.merit.to_bits());
        assert_eq!(a.step_sizes, b.step_sizes);
    }
}

#[test]
fn dimension_mismatch_is_an_error() {
    let sc = scenario("flat-translate", 2);
    let (_, ocp, mut init) = first_window(&sc).remove(0);
    init.controls.pop();
    assert!(solve_subproblem(&ocp, &init, &SqpSettings::default()).is_err());
}
