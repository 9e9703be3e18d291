mod common;

use std::sync::Arc;

use common::oracle::*;
use common::*;
use loco_admm::model::rotation::rotation;
use loco_admm::model::{
    step_backward_euler, linearize_step, BodyParams, ControlLayout, Dynamics, PayloadCopyDynamics, Pose, RobotDynamics,
    StackedDynamics,
};
use loco_admm::nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use proptest::prelude::*;

#[test]
fn payload_dynamics_match_oracle() {
    let mut rng = rng(1);
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let robots = 2 + (uniform(&mut rng, 0.0, 3.0) as usize);
        let params = random_params(&mut rng, robots);
        let dynamics = PayloadCopyDynamics::new(Arc::new(params.clone()));
        let mut x = DVector::zeros(12);
        random_body(&mut rng, x.as_mut_slice());
        let u = random_vector(&mut rng, 6 * robots, 50.0);
        let got = dynamics.derivative(0, &x, &u).unwrap();
        worst = worst.max(max_diff(&got, &oracle_payload(&params, x.as_slice(), u.as_slice())));
    }
    assert!(worst <= 1e-10, "max error {worst:e}");
}

#[test]
fn robot_dynamics_match_oracle() {
    let mut rng = rng(2);
    let n_feet = 4;
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let params = random_params(&mut rng, 0);
        let handle = Vector3::from_fn(|_, _| uniform(&mut rng, -0.5, 0.5));
        let mut px = [0.0; 12];
        random_body(&mut rng, &mut px);
        let pose = Pose::from_state(&px);
        let dynamics = RobotDynamics::new(Arc::new(params.clone()), n_feet, handle, vec![pose]);
        let x = random_robot_state(&mut rng, n_feet);
        let u = random_vector(&mut rng, ControlLayout { n_feet }.dim(), 50.0);
        let grasp = v3(&px, 0) + oracle_rotation(px[6], px[7], px[8]) * handle;
        let got = dynamics.derivative(0, &x, &u).unwrap();
        worst = worst.max(max_diff(&got, &oracle_robot(&params, n_feet, x.as_slice(), u.as_slice(), &grasp)));
    }
    assert!(worst <= 1e-10, "max error {worst:e}");
}

#[test]
fn rotation_matches_oracle() {
    let mut rng = rng(3);
    for _ in 0..100 {
        let t = Vector3::new(uniform(&mut rng, -3.0, 3.0), uniform(&mut rng, -1.5, 1.5), uniform(&mut rng, -3.0, 3.0));
        assert!((rotation(&t) - oracle_rotation(t[0], t[1], t[2])).amax() <= 1e-14);
    }
}

fn stacked_fixture(rng: &mut rand_chacha::ChaCha8Rng, robots: usize, n_feet: usize) -> (StackedDynamics, BodyParams, Vec<BodyParams>) {
    let payload = random_params(rng, robots);
    let team: Vec<BodyParams> = (0..robots).map(|_| random_params(rng, 0)).collect();
    let dynamics = StackedDynamics::new(
        Arc::new(payload.clone()),
        team.iter().cloned().map(Arc::new).collect(),
        n_feet,
    );
    (dynamics, payload, team)
}

fn random_stacked_point(rng: &mut rand_chacha::ChaCha8Rng, robots: usize, n_feet: usize) -> (DVector<f64>, DVector<f64>) {
    let nr = 12 + 3 * n_feet;
    let mut x = DVector::zeros(12 + robots * nr);
    random_body(rng, &mut x.as_mut_slice()[..12]);
    for i in 0..robots {
        let xi = random_robot_state(rng, n_feet);
        x.rows_mut(12 + i * nr, nr).copy_from(&xi);
    }
    let u = random_vector(rng, robots * ControlLayout { n_feet }.dim(), 50.0);
    (x, u)
}

#[test]
fn stacked_equals_subsystem_concatenation() {
    let mut rng = rng(4);
    let n_feet = 4;
    let lay = ControlLayout { n_feet };
    let nr = 12 + 3 * n_feet;
    for _ in 0..20 {
        let robots = 2 + (uniform(&mut rng, 0.0, 3.0) as usize);
        let (stacked, payload, team) = stacked_fixture(&mut rng, robots, n_feet);
        let (x, u) = random_stacked_point(&mut rng, robots, n_feet);
        let got = stacked.derivative(0, &x, &u).unwrap();

        // Payload driven by the exact negations of the robot wrenches.
        let copies = DVector::from_fn(6 * robots, |r, _| -u[(r / 6) * lay.dim() + lay.hand_force() + r % 6]);
        let x0 = x.rows(0, 12).into_owned();
        let p = PayloadCopyDynamics::new(Arc::new(payload.clone())).derivative(0, &x0, &copies).unwrap();
        assert!((got.rows(0, 12) - p).amax() <= 1e-12);

        let pose = Pose::from_state(x0.as_slice());
        for (i, params) in team.iter().enumerate() {
            let d = RobotDynamics::new(Arc::new(params.clone()), n_feet, payload.handle_offsets[i], vec![pose]);
            let xi = x.rows(12 + i * nr, nr).into_owned();
            let ui = u.rows(i * lay.dim(), lay.dim()).into_owned();
            let r = d.derivative(0, &xi, &ui).unwrap();
            assert!((got.rows(12 + i * nr, nr) - r).amax() <= 1e-12);
        }
    }
}

#[test]
fn newton_pairs_cancel_in_total_momentum() {
    let mut rng = rng(5);
    let n_feet = 4;
    let lay = ControlLayout { n_feet };
    let nr = 12 + 3 * n_feet;
    for _ in 0..50 {
        let robots = 2 + (uniform(&mut rng, 0.0, 3.0) as usize);
        let (stacked, payload, team) = stacked_fixture(&mut rng, robots, n_feet);
        let (x, u) = random_stacked_point(&mut rng, robots, n_feet);
        let xd = stacked.derivative(0, &x, &u).unwrap();
        let mut p_dot = v3(xd.as_slice(), 3) * payload.mass;
        let mut expected = payload.gravity * payload.mass;
        for (i, params) in team.iter().enumerate() {
            p_dot += v3(xd.as_slice(), 12 + i * nr + 3) * params.mass;
            expected += params.gravity * params.mass;
            for j in 0..n_feet {
                expected += v3(u.as_slice(), i * lay.dim() + lay.force(j));
            }
        }
        assert!((p_dot - expected).amax() <= 1e-9 * expected.amax().max(1.0));
    }
}

fn check_jacobians<D: Dynamics>(d: &D, x: &DVector<f64>, u: &DVector<f64>) {
    let (fx, fu) = d.jacobians(0, x, u).unwrap();
    let nfx = fd_jacobian(|x| d.derivative(0, x, u).unwrap(), x);
    let nfu = fd_jacobian(|u| d.derivative(0, x, u).unwrap(), u);
    assert!(scaled_error(&fx, &nfx) <= FD_TOL, "df/dx error {:e}", scaled_error(&fx, &nfx));
    assert!(scaled_error(&fu, &nfu) <= FD_TOL, "df/du error {:e}", scaled_error(&fu, &nfu));
}

#[test]
fn dynamics_jacobians_match_finite_differences() {
    let mut rng = rng(6);
    let n_feet = 4;
    for _ in 0..20 {
        let params = random_params(&mut rng, 2);
        let mut x = DVector::zeros(12);
        random_body(&mut rng, x.as_mut_slice());
        let u = random_vector(&mut rng, 12, 50.0);
        check_jacobians(&PayloadCopyDynamics::new(Arc::new(params)), &x, &u);

        let mut px = [0.0; 12];
        random_body(&mut rng, &mut px);
        let robot = RobotDynamics::new(
            Arc::new(random_params(&mut rng, 0)),
            n_feet,
            Vector3::new(0.3, -0.2, 0.1),
            vec![Pose::from_state(&px)],
        );
        let x = random_robot_state(&mut rng, n_feet);
        let u = random_vector(&mut rng, ControlLayout { n_feet }.dim(), 50.0);
        check_jacobians(&robot, &x, &u);

        let (stacked, _, _) = stacked_fixture(&mut rng, 3, n_feet);
        let (x, u) = random_stacked_point(&mut rng, 3, n_feet);
        check_jacobians(&stacked, &x, &u);
    }
}

#[test]
fn step_linearization_matches_finite_differences() {
    let mut rng = rng(7);
    let dt = 0.05;
    for _ in 0..20 {
        let params = random_params(&mut rng, 2);
        let d = PayloadCopyDynamics::new(Arc::new(params));
        let mut x = DVector::zeros(12);
        random_body(&mut rng, x.as_mut_slice());
        x[7] = x[7].clamp(-0.8, 0.8);
        let u = random_vector(&mut rng, 12, 20.0);
        let lin = linearize_step(&d, 1, &x, &u, dt).unwrap();
        let na = fd_jacobian(|x| step_backward_euler(&d, 1, x, &u, dt).unwrap(), &x);
        let nb = fd_jacobian(|u| step_backward_euler(&d, 1, &x, u, dt).unwrap(), &u);
        assert!(scaled_error(&lin.a, &na) <= FD_TOL);
        assert!(scaled_error(&lin.b, &nb) <= FD_TOL);
    }
}

fn free_body() -> (PayloadCopyDynamics, DVector<f64>) {
    let params = BodyParams::new(10.0, Vector3::new(0.4, 0.8, 1.1)).with_handles(vec![Vector3::new(0.5, 0.0, 0.0)]);
    let mut x = DVector::zeros(12);
    x[3] = 0.4;
    x[5] = 1.0;
    x[9] = 0.1;
    x[10] = -0.05;
    x[11] = 0.3;
    (PayloadCopyDynamics::new(Arc::new(params)), x)
}

#[test]
fn free_body_conserves_angular_momentum() {
    let (d, x0) = free_body();
    let u = DVector::zeros(6);
    let dt = 0.01;
    let mut x = x0.clone();
    for k in 1..=100 {
        x = step_backward_euler(&d, k, &x, &u, dt).unwrap();
        let t = k as f64 * dt;
        assert_eq!(x.rows(9, 3), x0.rows(9, 3), "angular momentum changed at step {k}");
        let dv = x.rows(3, 3) - x0.rows(3, 3);
        assert!((dv - Vector3::new(0.0, 0.0, -9.81 * t)).amax() <= 1e-8);
    }
}

fn kinetic_energy(x: &DVector<f64>, inertia: &Matrix3<f64>) -> f64 {
    let rot = rotation(&Vector3::new(x[6], x[7], x[8]));
    let l = Vector3::new(x[9], x[10], x[11]);
    0.5 * l.dot(&(rot * inertia.try_inverse().unwrap() * rot.transpose() * l))
}

#[test]
fn principal_spin_energy_does_not_grow() {
    let inertia = Matrix3::from_diagonal(&Vector3::new(0.4, 0.8, 1.1));
    let params = BodyParams::new(10.0, inertia.diagonal()).with_handles(vec![Vector3::zeros()]);
    let d = PayloadCopyDynamics::new(Arc::new(params));
    let mut x = DVector::zeros(12);
    x[11] = 0.6;
    let u = DVector::zeros(6);
    let mut last = kinetic_energy(&x, &inertia);
    for k in 1..=200 {
        x = step_backward_euler(&d, k, &x, &u, 0.05).unwrap();
        let e = kinetic_energy(&x, &inertia);
        assert!(e <= last * (1.0 + 1e-12), "energy rose at step {k}: {last} -> {e}");
        last = e;
    }
}

#[test]
fn tumbling_energy_drift_stays_small() {
    let (d, mut x) = free_body();
    let inertia = Matrix3::from_diagonal(&Vector3::new(0.4, 0.8, 1.1));
    let e0 = kinetic_energy(&x, &inertia);
    let u = DVector::zeros(6);
    for k in 1..=200 {
        x = step_backward_euler(&d, k, &x, &u, 0.05).unwrap();
        let e = kinetic_energy(&x, &inertia);
        assert!((e - e0).abs() <= 1e-2 * e0, "energy drift at step {k}: {e0} -> {e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn oracle_agreement_holds_everywhere(
        seed in any::<u64>(),
        pitch in -1.3f64..1.3,
    ) {
        let mut rng = rng(seed);
        let params = random_params(&mut rng, 3);
        let mut x = DVector::zeros(12);
        random_body(&mut rng, x.as_mut_slice());
        x[7] = pitch;
        let u = random_vector(&mut rng, 18, 80.0);
        let got = PayloadCopyDynamics::new(Arc::new(params.clone())).derivative(0, &x, &u).unwrap();
        let want = oracle_payload(&params, x.as_slice(), u.as_slice());
        prop_assert!(max_diff(&got, &want) <= 1e-9 * (1.0 + want.iter().fold(0.0f64, |a, b| a.max(b.abs()))));
    }

    #[test]
    fn gimbal_lock_is_rejected(sign in prop::bool::ANY) {
        let params = BodyParams::new(1.0, Vector3::new(1.0, 1.0, 1.0)).with_handles(vec![Vector3::zeros()]);
        let mut x = DVector::zeros(12);
        x[7] = if sign { 1.0 } else { -1.0 } * std::f64::consts::FRAC_PI_2;
        let d = PayloadCopyDynamics::new(Arc::new(params));
        prop_assert!(d.derivative(0, &x, &DVector::zeros(6)).is_err());
    }
}

#[test]
fn jacobian_shapes() {
    let (d, x) = free_body();
    let (fx, fu) = d.jacobians(0, &x, &DVector::zeros(6)).unwrap();
    assert_eq!(fx.shape(), (12, 12));
    assert_eq!(fu.shape(), (12, 6));
    let _: DMatrix<f64> = fx;
}
