//! Independent re-implementations of the rigid-body models.

use loco_admm::model::BodyParams;
use loco_admm::nalgebra::{DVector, Matrix3, Vector3};

use super::uniform;

/// Body-to-world rotation written out entry by entry for yaw-pitch-roll.
pub fn oracle_rotation(yaw: f64, pitch: f64, roll: f64) -> Matrix3<f64> {
    let (sy, cy) = yaw.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let (sr, cr) = roll.sin_cos();
    Matrix3::new(
        cy * cp,
        cy * sp * sr - sy * cr,
        cy * sp * cr + sy * sr,
        sy * cp,
        sy * sp * sr + cy * cr,
        sy * sp * cr - cy * sr,
        -sp,
        cp * sr,
        cp * cr,
    )
}

/// Euler rates from world angular velocity by inverting `omega = E(theta) theta_dot`,
/// whose columns are the world-frame yaw, pitch and roll axes.
pub fn oracle_rates(yaw: f64, pitch: f64, omega: &Vector3<f64>) -> Vector3<f64> {
    let (sy, cy) = yaw.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let e = Matrix3::new(0.0, -sy, cy * cp, 0.0, cy, sy * cp, 1.0, 0.0, -sp);
    e.lu().solve(omega).expect("regular away from gimbal lock")
}

pub struct Body<'a> {
    pub x: &'a [f64],
    pub mass: f64,
    pub inertia: Matrix3<f64>,
    pub gravity: Vector3<f64>,
}

/// Rigid-body derivative `[r_dot; v_dot; theta_dot; l_dot]` under a net world wrench.
pub fn oracle_body(b: &Body<'_>, force: Vector3<f64>, moment: Vector3<f64>) -> Vec<f64> {
    let x = b.x;
    let rot = oracle_rotation(x[6], x[7], x[8]);
    let l = Vector3::new(x[9], x[10], x[11]);
    let omega = (rot * b.inertia * rot.transpose()).lu().solve(&l).expect("inertia is regular");
    let rates = oracle_rates(x[6], x[7], &omega);
    let acc = b.gravity + force / b.mass;
    vec![x[3], x[4], x[5], acc[0], acc[1], acc[2], rates[0], rates[1], rates[2], moment[0], moment[1], moment[2]]
}

pub fn v3(s: &[f64], o: usize) -> Vector3<f64> {
    Vector3::new(s[o], s[o + 1], s[o + 2])
}

pub fn oracle_payload(params: &BodyParams, x: &[f64], u: &[f64]) -> Vec<f64> {
    let rot = oracle_rotation(x[6], x[7], x[8]);
    let (mut f, mut m) = (Vector3::zeros(), Vector3::zeros());
    for (i, d) in params.handle_offsets.iter().enumerate() {
        let fi = v3(u, 6 * i);
        f += fi;
        m += (rot * d).cross(&fi) + v3(u, 6 * i + 3);
    }
    let body = Body {
        x,
        mass: params.mass,
        inertia: params.inertia_body,
        gravity: params.gravity,
    };
    oracle_body(&body, f, m)
}

pub fn oracle_robot(params: &BodyParams, n_feet: usize, x: &[f64], u: &[f64], grasp: &Vector3<f64>) -> Vec<f64> {
    let r = v3(x, 0);
    let f_h = v3(u, 6 * n_feet);
    let (mut f, mut m) = (f_h, (grasp - r).cross(&f_h) + v3(u, 6 * n_feet + 3));
    for j in 0..n_feet {
        let fj = v3(u, 3 * j);
        f += fj;
        m += (v3(x, 12 + 3 * j) - r).cross(&fj);
    }
    let body = Body {
        x,
        mass: params.mass,
        inertia: params.inertia_body,
        gravity: params.gravity,
    };
    let mut out = oracle_body(&body, f, m);
    out.extend_from_slice(&u[3 * n_feet..6 * n_feet]);
    out
}

pub fn random_inertia(rng: &mut rand_chacha::ChaCha8Rng) -> Matrix3<f64> {
    let a = Matrix3::from_fn(|_, _| uniform(rng, -1.0, 1.0));
    a * a.transpose() + Matrix3::identity() * 0.5
}

pub fn random_params(rng: &mut rand_chacha::ChaCha8Rng, handles: usize) -> BodyParams {
    BodyParams {
        mass: uniform(rng, 5.0, 60.0),
        inertia_body: random_inertia(rng),
        gravity: Vector3::new(0.0, 0.0, -9.81),
        handle_offsets: (0..handles).map(|_| Vector3::from_fn(|_, _| uniform(rng, -0.5, 0.5))).collect(),
    }
}

pub fn max_diff(a: &DVector<f64>, b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
