#![allow(dead_code)]

pub mod fd;
pub mod lq;
pub mod oracle;

use loco_admm::config::builtin_scenario;
use loco_admm::nalgebra::{DMatrix, DVector};
use loco_admm::problem::Scenario;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;
pub const FD_TOL: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

pub fn scenario(name: &str, robots: usize) -> Scenario {
    Scenario::new(builtin_scenario(name, robots).expect("builtin")).expect("valid")
}

/// Rigid-body block: position, velocity, (yaw, pitch, roll), angular momentum.
pub fn random_body(rng: &mut ChaCha8Rng, out: &mut [f64]) {
    for v in &mut out[0..3] {
        *v = uniform(rng, -1.0, 1.0);
    }
    for v in &mut out[3..6] {
        *v = uniform(rng, -1.0, 1.0);
    }
    out[6] = uniform(rng, -3.0, 3.0);
    out[7] = uniform(rng, -1.2, 1.2);
    out[8] = uniform(rng, -1.2, 1.2);
    for v in &mut out[9..12] {
        *v = uniform(rng, -5.0, 5.0);
    }
}

pub fn random_vector(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| uniform(rng, -scale, scale))
}

pub fn random_robot_state(rng: &mut ChaCha8Rng, n_feet: usize) -> DVector<f64> {
    let mut x = DVector::zeros(12 + 3 * n_feet);
    random_body(rng, x.as_mut_slice());
    for v in &mut x.as_mut_slice()[12..] {
        *v = uniform(rng, -1.0, 1.0);
    }
    x
}

/// Central-difference Jacobian of `f` at `x`.
pub fn fd_jacobian(f: impl Fn(&DVector<f64>) -> DVector<f64>, x: &DVector<f64>) -> DMatrix<f64> {
    let m = f(x).len();
    let mut jac = DMatrix::zeros(m, x.len());
    for c in 0..x.len() {
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp[c] += FD_STEP;
        xm[c] -= FD_STEP;
        jac.set_column(c, &((f(&xp) - f(&xm)) / (2.0 * FD_STEP)));
    }
    jac
}

/// Largest entrywise error, relative to the entry magnitude once it exceeds one.
pub fn scaled_error(analytic: &DMatrix<f64>, numeric: &DMatrix<f64>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, n)| (a - n).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}
