//! ZYX Euler-angle kinematics.
//!
//! Angles are stored as `(yaw, pitch, roll)` and compose as
//! `R = Rz(yaw) * Ry(pitch) * Rx(roll)`.

use nalgebra::{Matrix3, Vector3};

use super::ModelError;

/// Distance to the gimbal-lock singularity below which the Euler-rate map is refused.
pub const GIMBAL_MARGIN: f64 = 1e-6;

fn rz(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn ry(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rx(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn drz(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

fn dry(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s)
}

fn drx(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s)
}

/// Body-to-world rotation matrix.
pub fn rotation(theta: &Vector3<f64>) -> Matrix3<f64> {
    rz(theta[0]) * ry(theta[1]) * rx(theta[2])
}

/// Partial derivatives of [`rotation`] with respect to yaw, pitch and roll.
pub fn rotation_partials(theta: &Vector3<f64>) -> [Matrix3<f64>; 3] {
    let (z, y, x) = (rz(theta[0]), ry(theta[1]), rx(theta[2]));
    [
        drz(theta[0]) * y * x,
        z * dry(theta[1]) * x,
        z * y * drx(theta[2]),
    ]
}

fn check_pitch(theta: &Vector3<f64>) -> Result<(), ModelError> {
    if !theta.iter().all(|v| v.is_finite()) {
        return Err(ModelError::NonFinite("euler angles"));
    }
    if theta[1].abs() >= std::f64::consts::FRAC_PI_2 - GIMBAL_MARGIN {
        return Err(ModelError::Singularity { pitch: theta[1] });
    }
    Ok(())
}

/// Map `T(theta)` from world angular velocity to Euler-angle rates.
pub fn euler_rate_map(theta: &Vector3<f64>) -> Result<Matrix3<f64>, ModelError> {
    check_pitch(theta)?;
    let (sy, cy) = theta[0].sin_cos();
    let (sp, cp) = theta[1].sin_cos();
    let tp = sp / cp;
    Ok(Matrix3::new(
        cy * tp,
        sy * tp,
        1.0,
        -sy,
        cy,
        0.0,
        cy / cp,
        sy / cp,
        0.0,
    ))
}

/// Partials of [`euler_rate_map`] with respect to yaw and pitch (roll does not enter).
pub fn euler_rate_map_partials(theta: &Vector3<f64>) -> Result<[Matrix3<f64>; 3], ModelError> {
    check_pitch(theta)?;
    let (sy, cy) = theta[0].sin_cos();
    let (sp, cp) = theta[1].sin_cos();
    let tp = sp / cp;
    let c2 = cp * cp;
    let d_yaw = Matrix3::new(
        -sy * tp,
        cy * tp,
        0.0,
        -cy,
        -sy,
        0.0,
        -sy / cp,
        cy / cp,
        0.0,
    );
    let d_pitch = Matrix3::new(
        cy / c2,
        sy / c2,
        0.0,
        0.0,
        0.0,
        0.0,
        cy * sp / c2,
        sy * sp / c2,
        0.0,
    );
    Ok([d_yaw, d_pitch, Matrix3::zeros()])
}

/// World-frame inertia `R I_b R^T`.
pub fn world_inertia(theta: &Vector3<f64>, inertia_body: &Matrix3<f64>) -> Matrix3<f64> {
    let r = rotation(theta);
    r * inertia_body * r.transpose()
}

/// Skew-symmetric cross-product matrix: `skew(a) * b == a.cross(b)`.
pub fn skew(a: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -a[2], a[1], a[2], 0.0, -a[0], -a[1], a[0], 0.0)
}

/// Wrap an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

/// Euler-angle rates and their Jacobians for a body with world angular momentum `l`.
///
/// Returns `(theta_dot, d theta_dot / d theta, d theta_dot / d l)`.
pub(crate) fn attitude_rates(
    theta: &Vector3<f64>,
    l: &Vector3<f64>,
    inertia_body_inv: &Matrix3<f64>,
) -> Result<(Vector3<f64>, Matrix3<f64>, Matrix3<f64>), ModelError> {
    let t = euler_rate_map(theta)?;
    let dt = euler_rate_map_partials(theta)?;
    let r = rotation(theta);
    let dr = rotation_partials(theta);
    let iw_inv = r * inertia_body_inv * r.transpose();
    let omega = iw_inv * l;
    let rates = t * omega;
    let mut d_theta = Matrix3::zeros();
    for j in 0..3 {
        let d_iw_inv = dr[j] * inertia_body_inv * r.transpose() + r * inertia_body_inv * dr[j].transpose();
        let col = dt[j] * omega + t * (d_iw_inv * l);
        d_theta.set_column(j, &col);
    }
    Ok((rates, d_theta, t * iw_inv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn rotation_is_orthonormal() {
        let r = rotation(&Vector3::new(0.3, -0.2, 1.1));
        assert!((r * r.transpose() - Matrix3::identity()).norm() < 1e-14);
        assert!((r.determinant() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn rate_map_at_zero_reorders_components() {
        let t = euler_rate_map(&Vector3::zeros()).unwrap();
        let w = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(t * w, Vector3::new(3.0, 2.0, 1.0));
    }

    #[test]
    fn rate_map_refuses_gimbal_lock() {
        let err = euler_rate_map(&Vector3::new(0.0, FRAC_PI_2 - 1e-7, 0.0)).unwrap_err();
        assert!(matches!(err, ModelError::Singularity { .. }));
    }

    #[test]
    fn rate_map_matches_rotation_finite_difference() {
        // Integrate R' = [w]x R for a short time and read back the Euler angles.
        let theta = Vector3::new(0.7, -0.4, 0.25);
        let w = Vector3::new(0.3, -1.2, 0.8);
        let h = 1e-6;
        let r0 = rotation(&theta);
        let r1 = nalgebra::Rotation3::from_scaled_axis(w * h).into_inner() * r0;
        let yaw = r1[(1, 0)].atan2(r1[(0, 0)]);
        let pitch = (-r1[(2, 0)]).asin();
        let roll = r1[(2, 1)].atan2(r1[(2, 2)]);
        let fd = (Vector3::new(yaw, pitch, roll) - theta) / h;
        let exact = euler_rate_map(&theta).unwrap() * w;
        assert!((fd - exact).amax() < 1e-5, "{fd} vs {exact}");
    }

    #[test]
    fn rate_map_partials_match_finite_difference() {
        let theta = Vector3::new(-1.3, 0.5, 0.2);
        let d = euler_rate_map_partials(&theta).unwrap();
        let h = 1e-6;
        for j in 0..3 {
            let mut p = theta;
            let mut m = theta;
            p[j] += h;
            m[j] -= h;
            let fd = (euler_rate_map(&p).unwrap() - euler_rate_map(&m).unwrap()) / (2.0 * h);
            assert!((fd - d[j]).amax() < 1e-7);
            let fdr = (rotation(&p) - rotation(&m)) / (2.0 * h);
            assert!((fdr - rotation_partials(&theta)[j]).amax() < 1e-8);
        }
    }

    #[test]
    fn world_inertia_cases() {
        let ib = Matrix3::from_diagonal(&Vector3::new(1.0, 2.0, 3.0));
        assert!((world_inertia(&Vector3::zeros(), &ib) - ib).amax() < 1e-15);
        let yawed = world_inertia(&Vector3::new(FRAC_PI_2, 0.0, 0.0), &ib);
        let expect = Matrix3::from_diagonal(&Vector3::new(2.0, 1.0, 3.0));
        assert!((yawed - expect).amax() < 1e-12);
    }

    #[test]
    fn world_inertia_preserves_spectrum() {
        let ib = Matrix3::new(2.0, 0.1, 0.0, 0.1, 1.5, 0.2, 0.0, 0.2, 3.0);
        let mut e0: Vec<f64> = ib.symmetric_eigenvalues().iter().copied().collect();
        e0.sort_by(f64::total_cmp);
        for theta in [
            Vector3::new(0.4, 0.3, -1.0),
            Vector3::new(-2.5, -1.2, 0.7),
            Vector3::new(3.0, 0.05, 2.9),
        ] {
            let iw = world_inertia(&theta, &ib);
            let mut e: Vec<f64> = iw.symmetric_eigenvalues().iter().copied().collect();
            e.sort_by(f64::total_cmp);
            for (a, b) in e.iter().zip(&e0) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn wrap_angle_range() {
        assert!((wrap_angle(3.0 * std::f64::consts::PI) - std::f64::consts::PI).abs() < 1e-12);
        assert!((wrap_angle(-0.1) + 0.1).abs() < 1e-15);
    }
}
