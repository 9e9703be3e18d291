use nalgebra::{DMatrix, DVector};

use super::{Dynamics, ModelError};

/// Residual tolerance of the implicit solve.
pub const IMPLICIT_TOL: f64 = 1e-10;
/// Newton iteration cap of the implicit solve.
pub const IMPLICIT_MAX_ITERS: usize = 50;

/// One backward-Euler step: solves `x' = x + dt * f(x', u)` by damped Newton iteration.
///
/// The derivative is evaluated at knot `knot` (the index of `x'` on the horizon).
pub fn step_backward_euler<D: Dynamics + ?Sized>(
    dynamics: &D,
    knot: usize,
    x: &DVector<f64>,
    u: &DVector<f64>,
    dt: f64,
) -> Result<DVector<f64>, ModelError> {
    assert!(dt > 0.0, "time step must be positive");
    let n = dynamics.state_dim();
    let residual = |xn: &DVector<f64>| -> Result<DVector<f64>, ModelError> {
        Ok(xn - x - dynamics.derivative(knot, xn, u)? * dt)
    };
    let mut next = x + dynamics.derivative(knot, x, u)? * dt;
    let mut res = residual(&next)?;
    let mut norm = res.norm();
    for _ in 0..IMPLICIT_MAX_ITERS {
        if norm <= IMPLICIT_TOL {
            return Ok(next);
        }
        let (fx, _) = dynamics.jacobians(knot, &next, u)?;
        let jac = DMatrix::identity(n, n) - fx * dt;
        let delta = jac.lu().solve(&res).ok_or(ModelError::Linearization)?;
        let mut step = 1.0;
        loop {
            let trial = &next - &delta * step;
            match residual(&trial) {
                Ok(r) if r.norm() < norm || step < 1e-3 => {
                    norm = r.norm();
                    res = r;
                    next = trial;
                    break;
                }
                _ if step < 1e-3 => return Err(ModelError::Integration { iterations: 0, residual: norm }),
                _ => step *= 0.5,
            }
        }
    }
    if norm <= IMPLICIT_TOL {
        Ok(next)
    } else {
        Err(ModelError::Integration {
            iterations: IMPLICIT_MAX_ITERS,
            residual: norm,
        })
    }
}

/// Converged step together with its sensitivities.
#[derive(Debug, Clone)]
pub struct StepLinearization {
    pub next: DVector<f64>,
    /// `d x_{k+1} / d x_k`
    pub a: DMatrix<f64>,
    /// `d x_{k+1} / d u_k`
    pub b: DMatrix<f64>,
}

/// Sensitivities of the implicit step around an already converged `next`.
pub fn linearize_at<D: Dynamics + ?Sized>(
    dynamics: &D,
    knot: usize,
    next: &DVector<f64>,
    u: &DVector<f64>,
    dt: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>), ModelError> {
    let n = dynamics.state_dim();
    let (fx, fu) = dynamics.jacobians(knot, next, u)?;
    let lu = (DMatrix::identity(n, n) - fx * dt).lu();
    let a = lu.try_inverse().ok_or(ModelError::Linearization)?;
    let b = &a * fu * dt;
    Ok((a, b))
}

/// Steps and linearizes: `A = (I - dt df/dx')^-1`, `B = A dt df/du`.
pub fn linearize_step<D: Dynamics + ?Sized>(
    dynamics: &D,
    knot: usize,
    x: &DVector<f64>,
    u: &DVector<f64>,
    dt: f64,
) -> Result<StepLinearization, ModelError> {
    let next = step_backward_euler(dynamics, knot, x, u, dt)?;
    let (a, b) = linearize_at(dynamics, knot, &next, u, dt)?;
    Ok(StepLinearization { next, a, b })
}
