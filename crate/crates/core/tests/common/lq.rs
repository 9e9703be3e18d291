use loco_admm::nalgebra::{DMatrix, DVector};
use loco_admm::sqp::LqStage;
use rand_chacha::ChaCha8Rng;

use super::{random_vector, uniform};

/// Random strictly convex LQ problem with `N` stages.
pub struct LqInstance {
    pub stages: Vec<LqStage>,
    pub vx: DVector<f64>,
    pub vxx: DMatrix<f64>,
}

fn spd(rng: &mut ChaCha8Rng, n: usize, floor: f64) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| uniform(rng, -1.0, 1.0));
    &m * m.transpose() + DMatrix::identity(n, n) * floor
}

pub fn random_lq(rng: &mut ChaCha8Rng, nx: usize, nu: usize, horizon: usize, with_defects: bool) -> LqInstance {
    let stages = (0..horizon)
        .map(|_| {
            let h = spd(rng, nx + nu, 0.1);
            LqStage {
                a: DMatrix::from_fn(nx, nx, |_, _| uniform(rng, -0.6, 0.6)),
                b: DMatrix::from_fn(nx, nu, |_, _| uniform(rng, -1.0, 1.0)),
                d: if with_defects { random_vector(rng, nx, 0.5) } else { DVector::zeros(nx) },
                lx: random_vector(rng, nx, 1.0),
                lu: random_vector(rng, nu, 1.0),
                lxx: h.view((0, 0), (nx, nx)).into_owned(),
                luu: h.view((nx, nx), (nu, nu)).into_owned(),
                lux: h.view((nx, 0), (nu, nx)).into_owned(),
            }
        })
        .collect();
    LqInstance {
        stages,
        vx: random_vector(rng, nx, 1.0),
        vxx: spd(rng, nx, 0.1),
    }
}

/// Solves the whole horizon as one equality-constrained QP through its KKT system.
/// Returns `(dx_0..dx_N, du_0..du_{N-1})` with `dx_0 = 0`.
pub fn dense_kkt(lq: &LqInstance) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let n = lq.stages.len();
    let nx = lq.vx.len();
    let nu = lq.stages[0].lu.len();
    let xi = |k: usize| k * nx;
    let ui = |k: usize| (n + 1) * nx + k * nu;
    let nz = (n + 1) * nx + n * nu;
    let nc = (n + 1) * nx;
    let mut h = DMatrix::zeros(nz, nz);
    let mut g = DVector::zeros(nz);
    for (k, s) in lq.stages.iter().enumerate() {
        h.view_mut((xi(k), xi(k)), (nx, nx)).copy_from(&s.lxx);
        h.view_mut((ui(k), ui(k)), (nu, nu)).copy_from(&s.luu);
        h.view_mut((ui(k), xi(k)), (nu, nx)).copy_from(&s.lux);
        h.view_mut((xi(k), ui(k)), (nx, nu)).copy_from(&s.lux.transpose());
        g.rows_mut(xi(k), nx).copy_from(&s.lx);
        g.rows_mut(ui(k), nu).copy_from(&s.lu);
    }
    h.view_mut((xi(n), xi(n)), (nx, nx)).copy_from(&lq.vxx);
    g.rows_mut(xi(n), nx).copy_from(&lq.vx);

    let mut c = DMatrix::zeros(nc, nz);
    let mut rhs = DVector::zeros(nc);
    c.view_mut((0, 0), (nx, nx)).fill_with_identity();
    for (k, s) in lq.stages.iter().enumerate() {
        let row = (k + 1) * nx;
        c.view_mut((row, xi(k + 1)), (nx, nx)).fill_with_identity();
        c.view_mut((row, xi(k)), (nx, nx)).copy_from(&(-&s.a));
        c.view_mut((row, ui(k)), (nx, nu)).copy_from(&(-&s.b));
        rhs.rows_mut(row, nx).copy_from(&s.d);
    }

    let mut kkt = DMatrix::zeros(nz + nc, nz + nc);
    kkt.view_mut((0, 0), (nz, nz)).copy_from(&h);
    kkt.view_mut((0, nz), (nz, nc)).copy_from(&c.transpose());
    kkt.view_mut((nz, 0), (nc, nz)).copy_from(&c);
    let mut b = DVector::zeros(nz + nc);
    b.rows_mut(0, nz).copy_from(&(-g));
    b.rows_mut(nz, nc).copy_from(&rhs);
    let sol = kkt.lu().solve(&b).expect("KKT system is regular");
    let dxs = (0..=n).map(|k| sol.rows(xi(k), nx).into_owned()).collect();
    let dus = (0..n).map(|k| sol.rows(ui(k), nu).into_owned()).collect();
    (dxs, dus)
}
