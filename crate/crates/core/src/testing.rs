//! Independent reference computations shared by unit, integration and
//! acceptance tests. Nothing in the library calls into this module.

use crate::kinematics::KinematicChain;
use crate::pose::rotation_vector;
use nalgebra::{DMatrix, Vector3};

/// Jacobian by central finite differences of forward kinematics.
pub fn jacobian_fd(chain: &KinematicChain, q: &[f64], h: f64) -> DMatrix<f64> {
    let n = chain.dof();
    let mut jac = DMatrix::zeros(6, n);
    for i in 0..n {
        let mut qp = q.to_vec();
        let mut qm = q.to_vec();
        qp[i] += h;
        qm[i] -= h;
        let tp = chain.tool_pose(&qp).unwrap();
        let tm = chain.tool_pose(&qm).unwrap();
        let v: Vector3<f64> = (tp.translation() - tm.translation()) / (2.0 * h);
        let w = rotation_vector(&(tp.rotation() * tm.rotation().inverse())) / (2.0 * h);
        jac.fixed_view_mut::<3, 1>(0, i).copy_from(&v);
        jac.fixed_view_mut::<3, 1>(3, i).copy_from(&w);
    }
    jac
}

/// Largest column-wise relative deviation between the analytic Jacobian and
/// central differences with `h = 1e-6`.
pub fn jacobian_fd_relative_error(chain: &KinematicChain, q: &[f64]) -> f64 {
    let analytic = chain.jacobian(q).unwrap();
    let numeric = jacobian_fd(chain, q, 1e-6);
    (0..chain.dof())
        .map(|i| {
            let a = analytic.column(i);
            let d = (numeric.column(i) - a).norm();
            d / a.norm().max(1e-12)
        })
        .fold(0.0, f64::max)
}
