//! Differential inverse kinematics.
//!
//! Both solvers iterate a linearized step on the pose error of
//! [`crate::pose::pose_error`], rescale the step so no joint moves more than
//! `max_step` radians, and hard-clamp to joint limits after every iteration.
//! Neither returns an error on non-convergence: the control loop always gets a
//! joint state back, with [`IkReport::converged`] telling it how good it is.

use nalgebra::{DMatrix, DVector, Vector6};
use serde::{Deserialize, Serialize};

use super::{JointState, KinematicChain, KinematicsError};
use crate::pose::{pose_error, Pose};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IkTolerance {
    pub meters: f64,
    pub radians: f64,
}

impl Default for IkTolerance {
    fn default() -> Self {
        Self {
            meters: 1e-4,
            radians: 1e-3,
        }
    }
}

impl IkTolerance {
    fn satisfied(&self, e: &Vector6<f64>) -> bool {
        e.fixed_rows::<3>(0).norm() < self.meters && e.fixed_rows::<3>(3).norm() < self.radians
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DlsConfig {
    pub lambda: f64,
    pub max_iters: usize,
    /// Largest per-joint change allowed in one iteration (radians).
    pub max_step: f64,
    pub tol: IkTolerance,
}

impl Default for DlsConfig {
    fn default() -> Self {
        Self {
            lambda: 0.05,
            max_iters: 200,
            max_step: 0.1,
            tol: IkTolerance::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizedConfig {
    pub w_center: f64,
    pub w_disp: f64,
    pub max_iters: usize,
    pub max_step: f64,
    pub tol: IkTolerance,
}

impl Default for RegularizedConfig {
    fn default() -> Self {
        Self {
            w_center: 1e-5,
            w_disp: 0.0025,
            max_iters: 200,
            max_step: 0.1,
            tol: IkTolerance::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IkReport {
    pub converged: bool,
    pub iterations: usize,
    pub translation_error: f64,
    pub rotation_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IkSolution {
    pub q: JointState,
    pub report: IkReport,
}

/// What one solver iteration did; handed to the observer of the `*_traced`
/// entry points.
#[derive(Debug, Clone)]
pub struct IkIteration<'a> {
    pub iteration: usize,
    pub q: &'a [f64],
    pub error: Vector6<f64>,
    /// Step before the per-joint rescale.
    pub raw_step: &'a DVector<f64>,
    pub applied_step: &'a DVector<f64>,
}

/// Damped least squares: `Δq = Jᵀ (J Jᵀ + λ² I)⁻¹ e`.
pub fn ik_dls(
    chain: &KinematicChain,
    q0: &JointState,
    target: &Pose,
    cfg: &DlsConfig,
) -> Result<IkSolution, KinematicsError> {
    ik_dls_traced(chain, q0, target, cfg, |_| {})
}

pub fn ik_dls_traced(
    chain: &KinematicChain,
    q0: &JointState,
    target: &Pose,
    cfg: &DlsConfig,
    observer: impl FnMut(&IkIteration<'_>),
) -> Result<IkSolution, KinematicsError> {
    if !(cfg.lambda > 0.0) {
        return Err(KinematicsError::InvalidParameter(format!(
            "lambda must be positive, got {}",
            cfg.lambda
        )));
    }
    let lambda_sq = cfg.lambda * cfg.lambda;
    iterate(
        chain,
        q0,
        target,
        cfg.max_iters,
        cfg.max_step,
        &cfg.tol,
        |jac, e, _q| dls_step(jac, e, lambda_sq),
        observer,
    )
}

/// Regularized least squares minimizing
/// `‖J Δq − e‖² + w_center ‖q + Δq − q_center‖² + w_disp ‖Δq‖²`,
/// solved through its normal equations.
pub fn ik_regularized(
    chain: &KinematicChain,
    q0: &JointState,
    target: &Pose,
    cfg: &RegularizedConfig,
) -> Result<IkSolution, KinematicsError> {
    ik_regularized_traced(chain, q0, target, cfg, |_| {})
}

pub fn ik_regularized_traced(
    chain: &KinematicChain,
    q0: &JointState,
    target: &Pose,
    cfg: &RegularizedConfig,
    observer: impl FnMut(&IkIteration<'_>),
) -> Result<IkSolution, KinematicsError> {
    if !(cfg.w_center >= 0.0) || !(cfg.w_disp > 0.0) {
        return Err(KinematicsError::InvalidParameter(format!(
            "need w_center >= 0 and w_disp > 0, got {} and {}",
            cfg.w_center, cfg.w_disp
        )));
    }
    let centers = DVector::from_vec(chain.centers().0);
    iterate(
        chain,
        q0,
        target,
        cfg.max_iters,
        cfg.max_step,
        &cfg.tol,
        |jac, e, q| regularized_step(jac, e, q, &centers, cfg.w_center, cfg.w_disp),
        observer,
    )
}

pub(crate) fn dls_step(jac: &DMatrix<f64>, e: &Vector6<f64>, lambda_sq: f64) -> DVector<f64> {
    let mut a = jac * jac.transpose();
    for i in 0..6 {
        a[(i, i)] += lambda_sq;
    }
    let e = DVector::from_column_slice(e.as_slice());
    // J Jᵀ + λ² I is symmetric positive definite for λ > 0.
    let y = a
        .cholesky()
        .expect("damped normal matrix is positive definite")
        .solve(&e);
    jac.transpose() * y
}

pub(crate) fn regularized_step(
    jac: &DMatrix<f64>,
    e: &Vector6<f64>,
    q: &DVector<f64>,
    centers: &DVector<f64>,
    w_center: f64,
    w_disp: f64,
) -> DVector<f64> {
    let n = jac.ncols();
    let mut a = jac.transpose() * jac;
    for i in 0..n {
        a[(i, i)] += w_center + w_disp;
    }
    let e = DVector::from_column_slice(e.as_slice());
    let b = jac.transpose() * e - (q - centers) * w_center;
    a.cholesky()
        .expect("regularized normal matrix is positive definite")
        .solve(&b)
}

fn rescale(step: &DVector<f64>, max_step: f64) -> DVector<f64> {
    let peak = step.amax();
    if peak > max_step {
        step * (max_step / peak)
    } else {
        step.clone()
    }
}

#[allow(clippy::too_many_arguments)]
fn iterate(
    chain: &KinematicChain,
    q0: &JointState,
    target: &Pose,
    max_iters: usize,
    max_step: f64,
    tol: &IkTolerance,
    mut step_fn: impl FnMut(&DMatrix<f64>, &Vector6<f64>, &DVector<f64>) -> DVector<f64>,
    mut observer: impl FnMut(&IkIteration<'_>),
) -> Result<IkSolution, KinematicsError> {
    chain.check_dim(q0.as_slice())?;
    let mut q = DVector::from_column_slice(q0.as_slice());
    let mut iterations = 0;
    loop {
        let frames = chain.forward_kinematics(q.as_slice())?;
        let e = pose_error(&frames[chain.dof()], target);
        if tol.satisfied(&e) || iterations >= max_iters {
            return Ok(IkSolution {
                report: IkReport {
                    converged: tol.satisfied(&e),
                    iterations,
                    translation_error: e.fixed_rows::<3>(0).norm(),
                    rotation_error: e.fixed_rows::<3>(3).norm(),
                },
                q: JointState(q.as_slice().to_vec()),
            });
        }
        let jac = chain.jacobian_from_frames(&frames);
        let raw = step_fn(&jac, &e, &q);
        let applied = rescale(&raw, max_step);
        observer(&IkIteration {
            iteration: iterations,
            q: q.as_slice(),
            error: e,
            raw_step: &raw,
            applied_step: &applied,
        });
        q += &applied;
        chain.clamp_in_place(q.as_mut_slice());
        iterations += 1;
    }
}
