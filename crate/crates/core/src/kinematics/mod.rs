//! Serial revolute chains: forward kinematics, geometric Jacobians and the
//! two differential IK solvers (damped least squares for the camera arm,
//! center-regularized least squares for the manipulators).

mod chain;
mod ik;

pub use chain::{ChainDescription, Joint, JointDescription, JointState, KinematicChain};
pub use ik::{
    ik_dls, ik_dls_traced, ik_regularized, ik_regularized_traced, DlsConfig, IkIteration,
    IkReport, IkSolution, IkTolerance, RegularizedConfig,
};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum KinematicsError {
    #[error("chain {chain}: expected {expected} joint values, got {actual}")]
    DimensionMismatch {
        chain: String,
        expected: usize,
        actual: usize,
    },
    #[error("invalid chain description: {0}")]
    InvalidChain(String),
    #[error("invalid solver parameter: {0}")]
    InvalidParameter(String),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::{pose_error, Pose};
    use crate::rig::Rig;
    use nalgebra::{Matrix4, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn single_joint(tool: Vector3<f64>) -> KinematicChain {
        let j = Joint::new("j", Pose::identity(), Vector3::z(), (-PI, PI), None).unwrap();
        KinematicChain::new("one", Pose::identity(), vec![j], Pose::from_translation(tool)).unwrap()
    }

    /// Homogeneous-matrix forward kinematics written from scratch: explicit
    /// quaternion-to-matrix expansion and Rodrigues' formula.
    fn homogeneous(p: &Pose) -> Matrix4<f64> {
        let [w, x, y, z] = p.quaternion_wxyz();
        let t = p.translation();
        Matrix4::new(
            1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y), t.x,
            2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x), t.y,
            2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y), t.z,
            0.0, 0.0, 0.0, 1.0,
        )
    }

    fn rodrigues(axis: &Vector3<f64>, angle: f64) -> Matrix4<f64> {
        let (s, c) = angle.sin_cos();
        let (x, y, z) = (axis.x, axis.y, axis.z);
        let v = 1.0 - c;
        Matrix4::new(
            c + x * x * v, x * y * v - z * s, x * z * v + y * s, 0.0,
            y * x * v + z * s, c + y * y * v, y * z * v - x * s, 0.0,
            z * x * v - y * s, z * y * v + x * s, c + z * z * v, 0.0,
            0.0, 0.0, 0.0, 1.0,
        )
    }

    fn oracle_tool(chain: &KinematicChain, q: &[f64]) -> Matrix4<f64> {
        let mut m = homogeneous(&chain.base_pose);
        for (j, &qi) in chain.joints.iter().zip(q) {
            m = m * homogeneous(&j.parent_offset) * rodrigues(j.axis.as_ref(), qi);
        }
        m * homogeneous(&chain.tool_offset)
    }

    pub(crate) fn random_q(chain: &KinematicChain, rng: &mut impl Rng) -> Vec<f64> {
        chain
            .joints
            .iter()
            .map(|j| rng.random_range(j.limit_lo..j.limit_hi))
            .collect()
    }

    #[test]
    fn zero_angles_compose_fixed_offsets() {
        for chain in Rig::nominal().chains() {
            let tool = chain.tool_pose(&vec![0.0; chain.dof()]).unwrap();
            let mut expected = chain.base_pose;
            for j in &chain.joints {
                expected = expected * j.parent_offset;
            }
            expected = expected * chain.tool_offset;
            assert!(pose_error(&tool, &expected).norm() < 1e-15);
        }
    }

    #[test]
    fn quarter_turn_maps_x_to_y() {
        let chain = single_joint(Vector3::zeros());
        let tool = chain.tool_pose(&[PI / 2.0]).unwrap();
        let x = tool.transform_vector(&Vector3::x());
        assert!((x - Vector3::y()).norm() < 1e-15);
        let p = tool.transform_point(&Vector3::x());
        assert!((p - Vector3::y()).norm() < 1e-15);
    }

    #[test]
    fn fk_matches_homogeneous_oracle_on_camera_arm() {
        let rig = Rig::nominal();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let q = random_q(&rig.av, &mut rng);
            let got = homogeneous(&rig.av.tool_pose(&q).unwrap());
            let want = oracle_tool(&rig.av, &q);
            assert!((got - want).abs().max() < 1e-10);
        }
    }

    #[test]
    fn fk_rejects_wrong_dimension() {
        let rig = Rig::nominal();
        let err = rig.left.forward_kinematics(&[0.0; 5]).unwrap_err();
        assert!(matches!(err, KinematicsError::DimensionMismatch { expected: 6, actual: 5, .. }));
        assert!(rig.av.jacobian(&[0.0; 6]).is_err());
    }

    #[test]
    fn fk_is_deterministic() {
        let rig = Rig::nominal();
        let q = [0.3, -0.2, 0.5, 0.1, -0.4, 0.9, 0.2];
        let a = rig.av.forward_kinematics(&q).unwrap();
        let b = rig.av.forward_kinematics(&q).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn planar_lever_arm_column() {
        let l = 0.37;
        let chain = single_joint(Vector3::new(l, 0.0, 0.0));
        let jac = chain.jacobian(&[0.0]).unwrap();
        let expected = [0.0, l, 0.0, 0.0, 0.0, 1.0];
        for (r, e) in expected.iter().enumerate() {
            assert!((jac[(r, 0)] - e).abs() < 1e-15);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let rig = Rig::nominal();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for chain in rig.chains() {
            for _ in 0..50 {
                let q = random_q(chain, &mut rng);
                let err = crate::testing::jacobian_fd_relative_error(chain, &q);
                assert!(err < 1e-5, "relative error {err}");
            }
        }
    }

    #[test]
    fn wrist_aligned_configuration_is_singular() {
        // With wrist pitch at zero the forearm-roll and wrist-rotate axes are collinear.
        let rig = Rig::nominal();
        let jac = rig.left.jacobian(&[0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let sv = jac.singular_values();
        assert!(sv.min() < 1e-8, "smallest singular value {}", sv.min());
    }

    #[test]
    fn chain_json_round_trip_and_validation() {
        let rig = Rig::nominal();
        let text = rig.av.to_json();
        let back = KinematicChain::from_json(&text).unwrap();
        assert_eq!(back.checksum(), rig.av.checksum());
        assert_eq!(back.dof(), 7);

        let mut desc = rig.av.to_description();
        desc.joints[0].axis = [0.0, 0.0, 2.0];
        let bad_axis = serde_json::to_string(&desc).unwrap();
        assert!(KinematicChain::from_json(&bad_axis).is_err());
        let bad_limits = r#"{"name":"x","base_pose":{"translation":[0,0,0],"rotation":[1,0,0,0]},
            "joints":[{"name":"a","offset":{"translation":[0,0,0],"rotation":[1,0,0,0]},
            "axis":[0,0,1],"limits":[1.0,-1.0]}],
            "tool_offset":{"translation":[0,0,0],"rotation":[1,0,0,0]}}"#;
        assert!(matches!(
            KinematicChain::from_json(bad_limits),
            Err(KinematicsError::InvalidChain(_))
        ));
    }

    #[test]
    fn dls_returns_start_when_already_on_target() {
        let rig = Rig::nominal();
        let q0 = JointState(rig.start_q(crate::rig::ChainId::Av).to_vec());
        let target = rig.av.tool_pose(q0.as_slice()).unwrap();
        let sol = ik_dls(&rig.av, &q0, &target, &DlsConfig::default()).unwrap();
        assert_eq!(sol.q, q0);
        assert_eq!(sol.report.iterations, 0);
        assert!(sol.report.converged);
    }

    #[test]
    fn dls_rejects_non_positive_lambda() {
        let rig = Rig::nominal();
        let cfg = DlsConfig { lambda: 0.0, ..DlsConfig::default() };
        let q0 = JointState::zeros(6);
        assert!(ik_dls(&rig.left, &q0, &Pose::identity(), &cfg).is_err());
    }

    #[test]
    fn dls_step_respects_damping_bound_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let n = rng.random_range(6..8);
            let jac = nalgebra::DMatrix::from_fn(6, n, |_, _| rng.random_range(-1.0..1.0));
            let e = nalgebra::Vector6::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let lambda: f64 = rng.random_range(0.01..0.5);
            let dq = super::ik::dls_step(&jac, &e, lambda * lambda);
            assert!(dq.norm() <= e.norm() / (2.0 * lambda) + 1e-12);
        }
    }

    #[test]
    fn unreachable_target_reports_not_converged() {
        let rig = Rig::nominal();
        let q0 = JointState(rig.start_q(crate::rig::ChainId::Left).to_vec());
        let far = Pose::from_translation(Vector3::new(3.0, 0.0, 0.0));
        let cfg = DlsConfig { max_iters: 30, ..DlsConfig::default() };
        let sol = ik_dls(&rig.left, &q0, &far, &cfg).unwrap();
        assert!(!sol.report.converged);
        assert_eq!(sol.report.iterations, 30);
        assert!(rig.left.within_limits(sol.q.as_slice()));
    }

    #[test]
    fn regularized_at_center_returns_center() {
        let rig = Rig::nominal();
        let qc = rig.right.centers();
        let target = rig.right.tool_pose(qc.as_slice()).unwrap();
        let sol = ik_regularized(&rig.right, &qc, &target, &RegularizedConfig::default()).unwrap();
        assert_eq!(sol.q, qc);
        assert_eq!(sol.report.iterations, 0);
    }

    #[test]
    fn regularized_rejects_bad_weights() {
        let rig = Rig::nominal();
        let q0 = rig.left.centers();
        let cfg = RegularizedConfig { w_disp: 0.0, ..RegularizedConfig::default() };
        assert!(ik_regularized(&rig.left, &q0, &Pose::identity(), &cfg).is_err());
        let cfg = RegularizedConfig { w_center: -1.0, ..RegularizedConfig::default() };
        assert!(ik_regularized(&rig.left, &q0, &Pose::identity(), &cfg).is_err());
    }

    #[test]
    fn regularized_reduces_to_dls_without_centering() {
        let rig = Rig::nominal();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lambda = 0.05;
        for chain in rig.chains() {
            let q0 = JointState(random_q(chain, &mut rng));
            let mut q1 = q0.0.clone();
            for (qi, j) in q1.iter_mut().zip(&chain.joints) {
                *qi = j.clamp(*qi + rng.random_range(-0.3..0.3));
            }
            let target = chain.tool_pose(&q1).unwrap();
            let dls_cfg = DlsConfig { lambda, max_iters: 40, ..DlsConfig::default() };
            let reg_cfg = RegularizedConfig {
                w_center: 0.0,
                w_disp: lambda * lambda,
                max_iters: 40,
                ..RegularizedConfig::default()
            };
            let mut dls_steps = Vec::new();
            ik_dls_traced(chain, &q0, &target, &dls_cfg, |it| dls_steps.push(it.applied_step.clone())).unwrap();
            let mut reg_steps = Vec::new();
            ik_regularized_traced(chain, &q0, &target, &reg_cfg, |it| reg_steps.push(it.applied_step.clone())).unwrap();
            assert_eq!(dls_steps.len(), reg_steps.len());
            for (a, b) in dls_steps.iter().zip(&reg_steps) {
                assert!((a - b).amax() < 1e-10);
            }
        }
    }

    fn near_target(chain: &KinematicChain, rng: &mut impl Rng) -> (JointState, Pose) {
        let q0 = random_q(chain, rng);
        let dir: Vec<f64> = (0..chain.dof()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let len = rng.random_range(0.0..0.3);
        let q1: Vec<f64> = q0
            .iter()
            .zip(&dir)
            .zip(&chain.joints)
            .map(|((q, d), j)| j.clamp(q + d * len / norm))
            .collect();
        (JointState(q0), chain.tool_pose(&q1).unwrap())
    }

    #[test]
    fn dls_converges_on_nearby_reachable_targets() {
        let rig = Rig::nominal();
        let cfg = DlsConfig::default();
        for (c, chain) in rig.chains().into_iter().enumerate() {
            let mut solved = 0;
            for seed in 0..100 {
                let mut rng = ChaCha8Rng::seed_from_u64(1000 * c as u64 + seed);
                let (q0, target) = near_target(chain, &mut rng);
                let sol = ik_dls_traced(chain, &q0, &target, &cfg, |it| {
                    assert!(it.raw_step.norm() <= it.error.norm() / (2.0 * cfg.lambda) + 1e-12);
                })
                .unwrap();
                let e = pose_error(&chain.tool_pose(sol.q.as_slice()).unwrap(), &target);
                if sol.report.converged && sol.report.iterations <= 200 {
                    assert!(e.fixed_rows::<3>(0).norm() < 1e-4 && e.fixed_rows::<3>(3).norm() < 1e-3);
                    solved += 1;
                }
            }
            assert!(solved >= 99, "{}: {solved}/100", chain.name);
        }
    }

    fn centering_cost(chain: &KinematicChain, q: &[f64]) -> f64 {
        q.iter().zip(&chain.joints).map(|(v, j)| (v - j.center).powi(2)).sum()
    }

    #[test]
    fn regularized_centers_better_than_dls_near_limits() {
        let rig = Rig::nominal();
        let reg_cfg = RegularizedConfig { w_center: 0.01, ..RegularizedConfig::default() };
        let dls_cfg = DlsConfig::default();
        for (c, chain) in rig.chains().into_iter().enumerate() {
            let mut better = 0;
            for seed in 0..100 {
                let mut rng = ChaCha8Rng::seed_from_u64(77 + 1000 * c as u64 + seed);
                let mut q1 = random_q(chain, &mut rng);
                let k = rng.random_range(0..chain.dof());
                let j = &chain.joints[k];
                q1[k] = if rng.random_bool(0.5) { j.limit_hi - rng.random_range(0.0..0.05) } else { j.limit_lo + rng.random_range(0.0..0.05) };
                let target = chain.tool_pose(&q1).unwrap();
                let q0 = JointState(
                    q1.iter().zip(&chain.joints).map(|(v, j)| j.clamp(v + rng.random_range(-0.2..0.2))).collect(),
                );
                let reg = ik_regularized(chain, &q0, &target, &reg_cfg).unwrap();
                let dls = ik_dls(chain, &q0, &target, &dls_cfg).unwrap();
                assert!(chain.within_limits(reg.q.as_slice()));
                if centering_cost(chain, reg.q.as_slice()) <= centering_cost(chain, dls.q.as_slice()) {
                    better += 1;
                }
            }
            assert!(better >= 90, "{}: {better}/100", chain.name);
        }
    }

    proptest::proptest! {
        #[test]
        fn solvers_never_leave_joint_limits(
            seed in 0u64..1_000_000,
            c in 0usize..3,
            tx in -1.5f64..1.5, ty in -1.5f64..1.5, tz in -0.5f64..1.5,
            rv in proptest::array::uniform3(-3.0f64..3.0),
        ) {
            let rig = Rig::nominal();
            let chain = rig.chains()[c];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q0 = JointState(random_q(chain, &mut rng));
            let target = Pose::from_translation_rotvec(Vector3::new(tx, ty, tz), Vector3::from(rv));
            let cfg = RegularizedConfig { max_iters: 60, ..RegularizedConfig::default() };
            let reg = ik_regularized(chain, &q0, &target, &cfg).unwrap();
            for (q, j) in reg.q.as_slice().iter().zip(&chain.joints) {
                proptest::prop_assert!(j.limit_lo <= *q && *q <= j.limit_hi);
            }
            let dls = ik_dls(chain, &q0, &target, &DlsConfig { max_iters: 60, ..DlsConfig::default() }).unwrap();
            proptest::prop_assert!(chain.within_limits(dls.q.as_slice()));
        }

        #[test]
        fn solving_an_achieved_target_is_idempotent(seed in 0u64..1_000_000, c in 0usize..3) {
            let rig = Rig::nominal();
            let chain = rig.chains()[c];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q0 = JointState(random_q(chain, &mut rng));
            let target = chain.tool_pose(q0.as_slice()).unwrap();
            let a = ik_dls(chain, &q0, &target, &DlsConfig::default()).unwrap();
            let b = ik_regularized(chain, &q0, &target, &RegularizedConfig::default()).unwrap();
            proptest::prop_assert_eq!(&a.q, &q0);
            proptest::prop_assert_eq!(&b.q, &q0);
        }
    }
}
