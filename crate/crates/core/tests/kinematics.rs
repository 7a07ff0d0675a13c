mod common;

use common::*;
use forceadapt::kinematics::{forward_kinematics, gravity_torque, gravity_vector, FramePlacement, STANDARD_GRAVITY};
use forceadapt::robot_model::{builtin_model, builtin_models};
use forceadapt::sim_env::arm::ArmState;
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn frames_match_homogeneous_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for model in builtin_models() {
        for arm in &model.arms {
            for _ in 0..50 {
                let q = random_pose(arm, &mut rng);
                let base = FramePlacement::from_base_pose(random_vec(&mut rng, 1.0), 0.2, -0.1, 1.3);
                let kin = forward_kinematics(arm, &q, &base);
                let reference = reference_link_frames(arm, &q, &placement_matrix(&base));
                for (f, r) in kin.link_frames.iter().zip(&reference) {
                    let diff = (placement_matrix(f) - r).amax();
                    assert!(diff < 1e-12, "{} {}: {diff}", model.name, arm.side);
                }
                let distal = apply(reference.last().unwrap(), &arm.distal_offset);
                assert!((kin.distal_point - distal).norm() < 1e-12);
            }
        }
    }
}

#[test]
fn frames_stay_orthonormal() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = builtin_model("mini-humanoid").unwrap();
    for arm in &model.arms {
        for _ in 0..200 {
            let q = random_pose(arm, &mut rng);
            let base = FramePlacement::from_base_pose(Vector3::zeros(), 0.3, 0.2, -2.0);
            for f in forward_kinematics(arm, &q, &base).link_frames {
                assert!(f.orthonormality_error() < 1e-9);
            }
        }
    }
}

#[test]
fn linearization_error_is_quadratic() {
    let model = builtin_model("mini-humanoid").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for arm in &model.arms {
        for _ in 0..20 {
            let q = random_pose(arm, &mut rng);
            let local = random_vec(&mut rng, 0.1);
            let kin = forward_kinematics(arm, &q, &FramePlacement::identity());
            let p0 = kin.link_frames.last().unwrap().transform_point(&local);
            let jac = kin.point_jacobian(&p0);
            let dir: Vec<f64> = (0..q.len()).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
            let residual = |eps: f64| {
                let qe: Vec<f64> = q.iter().zip(&dir).map(|(a, d)| a + eps * d).collect();
                let dq = nalgebra::DVector::from_iterator(q.len(), dir.iter().map(|d| eps * d));
                (tip_point(arm, &qe, &local) - p0 - &jac * dq).norm()
            };
            let r1 = residual(1e-2);
            let r2 = residual(5e-3);
            let ratio = r1 / r2;
            assert!((3.0..5.0).contains(&ratio), "halving ratio {ratio}");
        }
    }
}

#[test]
fn held_pose_drifts_less_than_a_milliradian() {
    let model = builtin_model("mini-humanoid").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for arm in &model.arms {
        for _ in 0..20 {
            let mut st = ArmState::new(arm, &vec![1.0; arm.dof()], &vec![0.0; arm.dof()], &vec![0.0; arm.dof()]);
            st.gravity_compensation = false;
            st.q = random_pose(arm, &mut rng);
            let q0 = st.q.clone();
            let tau_g = gravity_torque(arm, &q0, &gravity_vector());
            if tau_g.iter().zip(&arm.torque_limits()).any(|(t, l)| t.abs() > *l) {
                continue;
            }
            for _ in 0..200 {
                let snap = st.snapshot(&FramePlacement::identity(), &gravity_vector());
                let targets = st.q.clone();
                st.substep(&snap, &targets, &tau_g, None, 0.005);
            }
            let drift = st.q.iter().zip(&q0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(drift < 1e-3, "drift {drift}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn jacobian_matches_finite_differences(seed in any::<u64>(), side in 0usize..2) {
        let model = builtin_model("mini-humanoid").unwrap();
        let arm = &model.arms[side];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random_pose(arm, &mut rng);
        let local = random_vec(&mut rng, 0.15);
        let point = forward_kinematics(arm, &q, &FramePlacement::identity())
            .link_frames.last().unwrap().transform_point(&local);
        let analytic = forceadapt::kinematics::point_jacobian(arm, &q, &FramePlacement::identity(), &point);
        let fd = fd_jacobian(arm, &q, &local, 1e-6);
        for (a, b) in analytic.iter().zip(fd.iter()) {
            prop_assert!(rel_err(*a, *b, 1e-3) < 1e-5, "{a} vs {b}");
        }
        prop_assert!((to_last_link(arm, &q, &point) - local).norm() < 1e-12);
    }

    #[test]
    fn gravity_torque_is_potential_gradient(seed in any::<u64>(), side in 0usize..2) {
        let model = builtin_model("mini-humanoid").unwrap();
        let arm = &model.arms[side];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random_pose(arm, &mut rng);
        let tau = gravity_torque(arm, &q, &gravity_vector());
        let grad = fd_potential_gradient(arm, &q, STANDARD_GRAVITY, 1e-6);
        for (a, b) in tau.iter().zip(&grad) {
            prop_assert!(rel_err(*a, *b, 1e-3) < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn base_translation_does_not_change_jacobian(seed in any::<u64>(), dx in -2.0..2.0f64, dy in -2.0..2.0f64) {
        let model = builtin_model("mini-humanoid").unwrap();
        let arm = &model.arms[0];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random_pose(arm, &mut rng);
        let a = forward_kinematics(arm, &q, &FramePlacement::identity()).ee_com_jacobian();
        let shifted = FramePlacement::from_base_pose(Vector3::new(dx, dy, 0.5), 0.0, 0.0, 0.0);
        let b = forward_kinematics(arm, &q, &shifted).ee_com_jacobian();
        prop_assert!((a - b).amax() < 1e-12);
    }
}
