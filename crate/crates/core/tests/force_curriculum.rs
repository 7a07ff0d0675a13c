mod common;

use common::*;
use forceadapt::force_curriculum::*;
use forceadapt::kinematics::{forward_kinematics, gravity_torque, gravity_vector, FramePlacement};
use forceadapt::robot_model::builtin_model;
use nalgebra::{Matrix3xX, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_jacobian<R: Rng>(rng: &mut R, m: usize) -> Matrix3xX<f64> {
    Matrix3xX::from_fn(m, |_, _| rng.random_range(-0.5..0.5))
}

fn budget_gravity(arm: &forceadapt::robot_model::ArmChain, q: &[f64]) -> Vec<f64> {
    gravity_torque(arm, q, &gravity_vector()).iter().map(|h| -h).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn pipeline_output_is_always_feasible(seed in any::<u64>(), side in 0usize..2, alpha in 0.0..=1.0f64) {
        let model = builtin_model("mini-humanoid").unwrap();
        let arm = &model.arms[side];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random_pose(arm, &mut rng);
        let kin = forward_kinematics(arm, &q, &FramePlacement::identity());
        let limits = arm.torque_limits();
        let g = budget_gravity(arm, &q);
        let Ok(env) = admissible_bounds(&kin.ee_com_jacobian(), &limits, &g, DEFAULT_EPSILON) else {
            return Ok(());
        };
        let env = env.clipped(&ClipBox::narrow());
        let gamma = sample_ratios(&mut rng, &[1.0; 3]);
        let f = sample_force(&mut rng, &env, &gamma) * alpha;
        let (point, _) = sample_application_point(&mut rng, &kin.last_joint_origin(), &kin.distal_point);
        let jac = kin.point_jacobian(&point);
        let (fp, s) = project_feasible(&jac, &limits, &g, &f);
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert!(torque_feasible(&jac, &limits, &g, &fp));
    }

    #[test]
    fn zero_gravity_samples_need_no_projection(seed in any::<u64>(), m in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let jac = random_jacobian(&mut rng, m);
        let limits: Vec<f64> = (0..m).map(|_| rng.random_range(0.5..30.0)).collect();
        let zero = vec![0.0; m];
        let env = admissible_bounds(&jac, &limits, &zero, DEFAULT_EPSILON).unwrap();
        let gamma = sample_ratios(&mut rng, &[1.0; 3]);
        let f = sample_force(&mut rng, &env, &gamma);
        prop_assert!(torque_feasible(&jac, &limits, &zero, &f));
        let (_, s) = project_feasible(&jac, &limits, &zero, &f);
        prop_assert_eq!(s, 1.0);
    }

    #[test]
    fn scaling_a_feasible_force_keeps_it_feasible(seed in any::<u64>(), m in 1usize..8, alpha in 0.0..=1.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let jac = random_jacobian(&mut rng, m);
        let limits: Vec<f64> = (0..m).map(|_| rng.random_range(0.5..30.0)).collect();
        let g: Vec<f64> = limits.iter().map(|l| rng.random_range(-0.9..0.9) * l).collect();
        let f = random_vec(&mut rng, 80.0);
        let (fp, _) = project_feasible(&jac, &limits, &g, &f);
        prop_assert!(torque_feasible(&jac, &limits, &g, &fp));
        prop_assert!(torque_feasible(&jac, &limits, &g, &(fp * alpha)));
    }

    #[test]
    fn raising_a_torque_limit_never_shrinks_bounds(seed in any::<u64>(), m in 1usize..8, extra in 0.0..20.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let jac = random_jacobian(&mut rng, m);
        let limits: Vec<f64> = (0..m).map(|_| rng.random_range(0.5..30.0)).collect();
        let g: Vec<f64> = limits.iter().map(|l| rng.random_range(-0.9..0.9) * l).collect();
        let a = admissible_bounds(&jac, &limits, &g, DEFAULT_EPSILON).unwrap();
        let mut raised = limits.clone();
        raised[rng.random_range(0..m)] += extra;
        let b = admissible_bounds(&jac, &raised, &g, DEFAULT_EPSILON).unwrap();
        for i in 0..3 {
            prop_assert!(b.f_max[i] >= a.f_max[i]);
            prop_assert!(b.f_min[i] <= a.f_min[i]);
        }
    }

    #[test]
    fn samples_stay_inside_the_scaled_envelope(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lo = -random_vec(&mut rng, 50.0).abs();
        let hi = random_vec(&mut rng, 50.0).abs();
        let env = ForceEnvelope::unclipped(lo, hi);
        let gamma = sample_ratios(&mut rng, &[1.0; 3]);
        let f = sample_force(&mut rng, &env, &gamma);
        for i in 0..3 {
            prop_assert!(f[i] >= gamma[i] * lo[i] && f[i] <= gamma[i] * hi[i]);
        }
    }

    #[test]
    fn dirichlet_samples_lie_on_the_simplex(seed in any::<u64>(), c in 0.05..10.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = sample_ratios(&mut rng, &[c, c, c]);
        prop_assert!(r.iter().all(|x| *x >= 0.0));
        prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn alpha_stays_in_unit_interval(errors in prop::collection::vec(prop_oneof![0.0..2.0f64, Just(f64::NAN)], 0..600)) {
        let mut s = CurriculumState::new(SchedulerConfig { window: 5, ..Default::default() }, 0.0);
        for e in errors {
            s.update_alpha(e);
            prop_assert!((0.0..=1.0).contains(&s.alpha));
        }
    }

    #[test]
    fn filter_converges_to_a_constant_target(beta in 0.0..0.99f64, x in -50.0..50.0f64) {
        let mut f = ForceFilter::new(beta);
        let t = Vector3::new(x, -x, 0.5 * x);
        let mut out = Vector3::zeros();
        for _ in 0..5000 {
            out = f.apply(&t);
        }
        prop_assert!((out - t).norm() < 1e-6 * (1.0 + t.norm()));
    }
}

#[test]
fn success_feed_raises_alpha_monotonically_to_one() {
    let mut s = CurriculumState::new(SchedulerConfig::default(), 0.0);
    let mut prev = 0.0;
    for _ in 0..10_000 {
        s.update_alpha(0.0);
        assert!(s.alpha >= prev && s.alpha <= 1.0);
        prev = s.alpha;
    }
    assert_eq!(s.alpha, 1.0);
}

#[test]
fn failure_feed_keeps_alpha_at_zero() {
    let mut s = CurriculumState::new(SchedulerConfig::default(), 0.0);
    for _ in 0..10_000 {
        s.record_episode(0.1, true);
        assert_eq!(s.alpha, 0.0);
    }
}

#[test]
fn walking_projection_opposes_motion() {
    let f = Vector3::new(3.0, 4.0, -2.0);
    let p = walking_projection(&f, &nalgebra::Vector2::new(0.5, 0.0));
    assert!((p - Vector3::new(-5.0, 0.0, -2.0)).norm() < 1e-12);
    assert_eq!(walking_projection(&f, &nalgebra::Vector2::new(0.01, 0.0)), f);
}
