use std::sync::Arc;

use forceadapt::force_curriculum::torque_feasible;
use forceadapt::robot_model::builtin_model;
use forceadapt::sim_env::goals::GoalCommandLower;
use forceadapt::sim_env::rewards::{compute_rewards, Agent, RewardInputs, RewardWeights};
use forceadapt::sim_env::{Env, EnvConfig, ForceMode, Observation, HISTORY};
use forceadapt::trainer::policy::Role;
use nalgebra::{DVector, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn quiet_config() -> EnvConfig {
    let mut cfg = EnvConfig::new(builtin_model("mini-humanoid").unwrap()).unwrap();
    cfg.randomization = None;
    cfg.goals.stance_probability = 1.0;
    cfg.goals.height_fraction = (1.0, 1.0);
    cfg.goals.waist_yaw = 0.0;
    cfg.goals.waypoint_range = 0.0;
    cfg.init_noise = 0.0;
    cfg
}

fn random_action<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[test]
fn histories_shift_one_slot_per_step() {
    let cfg = Arc::new(EnvConfig::new(builtin_model("mini-humanoid").unwrap()).unwrap());
    let mut env = Env::new(cfg.clone(), 5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = cfg.dof();
    for _ in 0..30 {
        let before = env.observation().clone();
        let a = random_action(&mut rng, n);
        let r = env.step(&a).unwrap();
        if r.done() {
            env.reset();
            continue;
        }
        let after = env.observation();
        for k in 0..HISTORY - 1 {
            assert_eq!(
                Observation::slot(&after.joint_pos, n, k),
                Observation::slot(&before.joint_pos, n, k + 1)
            );
            assert_eq!(
                Observation::slot(&after.prev_action, n, k),
                Observation::slot(&before.prev_action, n, k + 1)
            );
            assert_eq!(
                Observation::slot(&after.projected_gravity, 3, k),
                Observation::slot(&before.projected_gravity, 3, k + 1)
            );
        }
        let (q, qd) = env.joint_state();
        assert_eq!(after.newest_joint_pos(), q.as_slice());
        assert_eq!(Observation::slot(&after.joint_vel, n, HISTORY - 1), qd.as_slice());
        assert_eq!(after.newest_prev_action(), a.as_slice());
    }
}

#[test]
fn reset_initializes_histories() {
    let cfg = Arc::new(quiet_config());
    let env = Env::new(cfg.clone(), 1);
    let obs = env.observation();
    assert!(obs.prev_action.iter().all(|a| *a == 0.0));
    for k in 0..HISTORY {
        let g = Observation::slot(&obs.projected_gravity, 3, k);
        assert!((g[0]).abs() < 1e-12 && (g[1]).abs() < 1e-12 && (g[2] + 1.0).abs() < 1e-12);
    }
    let again = Env::new(cfg, 1);
    assert_eq!(env.observation(), again.observation());
}

#[test]
fn equal_seeds_give_bit_identical_trajectories() {
    let cfg = Arc::new(EnvConfig::new(builtin_model("mini-humanoid").unwrap()).unwrap());
    let mut a = Env::new(cfg.clone(), 77);
    let mut b = Env::new(cfg.clone(), 77);
    a.set_alpha(1.0);
    b.set_alpha(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..300 {
        let act = random_action(&mut rng, cfg.dof());
        let ra = a.step(&act).unwrap();
        let rb = b.step(&act).unwrap();
        assert_eq!(ra.reward_lower.to_bits(), rb.reward_lower.to_bits());
        assert_eq!(ra.reward_upper.to_bits(), rb.reward_upper.to_bits());
        let (qa, va) = a.joint_state();
        let (qb, vb) = b.joint_state();
        assert!(qa.iter().zip(&qb).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(va.iter().zip(&vb).all(|(x, y)| x.to_bits() == y.to_bits()));
        if ra.done() {
            a.reset();
            b.reset();
        }
    }
}

#[test]
fn step_rewards_equal_their_breakdowns() {
    let cfg = Arc::new(EnvConfig::new(builtin_model("mini-humanoid").unwrap()).unwrap());
    let mut env = Env::new(cfg.clone(), 3);
    env.set_alpha(0.7);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let r = env.step(&random_action(&mut rng, cfg.dof())).unwrap();
        assert_eq!(r.breakdown.total(Agent::Lower).to_bits(), r.reward_lower.to_bits());
        assert_eq!(r.breakdown.total(Agent::Upper).to_bits(), r.reward_upper.to_bits());
        if r.done() {
            env.reset();
        }
    }
}

#[test]
fn rewards_decompose_by_agent() {
    let walk = GoalCommandLower {
        lin_vel_xy: Vector2::new(0.4, 0.1),
        ang_vel_yaw: -0.2,
        stance: false,
        root_height: 0.5,
        waist_yaw: 0.0,
    };
    let other = GoalCommandLower {
        lin_vel_xy: Vector2::new(-0.3, 0.2),
        ang_vel_yaw: 0.5,
        ..walk
    };
    let q = [0.2, -0.1, 0.4, 0.3, 0.0, 0.1, -0.2, 0.5];
    let t1 = [0.1, 0.0, 0.5, 0.2, 0.1, 0.0, 0.0, 0.3];
    let t2 = [-0.4, 0.3, 0.1, 0.6, -0.2, 0.2, 0.4, 0.0];
    let la = [0.1, -0.2, 0.0, 0.3];
    let ua = [0.2; 8];
    let tau = [1.0; 8];
    let wrench = [3.0, -1.0, 0.5, 0.2];
    let a = RewardInputs {
        command: &walk,
        lin_vel_xy: Vector2::new(0.35, 0.05),
        yaw_rate: 0.1,
        height: 0.48,
        default_height: 0.5,
        yaw_offset: 0.05,
        roll: 0.02,
        pitch: -0.03,
        support_offset: Vector2::new(0.01, 0.0),
        upper_q: &q,
        upper_target: &t1,
        lower_action: &la,
        lower_prev_action: &[0.0; 4],
        upper_action: &ua,
        upper_prev_action: &[0.0; 8],
        upper_torque: &tau,
        lower_wrench: &wrench,
        upper_limit_excess: 0.0,
        lower_limit_excess: 0.0,
    };
    let b = RewardInputs { command: &other, ..a.clone() };
    let c = RewardInputs { upper_target: &t2, ..a.clone() };
    let w = RewardWeights::default();
    let (l_a, u_a, _) = compute_rewards(&a, &w);
    let (l_b, u_b, _) = compute_rewards(&b, &w);
    let (l_c, u_c, _) = compute_rewards(&c, &w);
    assert_eq!(u_a.to_bits(), u_b.to_bits());
    assert_ne!(l_a, l_b);
    assert_eq!(l_a.to_bits(), l_c.to_bits());
    assert_ne!(u_a, u_c);
}

#[test]
fn unforced_arm_energy_never_grows() {
    let mut cfg = quiet_config();
    cfg.force.mode = ForceMode::Disabled;
    cfg.init_noise = 0.05;
    let cfg = Arc::new(cfg);
    let mut env = Env::new(cfg.clone(), 11);
    let defaults = env.upper_default().to_vec();
    let energy = |env: &Env| {
        env.arms
            .iter()
            .flat_map(|a| {
                a.q.iter()
                    .zip(&a.qd)
                    .zip(&a.kp)
                    .zip(&a.nominal.joints)
                    .map(|(((q, qd), kp), j)| (*q, *qd, *kp, j.effective_inertia))
                    .collect::<Vec<_>>()
            })
            .zip(&defaults)
            .map(|((q, qd, kp, i), d)| 0.5 * i * qd * qd + 0.5 * kp * (q - d) * (q - d))
            .sum::<f64>()
    };
    let mut e = energy(&env);
    assert!(e > 0.0);
    let zero = vec![0.0; cfg.dof()];
    for _ in 0..500 {
        env.step(&zero).unwrap();
        let e2 = energy(&env);
        assert!(e2 <= e + 1e-6, "{e} -> {e2}");
        e = e2;
    }
}

#[test]
fn constant_tip_load_matches_linear_spring_deflection() {
    let mut cfg = quiet_config();
    cfg.force.mode = ForceMode::Disabled;
    let cfg = Arc::new(cfg);
    let mut env = Env::new(cfg.clone(), 2);
    let f = Vector3::new(0.0, 0.0, -20.0);
    let snaps = env.snapshots();
    let defaults = env.upper_default().to_vec();
    let mut predicted = Vec::new();
    for (arm, snap) in env.arms.iter().zip(&snaps) {
        let jac = snap.kin.point_jacobian(&snap.kin.distal_point);
        for j in 0..arm.dof() {
            predicted.push(jac.column(j).dot(&f) / arm.kp[j]);
        }
    }
    env.set_force_override(Some([f, f]));
    let hold = env.action_for_targets(&defaults);
    for _ in 0..500 {
        env.step(&hold).unwrap();
    }
    let q = env.upper_q();
    let measured = DVector::from_iterator(q.len(), q.iter().zip(&defaults).map(|(a, b)| a - b));
    let predicted = DVector::from_vec(predicted);
    let rel = (&measured - &predicted).norm() / predicted.norm();
    assert!(predicted.norm() > 0.01, "load too small to test");
    assert!(rel < 0.2, "measured {measured:?} predicted {predicted:?}");
}

#[test]
fn applied_forces_are_feasible_where_applied() {
    let mut cfg = EnvConfig::new(builtin_model("mini-humanoid").unwrap()).unwrap();
    // one substep per step, so the pre-step pose is the pose the force saw
    cfg.decimation = 1;
    cfg.force.resample_interval = (0.05, 0.2);
    cfg.force.filter_beta = 0.0;
    let cfg = Arc::new(cfg);
    let mut env = Env::new(cfg.clone(), 21);
    env.set_alpha(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut forced = 0;
    for _ in 0..10_000 {
        let snaps = env.snapshots();
        let r = env.step(&random_action(&mut rng, cfg.dof())).unwrap();
        for ((arm, snap), ch) in env.arms.iter().zip(&snaps).zip(&env.forces) {
            if ch.applied == Vector3::zeros() {
                continue;
            }
            forced += 1;
            let jac = snap.kin.point_jacobian(&ch.application_point);
            let limits = arm.nominal.torque_limits();
            assert!(torque_feasible(&jac, &limits, &snap.budget_gravity(), &ch.applied));
            assert!(ch.applied.z >= -60.0 - 1e-9 && ch.applied.z <= 5.0 + 1e-9);
        }
        if r.done() {
            env.reset();
            env.set_alpha(1.0);
        }
    }
    assert!(forced > 5_000, "only {forced} forced arm-steps");
}

#[test]
fn monolithic_reward_is_the_sum_of_both_streams() {
    let cfg = Arc::new(EnvConfig::new(builtin_model("mini-humanoid").unwrap()).unwrap());
    let mut env = Env::new(cfg.clone(), 9);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let r = env.step(&random_action(&mut rng, cfg.dof())).unwrap();
        let (l, u) = (r.reward_lower, r.reward_upper);
        assert_eq!(Role::Whole.reward(l, u).to_bits(), (r.breakdown.total(Agent::Lower) + r.breakdown.total(Agent::Upper)).to_bits());
        assert_eq!(Role::Lower.reward(l, u).to_bits(), l.to_bits());
        assert_eq!(Role::Upper.reward(l, u).to_bits(), u.to_bits());
        if r.done() {
            env.reset();
        }
    }
}
