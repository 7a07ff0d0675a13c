//! Desk-scale loco-manipulation environment: a reduced-order floating base
//! carrying fully articulated arms, with external end-effector forces driven
//! by the force curriculum, procedural goals and dynamics randomization.
//!
//! Joint ordering everywhere is `[lower (4) | left arm | right arm]`.

pub mod arm;
pub mod base;
pub mod goals;
pub mod randomization;
pub mod rewards;
pub mod trajectory;

use std::collections::VecDeque;
use std::sync::Arc;

use nalgebra::{Matrix3xX, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ModelError, SimError};
use crate::force_curriculum::{
    admissible_bounds, naive_envelope, project_feasible, sample_ratios, walking_projection,
    ClipBox, ForceEnvelope, ForceFilter, DEFAULT_EPSILON, DEFAULT_FILTER_BETA,
};
use crate::robot_model::RobotModel;

use arm::{ArmSnapshot, ArmState};
use base::{BaseCommand, BaseLoads, BaseParams, BaseState};
use goals::{sample_lower_command, waypoint_bounds, GoalCommandLower, GoalSchedule, UpperTrajectory};
use randomization::{randomize, DomainRandomizationDraw, RandomizationRanges};
use rewards::{compute_rewards, RewardBreakdown, RewardInputs, RewardWeights};

pub const HISTORY: usize = 5;
pub const LOWER_DOF: usize = 4;
/// Size of the lower goal feature block.
pub const LOWER_GOAL_DIM: usize = 6;
pub const PRIVILEGED_DIM: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForceMode {
    /// Torque-limit-aware envelope with feasibility projection.
    TorqueAware,
    /// Clip box only; no torque reasoning.
    Naive,
    Disabled,
}

impl ForceMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::TorqueAware => "torque_aware",
            Self::Naive => "naive",
            Self::Disabled => "disabled",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForceConfig {
    pub mode: ForceMode,
    pub clip: ClipBox,
    pub concentration: [f64; 3],
    pub filter_beta: f64,
    /// Seconds between force resamples, per end effector.
    pub resample_interval: (f64, f64),
    pub epsilon: f64,
    /// Keep the first sample for the whole episode.
    pub constant: bool,
    pub walking_projection: bool,
}

impl Default for ForceConfig {
    fn default() -> Self {
        Self {
            mode: ForceMode::TorqueAware,
            clip: ClipBox::narrow(),
            concentration: [1.0; 3],
            filter_beta: DEFAULT_FILTER_BETA,
            resample_interval: (2.0, 5.0),
            epsilon: DEFAULT_EPSILON,
            constant: false,
            walking_projection: true,
        }
    }
}

/// Fixed per-channel observation scales.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObsScales {
    pub lower_pos: f64,
    pub upper_pos: f64,
    pub joint_vel: f64,
    pub ang_vel: f64,
    pub action: f64,
    pub lin_vel: f64,
    pub force: f64,
}

impl Default for ObsScales {
    fn default() -> Self {
        Self {
            lower_pos: 2.0,
            upper_pos: 1.0,
            joint_vel: 0.1,
            ang_vel: 0.25,
            action: 0.2,
            lin_vel: 1.0,
            force: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub model: RobotModel,
    pub dt: f64,
    pub decimation: usize,
    pub episode_seconds: f64,
    pub goals: GoalSchedule,
    /// `None` runs the nominal system.
    pub randomization: Option<RandomizationRanges>,
    pub rewards: RewardWeights,
    pub base: BaseParams,
    pub force: ForceConfig,
    pub upper_action_scale: f64,
    /// Heading-frame twist per unit lower action: vx, vy, vz, yaw rate.
    pub lower_action_scale: [f64; 4],
    pub action_clip: f64,
    pub fall_height_fraction: f64,
    pub fall_tilt: f64,
    pub init_noise: f64,
    pub gravity_compensation: bool,
    pub obs_scales: ObsScales,
}

impl EnvConfig {
    pub fn new(model: RobotModel) -> Result<Self, ModelError> {
        if model.lower_dof_count != LOWER_DOF {
            return Err(ModelError::Validation {
                field: "lower_dof_count".into(),
                reason: format!(
                    "the environment needs {LOWER_DOF} lower coordinates, model has {}",
                    model.lower_dof_count
                ),
            });
        }
        if model.base.mass <= 0.0 || model.base.default_height <= 0.0 {
            return Err(ModelError::Validation {
                field: "base".into(),
                reason: "the environment needs a base with positive mass and height".into(),
            });
        }
        Ok(Self {
            model,
            dt: 0.005,
            decimation: 4,
            episode_seconds: 20.0,
            goals: GoalSchedule::default(),
            randomization: Some(RandomizationRanges::default()),
            rewards: RewardWeights::default(),
            base: BaseParams::default(),
            force: ForceConfig::default(),
            upper_action_scale: 0.5,
            lower_action_scale: [1.0, 0.5, 0.5, 1.0],
            action_clip: 5.0,
            fall_height_fraction: 0.3,
            fall_tilt: 1.0,
            init_noise: 0.05,
            gravity_compensation: true,
            obs_scales: ObsScales::default(),
        })
    }

    pub fn control_dt(&self) -> f64 {
        self.dt * self.decimation as f64
    }

    pub fn upper_dof(&self) -> usize {
        self.model.upper_dof_count()
    }

    pub fn dof(&self) -> usize {
        LOWER_DOF + self.upper_dof()
    }

    pub fn max_episode_steps(&self) -> usize {
        (self.episode_seconds / self.control_dt()).round() as usize
    }

    pub fn proprio_dim(&self) -> usize {
        HISTORY * (3 * self.dof() + 6)
    }

    pub fn upper_goal_dim(&self) -> usize {
        self.upper_dof()
    }

    pub fn upper_defaults(&self) -> Vec<f64> {
        self.model.arms.iter().flat_map(|a| a.default_positions()).collect()
    }
}

/// Five-step proprioceptive history, oldest slot first.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub dof: usize,
    pub joint_pos: Vec<f64>,
    pub joint_vel: Vec<f64>,
    pub root_ang_vel: Vec<f64>,
    pub projected_gravity: Vec<f64>,
    pub prev_action: Vec<f64>,
}

fn shift_in(buf: &mut [f64], width: usize, newest: &[f64]) {
    buf.copy_within(width.., 0);
    let n = buf.len();
    buf[n - width..].copy_from_slice(newest);
}

impl Observation {
    pub fn filled(q: &[f64], qd: &[f64], w: &Vector3<f64>, g: &Vector3<f64>) -> Self {
        let dof = q.len();
        Self {
            dof,
            joint_pos: q.repeat(HISTORY),
            joint_vel: qd.repeat(HISTORY),
            root_ang_vel: w.as_slice().repeat(HISTORY),
            projected_gravity: g.as_slice().repeat(HISTORY),
            prev_action: vec![0.0; HISTORY * dof],
        }
    }

    pub fn push(&mut self, q: &[f64], qd: &[f64], w: &Vector3<f64>, g: &Vector3<f64>, a: &[f64]) {
        shift_in(&mut self.joint_pos, self.dof, q);
        shift_in(&mut self.joint_vel, self.dof, qd);
        shift_in(&mut self.root_ang_vel, 3, w.as_slice());
        shift_in(&mut self.projected_gravity, 3, g.as_slice());
        shift_in(&mut self.prev_action, self.dof, a);
    }

    pub fn slot<'a>(buf: &'a [f64], width: usize, k: usize) -> &'a [f64] {
        &buf[k * width..(k + 1) * width]
    }

    pub fn newest_joint_pos(&self) -> &[f64] {
        Self::slot(&self.joint_pos, self.dof, HISTORY - 1)
    }

    pub fn newest_prev_action(&self) -> &[f64] {
        Self::slot(&self.prev_action, self.dof, HISTORY - 1)
    }

    /// Scaled feature vector; arm positions are taken relative to `upper_default`.
    pub fn write_features(&self, scales: &ObsScales, upper_default: &[f64], out: &mut Vec<f32>) {
        for k in 0..HISTORY {
            let q = Self::slot(&self.joint_pos, self.dof, k);
            for (i, v) in q.iter().enumerate() {
                let f = if i < LOWER_DOF {
                    v * scales.lower_pos
                } else {
                    (v - upper_default[i - LOWER_DOF]) * scales.upper_pos
                };
                out.push(f as f32);
            }
        }
        out.extend(self.joint_vel.iter().map(|v| (v * scales.joint_vel) as f32));
        out.extend(self.root_ang_vel.iter().map(|v| (v * scales.ang_vel) as f32));
        out.extend(self.projected_gravity.iter().map(|v| *v as f32));
        out.extend(self.prev_action.iter().map(|v| (v * scales.action) as f32));
    }

    /// Estimator input: all histories except the arm part of past actions.
    pub fn write_estimator_features(&self, scales: &ObsScales, upper_default: &[f64], out: &mut Vec<f32>) {
        let start = out.len();
        self.write_features(scales, upper_default, out);
        let action_start = start + HISTORY * (2 * self.dof + 6);
        let lower: Vec<f32> = (0..HISTORY)
            .flat_map(|k| {
                let a = Self::slot(&self.prev_action, self.dof, k);
                a[..LOWER_DOF].iter().map(|v| (v * scales.action) as f32).collect::<Vec<_>>()
            })
            .collect();
        out.truncate(action_start);
        out.extend(lower);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivilegedObservation {
    /// Heading-frame base linear velocity.
    pub root_lin_vel: Vector3<f64>,
    /// Applied end-effector forces (world frame), left then right.
    pub ee_forces: [Vector3<f64>; 2],
}

impl PrivilegedObservation {
    pub fn write_features(&self, scales: &ObsScales, out: &mut Vec<f32>) {
        out.extend(self.root_lin_vel.iter().map(|v| (v * scales.lin_vel) as f32));
        for f in &self.ee_forces {
            out.extend(f.iter().map(|v| (v * scales.force) as f32));
        }
    }

    pub fn force_vector(&self) -> [f64; 6] {
        let [l, r] = self.ee_forces;
        [l.x, l.y, l.z, r.x, r.y, r.z]
    }
}

/// Held random variates of one end effector's force sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ForceChannel {
    pub ratios: [f64; 3],
    /// Position of the sample inside each axis interval, in [0, 1].
    pub uniforms: [f64; 3],
    /// Application point parameter along the wrist-to-tip segment.
    pub point_param: f64,
    pub next_resample: f64,
    pub filter: ForceFilter,
    /// Raw sample at the current pose.
    pub raw: Vector3<f64>,
    /// Filtered and alpha-scaled force before projection.
    pub target: Vector3<f64>,
    pub applied: Vector3<f64>,
    pub feasibility_scale: f64,
    pub application_point: Vector3<f64>,
    pub envelope: Option<ForceEnvelope>,
}

impl ForceChannel {
    fn new(beta: f64) -> Self {
        Self {
            ratios: [1.0 / 3.0; 3],
            uniforms: [0.5; 3],
            point_param: 1.0,
            next_resample: 0.0,
            filter: ForceFilter::new(beta),
            raw: Vector3::zeros(),
            target: Vector3::zeros(),
            applied: Vector3::zeros(),
            feasibility_scale: 1.0,
            application_point: Vector3::zeros(),
            envelope: None,
        }
    }

    fn resample<R: Rng + ?Sized>(&mut self, rng: &mut R, cfg: &ForceConfig, now: f64) {
        self.ratios = sample_ratios(rng, &cfg.concentration);
        for u in &mut self.uniforms {
            *u = rng.random();
        }
        self.point_param = rng.random();
        let (lo, hi) = cfg.resample_interval;
        let dt = if hi > lo { rng.random_range(lo..hi) } else { lo };
        self.next_resample = if cfg.constant { f64::INFINITY } else { now + dt };
    }

    /// Force per the held variates: axis `i` is
    /// `γ_i (f_min + u_i (f_max - f_min))`, uniform on `[γ_i f_min, γ_i f_max]`.
    pub fn sample_in(&self, env: &ForceEnvelope) -> Vector3<f64> {
        Vector3::from_fn(|i, _| {
            let lo = self.ratios[i] * env.f_min[i];
            let hi = self.ratios[i] * env.f_max[i];
            lo + self.uniforms[i] * (hi - lo)
        })
    }
}

/// Aggregates for the running episode.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpisodeStats {
    pub steps: usize,
    pub upper_error_sum: f64,
    pub root_error_sum: [f64; 3],
    pub reward_lower: f64,
    pub reward_upper: f64,
    pub feasibility_sum: f64,
    pub feasibility_count: usize,
    pub infeasible_gravity: usize,
    pub force_magnitude_sum: f64,
}

impl EpisodeStats {
    pub fn mean_upper_error(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.upper_error_sum / self.steps as f64
        }
    }

    /// Per-channel mean root error: vx, vy (m/s) and yaw rate (rad/s).
    pub fn mean_root_errors(&self) -> [f64; 3] {
        let n = self.steps.max(1) as f64;
        self.root_error_sum.map(|s| s / n)
    }

    pub fn mean_root_error(&self) -> f64 {
        self.mean_root_errors().iter().sum::<f64>() / 3.0
    }

    pub fn mean_feasibility(&self) -> f64 {
        if self.feasibility_count == 0 {
            1.0
        } else {
            self.feasibility_sum / self.feasibility_count as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeSummary {
    pub stats: EpisodeStats,
    pub fell: bool,
    pub alpha: f64,
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub privileged: PrivilegedObservation,
    pub reward_lower: f64,
    pub reward_upper: f64,
    pub breakdown: RewardBreakdown,
    pub terminated: bool,
    pub truncated: bool,
    /// Set on the final step of an episode.
    pub episode: Option<EpisodeSummary>,
}

impl StepResult {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

#[derive(Debug, Clone)]
pub struct Env {
    cfg: Arc<EnvConfig>,
    rng: ChaCha8Rng,
    upper_default: Vec<f64>,
    waypoint_bounds: Vec<(f64, f64)>,
    pub draw: DomainRandomizationDraw,
    pub base: BaseState,
    pub arms: Vec<ArmState>,
    pub lower_goal: GoalCommandLower,
    pub upper_goal: UpperTrajectory,
    pub forces: Vec<ForceChannel>,
    alpha: f64,
    force_override: Option<[Vector3<f64>; 2]>,
    obs: Observation,
    action_queue: VecDeque<Vec<f64>>,
    upper_feedforward: Vec<f64>,
    time: f64,
    step_count: usize,
    next_command: f64,
    next_push: f64,
    mass: f64,
    yaw_inertia: f64,
    tilt_inertia: Vector2<f64>,
    stats: EpisodeStats,
    pub infeasible_gravity_total: usize,
}

impl Env {
    pub fn new(cfg: Arc<EnvConfig>, seed: u64) -> Self {
        let model = &cfg.model;
        let upper_default = cfg.upper_defaults();
        let waypoint_bounds = waypoint_bounds(model, cfg.goals.waypoint_range);
        let draw = DomainRandomizationDraw::nominal(model);
        let arms = model
            .arms
            .iter()
            .map(|a| ArmState::new(a, &vec![1.0; a.dof()], &vec![1.0; a.dof()], &vec![1.0; a.dof()]))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let upper_goal = UpperTrajectory::new(
            &mut rng,
            upper_default.clone(),
            waypoint_bounds.clone(),
            cfg.goals.waypoint_interval,
            0.0,
        );
        let beta = cfg.force.filter_beta;
        let nu = cfg.upper_dof();
        let dof = cfg.dof();
        let mut env = Self {
            base: BaseState::new(model.base.default_height),
            lower_goal: GoalCommandLower::standing(model.base.default_height),
            forces: (0..model.arms.len()).map(|_| ForceChannel::new(beta)).collect(),
            obs: Observation::filled(&vec![0.0; dof], &vec![0.0; dof], &Vector3::zeros(), &Vector3::zeros()),
            upper_feedforward: vec![0.0; nu],
            cfg,
            rng,
            upper_default,
            waypoint_bounds,
            draw,
            arms,
            upper_goal,
            alpha: 0.0,
            force_override: None,
            action_queue: VecDeque::new(),
            time: 0.0,
            step_count: 0,
            next_command: 0.0,
            next_push: 0.0,
            mass: 0.0,
            yaw_inertia: 0.0,
            tilt_inertia: Vector2::zeros(),
            stats: EpisodeStats::default(),
            infeasible_gravity_total: 0,
        };
        env.reset();
        env
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn config_arc(&self) -> &Arc<EnvConfig> {
        &self.cfg
    }

    pub fn observation(&self) -> &Observation {
        &self.obs
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Global force scale; takes effect from the next step.
    pub fn set_alpha(&mut self, alpha: f64) {
        self.alpha = alpha.clamp(0.0, 1.0);
    }

    /// Replaces the curriculum with fixed world-frame forces at the distal
    /// points (no projection, no alpha). `None` restores the curriculum.
    pub fn set_force_override(&mut self, forces: Option<[Vector3<f64>; 2]>) {
        self.force_override = forces;
    }

    /// Extra arm torque added before clamping, used by model-based upper controllers.
    pub fn set_upper_feedforward(&mut self, tau: &[f64]) {
        self.upper_feedforward.copy_from_slice(tau);
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    pub fn stats(&self) -> &EpisodeStats {
        &self.stats
    }

    pub fn upper_default(&self) -> &[f64] {
        &self.upper_default
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    /// Arm target for the end of the coming control step.
    pub fn upper_target(&self) -> Vec<f64> {
        self.upper_goal.target(self.time + self.cfg.control_dt())
    }

    pub fn upper_q(&self) -> Vec<f64> {
        self.arms.iter().flat_map(|a| a.q.iter().copied()).collect()
    }

    pub fn upper_qd(&self) -> Vec<f64> {
        self.arms.iter().flat_map(|a| a.qd.iter().copied()).collect()
    }

    pub fn snapshots(&self) -> Vec<ArmSnapshot> {
        let base = self.base.placement();
        let g = BaseState::gravity();
        self.arms.iter().map(|a| a.snapshot(&base, &g)).collect()
    }

    /// Jacobians at each end-effector link's centre of mass (world frame).
    pub fn ee_com_jacobians(&self) -> Vec<Matrix3xX<f64>> {
        self.snapshots().iter().map(|s| s.kin.ee_com_jacobian()).collect()
    }

    pub fn reset(&mut self) -> &Observation {
        let cfg = Arc::clone(&self.cfg);
        let model = &cfg.model;
        self.draw = match &cfg.randomization {
            Some(r) => randomize(&mut self.rng, model, r),
            None => DomainRandomizationDraw::nominal(model),
        };
        let mut link_off = 0;
        let mut joint_off = 0;
        self.arms.clear();
        for chain in &model.arms {
            let nl = chain.links.len();
            let nj = chain.dof();
            let mut st = ArmState::new(
                chain,
                &self.draw.link_mass_scale[link_off..link_off + nl],
                &self.draw.kp_scale[joint_off..joint_off + nj],
                &self.draw.kd_scale[joint_off..joint_off + nj],
            );
            st.gravity_compensation = cfg.gravity_compensation;
            for (q, j) in st.q.iter_mut().zip(&chain.joints) {
                let noise = if cfg.init_noise > 0.0 {
                    self.rng.random_range(-cfg.init_noise..=cfg.init_noise)
                } else {
                    0.0
                };
                *q = (*q + noise).clamp(j.position_limits.0, j.position_limits.1);
            }
            link_off += nl;
            joint_off += nj;
            self.arms.push(st);
        }
        self.base = BaseState::new(model.base.default_height);
        let arm_mass: f64 = self.arms.iter().map(|a| a.masses.iter().sum::<f64>()).sum();
        self.mass = (model.base.mass + self.draw.base_mass_offset).max(0.1 * model.base.mass) + arm_mass;
        let reach: f64 = model.arms.iter().map(|a| a.total_mass() * a.mount().xy().norm_squared()).sum();
        self.yaw_inertia = model.base.inertia.z + reach;
        let lever = 0.5 * model.base.default_height;
        self.tilt_inertia = Vector2::new(
            model.base.inertia.x + self.mass * lever * lever,
            model.base.inertia.y + self.mass * lever * lever,
        );

        self.time = 0.0;
        self.step_count = 0;
        self.lower_goal = sample_lower_command(&mut self.rng, &cfg.goals, model.base.default_height);
        self.next_command = self.sample_interval(cfg.goals.command_interval);
        self.upper_goal = UpperTrajectory::new(
            &mut self.rng,
            self.upper_default.clone(),
            self.waypoint_bounds.clone(),
            cfg.goals.waypoint_interval,
            0.0,
        );
        self.next_push = if self.draw.push_interval > 0.0 {
            self.draw.push_interval
        } else {
            f64::INFINITY
        };
        for ch in &mut self.forces {
            ch.filter.reset();
            ch.resample(&mut self.rng, &cfg.force, 0.0);
            ch.raw = Vector3::zeros();
            ch.target = Vector3::zeros();
            ch.applied = Vector3::zeros();
            ch.feasibility_scale = 1.0;
        }
        self.upper_feedforward.iter_mut().for_each(|t| *t = 0.0);
        self.action_queue.clear();
        self.stats = EpisodeStats::default();

        let (q, qd) = self.joint_state();
        let w = self.base.angular_velocity();
        let g = self.base.projected_gravity();
        self.obs = Observation::filled(&q, &qd, &w, &g);
        &self.obs
    }

    fn sample_interval(&mut self, (lo, hi): (f64, f64)) -> f64 {
        self.time + if hi > lo { self.rng.random_range(lo..hi) } else { lo }
    }

    pub fn joint_state(&self) -> (Vec<f64>, Vec<f64>) {
        let (ql, qdl) = self.base.lower_coordinates();
        let mut q = ql.to_vec();
        let mut qd = qdl.to_vec();
        for a in &self.arms {
            q.extend_from_slice(&a.q);
            qd.extend_from_slice(&a.qd);
        }
        (q, qd)
    }

    fn check_action(&self, action: &[f64]) -> Result<(), SimError> {
        let n = self.cfg.dof();
        if action.len() != n {
            return Err(SimError::ActionLength {
                expected: n,
                got: action.len(),
            });
        }
        if let Some((index, value)) = action.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(SimError::NonFiniteAction { index, value: *value });
        }
        Ok(())
    }

    /// Control-rate part of the force pipeline: pre-projection force targets.
    fn update_force_targets(&mut self, snaps: &[ArmSnapshot]) {
        let cfg = Arc::clone(&self.cfg);
        let fc = &cfg.force;
        let planar_cmd = self.base.from_heading(&self.lower_goal.lin_vel_xy);
        for (k, snap) in snaps.iter().enumerate() {
            if self.time >= self.forces[k].next_resample {
                let now = self.time;
                self.forces[k].resample(&mut self.rng, fc, now);
            }
            let ch = &mut self.forces[k];
            let chain = &self.arms[k].nominal;
            let envelope = match fc.mode {
                ForceMode::Disabled => None,
                ForceMode::Naive => Some(naive_envelope(&fc.clip)),
                ForceMode::TorqueAware => {
                    let jac = snap.kin.ee_com_jacobian();
                    match admissible_bounds(&jac, &chain.torque_limits(), &snap.budget_gravity(), fc.epsilon) {
                        Ok(env) => Some(env.clipped(&fc.clip)),
                        Err(_) => {
                            self.stats.infeasible_gravity += 1;
                            self.infeasible_gravity_total += 1;
                            None
                        }
                    }
                }
            };
            let raw = match &envelope {
                Some(env) => ch.sample_in(env),
                None => Vector3::zeros(),
            };
            ch.envelope = envelope;
            let projected = if fc.walking_projection && !self.lower_goal.stance {
                walking_projection(&raw, &planar_cmd)
            } else {
                raw
            };
            ch.raw = raw;
            let filtered = ch.filter.apply(&projected);
            ch.target = filtered * self.alpha;
        }
    }

    /// Applied force at substep resolution, with the projection done at the
    /// current pose.
    fn applied_force(&mut self, k: usize, snap: &ArmSnapshot) -> (Vector3<f64>, Matrix3xX<f64>) {
        let ch = &mut self.forces[k];
        let u = if self.force_override.is_some() { 1.0 } else { ch.point_param };
        let point = snap.application_point(u);
        ch.application_point = point;
        let jac = snap.kin.point_jacobian(&point);
        if let Some(f) = self.force_override {
            ch.applied = f[k];
            ch.feasibility_scale = 1.0;
            return (f[k], jac);
        }
        let fc = &self.cfg.force;
        let applied = match fc.mode {
            ForceMode::Disabled => Vector3::zeros(),
            ForceMode::Naive => ch.target,
            ForceMode::TorqueAware => {
                if ch.envelope.is_none() || ch.target == Vector3::zeros() {
                    ch.feasibility_scale = 1.0;
                    Vector3::zeros()
                } else {
                    let gravity = snap.budget_gravity();
                    let limits = self.arms[k].nominal.torque_limits();
                    if gravity.iter().zip(&limits).any(|(g, l)| g.abs() > *l) {
                        ch.feasibility_scale = 1.0;
                        Vector3::zeros()
                    } else {
                        let (f, s) = project_feasible(&jac, &limits, &gravity, &ch.target);
                        ch.feasibility_scale = s;
                        f
                    }
                }
            }
        };
        ch.applied = applied;
        (applied, jac)
    }

    fn delayed_action(&mut self, action: &[f64]) -> Vec<f64> {
        let delay = self.draw.delay_substeps(self.cfg.dt);
        if self.action_queue.is_empty() {
            // before the first command the controller holds the neutral action
            for _ in 0..delay {
                self.action_queue.push_back(vec![0.0; action.len()]);
            }
        }
        self.action_queue.push_back(action.to_vec());
        while self.action_queue.len() > delay + 1 {
            self.action_queue.pop_front();
        }
        self.action_queue.front().cloned().unwrap_or_else(|| action.to_vec())
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepResult, SimError> {
        self.check_action(action)?;
        let cfg = Arc::clone(&self.cfg);
        let clip = cfg.action_clip;
        let action: Vec<f64> = action.iter().map(|a| a.clamp(-clip, clip)).collect();
        let prev_action = self.obs.newest_prev_action().to_vec();

        if self.time + 1e-9 >= self.next_push {
            let angle: f64 = self.rng.random_range(0.0..std::f64::consts::TAU);
            let dv = Vector2::new(angle.cos(), angle.sin()) * self.draw.push_velocity;
            self.base.push(dv, &cfg.base);
            self.next_push += self.draw.push_interval;
        }

        let snaps = self.snapshots();
        self.update_force_targets(&snaps);

        let reference = BaseCommand {
            lin_vel_xy: self.lower_goal.lin_vel_xy,
            lin_vel_z: 0.0,
            yaw_rate: self.lower_goal.ang_vel_yaw,
        };
        let nu = cfg.upper_dof();
        let mut feasibility = 0.0;
        let mut feasibility_n = 0;
        for _ in 0..cfg.decimation {
            let a = self.delayed_action(&action);
            let ls = cfg.lower_action_scale;
            let commanded = BaseCommand {
                lin_vel_xy: Vector2::new(a[0] * ls[0], a[1] * ls[1]),
                lin_vel_z: a[2] * ls[2],
                yaw_rate: a[3] * ls[3],
            };
            let targets: Vec<f64> = (0..nu)
                .map(|i| self.upper_default[i] + cfg.upper_action_scale * a[LOWER_DOF + i])
                .collect();
            let placement = self.base.placement();
            let g = BaseState::gravity();
            let mut loads = BaseLoads::default();
            let mut off = 0;
            for k in 0..self.arms.len() {
                let snap = self.arms[k].snapshot(&placement, &g);
                let (force, jac) = self.applied_force(k, &snap);
                let m = self.arms[k].dof();
                let ff = self.upper_feedforward[off..off + m].to_vec();
                let ext = (force != Vector3::zeros()).then_some((&jac, &force));
                self.arms[k].substep(&snap, &targets[off..off + m], &ff, ext, cfg.dt);
                let r = self.forces[k].application_point - self.base.position;
                loads.force += force;
                loads.moment += r.cross(&force);
                let (m_arm, com) = self.arms[k].mass_and_com(&snap);
                loads.moment += (com - self.base.position).cross(&(g * m_arm));
                if cfg.force.mode == ForceMode::TorqueAware && self.forces[k].target != Vector3::zeros() {
                    feasibility += self.forces[k].feasibility_scale;
                    feasibility_n += 1;
                }
                off += m;
            }
            self.base.substep(
                &cfg.base,
                self.mass,
                self.yaw_inertia,
                self.tilt_inertia,
                self.draw.friction,
                &commanded,
                &reference,
                &loads,
                cfg.dt,
            );
        }
        self.time += cfg.control_dt();
        self.step_count += 1;

        // goals for the next step
        if self.time + 1e-9 >= self.next_command {
            self.lower_goal = sample_lower_command(&mut self.rng, &cfg.goals, cfg.model.base.default_height);
            self.next_command = self.sample_interval(cfg.goals.command_interval);
        }
        self.upper_goal.advance(&mut self.rng, self.time);

        let (q, qd) = self.joint_state();
        let w = self.base.angular_velocity();
        let g = self.base.projected_gravity();
        self.obs.push(&q, &qd, &w, &g, &action);

        let upper_q = &q[LOWER_DOF..];
        let target_now = self.upper_goal.target(self.time);
        let upper_torque: Vec<f64> = self.arms.iter().flat_map(|a| a.torque.iter().copied()).collect();
        let upper_excess: f64 = self.arms.iter().map(|a| a.limit_excess()).sum();
        let lower_excess = self.base.height_limit_excess(&cfg.base);
        let heading_vel = self.base.heading_velocity();
        let (ql, _) = self.base.lower_coordinates();
        let inputs = RewardInputs {
            command: &self.lower_goal,
            lin_vel_xy: heading_vel,
            yaw_rate: self.base.yaw_rate,
            height: self.base.position.z,
            default_height: cfg.model.base.default_height,
            yaw_offset: ql[3],
            roll: self.base.roll,
            pitch: self.base.pitch,
            support_offset: self.base.support_offset(),
            upper_q,
            upper_target: &target_now,
            lower_action: &action[..LOWER_DOF],
            lower_prev_action: &prev_action[..LOWER_DOF],
            upper_action: &action[LOWER_DOF..],
            upper_prev_action: &prev_action[LOWER_DOF..],
            upper_torque: &upper_torque,
            lower_wrench: &self.base.wrench,
            upper_limit_excess: upper_excess,
            lower_limit_excess: lower_excess,
        };
        let (reward_lower, reward_upper, breakdown) = compute_rewards(&inputs, &cfg.rewards);

        let err: f64 = upper_q
            .iter()
            .zip(&target_now)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / nu.max(1) as f64;
        self.stats.steps += 1;
        self.stats.upper_error_sum += err;
        self.stats.root_error_sum[0] += (heading_vel.x - self.lower_goal.lin_vel_xy.x).abs();
        self.stats.root_error_sum[1] += (heading_vel.y - self.lower_goal.lin_vel_xy.y).abs();
        self.stats.root_error_sum[2] += (self.base.yaw_rate - self.lower_goal.ang_vel_yaw).abs();
        self.stats.reward_lower += reward_lower;
        self.stats.reward_upper += reward_upper;
        self.stats.feasibility_sum += feasibility;
        self.stats.feasibility_count += feasibility_n;
        self.stats.force_magnitude_sum += self.forces.iter().map(|c| c.applied.norm()).sum::<f64>();

        let fell = self.base.position.z < cfg.fall_height_fraction * cfg.model.base.default_height
            || self.base.tilt() > cfg.fall_tilt
            || !self.base.position.iter().all(|v| v.is_finite());
        let truncated = !fell && self.step_count >= cfg.max_episode_steps();

        let privileged = self.privileged();
        let episode = (fell || truncated).then_some(EpisodeSummary {
            stats: self.stats,
            fell,
            alpha: self.alpha,
        });
        Ok(StepResult {
            privileged,
            reward_lower,
            reward_upper,
            breakdown,
            terminated: fell,
            truncated,
            episode,
        })
    }

    /// Goal features for the lower agent.
    pub fn lower_goal_features(&self, out: &mut Vec<f32>) {
        let g = &self.lower_goal;
        let h0 = self.cfg.model.base.default_height;
        out.extend_from_slice(&[
            g.lin_vel_xy.x as f32,
            g.lin_vel_xy.y as f32,
            g.ang_vel_yaw as f32,
            if g.stance { 1.0 } else { 0.0 },
            ((g.root_height - h0) / h0 * 5.0) as f32,
            g.waist_yaw as f32,
        ]);
    }

    /// Goal features for the upper agent: next arm target relative to default.
    pub fn upper_goal_features(&self, out: &mut Vec<f32>) {
        let t = self.upper_target();
        let s = self.cfg.obs_scales.upper_pos;
        out.extend(t.iter().zip(&self.upper_default).map(|(a, d)| ((a - d) * s) as f32));
    }

    pub fn proprio_features(&self, out: &mut Vec<f32>) {
        self.obs.write_features(&self.cfg.obs_scales, &self.upper_default, out);
    }

    pub fn estimator_features(&self, out: &mut Vec<f32>) {
        self.obs
            .write_estimator_features(&self.cfg.obs_scales, &self.upper_default, out);
    }

    pub fn estimator_input_dim(cfg: &EnvConfig) -> usize {
        HISTORY * (2 * cfg.dof() + 6 + LOWER_DOF)
    }

    /// Action that makes the arm PD targets equal `targets` with the lower
    /// body commanded to hold still.
    pub fn action_for_targets(&self, targets: &[f64]) -> Vec<f64> {
        let s = self.cfg.upper_action_scale;
        let mut a = vec![0.0; LOWER_DOF];
        a.extend(targets.iter().zip(&self.upper_default).map(|(t, d)| (t - d) / s));
        a
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    /// Simulator-only state for the critics: heading-frame base velocity and
    /// the forces applied during the last substep.
    pub fn privileged(&self) -> PrivilegedObservation {
        let v = self.base.heading_velocity();
        let mut ee = [Vector3::zeros(); 2];
        for (k, ch) in self.forces.iter().enumerate().take(2) {
            ee[k] = ch.applied;
        }
        PrivilegedObservation {
            root_lin_vel: Vector3::new(v.x, v.y, self.base.velocity.z),
            ee_forces: ee,
        }
    }

    /// Counts `steps` towards the truncation limit of the current episode,
    /// so parallel environments do not all time out together.
    pub fn advance_episode_clock(&mut self, steps: usize) {
        self.step_count += steps.min(self.cfg.max_episode_steps().saturating_sub(1));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::robot_model::builtin_model;

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

    #[test]
    fn reset_fills_history() {
        let env = Env::new(Arc::new(quiet_config()), 1);
        let obs = env.observation();
        for k in 0..HISTORY {
            assert_eq!(Observation::slot(&obs.projected_gravity, 3, k), &[0.0, 0.0, -1.0]);
        }
        assert!(obs.prev_action.iter().all(|a| *a == 0.0));
        let n = env.config().dof();
        assert_eq!(obs.joint_pos.len(), HISTORY * n);
    }

    #[test]
    fn idle_robot_keeps_height() {
        let mut env = Env::new(Arc::new(quiet_config()), 2);
        let a = vec![0.0; env.config().dof()];
        for _ in 0..100 {
            let r = env.step(&a).unwrap();
            assert!(!r.done());
            assert!((env.base.position.z - 0.55).abs() < 0.01);
        }
    }

    #[test]
    fn bad_actions_are_errors() {
        let mut env = Env::new(Arc::new(quiet_config()), 3);
        assert!(matches!(env.step(&[0.0; 3]), Err(SimError::ActionLength { expected: 12, got: 3 })));
        let mut a = vec![0.0; 12];
        a[5] = f64::NAN;
        assert!(matches!(env.step(&a), Err(SimError::NonFiniteAction { index: 5, .. })));
    }

    #[test]
    fn low_base_ends_episode() {
        let mut env = Env::new(Arc::new(quiet_config()), 4);
        env.base.position.z = 0.1;
        let r = env.step(&[0.0; 12]).unwrap();
        assert!(r.terminated && r.done());
        assert!(r.episode.unwrap().fell);
    }

    #[test]
    fn zero_alpha_means_zero_force() {
        let mut cfg = quiet_config();
        cfg.goals.stance_probability = 0.3;
        let mut env = Env::new(Arc::new(cfg), 5);
        env.set_alpha(0.0);
        for _ in 0..200 {
            let r = env.step(&[0.0; 12]).unwrap();
            assert_eq!(r.privileged.ee_forces, [Vector3::zeros(); 2]);
        }
    }
}
