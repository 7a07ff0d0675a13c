//! Learned agents plus model-based controllers for one training mode, and
//! the batched action computation shared by rollouts and evaluation.

use std::ops::Range;

use nalgebra::Vector3;
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use super::config::{Mode, TrainerConfig};
use super::controllers::{force_compensation, ControllerKind, UpperController};
use super::estimator::ForceEstimator;
use super::mlp::Mlp;
use super::ppo::{log_prob, AgentParams, AgentTrainer, LossConfig, LossStats, MiniBatch};
use crate::sim_env::{Env, EnvConfig, LOWER_DOF, LOWER_GOAL_DIM, PRIVILEGED_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    /// Base and waist actions on the lower-body reward.
    Lower,
    /// Arm actions on the upper-body reward.
    Upper,
    /// Every action on the summed reward.
    Whole,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Lower => "lower",
            Role::Upper => "upper",
            Role::Whole => "whole",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Role::Lower, Role::Upper, Role::Whole].into_iter().find(|r| r.as_str() == s)
    }

    pub fn action_range(self, cfg: &EnvConfig) -> Range<usize> {
        match self {
            Role::Lower => 0..LOWER_DOF,
            Role::Upper => LOWER_DOF..cfg.dof(),
            Role::Whole => 0..cfg.dof(),
        }
    }

    pub fn actor_input_dim(self, cfg: &EnvConfig) -> usize {
        cfg.proprio_dim()
            + match self {
                Role::Lower => LOWER_GOAL_DIM,
                Role::Upper => cfg.upper_goal_dim(),
                Role::Whole => LOWER_GOAL_DIM + cfg.upper_goal_dim(),
            }
    }

    pub fn critic_input_dim(self, cfg: &EnvConfig) -> usize {
        self.actor_input_dim(cfg) + PRIVILEGED_DIM
    }

    pub fn reward(self, lower: f64, upper: f64) -> f64 {
        match self {
            Role::Lower => lower,
            Role::Upper => upper,
            Role::Whole => lower + upper,
        }
    }

    pub fn actor_features(self, env: &Env, out: &mut Vec<f32>) {
        env.proprio_features(out);
        match self {
            Role::Lower => env.lower_goal_features(out),
            Role::Upper => env.upper_goal_features(out),
            Role::Whole => {
                env.lower_goal_features(out);
                env.upper_goal_features(out);
            }
        }
    }

    pub fn critic_features(self, env: &Env, out: &mut Vec<f32>) {
        self.actor_features(env, out);
        env.privileged().write_features(&env.config().obs_scales, out);
    }
}

/// Roles learned by PPO in each mode.
pub fn roles_for(mode: Mode) -> Vec<Role> {
    match mode {
        Mode::DualAgent => vec![Role::Lower, Role::Upper],
        Mode::Monolithic => vec![Role::Whole],
        Mode::UpperPd | Mode::UpperPid | Mode::UpperPdId => vec![Role::Lower],
    }
}

pub fn controller_kind(mode: Mode) -> Option<ControllerKind> {
    match mode {
        Mode::UpperPd => Some(ControllerKind::Pd),
        Mode::UpperPid => Some(ControllerKind::Pid),
        Mode::UpperPdId => Some(ControllerKind::PdId),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentSlot {
    pub role: Role,
    pub trainer: AgentTrainer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicySet {
    pub mode: Mode,
    pub agents: Vec<AgentSlot>,
    pub estimator: Option<ForceEstimator>,
    pub pid_ki_ratio: f64,
}

/// Per-agent inputs and outputs of one batched action step.
#[derive(Debug, Clone)]
pub struct AgentStep {
    pub actor_obs: Array2<f32>,
    pub actions: Array2<f32>,
    pub log_prob: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct ActStep {
    pub agents: Vec<AgentStep>,
    /// Full environment action per env.
    pub env_actions: Vec<Vec<f64>>,
    /// Estimator inputs, filled in `UpperPdId` mode.
    pub estimator_inputs: Option<Array2<f32>>,
}

pub fn stack_rows(rows: usize, width: usize, data: Vec<f32>) -> Array2<f32> {
    Array2::from_shape_vec((rows, width), data).expect("row-major feature matrix")
}

impl PolicySet {
    pub fn new<R: Rng + ?Sized>(cfg: &TrainerConfig, env: &EnvConfig, rng: &mut R) -> Self {
        let agents = roles_for(cfg.mode)
            .into_iter()
            .map(|role| {
                let act = role.action_range(env).len();
                let params = AgentParams::new(
                    role.actor_input_dim(env),
                    role.critic_input_dim(env),
                    act,
                    &cfg.hidden,
                    cfg.init_log_std,
                    rng,
                );
                AgentSlot {
                    role,
                    trainer: AgentTrainer::new(params),
                }
            })
            .collect();
        let estimator = (cfg.mode == Mode::UpperPdId).then(|| {
            ForceEstimator::new(
                Env::estimator_input_dim(env),
                &cfg.estimator_hidden,
                env.obs_scales.force,
                rng,
            )
        });
        Self {
            mode: cfg.mode,
            agents,
            estimator,
            pid_ki_ratio: cfg.pid_ki_ratio,
        }
    }

    pub fn agent(&self, role: Role) -> Option<&AgentParams<f32>> {
        self.agents.iter().find(|a| a.role == role).map(|a| &a.trainer.params)
    }

    /// One controller per environment (empty in learned-arm modes).
    pub fn controllers(&self, envs: &[Env]) -> Vec<UpperController> {
        let Some(kind) = controller_kind(self.mode) else {
            return Vec::new();
        };
        envs.iter()
            .map(|env| {
                let kp: Vec<f64> = env.arms.iter().flat_map(|a| a.kp.iter().copied()).collect();
                let lim: Vec<f64> = env.arms.iter().flat_map(|a| a.nominal.torque_limits()).collect();
                UpperController::new(kind, &kp, self.pid_ki_ratio, &lim)
            })
            .collect()
    }

    /// Batched actions for `envs`. With `noise` the actions are sampled from
    /// each agent's Gaussian; without, the means are used. Sets the arm
    /// feedforward torque on each env in controller modes.
    pub fn act<R: Rng + ?Sized>(
        &self,
        envs: &mut [Env],
        controllers: &mut [UpperController],
        mut noise: Option<&mut R>,
    ) -> ActStep {
        let n = envs.len();
        let Some(first) = envs.first() else {
            return ActStep {
                agents: Vec::new(),
                env_actions: Vec::new(),
                estimator_inputs: None,
            };
        };
        let cfg = first.config_arc().clone();
        let dof = cfg.dof();
        let mut env_actions = vec![vec![0.0; dof]; n];
        let mut agents = Vec::with_capacity(self.agents.len());
        for slot in &self.agents {
            let p = &slot.trainer.params;
            let width = slot.role.actor_input_dim(&cfg);
            let mut data = Vec::with_capacity(n * width);
            for env in envs.iter() {
                slot.role.actor_features(env, &mut data);
            }
            let obs = stack_rows(n, width, data);
            let mean = p.actor.predict(&obs);
            let actions = match noise.as_deref_mut() {
                Some(rng) => {
                    let std = p.log_std.mapv(|v| v.exp());
                    let mut a = mean.clone();
                    for mut row in a.rows_mut() {
                        for (k, v) in row.iter_mut().enumerate() {
                            let z: f32 = rng.sample(StandardNormal);
                            *v += std[k] * z;
                        }
                    }
                    a
                }
                None => mean.clone(),
            };
            let logp = log_prob(&mean, &p.log_std, &actions).to_vec();
            let range = slot.role.action_range(&cfg);
            for (e, row) in actions.rows().into_iter().enumerate() {
                for (k, v) in row.iter().enumerate() {
                    env_actions[e][range.start + k] = *v as f64;
                }
            }
            agents.push(AgentStep {
                actor_obs: obs,
                actions,
                log_prob: logp,
            });
        }

        let mut estimator_inputs = None;
        if !controllers.is_empty() {
            let dt = cfg.control_dt();
            let compensation: Option<Vec<Vec<f64>>> = match &self.estimator {
                Some(est) if self.mode == Mode::UpperPdId => {
                    let width = est.input_dim();
                    let mut data = Vec::with_capacity(n * width);
                    for env in envs.iter() {
                        env.estimator_features(&mut data);
                    }
                    let x = stack_rows(n, width, data);
                    let forces = est.predict(&x);
                    estimator_inputs = Some(x);
                    Some(
                        envs.iter()
                            .zip(&forces)
                            .map(|(env, f)| {
                                let jac = env.ee_com_jacobians();
                                let f: Vec<Vector3<f64>> = f.iter().take(jac.len()).copied().collect();
                                force_compensation(&jac, &f)
                            })
                            .collect(),
                    )
                }
                _ => None,
            };
            for (e, (env, ctl)) in envs.iter_mut().zip(controllers.iter_mut()).enumerate() {
                let target = env.upper_target();
                let arm = env.action_for_targets(&target);
                env_actions[e][LOWER_DOF..].copy_from_slice(&arm[LOWER_DOF..]);
                let q = env.upper_q();
                let comp = compensation.as_ref().map(|c| c[e].as_slice());
                let ff = ctl.feedforward(&target, &q, dt, comp);
                env.set_upper_feedforward(&ff);
            }
        }
        ActStep {
            agents,
            env_actions,
            estimator_inputs,
        }
    }

    /// Per-agent losses on fixed batches, in agent order.
    pub fn losses(&self, batches: &[MiniBatch<f32>], cfg: &LossConfig) -> Vec<LossStats> {
        self.agents
            .iter()
            .zip(batches)
            .map(|(slot, mb)| super::ppo::loss_and_grad(&slot.trainer.params, mb, cfg).0)
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.agents.iter().all(|a| a.trainer.params.all_finite())
            && self.estimator.as_ref().is_none_or(|e| e.net.all_finite())
    }

    /// Named tensors in a fixed order: `<role>.actor.w<l>`, `.actor.b<l>`,
    /// `.log_std`, `.critic.w<l>`, `.critic.b<l>`, then `estimator.w<l>`,
    /// `estimator.b<l>`.
    pub fn tensors(&self) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        let mlp = |prefix: &str, net: &Mlp<f32>, out: &mut Vec<NamedTensor>| {
            for (l, (w, b)) in net.weights.iter().zip(&net.biases).enumerate() {
                out.push(NamedTensor {
                    name: format!("{prefix}.w{l}"),
                    shape: vec![w.nrows(), w.ncols()],
                    data: w.iter().copied().collect(),
                });
                out.push(NamedTensor {
                    name: format!("{prefix}.b{l}"),
                    shape: vec![b.len()],
                    data: b.to_vec(),
                });
            }
        };
        for slot in &self.agents {
            let r = slot.role.as_str();
            let p = &slot.trainer.params;
            mlp(&format!("{r}.actor"), &p.actor, &mut out);
            out.push(NamedTensor {
                name: format!("{r}.log_std"),
                shape: vec![p.log_std.len()],
                data: p.log_std.to_vec(),
            });
            mlp(&format!("{r}.critic"), &p.critic, &mut out);
        }
        if let Some(est) = &self.estimator {
            mlp("estimator", &est.net, &mut out);
        }
        out
    }

    /// Overwrites parameters from tensors produced by [`PolicySet::tensors`]
    /// on an identically shaped set.
    pub fn load_tensors(&mut self, tensors: &[NamedTensor]) -> Result<(), String> {
        let expected = self.tensors();
        if expected.len() != tensors.len() {
            return Err(format!("expected {} tensors, found {}", expected.len(), tensors.len()));
        }
        for (e, t) in expected.iter().zip(tensors) {
            if e.name != t.name || e.shape != t.shape {
                return Err(format!(
                    "tensor `{}` {:?} does not match expected `{}` {:?}",
                    t.name, t.shape, e.name, e.shape
                ));
            }
        }
        let mut it = tensors.iter();
        let fill_mlp = |net: &mut Mlp<f32>, it: &mut std::slice::Iter<'_, NamedTensor>| {
            for (w, b) in net.weights.iter_mut().zip(net.biases.iter_mut()) {
                let tw = it.next().expect("checked count");
                w.iter_mut().zip(&tw.data).for_each(|(d, s)| *d = *s);
                let tb = it.next().expect("checked count");
                b.iter_mut().zip(&tb.data).for_each(|(d, s)| *d = *s);
            }
        };
        for slot in &mut self.agents {
            let p = &mut slot.trainer.params;
            fill_mlp(&mut p.actor, &mut it);
            let ls = it.next().expect("checked count");
            p.log_std.iter_mut().zip(&ls.data).for_each(|(d, s)| *d = *s);
            fill_mlp(&mut p.critic, &mut it);
        }
        if let Some(est) = &mut self.estimator {
            fill_mlp(&mut est.net, &mut it);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn small(mode: Mode) -> (TrainerConfig, Arc<EnvConfig>) {
        let cfg = TrainerConfig {
            mode,
            hidden: vec![16],
            estimator_hidden: vec![8],
            ..Default::default()
        };
        let env = Arc::new(cfg.env_config().unwrap());
        (cfg, env)
    }

    #[test]
    fn roles_partition_the_action() {
        let (_, env) = small(Mode::DualAgent);
        let l = Role::Lower.action_range(&env);
        let u = Role::Upper.action_range(&env);
        assert_eq!(l.end, u.start);
        assert_eq!(u.end, env.dof());
        assert_eq!(Role::Whole.action_range(&env), 0..env.dof());
    }

    #[test]
    fn controller_modes_drive_arms_to_targets() {
        let (cfg, env_cfg) = small(Mode::UpperPd);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let policy = PolicySet::new(&cfg, &env_cfg, &mut rng);
        let mut envs = vec![Env::new(env_cfg.clone(), 1)];
        let mut ctl = policy.controllers(&envs);
        let step = policy.act::<ChaCha8Rng>(&mut envs, &mut ctl, None);
        let target = envs[0].upper_target();
        let s = env_cfg.upper_action_scale;
        for (i, t) in target.iter().enumerate() {
            let a = step.env_actions[0][LOWER_DOF + i];
            assert!((envs[0].upper_default()[i] + s * a - t).abs() < 1e-12);
        }
    }

    #[test]
    fn tensors_round_trip() {
        for mode in Mode::ALL {
            let (cfg, env) = small(mode);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let a = PolicySet::new(&cfg, &env, &mut rng);
            let mut b = PolicySet::new(&cfg, &env, &mut rng);
            assert_ne!(a.tensors(), b.tensors());
            b.load_tensors(&a.tensors()).unwrap();
            assert_eq!(a.tensors(), b.tensors());
        }
    }

    #[test]
    fn mean_actions_are_repeatable() {
        let (cfg, env_cfg) = small(Mode::DualAgent);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let policy = PolicySet::new(&cfg, &env_cfg, &mut rng);
        let mut envs = vec![Env::new(env_cfg.clone(), 3), Env::new(env_cfg, 4)];
        let a = policy.act::<ChaCha8Rng>(&mut envs, &mut [], None);
        let b = policy.act::<ChaCha8Rng>(&mut envs, &mut [], None);
        assert_eq!(a.env_actions, b.env_actions);
        let c = policy.act(&mut envs, &mut [], Some(&mut rng));
        assert_ne!(a.env_actions, c.env_actions);
    }
}
