//! PPO training for every mode: dual agents, one whole-body agent, or a
//! learned lower body with a model-based arm controller.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod controllers;
pub mod estimator;
pub mod log;
pub mod mlp;
pub mod policy;
pub mod ppo;

use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{SimError, TrainError};
use crate::force_curriculum::CurriculumState;
use crate::sim_env::{Env, EnvConfig, StepResult};
use checkpoint::Checkpoint;
use config::{Curriculum, TrainerConfig};
use controllers::UpperController;
use log::{AgentLog, TrainingLog, UpdateRecord};
use policy::{stack_rows, PolicySet, Role};
use ppo::{gae, AgentBatch, LossConfig, PpoConfig};

/// Seed of environment `index` in a run seeded with `seed`.
pub fn env_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((index as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// One agent's share of a rollout, flattened in `[step][env]` order.
/// Rewards are scaled and include the truncation bootstrap.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AgentRollout {
    pub actor_obs: Vec<f32>,
    pub critic_obs: Vec<f32>,
    pub actions: Vec<f32>,
    pub log_prob: Vec<f32>,
    pub values: Vec<f32>,
    pub rewards: Vec<f32>,
}

#[derive(Debug, Default)]
pub struct Rollout {
    pub num_envs: usize,
    pub steps: usize,
    pub agents: Vec<AgentRollout>,
    pub dones: Vec<bool>,
    /// Critic values of the states after the last step, per agent.
    pub last_values: Vec<Vec<f32>>,
    pub alpha_at_start: f64,
    estimator_x: Vec<f32>,
    estimator_y: Vec<f32>,
    tally: EpisodeTally,
}

impl Rollout {
    pub fn transitions(&self) -> usize {
        self.num_envs * self.steps
    }
}

#[derive(Debug, Clone, Default)]
struct EpisodeTally {
    count: usize,
    upper_error: f64,
    root_error: f64,
    falls: usize,
    feasibility: f64,
    feasibility_n: usize,
}

impl EpisodeTally {
    fn mean(&self, sum: f64) -> f64 {
        if self.count == 0 {
            f64::NAN
        } else {
            sum / self.count as f64
        }
    }
}

pub struct Trainer {
    pub config: TrainerConfig,
    pub env_config: Arc<EnvConfig>,
    pub policy: PolicySet,
    pub envs: Vec<Env>,
    pub controllers: Vec<UpperController>,
    pub curriculum: CurriculumState,
    pub update: usize,
    pub env_steps: u64,
    pub log: TrainingLog,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(config: TrainerConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let env_config = config.shared_env()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let policy = PolicySet::new(&config, &env_config, &mut rng);
        let alpha = match config.force_curriculum {
            Curriculum::Off => 0.0,
            _ => config.initial_alpha,
        };
        let curriculum = CurriculumState::new(config.scheduler(), alpha);
        let max_steps = env_config.max_episode_steps();
        let mut envs: Vec<Env> = (0..config.num_envs)
            .map(|i| Env::new(env_config.clone(), env_seed(config.seed, i)))
            .collect();
        for env in &mut envs {
            env.set_alpha(alpha);
            // spread truncations over the episode length
            env.advance_episode_clock(rng.random_range(0..max_steps.max(1)));
        }
        let controllers = policy.controllers(&envs);
        Ok(Self {
            config,
            env_config,
            policy,
            envs,
            controllers,
            curriculum,
            update: 0,
            env_steps: 0,
            log: TrainingLog::default(),
            rng,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.config.num_envs * self.config.rollout_steps
    }

    pub fn total_updates(&self) -> usize {
        self.config.total_steps.div_ceil(self.batch_size()).max(1)
    }

    pub fn alpha(&self) -> f64 {
        self.curriculum.alpha
    }

    pub fn learning_rate(&self) -> f64 {
        let lr = self.config.learning_rate;
        if self.config.lr_decay {
            lr * (1.0 - self.update as f64 / self.total_updates() as f64).max(0.0)
        } else {
            lr
        }
    }

    fn ppo_config(&self) -> PpoConfig {
        PpoConfig {
            loss: LossConfig {
                clip: self.config.clip,
                value_coef: self.config.value_coef,
                entropy_coef: self.config.entropy_coef,
                normalize_advantages: true,
            },
            epochs: self.config.epochs,
            minibatches: self.config.minibatches,
            max_grad_norm: self.config.max_grad_norm,
        }
    }

    fn critic_matrix(&self, role: Role, envs: &[&Env]) -> Array2<f32> {
        let width = role.critic_input_dim(&self.env_config);
        let mut data = Vec::with_capacity(envs.len() * width);
        for env in envs {
            role.critic_features(env, &mut data);
        }
        stack_rows(envs.len(), width, data)
    }

    fn values(&self, slot: usize, envs: &[&Env]) -> Vec<f32> {
        let a = &self.policy.agents[slot];
        let x = self.critic_matrix(a.role, envs);
        a.trainer.params.critic.predict(&x).column(0).to_vec()
    }

    fn apply_alpha(&mut self) {
        let alpha = self.curriculum.alpha;
        for env in &mut self.envs {
            env.set_alpha(alpha);
        }
    }

    fn record_episode(&mut self, result: &StepResult, tally: &mut EpisodeTally) {
        let Some(ep) = &result.episode else { return };
        let err = ep.stats.mean_upper_error();
        tally.count += 1;
        tally.upper_error += err;
        tally.root_error += ep.stats.mean_root_error();
        tally.falls += ep.fell as usize;
        if ep.stats.feasibility_count > 0 {
            tally.feasibility += ep.stats.mean_feasibility();
            tally.feasibility_n += 1;
        }
        if self.config.force_curriculum != Curriculum::Off {
            self.curriculum.record_episode(err, ep.fell);
        }
    }

    /// Steps every environment `rollout_steps` times with the sampling policy.
    pub fn collect_rollout(&mut self) -> Result<Rollout, TrainError> {
        let n = self.envs.len();
        let steps = self.config.rollout_steps;
        let agents = self.policy.agents.len();
        let gamma = self.config.gamma;
        let scale = self.config.reward_scale;
        let mut buffers: Vec<AgentRollout> = (0..agents).map(|_| AgentRollout::default()).collect();
        let mut dones = Vec::with_capacity(n * steps);
        let mut est_x: Vec<f32> = Vec::new();
        let mut est_y: Vec<f32> = Vec::new();
        let mut tally = EpisodeTally::default();
        let alpha_at_start = self.curriculum.alpha;

        for _ in 0..steps {
            let refs: Vec<&Env> = self.envs.iter().collect();
            for (k, buf) in buffers.iter_mut().enumerate() {
                let role = self.policy.agents[k].role;
                let x = self.critic_matrix(role, &refs);
                buf.critic_obs.extend(x.iter());
                let v = self.policy.agents[k].trainer.params.critic.predict(&x);
                buf.values.extend(v.column(0).iter());
            }
            drop(refs);
            let act = self
                .policy
                .act(&mut self.envs, &mut self.controllers, Some(&mut self.rng));
            if let Some(x) = &act.estimator_inputs {
                est_x.extend(x.iter());
                for env in &self.envs {
                    let f = env.privileged().force_vector();
                    let est = self.policy.estimator.as_ref().expect("estimator inputs imply an estimator");
                    est_y.extend(est.target_row(&f));
                }
            }
            let results: Vec<StepResult> = self
                .envs
                .par_iter_mut()
                .zip(act.env_actions.par_iter())
                .map(|(env, a)| env.step(a))
                .collect::<Result<Vec<_>, SimError>>()?;
            self.env_steps += n as u64;

            for (k, step) in act.agents.iter().enumerate() {
                let buf = &mut buffers[k];
                buf.actor_obs.extend(step.actor_obs.iter());
                buf.actions.extend(step.actions.iter());
                buf.log_prob.extend_from_slice(&step.log_prob);
                let role = self.policy.agents[k].role;
                buf.rewards
                    .extend(results.iter().map(|r| (role.reward(r.reward_lower, r.reward_upper) * scale) as f32));
            }
            // time-limit ends keep the value of the state they cut off
            let truncated: Vec<usize> = (0..n).filter(|&e| results[e].truncated).collect();
            if !truncated.is_empty() {
                let refs: Vec<&Env> = truncated.iter().map(|&e| &self.envs[e]).collect();
                for k in 0..agents {
                    let v = self.values(k, &refs);
                    let base = buffers[k].rewards.len() - n;
                    for (j, &e) in truncated.iter().enumerate() {
                        buffers[k].rewards[base + e] += (gamma * v[j] as f64) as f32;
                    }
                }
            }
            for r in &results {
                dones.push(r.done());
                self.record_episode(r, &mut tally);
            }
            self.envs
                .par_iter_mut()
                .zip(results.par_iter())
                .filter(|(_, r)| r.done())
                .for_each(|(env, _)| {
                    env.reset();
                });
            for (ctl, r) in self.controllers.iter_mut().zip(&results) {
                if r.done() {
                    ctl.reset();
                }
            }
            self.apply_alpha();
        }

        let refs: Vec<&Env> = self.envs.iter().collect();
        let last_values: Vec<Vec<f32>> = (0..agents).map(|k| self.values(k, &refs)).collect();
        Ok(Rollout {
            num_envs: n,
            steps,
            agents: buffers,
            dones,
            last_values,
            alpha_at_start,
            estimator_x: est_x,
            estimator_y: est_y,
            tally,
        })
    }

    /// Collects one rollout and runs one PPO update per agent.
    pub fn train_update(&mut self) -> Result<UpdateRecord, TrainError> {
        let rollout = self.collect_rollout()?;
        let Rollout {
            num_envs: n,
            steps,
            agents: buffers,
            dones,
            last_values: last,
            alpha_at_start,
            estimator_x: est_x,
            estimator_y: est_y,
            tally,
        } = rollout;
        let gamma = self.config.gamma;
        let scale = self.config.reward_scale;
        let lr = self.learning_rate();
        let ppo_cfg = self.ppo_config();
        let agents = buffers.len();
        let total = n * steps;
        let mut agent_logs = Vec::with_capacity(agents);
        for (k, buf) in buffers.into_iter().enumerate() {
            if buf.rewards.iter().any(|r| !r.is_finite()) {
                return Err(TrainError::NonFinite {
                    what: "reward".into(),
                    update: self.update,
                    detail: format!("agent {}", self.policy.agents[k].role.as_str()),
                });
            }
            let (adv, ret) = gae(
                &buf.rewards,
                &buf.values,
                &dones,
                &last[k],
                n,
                gamma,
                self.config.gae_lambda,
            );
            let mean_reward = buf.rewards.iter().map(|r| *r as f64).sum::<f64>() / total as f64;
            let actor_w = buf.actor_obs.len() / total;
            let critic_w = buf.critic_obs.len() / total;
            let act_w = buf.actions.len() / total;
            let batch = AgentBatch {
                actor_obs: stack_rows(total, actor_w, buf.actor_obs),
                critic_obs: stack_rows(total, critic_w, buf.critic_obs),
                actions: stack_rows(total, act_w, buf.actions),
                log_prob: Array1::from(buf.log_prob),
                advantages: Array1::from(adv),
                returns: Array1::from(ret),
            };
            let slot = &mut self.policy.agents[k];
            let name = slot.role.as_str().to_string();
            let stats = slot
                .trainer
                .update(&batch, &ppo_cfg, lr, &mut self.rng)
                .map_err(|detail| TrainError::NonFinite {
                    what: format!("{name} loss"),
                    update: self.update,
                    detail,
                })?;
            agent_logs.push((
                name,
                AgentLog {
                    reward: mean_reward / scale,
                    policy_loss: stats.loss.policy_loss,
                    value_loss: stats.loss.value_loss,
                    entropy: stats.loss.entropy,
                    action_std: stats.action_std,
                    clip_fraction: stats.loss.clip_fraction,
                    approx_kl: stats.loss.approx_kl,
                    grad_norm: stats.grad_norm,
                },
            ));
        }

        let mut estimator_loss = f64::NAN;
        if let Some(est) = &mut self.policy.estimator {
            let width = est.input_dim();
            let rows = est_x.len() / width;
            let x = stack_rows(rows, width, est_x);
            let y = stack_rows(rows, 6, est_y);
            estimator_loss = est.train(
                &x,
                &y,
                self.config.estimator_epochs,
                (rows / 4).max(1),
                self.config.estimator_lr,
                &mut self.rng,
            );
        }
        if !self.policy.all_finite() {
            return Err(TrainError::NonFinite {
                what: "parameters".into(),
                update: self.update,
                detail: "NaN or infinity after optimizer step".into(),
            });
        }

        self.update += 1;
        let record = UpdateRecord {
            update: self.update,
            env_steps: self.env_steps,
            alpha: alpha_at_start,
            learning_rate: lr,
            episodes: tally.count,
            upper_error: tally.mean(tally.upper_error),
            root_error: tally.mean(tally.root_error),
            fall_rate: tally.mean(tally.falls as f64),
            feasibility: if tally.feasibility_n > 0 {
                tally.feasibility / tally.feasibility_n as f64
            } else {
                f64::NAN
            },
            estimator_loss,
            agents: agent_logs,
        };
        self.log.push(record.clone());
        Ok(record)
    }

    /// Runs updates until the step budget is spent.
    pub fn train(&mut self, mut on_update: impl FnMut(&UpdateRecord)) -> Result<(), TrainError> {
        while self.update < self.total_updates() {
            let r = self.train_update()?;
            on_update(&r);
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            update: self.update,
            env_steps: self.env_steps,
            alpha: self.curriculum.alpha,
            tensors: self.policy.tensors(),
        }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), TrainError> {
        Ok(self.checkpoint().save(path)?)
    }

    pub fn log_csv(&self) -> String {
        self.log.to_csv(&self.config.hash(), self.config.seed)
    }
}

impl PolicySet {
    /// Rebuilds the policy stored in a checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, TrainError> {
        let env = ckpt.config.env_config()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = PolicySet::new(&ckpt.config, &env, &mut rng);
        p.load_tensors(&ckpt.tensors)
            .map_err(|m| TrainError::Checkpoint(crate::error::CheckpointError::Malformed(m)))?;
        Ok(p)
    }
}
