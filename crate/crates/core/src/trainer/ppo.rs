//! Clipped-surrogate PPO for one agent: diagonal Gaussian actor with a
//! state-independent log-std, separate value critic, GAE.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;

use super::adam::Adam;
use super::mlp::{lit, Mlp, Scalar};

pub const LOG_STD_MIN: f64 = -4.0;
pub const LOG_STD_MAX: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct AgentParams<T> {
    pub actor: Mlp<T>,
    pub log_std: Array1<T>,
    pub critic: Mlp<T>,
}

impl<T: Scalar> AgentParams<T> {
    pub fn new<R: Rng + ?Sized>(
        actor_in: usize,
        critic_in: usize,
        act_dim: usize,
        hidden: &[usize],
        init_log_std: f64,
        rng: &mut R,
    ) -> Self {
        let mut a = vec![actor_in];
        a.extend_from_slice(hidden);
        a.push(act_dim);
        let mut c = vec![critic_in];
        c.extend_from_slice(hidden);
        c.push(1);
        Self {
            actor: Mlp::new(&a, 0.01, rng),
            log_std: Array1::from_elem(act_dim, lit(init_log_std)),
            critic: Mlp::new(&c, 1.0, rng),
        }
    }

    pub fn act_dim(&self) -> usize {
        self.log_std.len()
    }

    pub fn num_params(&self) -> usize {
        self.actor.num_params() + self.log_std.len() + self.critic.num_params()
    }

    pub fn write_flat(&self, out: &mut Vec<T>) {
        self.actor.write_flat(out);
        out.extend(self.log_std.iter().copied());
        self.critic.write_flat(out);
    }

    pub fn to_flat(&self) -> Vec<T> {
        let mut v = Vec::with_capacity(self.num_params());
        self.write_flat(&mut v);
        v
    }

    pub fn read_flat(&mut self, src: &[T]) -> usize {
        let mut k = self.actor.read_flat(src);
        for v in self.log_std.iter_mut() {
            *v = src[k];
            k += 1;
        }
        k + self.critic.read_flat(&src[k..])
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            actor: self.actor.zeros_like(),
            log_std: Array1::zeros(self.log_std.len()),
            critic: self.critic.zeros_like(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> AgentParams<U> {
        AgentParams {
            actor: self.actor.cast(),
            log_std: self.log_std.map(|x| U::from_f64(x.to_f64().unwrap()).unwrap()),
            critic: self.critic.cast(),
        }
    }

    pub fn clamp_log_std(&mut self) {
        let lo = lit::<T>(LOG_STD_MIN);
        let hi = lit::<T>(LOG_STD_MAX);
        self.log_std.mapv_inplace(|v| v.max(lo).min(hi));
    }

    pub fn all_finite(&self) -> bool {
        self.actor.all_finite() && self.critic.all_finite() && self.log_std.iter().all(|v| v.is_finite())
    }

    pub fn mean_action_std(&self) -> f64 {
        let n = self.log_std.len().max(1) as f64;
        self.log_std.iter().map(|v| v.to_f64().unwrap().exp()).sum::<f64>() / n
    }
}

/// Diagonal Gaussian log-density, one value per row.
pub fn log_prob<T: Scalar>(mean: &Array2<T>, log_std: &Array1<T>, actions: &Array2<T>) -> Array1<T> {
    let half_log_2pi = lit::<T>(0.5 * (2.0 * PI).ln());
    let half = lit::<T>(0.5);
    let mut out = Array1::zeros(mean.nrows());
    for (i, (mu, a)) in mean.outer_iter().zip(actions.outer_iter()).enumerate() {
        let mut s = T::zero();
        for k in 0..mu.len() {
            let z = (a[k] - mu[k]) / log_std[k].exp();
            s = s - half * z * z - log_std[k] - half_log_2pi;
        }
        out[i] = s;
    }
    out
}

pub fn entropy<T: Scalar>(log_std: &Array1<T>) -> T {
    let c = lit::<T>(0.5 + 0.5 * (2.0 * PI).ln());
    log_std.iter().fold(T::zero(), |acc, ls| acc + *ls + c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatch<T> {
    pub actor_obs: Array2<T>,
    pub critic_obs: Array2<T>,
    pub actions: Array2<T>,
    pub old_log_prob: Array1<T>,
    pub advantages: Array1<T>,
    pub returns: Array1<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub clip: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub normalize_advantages: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            value_coef: 0.5,
            entropy_coef: 0.005,
            normalize_advantages: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossStats {
    pub total: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

/// Zero-mean, unit-std copy (population std). Batches of one are returned
/// unchanged.
pub fn normalize_advantages<T: Scalar>(adv: &Array1<T>) -> Array1<T> {
    let n = adv.len();
    if n < 2 {
        return adv.clone();
    }
    let nf = lit::<T>(n as f64);
    let mean = adv.iter().fold(T::zero(), |a, b| a + *b) / nf;
    let var = adv.iter().fold(T::zero(), |a, b| a + (*b - mean) * (*b - mean)) / nf;
    let std = var.sqrt() + lit::<T>(1e-8);
    adv.mapv(|a| (a - mean) / std)
}

/// Loss `-surrogate + c_v · mean (V - R)² - c_e · entropy` and its gradient.
pub fn loss_and_grad<T: Scalar>(
    p: &AgentParams<T>,
    mb: &MiniBatch<T>,
    cfg: &LossConfig,
) -> (LossStats, AgentParams<T>) {
    let n = mb.actions.nrows();
    let nf = lit::<T>(n as f64);
    let m = p.act_dim();
    let adv = if cfg.normalize_advantages {
        normalize_advantages(&mb.advantages)
    } else {
        mb.advantages.clone()
    };
    let lo = lit::<T>(1.0 - cfg.clip);
    let hi = lit::<T>(1.0 + cfg.clip);

    let (mean, actor_cache) = p.actor.forward(&mb.actor_obs);
    let logp = log_prob(&mean, &p.log_std, &mb.actions);
    let sigma = p.log_std.mapv(|v| v.exp());

    let mut d_mean = Array2::<T>::zeros((n, m));
    let mut d_log_std = Array1::<T>::zeros(m);
    let mut surrogate = T::zero();
    let mut kl = T::zero();
    let mut clipped = 0usize;
    for i in 0..n {
        let r = (logp[i] - mb.old_log_prob[i]).exp();
        let a = adv[i];
        let unclipped = r * a;
        let rc = r.max(lo).min(hi);
        let clipped_term = rc * a;
        surrogate = surrogate + unclipped.min(clipped_term);
        kl = kl + (mb.old_log_prob[i] - logp[i]);
        if r < lo || r > hi {
            clipped += 1;
        }
        // gradient flows through the ratio only where the unclipped branch is the min
        let flows = (r > lo && r < hi) || unclipped < clipped_term;
        if !flows {
            continue;
        }
        let g = -(r * a) / nf; // dL/dlogp_i
        for k in 0..m {
            let z = (mb.actions[(i, k)] - mean[(i, k)]) / sigma[k];
            d_mean[(i, k)] = g * z / sigma[k];
            d_log_std[k] = d_log_std[k] + g * (z * z - T::one());
        }
    }
    let policy_loss = -surrogate / nf;
    let ent = entropy(&p.log_std);
    let ce = lit::<T>(cfg.entropy_coef);
    d_log_std.mapv_inplace(|v| v - ce);

    let (values, critic_cache) = p.critic.forward(&mb.critic_obs);
    let cv = lit::<T>(cfg.value_coef);
    let mut value_loss = T::zero();
    let mut d_values = Array2::<T>::zeros((n, 1));
    for i in 0..n {
        let e = values[(i, 0)] - mb.returns[i];
        value_loss = value_loss + e * e;
        d_values[(i, 0)] = cv * lit::<T>(2.0) * e / nf;
    }
    value_loss = value_loss / nf;

    let grads = AgentParams {
        actor: p.actor.backward(&actor_cache, &d_mean),
        log_std: d_log_std,
        critic: p.critic.backward(&critic_cache, &d_values),
    };
    let total = policy_loss + cv * value_loss - ce * ent;
    let f = |x: T| x.to_f64().unwrap_or(f64::NAN);
    (
        LossStats {
            total: f(total),
            policy_loss: f(policy_loss),
            value_loss: f(value_loss),
            entropy: f(ent),
            approx_kl: f(kl / nf),
            clip_fraction: clipped as f64 / n as f64,
        },
        grads,
    )
}

/// Generalised advantage estimation over a `[step][env]` layout.
/// `dones[t][e]` marks that the transition at `t` ended its episode; the
/// bootstrap through it is cut.
#[allow(clippy::too_many_arguments)]
pub fn gae(
    rewards: &[f32],
    values: &[f32],
    dones: &[bool],
    last_values: &[f32],
    num_envs: usize,
    gamma: f64,
    lambda: f64,
) -> (Vec<f32>, Vec<f32>) {
    let steps = rewards.len() / num_envs;
    let mut adv = vec![0.0f32; rewards.len()];
    let mut running = vec![0.0f64; num_envs];
    for t in (0..steps).rev() {
        for e in 0..num_envs {
            let i = t * num_envs + e;
            let next_value = if t + 1 == steps {
                last_values[e] as f64
            } else {
                values[i + num_envs] as f64
            };
            let not_done = if dones[i] { 0.0 } else { 1.0 };
            let delta = rewards[i] as f64 + gamma * next_value * not_done - values[i] as f64;
            running[e] = delta + gamma * lambda * not_done * running[e];
            adv[i] = running[e] as f32;
        }
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// One agent's slice of a rollout, flattened over steps and envs.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentBatch {
    pub actor_obs: Array2<f32>,
    pub critic_obs: Array2<f32>,
    pub actions: Array2<f32>,
    pub log_prob: Array1<f32>,
    pub advantages: Array1<f32>,
    pub returns: Array1<f32>,
}

impl AgentBatch {
    pub fn len(&self) -> usize {
        self.actions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> MiniBatch<f32> {
        MiniBatch {
            actor_obs: self.actor_obs.select(Axis(0), idx),
            critic_obs: self.critic_obs.select(Axis(0), idx),
            actions: self.actions.select(Axis(0), idx),
            old_log_prob: self.log_prob.select(Axis(0), idx),
            advantages: self.advantages.select(Axis(0), idx),
            returns: self.returns.select(Axis(0), idx),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpoConfig {
    pub loss: LossConfig,
    pub epochs: usize,
    pub minibatches: usize,
    pub max_grad_norm: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            epochs: 5,
            minibatches: 4,
            max_grad_norm: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UpdateStats {
    pub loss: LossStats,
    pub grad_norm: f64,
    pub action_std: f64,
}

/// Parameters plus optimizer state of one learning agent.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentTrainer {
    pub params: AgentParams<f32>,
    pub opt: Adam,
}

impl AgentTrainer {
    pub fn new(params: AgentParams<f32>) -> Self {
        let opt = Adam::new(params.num_params());
        Self { params, opt }
    }

    /// Epochs of shuffled minibatch steps. Fails on a non-finite loss before
    /// touching the parameters for that minibatch.
    pub fn update<R: Rng + ?Sized>(
        &mut self,
        batch: &AgentBatch,
        cfg: &PpoConfig,
        lr: f64,
        rng: &mut R,
    ) -> Result<UpdateStats, String> {
        let n = batch.len();
        let mb_count = cfg.minibatches.clamp(1, n.max(1));
        let mb_size = n / mb_count;
        let mut idx: Vec<usize> = (0..n).collect();
        let mut acc = LossStats::default();
        let mut grad_norm = 0.0;
        let mut count = 0usize;
        let mut flat = self.params.to_flat();
        for _ in 0..cfg.epochs {
            idx.shuffle(rng);
            for b in 0..mb_count {
                let chunk = &idx[b * mb_size..(b + 1) * mb_size];
                let mb = batch.select(chunk);
                let (stats, grads) = loss_and_grad(&self.params, &mb, &cfg.loss);
                if !stats.total.is_finite() {
                    return Err(format!(
                        "loss {} (policy {}, value {}, entropy {})",
                        stats.total, stats.policy_loss, stats.value_loss, stats.entropy
                    ));
                }
                let g = grads.to_flat();
                grad_norm += self.opt.step(&mut flat, &g, lr, cfg.max_grad_norm);
                self.params.read_flat(&flat);
                self.params.clamp_log_std();
                self.params.write_flat_into(&mut flat);
                acc.total += stats.total;
                acc.policy_loss += stats.policy_loss;
                acc.value_loss += stats.value_loss;
                acc.entropy += stats.entropy;
                acc.approx_kl += stats.approx_kl;
                acc.clip_fraction += stats.clip_fraction;
                count += 1;
            }
        }
        let c = count.max(1) as f64;
        Ok(UpdateStats {
            loss: LossStats {
                total: acc.total / c,
                policy_loss: acc.policy_loss / c,
                value_loss: acc.value_loss / c,
                entropy: acc.entropy / c,
                approx_kl: acc.approx_kl / c,
                clip_fraction: acc.clip_fraction / c,
            },
            grad_norm: grad_norm / c,
            action_std: self.params.mean_action_std(),
        })
    }
}

impl<T: Scalar> AgentParams<T> {
    fn write_flat_into(&self, flat: &mut Vec<T>) {
        flat.clear();
        self.write_flat(flat);
    }
}
