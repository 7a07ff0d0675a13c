//! Evaluation harness: tracking metrics at pinned force levels, sweeps over
//! saved runs, and force-envelope reports.

use std::fmt::Write as _;
use std::path::PathBuf;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{EvalError, TrainError};
use crate::force_curriculum::{admissible_bounds, ClipBox, ForceEnvelope};
use crate::kinematics::{forward_kinematics, FramePlacement};
use crate::robot_model::{ArmChain, RobotModel};
use crate::sim_env::arm::ArmState;
use crate::sim_env::base::BaseState;
use crate::sim_env::{Env, StepResult};
use crate::trainer::checkpoint::Checkpoint;
use crate::trainer::config::{experiment_grid, Curriculum, Mode, TrainerConfig};
use crate::trainer::env_seed;
use crate::trainer::policy::PolicySet;

/// Mean over steps of the joint-averaged absolute error.
pub fn upper_tracking_error(q: &[Vec<f64>], target: &[Vec<f64>]) -> f64 {
    if q.is_empty() {
        return 0.0;
    }
    let per_step = q.iter().zip(target).map(|(a, b)| {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len().max(1) as f64
    });
    per_step.sum::<f64>() / q.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub mode: Mode,
    pub curriculum: Curriculum,
    pub alpha: f64,
    pub episodes: usize,
    pub upper_error: f64,
    pub upper_error_std: f64,
    /// Linear x, linear y and yaw-rate channels averaged together.
    pub root_error: f64,
    pub root_error_std: f64,
    /// Per-channel root errors: vx, vy (m/s), yaw rate (rad/s).
    pub root_channels: [f64; 3],
    pub fall_rate: f64,
    pub feasibility: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Runs `episodes` mean-action episodes at force level `alpha` with the
/// torque-aware pipeline, all in lockstep.
pub fn eval_policy(
    policy: &PolicySet,
    config: &TrainerConfig,
    alpha: f64,
    episodes: usize,
    seed: u64,
) -> Result<MetricsReport, EvalError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(EvalError::Argument(format!("force level {alpha} outside [0, 1]")));
    }
    if policy.mode != config.mode {
        return Err(EvalError::ModelMismatch(format!(
            "policy mode {} but config mode {}",
            policy.mode, config.mode
        )));
    }
    let env_cfg = std::sync::Arc::new(config.eval_env_config()?);
    for slot in &policy.agents {
        let want = slot.role.actor_input_dim(&env_cfg);
        let have = slot.trainer.params.actor.input_dim();
        if want != have {
            return Err(EvalError::ModelMismatch(format!(
                "{} actor expects {have} inputs, model `{}` provides {want}",
                slot.role.as_str(),
                env_cfg.model.name
            )));
        }
    }
    let mut envs: Vec<Env> = (0..episodes)
        .map(|i| {
            let mut e = Env::new(env_cfg.clone(), env_seed(seed, i));
            e.set_alpha(alpha);
            e
        })
        .collect();
    let mut controllers = policy.controllers(&envs);
    let mut ids: Vec<usize> = (0..episodes).collect();
    let mut finished: Vec<Option<StepResult>> = vec![None; episodes];
    while !envs.is_empty() {
        let act = policy.act::<ChaCha8Rng>(&mut envs, &mut controllers, None);
        let results: Vec<StepResult> = {
            use rayon::prelude::*;
            envs.par_iter_mut()
                .zip(act.env_actions.par_iter())
                .map(|(env, a)| env.step(a))
                .collect::<Result<_, _>>()
                .map_err(TrainError::from)?
        };
        let done: Vec<bool> = results.iter().map(|r| r.done()).collect();
        for (k, r) in results.into_iter().enumerate() {
            if done[k] {
                finished[ids[k]] = Some(r);
            }
        }
        if done.iter().any(|d| *d) {
            let mut flags = done.iter();
            envs.retain(|_| !flags.next().expect("one flag per env"));
            if !controllers.is_empty() {
                let mut flags = done.iter();
                controllers.retain(|_| !flags.next().expect("one flag per env"));
            }
            ids = ids.iter().zip(&done).filter(|(_, d)| !**d).map(|(i, _)| *i).collect();
        }
    }
    let eps: Vec<_> = finished
        .into_iter()
        .map(|r| r.and_then(|r| r.episode).expect("every episode finishes"))
        .collect();
    let upper: Vec<f64> = eps.iter().map(|e| e.stats.mean_upper_error()).collect();
    let root: Vec<f64> = eps.iter().map(|e| e.stats.mean_root_error()).collect();
    let mut channels = [0.0; 3];
    for e in &eps {
        let c = e.stats.mean_root_errors();
        for i in 0..3 {
            channels[i] += c[i] / eps.len().max(1) as f64;
        }
    }
    let feas: Vec<f64> = eps
        .iter()
        .filter(|e| e.stats.feasibility_count > 0)
        .map(|e| e.stats.mean_feasibility())
        .collect();
    let (ue, us) = mean_std(&upper);
    let (re, rs) = mean_std(&root);
    Ok(MetricsReport {
        mode: config.mode,
        curriculum: config.force_curriculum,
        alpha,
        episodes: eps.len(),
        upper_error: ue,
        upper_error_std: us,
        root_error: re,
        root_error_std: rs,
        root_channels: channels,
        fall_rate: eps.iter().filter(|e| e.fell).count() as f64 / eps.len().max(1) as f64,
        feasibility: if feas.is_empty() {
            1.0
        } else {
            feas.iter().sum::<f64>() / feas.len() as f64
        },
    })
}

/// Loads a checkpoint and evaluates it.
pub fn eval_checkpoint(ckpt: &Checkpoint, alpha: f64, episodes: usize, seed: u64) -> Result<MetricsReport, EvalError> {
    let policy = PolicySet::from_checkpoint(ckpt)?;
    eval_policy(&policy, &ckpt.config, alpha, episodes, seed)
}

pub const REPORT_COLUMNS: &str = "mode,curriculum,seed,alpha,status,episodes,upper_error,upper_error_std,root_error,root_error_std,root_vx,root_vy,root_yaw_rate,fall_rate,feasibility";

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub mode: Mode,
    pub curriculum: Curriculum,
    /// Training seed of the evaluated run, if present.
    pub seed: Option<u64>,
    pub alpha: f64,
    /// `None` when the run's checkpoint is missing.
    pub report: Option<MetricsReport>,
}

impl SweepRow {
    fn csv(&self) -> String {
        let seed = self.seed.map(|s| s.to_string()).unwrap_or_default();
        match &self.report {
            Some(r) => format!(
                "{},{},{seed},{},ok,{},{},{},{},{},{},{},{},{},{}",
                self.mode,
                self.curriculum,
                self.alpha,
                r.episodes,
                r.upper_error,
                r.upper_error_std,
                r.root_error,
                r.root_error_std,
                r.root_channels[0],
                r.root_channels[1],
                r.root_channels[2],
                r.fall_rate,
                r.feasibility
            ),
            None => format!("{},{},{seed},{},absent,0,,,,,,,,,", self.mode, self.curriculum, self.alpha),
        }
    }
}

/// One grid entry: the checkpoint of a (mode, curriculum) run, if any.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepEntry {
    pub mode: Mode,
    pub curriculum: Curriculum,
    pub seed: Option<u64>,
    pub checkpoint: Option<PathBuf>,
}

/// Entries covering every grid pair: one per available run (given as
/// mode, curriculum, seed and checkpoint path), and one absent entry for
/// each pair without a run.
pub fn grid_entries(runs: &[(Mode, Curriculum, u64, PathBuf)]) -> Vec<SweepEntry> {
    let mut out = Vec::new();
    for (mode, curriculum) in experiment_grid() {
        let mut found: Vec<_> = runs
            .iter()
            .filter(|r| r.0 == mode && r.1 == curriculum)
            .map(|r| SweepEntry {
                mode,
                curriculum,
                seed: Some(r.2),
                checkpoint: Some(r.3.clone()),
            })
            .collect();
        if found.is_empty() {
            found.push(SweepEntry {
                mode,
                curriculum,
                seed: None,
                checkpoint: None,
            });
        }
        out.extend(found);
    }
    out
}

/// Evaluates each entry at each level. Rows come back sorted by
/// (mode, curriculum, level); missing or unreadable checkpoints give
/// absent rows.
pub fn sweep(
    entries: &[SweepEntry],
    levels: &[f64],
    episodes: usize,
    seed: u64,
    mut on_row: impl FnMut(&SweepRow),
) -> Result<Vec<SweepRow>, EvalError> {
    let mut rows = Vec::new();
    for e in entries {
        let ckpt = e.checkpoint.as_ref().and_then(|p| Checkpoint::load(p).ok());
        let policy = match &ckpt {
            Some(c) => Some(PolicySet::from_checkpoint(c)?),
            None => None,
        };
        for &alpha in levels {
            let report = match (&ckpt, &policy) {
                (Some(c), Some(p)) => Some(eval_policy(p, &c.config, alpha, episodes, seed)?),
                _ => None,
            };
            let row = SweepRow {
                mode: e.mode,
                curriculum: e.curriculum,
                seed: e.seed,
                alpha,
                report,
            };
            on_row(&row);
            rows.push(row);
        }
    }
    rows.sort_by(|a, b| {
        (a.mode, a.curriculum, a.seed)
            .cmp(&(b.mode, b.curriculum, b.seed))
            .then(a.alpha.total_cmp(&b.alpha))
    });
    Ok(rows)
}

pub fn report_csv(rows: &[SweepRow], config_hash: &str, seed: u64) -> String {
    let mut out = format!("# format=1 config_hash={config_hash} seed={seed}\n{REPORT_COLUMNS}\n");
    for r in rows {
        out.push_str(&r.csv());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeRow {
    pub pose_id: usize,
    pub arm: String,
    pub axis: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub clip_min: f64,
    pub clip_max: f64,
    pub clipped_min: f64,
    pub clipped_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeReport {
    pub rows: Vec<EnvelopeRow>,
    /// Arm poses whose gravity torque alone exceeds a limit; their bounds
    /// are reported as zero.
    pub infeasible: usize,
}

/// Envelope of one arm pose, with the arm mounted on a level base at its
/// default height. `None` when gravity alone breaks a torque limit.
pub fn arm_envelope(model: &RobotModel, arm: &ArmChain, q: &[f64]) -> Option<ForceEnvelope> {
    let base = FramePlacement::from_base_pose(BaseState::new(model.base.default_height).position, 0.0, 0.0, 0.0);
    let mut st = ArmState::new(arm, &vec![1.0; arm.links.len()], &vec![1.0; arm.dof()], &vec![1.0; arm.dof()]);
    st.q = q.to_vec();
    let snap = st.snapshot(&base, &BaseState::gravity());
    let kin = forward_kinematics(arm, q, &base);
    admissible_bounds(
        &kin.ee_com_jacobian(),
        &arm.torque_limits(),
        &snap.budget_gravity(),
        crate::force_curriculum::DEFAULT_EPSILON,
    )
    .ok()
}

/// Random within-limit poses of every arm and their envelopes.
pub fn envelope_report(model: &RobotModel, poses: usize, clip: &ClipBox, seed: u64) -> EnvelopeReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut infeasible = 0;
    for pose_id in 0..poses {
        for arm in &model.arms {
            let q: Vec<f64> = arm
                .joints
                .iter()
                .map(|j| rng.random_range(j.position_limits.0..=j.position_limits.1))
                .collect();
            // gravity alone over a limit: no force is admissible
            let env = arm_envelope(model, arm, &q).unwrap_or_else(|| {
                infeasible += 1;
                ForceEnvelope::unclipped(Vector3::zeros(), Vector3::zeros())
            });
            let c = env.clipped(clip);
            for axis in 0..3 {
                rows.push(EnvelopeRow {
                    pose_id,
                    arm: arm.side.as_str().to_string(),
                    axis,
                    f_min: env.f_min[axis],
                    f_max: env.f_max[axis],
                    clip_min: clip.min[axis],
                    clip_max: clip.max[axis],
                    clipped_min: c.f_min[axis],
                    clipped_max: c.f_max[axis],
                });
            }
        }
    }
    EnvelopeReport { rows, infeasible }
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl EnvelopeReport {
    pub fn to_csv(&self, config_hash: &str, seed: u64) -> String {
        let mut out = format!(
            "# format=1 config_hash={config_hash} seed={seed}\npose_id,arm,axis,f_min,f_max,clip_min,clip_max,clipped_min,clipped_max\n"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.pose_id,
                r.arm,
                ["x", "y", "z"][r.axis],
                r.f_min,
                r.f_max,
                r.clip_min,
                r.clip_max,
                r.clipped_min,
                r.clipped_max
            );
        }
        out
    }

    /// Quantiles (5%, 50%, 95%) of the clipped bounds per axis.
    pub fn summary(&self) -> String {
        let mut out = String::from("axis,bound,q05,q50,q95\n");
        for axis in 0..3 {
            for (name, pick) in [
                ("min", (|r: &EnvelopeRow| r.clipped_min) as fn(&EnvelopeRow) -> f64),
                ("max", |r: &EnvelopeRow| r.clipped_max),
            ] {
                let mut v: Vec<f64> = self.rows.iter().filter(|r| r.axis == axis).map(pick).collect();
                v.sort_by(f64::total_cmp);
                let _ = writeln!(
                    out,
                    "{},{name},{},{},{}",
                    ["x", "y", "z"][axis],
                    quantile(&v, 0.05),
                    quantile(&v, 0.5),
                    quantile(&v, 0.95)
                );
            }
        }
        if self.infeasible > 0 {
            let _ = writeln!(out, "# {} arm poses with zero bounds: gravity exceeds a torque limit", self.infeasible);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::robot_model::builtin_model;

    #[test]
    fn three_step_mean_error() {
        let q = vec![vec![0.1], vec![0.2], vec![0.3]];
        let t = vec![vec![0.0]; 3];
        assert!((upper_tracking_error(&q, &t) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn report_sizes_and_axes() {
        let model = builtin_model("toy-arm").unwrap();
        let r = envelope_report(&model, 10, &ClipBox::default(), 0);
        assert_eq!(r.rows.len(), 30);
        let csv = r.to_csv("h", 0);
        assert_eq!(csv.lines().count(), 2 + r.rows.len());
    }

    #[test]
    fn hanging_toy_arm_has_widest_z_bounds() {
        let model = builtin_model("toy-arm").unwrap();
        let arm = &model.arms[0];
        // axis -y, so +pi/2 points the chain straight down
        let down = arm_envelope(&model, arm, &[-std::f64::consts::FRAC_PI_2, 0.0]).unwrap();
        let flat = arm_envelope(&model, arm, &[0.0, 0.0]).unwrap();
        let width = |e: &ForceEnvelope| e.f_max.z - e.f_min.z;
        assert!(width(&down) > width(&flat));
        // hanging straight down, z forces load no joint
        assert!(down.f_max.z > 1e5);
    }

    #[test]
    fn zero_torque_limits_give_zero_bounds() {
        let mut model = builtin_model("toy-arm").unwrap();
        for j in &mut model.arms[0].joints {
            j.torque_limit = 0.0;
        }
        let r = envelope_report(&model, 5, &ClipBox::default(), 1);
        assert!(r.infeasible > 0);
        assert!(r.rows.iter().all(|x| x.clipped_min == 0.0 && x.clipped_max == 0.0));
    }

    #[test]
    fn wide_clip_never_narrower() {
        let model = builtin_model("mini-humanoid").unwrap();
        let n = envelope_report(&model, 50, &ClipBox::narrow(), 3);
        let w = envelope_report(&model, 50, &ClipBox::wide(), 3);
        for (a, b) in n.rows.iter().zip(&w.rows) {
            assert!(b.clipped_min <= a.clipped_min + 1e-12);
            assert!(b.clipped_max >= a.clipped_max - 1e-12);
        }
    }
}
