//! Run configuration: a `[train]` section (and optional `[eval]`) in the
//! key-value text format. Every field has a default; unknown keys are errors.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::error::{FormatError, TrainError};
use crate::force_curriculum::{ClipBox, SchedulerConfig};
use crate::kvfile::{fmt_f64, Document, Section};
use crate::robot_model::resolve_model;
use crate::sim_env::{EnvConfig, ForceMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Mode {
    /// Separate lower and upper PPO agents with their own rewards.
    DualAgent,
    /// One agent for all joints on the summed reward.
    Monolithic,
    UpperPd,
    UpperPid,
    UpperPdId,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::DualAgent,
        Mode::Monolithic,
        Mode::UpperPd,
        Mode::UpperPid,
        Mode::UpperPdId,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::DualAgent => "dual_agent",
            Mode::Monolithic => "monolithic",
            Mode::UpperPd => "upper_pd",
            Mode::UpperPid => "upper_pid",
            Mode::UpperPdId => "upper_pd_id",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }

    /// Arms driven by a joint controller rather than a learned policy.
    pub fn upper_is_controller(self) -> bool {
        matches!(self, Mode::UpperPd | Mode::UpperPid | Mode::UpperPdId)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Curriculum {
    /// Torque-aware envelope, success-gated scale.
    On,
    /// No external forces during training.
    Off,
    /// Clip-box envelope without torque reasoning, success-gated scale.
    Naive,
}

impl Curriculum {
    pub const ALL: [Curriculum; 3] = [Curriculum::On, Curriculum::Off, Curriculum::Naive];

    pub fn as_str(self) -> &'static str {
        match self {
            Curriculum::On => "on",
            Curriculum::Off => "off",
            Curriculum::Naive => "naive",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == s)
    }
}

impl fmt::Display for Curriculum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The (mode, curriculum) pairs of the comparison grids.
pub fn experiment_grid() -> Vec<(Mode, Curriculum)> {
    vec![
        (Mode::UpperPd, Curriculum::On),
        (Mode::UpperPid, Curriculum::On),
        (Mode::UpperPdId, Curriculum::On),
        (Mode::Monolithic, Curriculum::Off),
        (Mode::Monolithic, Curriculum::On),
        (Mode::DualAgent, Curriculum::Off),
        (Mode::DualAgent, Curriculum::On),
        (Mode::DualAgent, Curriculum::Naive),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub model: String,
    pub mode: Mode,
    pub force_curriculum: Curriculum,
    pub seed: u64,
    pub num_envs: usize,
    pub rollout_steps: usize,
    pub total_steps: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub learning_rate: f64,
    pub lr_decay: bool,
    pub epochs: usize,
    pub minibatches: usize,
    pub max_grad_norm: f64,
    pub hidden: Vec<usize>,
    pub init_log_std: f64,
    pub reward_scale: f64,
    pub episode_seconds: f64,
    pub randomization: bool,
    /// Clip box for the torque-aware envelope.
    pub clip_box: String,
    /// Clip box used by the naive curriculum.
    pub naive_clip_box: String,
    pub initial_alpha: f64,
    pub promote_threshold: f64,
    pub demote_threshold: f64,
    pub alpha_step: f64,
    pub alpha_window: usize,
    pub fall_error: f64,
    pub filter_beta: f64,
    pub force_resample: (f64, f64),
    pub waypoint_range: f64,
    pub height_range: (f64, f64),
    pub stance_probability: f64,
    pub upper_dense_weight: f64,
    pub estimator_hidden: Vec<usize>,
    pub estimator_lr: f64,
    pub estimator_epochs: usize,
    pub pid_ki_ratio: f64,
    /// Evaluation episodes per level.
    pub eval_episodes: usize,
    pub eval_levels: Vec<f64>,
    pub eval_seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            model: "mini-humanoid".into(),
            mode: Mode::DualAgent,
            force_curriculum: Curriculum::On,
            seed: 0,
            num_envs: 256,
            rollout_steps: 24,
            total_steps: 2_000_000,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            entropy_coef: 0.005,
            value_coef: 0.5,
            learning_rate: 3e-4,
            lr_decay: true,
            epochs: 5,
            minibatches: 4,
            max_grad_norm: 1.0,
            hidden: vec![512, 256, 128],
            init_log_std: -0.5,
            reward_scale: 0.05,
            episode_seconds: 20.0,
            randomization: true,
            clip_box: "narrow".into(),
            naive_clip_box: "wide".into(),
            initial_alpha: 0.0,
            promote_threshold: 0.25,
            demote_threshold: 0.5,
            alpha_step: 0.05,
            alpha_window: 50,
            fall_error: 1.0,
            filter_beta: 0.9,
            force_resample: (2.0, 5.0),
            waypoint_range: 0.8,
            height_range: (0.8, 1.0),
            stance_probability: 0.3,
            upper_dense_weight: 3.0,
            estimator_hidden: vec![256, 128],
            estimator_lr: 1e-3,
            estimator_epochs: 2,
            pid_ki_ratio: 2.0,
            eval_episodes: 252,
            eval_levels: vec![0.0, 0.5, 1.0],
            eval_seed: 12345,
        }
    }
}

const TRAIN_KEYS: &[&str] = &[
    "model",
    "mode",
    "force_curriculum",
    "seed",
    "num_envs",
    "rollout_steps",
    "total_steps",
    "gamma",
    "gae_lambda",
    "clip",
    "entropy_coef",
    "value_coef",
    "learning_rate",
    "lr_decay",
    "epochs",
    "minibatches",
    "max_grad_norm",
    "hidden",
    "init_log_std",
    "reward_scale",
    "episode_seconds",
    "randomization",
    "clip_box",
    "naive_clip_box",
    "initial_alpha",
    "promote_threshold",
    "demote_threshold",
    "alpha_step",
    "alpha_window",
    "fall_error",
    "filter_beta",
    "force_resample",
    "waypoint_range",
    "height_range",
    "stance_probability",
    "upper_dense_weight",
    "estimator_hidden",
    "estimator_lr",
    "estimator_epochs",
    "pid_ki_ratio",
];

const EVAL_KEYS: &[&str] = &["episodes", "levels", "seed"];

fn pair(s: &Section, key: &str) -> Result<(f64, f64), FormatError> {
    let [a, b] = s.vec_n::<2>(key)?;
    Ok((a, b))
}

fn fmt_list(xs: &[usize]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

impl TrainerConfig {
    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let doc = Document::parse(text)?;
        let mut cfg = Self::default();
        let mut seen_train = false;
        let mut seen_eval = false;
        for s in &doc.sections {
            match s.name.as_str() {
                "train" if !seen_train => {
                    seen_train = true;
                    cfg.apply_train(s)?;
                }
                "eval" if !seen_eval => {
                    seen_eval = true;
                    cfg.apply_eval(s)?;
                }
                "train" | "eval" => {
                    return Err(TrainError::Config(format!("line {}: repeated [{}] section", s.line, s.name)))
                }
                other => {
                    return Err(TrainError::Config(format!("line {}: unknown section [{other}]", s.line)))
                }
            }
        }
        if !seen_train {
            return Err(TrainError::Config("missing [train] section".into()));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    fn apply_train(&mut self, s: &Section) -> Result<(), TrainError> {
        s.check_keys(TRAIN_KEYS)?;
        let bad = |key: &str, v: &str| {
            TrainError::Config(format!("line {}: invalid value `{v}` for `{key}`", s.line))
        };
        if let Some(v) = s.get("model") {
            self.model = v.to_string();
        }
        if let Some(v) = s.get("mode") {
            self.mode = Mode::parse(v).ok_or_else(|| bad("mode", v))?;
        }
        if let Some(v) = s.get("force_curriculum") {
            self.force_curriculum = Curriculum::parse(v).ok_or_else(|| bad("force_curriculum", v))?;
        }
        macro_rules! num {
            ($field:ident, $method:ident) => {
                if s.get(stringify!($field)).is_some() {
                    self.$field = s.$method(stringify!($field))?;
                }
            };
        }
        num!(seed, u64);
        num!(num_envs, usize);
        num!(rollout_steps, usize);
        num!(total_steps, usize);
        num!(gamma, f64);
        num!(gae_lambda, f64);
        num!(clip, f64);
        num!(entropy_coef, f64);
        num!(value_coef, f64);
        num!(learning_rate, f64);
        num!(lr_decay, bool);
        num!(epochs, usize);
        num!(minibatches, usize);
        num!(max_grad_norm, f64);
        num!(init_log_std, f64);
        num!(reward_scale, f64);
        num!(episode_seconds, f64);
        num!(randomization, bool);
        num!(initial_alpha, f64);
        num!(promote_threshold, f64);
        num!(demote_threshold, f64);
        num!(alpha_step, f64);
        num!(alpha_window, usize);
        num!(fall_error, f64);
        num!(filter_beta, f64);
        num!(waypoint_range, f64);
        num!(stance_probability, f64);
        num!(upper_dense_weight, f64);
        num!(estimator_lr, f64);
        num!(estimator_epochs, usize);
        num!(pid_ki_ratio, f64);
        if s.get("hidden").is_some() {
            self.hidden = s.usize_list("hidden")?;
        }
        if s.get("estimator_hidden").is_some() {
            self.estimator_hidden = s.usize_list("estimator_hidden")?;
        }
        if s.get("force_resample").is_some() {
            self.force_resample = pair(s, "force_resample")?;
        }
        if s.get("height_range").is_some() {
            self.height_range = pair(s, "height_range")?;
        }
        if let Some(v) = s.get("clip_box") {
            self.clip_box = v.to_string();
        }
        if let Some(v) = s.get("naive_clip_box") {
            self.naive_clip_box = v.to_string();
        }
        Ok(())
    }

    fn apply_eval(&mut self, s: &Section) -> Result<(), TrainError> {
        s.check_keys(EVAL_KEYS)?;
        if s.get("episodes").is_some() {
            self.eval_episodes = s.usize("episodes")?;
        }
        if s.get("levels").is_some() {
            self.eval_levels = s.vec("levels")?;
        }
        if s.get("seed").is_some() {
            self.eval_seed = s.u64("seed")?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.num_envs == 0 || self.rollout_steps == 0 {
            return err("num_envs and rollout_steps must be positive");
        }
        if self.epochs == 0 || self.minibatches == 0 {
            return err("epochs and minibatches must be positive");
        }
        if self.minibatches > self.num_envs * self.rollout_steps {
            return err("more minibatches than transitions per batch");
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return err("gamma and gae_lambda must lie in [0, 1]");
        }
        if self.clip < 0.0 || self.learning_rate <= 0.0 || self.reward_scale <= 0.0 {
            return err("clip must be >= 0, learning_rate and reward_scale > 0");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return err("hidden must list positive layer sizes");
        }
        if self.estimator_hidden.is_empty() || self.estimator_hidden.contains(&0) {
            return err("estimator_hidden must list positive layer sizes");
        }
        if ClipBox::preset(&self.clip_box).is_none() || ClipBox::preset(&self.naive_clip_box).is_none() {
            return err("clip boxes must be `narrow` or `wide`");
        }
        if !(0.0..=1.0).contains(&self.initial_alpha) {
            return err("initial_alpha must lie in [0, 1]");
        }
        if self.alpha_window == 0 || self.alpha_step <= 0.0 {
            return err("alpha_window and alpha_step must be positive");
        }
        if self.promote_threshold > self.demote_threshold {
            return err("promote_threshold must not exceed demote_threshold");
        }
        if !(0.0..1.0).contains(&self.filter_beta) {
            return err("filter_beta must lie in [0, 1)");
        }
        if self.force_resample.0 <= 0.0 || self.force_resample.1 < self.force_resample.0 {
            return err("force_resample must be an increasing positive pair");
        }
        let (lo, hi) = self.height_range;
        if lo < 0.4 || hi > 1.2 || lo > hi {
            return err("height_range must lie within [0.4, 1.2]");
        }
        if !(0.0..=1.0).contains(&self.stance_probability) {
            return err("stance_probability must lie in [0, 1]");
        }
        if self.episode_seconds <= 0.0 {
            return err("episode_seconds must be positive");
        }
        if self.eval_levels.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return err("eval levels must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn to_document(&self) -> Document {
        let mut t = Section::new("train");
        t.push("model", &self.model);
        t.push("mode", self.mode.as_str());
        t.push("force_curriculum", self.force_curriculum.as_str());
        t.push("seed", self.seed.to_string());
        t.push("num_envs", self.num_envs.to_string());
        t.push("rollout_steps", self.rollout_steps.to_string());
        t.push("total_steps", self.total_steps.to_string());
        t.push("gamma", fmt_f64(self.gamma));
        t.push("gae_lambda", fmt_f64(self.gae_lambda));
        t.push("clip", fmt_f64(self.clip));
        t.push("entropy_coef", fmt_f64(self.entropy_coef));
        t.push("value_coef", fmt_f64(self.value_coef));
        t.push("learning_rate", fmt_f64(self.learning_rate));
        t.push("lr_decay", self.lr_decay.to_string());
        t.push("epochs", self.epochs.to_string());
        t.push("minibatches", self.minibatches.to_string());
        t.push("max_grad_norm", fmt_f64(self.max_grad_norm));
        t.push("hidden", fmt_list(&self.hidden));
        t.push("init_log_std", fmt_f64(self.init_log_std));
        t.push("reward_scale", fmt_f64(self.reward_scale));
        t.push("episode_seconds", fmt_f64(self.episode_seconds));
        t.push("randomization", self.randomization.to_string());
        t.push("clip_box", &self.clip_box);
        t.push("naive_clip_box", &self.naive_clip_box);
        t.push("initial_alpha", fmt_f64(self.initial_alpha));
        t.push("promote_threshold", fmt_f64(self.promote_threshold));
        t.push("demote_threshold", fmt_f64(self.demote_threshold));
        t.push("alpha_step", fmt_f64(self.alpha_step));
        t.push("alpha_window", self.alpha_window.to_string());
        t.push("fall_error", fmt_f64(self.fall_error));
        t.push("filter_beta", fmt_f64(self.filter_beta));
        t.push(
            "force_resample",
            format!("{} {}", fmt_f64(self.force_resample.0), fmt_f64(self.force_resample.1)),
        );
        t.push("waypoint_range", fmt_f64(self.waypoint_range));
        t.push(
            "height_range",
            format!("{} {}", fmt_f64(self.height_range.0), fmt_f64(self.height_range.1)),
        );
        t.push("stance_probability", fmt_f64(self.stance_probability));
        t.push("upper_dense_weight", fmt_f64(self.upper_dense_weight));
        t.push("estimator_hidden", fmt_list(&self.estimator_hidden));
        t.push("estimator_lr", fmt_f64(self.estimator_lr));
        t.push("estimator_epochs", self.estimator_epochs.to_string());
        t.push("pid_ki_ratio", fmt_f64(self.pid_ki_ratio));
        let mut e = Section::new("eval");
        e.push("episodes", self.eval_episodes.to_string());
        e.push(
            "levels",
            self.eval_levels.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(" "),
        );
        e.push("seed", self.eval_seed.to_string());
        Document {
            sections: vec![t, e],
        }
    }

    pub fn render(&self) -> String {
        self.to_document().render()
    }

    /// First 16 hex digits of the SHA-256 of the canonical rendering.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.render().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn scheduler(&self) -> SchedulerConfig {
        SchedulerConfig {
            promote_threshold: self.promote_threshold,
            demote_threshold: self.demote_threshold,
            step_size: self.alpha_step,
            window: self.alpha_window,
            fall_error: self.fall_error,
        }
    }

    /// Environment used for training under this configuration.
    pub fn env_config(&self) -> Result<EnvConfig, TrainError> {
        let model = resolve_model(&self.model)?;
        let mut env = EnvConfig::new(model)?;
        env.episode_seconds = self.episode_seconds;
        if !self.randomization {
            env.randomization = None;
        }
        env.goals.waypoint_range = self.waypoint_range;
        env.goals.height_fraction = self.height_range;
        env.goals.stance_probability = self.stance_probability;
        env.rewards.upper_dense = self.upper_dense_weight;
        env.force.filter_beta = self.filter_beta;
        env.force.resample_interval = self.force_resample;
        let preset = |name: &str| ClipBox::preset(name).expect("validated clip box");
        match self.force_curriculum {
            Curriculum::On => {
                env.force.mode = ForceMode::TorqueAware;
                env.force.clip = preset(&self.clip_box);
            }
            Curriculum::Off => {
                env.force.mode = ForceMode::Disabled;
                env.force.clip = preset(&self.clip_box);
            }
            Curriculum::Naive => {
                env.force.mode = ForceMode::Naive;
                env.force.clip = preset(&self.naive_clip_box);
            }
        }
        Ok(env)
    }

    /// Environment used for evaluation: always the torque-aware pipeline
    /// with the configured clip box.
    pub fn eval_env_config(&self) -> Result<EnvConfig, TrainError> {
        let mut env = self.env_config()?;
        env.force.mode = ForceMode::TorqueAware;
        env.force.clip = ClipBox::preset(&self.clip_box).expect("validated clip box");
        Ok(env)
    }

    pub fn shared_env(&self) -> Result<Arc<EnvConfig>, TrainError> {
        Ok(Arc::new(self.env_config()?))
    }
}
