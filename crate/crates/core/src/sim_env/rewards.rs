//! Per-agent reward terms. Each agent's scalar is the plain sum of its terms
//! in [`RewardBreakdown`], in order.

use nalgebra::Vector2;

use super::goals::GoalCommandLower;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Agent {
    Lower,
    Upper,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardWeights {
    pub lin_vel_x: f64,
    pub lin_vel_y: f64,
    pub ang_vel: f64,
    pub walk_height: f64,
    pub waist: f64,
    pub upper_dofs: f64,
    /// Wide exponential kernel on mean absolute arm error. Gives a usable
    /// gradient far from the target where `upper_dofs` is flat.
    pub upper_dense: f64,
    pub upper_dense_scale: f64,
    pub hip_pos: f64,
    pub negative_knee: f64,
    pub stance_tap: f64,
    pub stance_root: f64,
    pub stand_still: f64,
    pub ankle_roll: f64,
    pub action_rate: f64,
    pub torque: f64,
    pub joint_limit: f64,
    pub alive: f64,
    /// Disables the base-level stand-ins for leg-specific penalties.
    pub use_proxies: bool,
    /// Height fraction below which the knee proxy fires.
    pub knee_height_fraction: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            lin_vel_x: 2.0,
            lin_vel_y: 1.5,
            ang_vel: 4.0,
            walk_height: 2.0,
            waist: 2.0,
            upper_dofs: 4.0,
            upper_dense: 3.0,
            upper_dense_scale: 0.25,
            hip_pos: -2.5,
            negative_knee: -1.0,
            stance_tap: -5.0,
            stance_root: -5.0,
            stand_still: -0.15,
            ankle_roll: -2.0,
            action_rate: -0.01,
            torque: -1e-5,
            joint_limit: -5.0,
            alive: 0.5,
            use_proxies: true,
            knee_height_fraction: 0.5,
        }
    }
}

/// Everything the reward needs, measured after the physics step.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardInputs<'a> {
    pub command: &'a GoalCommandLower,
    /// Base planar velocity in the heading frame.
    pub lin_vel_xy: Vector2<f64>,
    pub yaw_rate: f64,
    pub height: f64,
    pub default_height: f64,
    /// Torso yaw relative to the integrated commanded heading.
    pub yaw_offset: f64,
    pub roll: f64,
    pub pitch: f64,
    /// Base offset from its support anchor, heading frame.
    pub support_offset: Vector2<f64>,
    pub upper_q: &'a [f64],
    pub upper_target: &'a [f64],
    pub lower_action: &'a [f64],
    pub lower_prev_action: &'a [f64],
    pub upper_action: &'a [f64],
    pub upper_prev_action: &'a [f64],
    pub upper_torque: &'a [f64],
    pub lower_wrench: &'a [f64],
    /// Summed excess beyond position limits.
    pub upper_limit_excess: f64,
    pub lower_limit_excess: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardTerm {
    pub name: &'static str,
    pub agent: Agent,
    pub proxy: bool,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RewardBreakdown {
    pub terms: Vec<RewardTerm>,
}

impl RewardBreakdown {
    fn push(&mut self, name: &'static str, agent: Agent, proxy: bool, value: f64) {
        self.terms.push(RewardTerm {
            name,
            agent,
            proxy,
            value,
        });
    }

    pub fn total(&self, agent: Agent) -> f64 {
        self.terms
            .iter()
            .filter(|t| t.agent == agent)
            .fold(0.0, |acc, t| acc + t.value)
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|t| t.name == name).map(|t| t.value)
    }
}

fn sq_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn sum_sq(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

pub fn compute_rewards(inp: &RewardInputs, w: &RewardWeights) -> (f64, f64, RewardBreakdown) {
    use Agent::{Lower, Upper};
    let cmd = inp.command;
    let mut b = RewardBreakdown::default();
    let ev = inp.lin_vel_xy - cmd.lin_vel_xy;
    b.push("lin_vel_x", Lower, false, w.lin_vel_x * (-4.0 * ev.x.abs()).exp());
    b.push("lin_vel_y", Lower, false, w.lin_vel_y * (-4.0 * ev.y.abs()).exp());
    b.push(
        "ang_vel",
        Lower,
        false,
        w.ang_vel * (-4.0 * (inp.yaw_rate - cmd.ang_vel_yaw).abs()).exp(),
    );
    b.push(
        "walk_height",
        Lower,
        false,
        w.walk_height * (-(cmd.root_height - inp.height).abs() / 0.05).exp(),
    );
    let waist_err = (inp.yaw_offset - cmd.waist_yaw).powi(2) + inp.roll.powi(2) + inp.pitch.powi(2);
    b.push("waist", Lower, false, w.waist * (-waist_err / 0.05).exp());

    let p = w.use_proxies;
    let on = |weight: f64, value: f64| if p { weight * value } else { 0.0 };
    let stance = if cmd.stance { 1.0 } else { 0.0 };
    b.push("hip_pos", Lower, true, on(w.hip_pos, inp.support_offset.norm()));
    let low = inp.height < w.knee_height_fraction * inp.default_height;
    b.push("negative_knee", Lower, true, on(w.negative_knee, if low { 1.0 } else { 0.0 }));
    b.push("stance_tap", Lower, true, on(w.stance_tap, stance * inp.support_offset.x.abs()));
    b.push("stance_root", Lower, true, on(w.stance_root, stance * inp.support_offset.y.abs()));
    let moving = if inp.lin_vel_xy.norm() > 0.1 { 1.0 } else { 0.0 };
    b.push("stand_still", Lower, true, on(w.stand_still, stance * moving));
    b.push("ankle_roll", Lower, true, on(w.ankle_roll, inp.roll.abs()));

    b.push(
        "action_rate_lower",
        Lower,
        false,
        w.action_rate * sq_diff(inp.lower_action, inp.lower_prev_action),
    );
    b.push("torque_lower", Lower, false, w.torque * sum_sq(inp.lower_wrench));
    b.push("joint_limit_lower", Lower, false, w.joint_limit * inp.lower_limit_excess);
    b.push("alive", Lower, false, w.alive);

    let e2 = sq_diff(inp.upper_q, inp.upper_target);
    b.push("upper_dofs", Upper, false, w.upper_dofs * (-e2 / 0.01).exp());
    let n = inp.upper_q.len().max(1) as f64;
    let mean_abs: f64 = inp
        .upper_q
        .iter()
        .zip(inp.upper_target)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n;
    b.push(
        "upper_dense",
        Upper,
        false,
        w.upper_dense * (-mean_abs / w.upper_dense_scale).exp(),
    );
    b.push(
        "action_rate_upper",
        Upper,
        false,
        w.action_rate * sq_diff(inp.upper_action, inp.upper_prev_action),
    );
    b.push("torque_upper", Upper, false, w.torque * sum_sq(inp.upper_torque));
    b.push("joint_limit_upper", Upper, false, w.joint_limit * inp.upper_limit_excess);

    (b.total(Lower), b.total(Upper), b)
}
