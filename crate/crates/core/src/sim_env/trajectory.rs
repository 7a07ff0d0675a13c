//! Per-step episode records as CSV.
//!
//! The first line is a comment `# format=1 config_hash=<hex> seed=<n>`, the
//! second the column header. Columns: time, base position and attitude,
//! heading-frame velocity, lower command, arm positions and targets, the
//! clipped action, applied forces and feasibility scales per end effector,
//! both reward totals and every reward term by name.

use std::fmt::Write as _;

use super::{Env, StepResult, LOWER_DOF};

#[derive(Debug, Clone, Default)]
pub struct TrajectoryRecorder {
    header: Vec<String>,
    rows: Vec<Vec<f64>>,
}

impl TrajectoryRecorder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Records the state after `env.step` returned `result` for `action`.
    pub fn record(&mut self, env: &Env, action: &[f64], result: &StepResult) {
        let nu = env.config().upper_dof();
        let arms = env.forces.len();
        if self.header.is_empty() {
            let mut h: Vec<String> = [
                "time", "x", "y", "z", "yaw", "roll", "pitch", "vx", "vy", "vz", "yaw_rate", "cmd_vx",
                "cmd_vy", "cmd_yaw_rate", "cmd_stance", "cmd_height", "cmd_waist_yaw",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect();
            h.extend((0..nu).map(|i| format!("q{i}")));
            h.extend((0..nu).map(|i| format!("q_target{i}")));
            h.extend((0..LOWER_DOF + nu).map(|i| format!("a{i}")));
            for k in 0..arms {
                h.extend(["fx", "fy", "fz", "feasibility"].iter().map(|c| format!("{c}{k}")));
            }
            h.push("reward_lower".into());
            h.push("reward_upper".into());
            h.extend(result.breakdown.terms.iter().map(|t| t.name.to_string()));
            self.header = h;
        }
        let b = &env.base;
        let v = b.heading_velocity();
        let g = &env.lower_goal;
        let clip = env.config().action_clip;
        let mut row = vec![
            env.time(),
            b.position.x,
            b.position.y,
            b.position.z,
            b.yaw,
            b.roll,
            b.pitch,
            v.x,
            v.y,
            b.velocity.z,
            b.yaw_rate,
            g.lin_vel_xy.x,
            g.lin_vel_xy.y,
            g.ang_vel_yaw,
            if g.stance { 1.0 } else { 0.0 },
            g.root_height,
            g.waist_yaw,
        ];
        row.extend(env.upper_q());
        row.extend(env.upper_goal.target(env.time()));
        row.extend(action.iter().map(|a| a.clamp(-clip, clip)));
        for ch in &env.forces {
            row.extend(ch.applied.iter().copied());
            row.push(ch.feasibility_scale);
        }
        row.push(result.reward_lower);
        row.push(result.reward_upper);
        row.extend(result.breakdown.terms.iter().map(|t| t.value));
        self.rows.push(row);
    }

    pub fn to_csv(&self, config_hash: &str, seed: u64) -> String {
        let mut out = format!("# format=1 config_hash={config_hash} seed={seed}\n");
        out.push_str(&self.header.join(","));
        out.push('\n');
        for row in &self.rows {
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{v}");
            }
            out.push('\n');
        }
        out
    }
}
