//! Per-update training log as CSV. The first line is
//! `# format=1 config_hash=<hex> seed=<n>`; there are no wall-clock columns,
//! so logs of equal-seed runs compare byte for byte.

use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AgentLog {
    pub reward: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub action_std: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct UpdateRecord {
    pub update: usize,
    pub env_steps: u64,
    pub alpha: f64,
    pub learning_rate: f64,
    pub episodes: usize,
    /// Means over episodes finished during this update's rollout; NaN if none.
    pub upper_error: f64,
    pub root_error: f64,
    pub fall_rate: f64,
    pub feasibility: f64,
    pub estimator_loss: f64,
    /// Agent name and its statistics, in agent order.
    pub agents: Vec<(String, AgentLog)>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainingLog {
    pub records: Vec<UpdateRecord>,
}

const BASE_COLUMNS: &[&str] = &[
    "update",
    "env_steps",
    "alpha",
    "learning_rate",
    "episodes",
    "upper_error",
    "root_error",
    "fall_rate",
    "feasibility",
    "estimator_loss",
];

const AGENT_COLUMNS: &[&str] = &[
    "reward",
    "policy_loss",
    "value_loss",
    "entropy",
    "action_std",
    "clip_fraction",
    "approx_kl",
    "grad_norm",
];

impl TrainingLog {
    pub fn push(&mut self, r: UpdateRecord) {
        self.records.push(r);
    }

    pub fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = BASE_COLUMNS.iter().map(|s| s.to_string()).collect();
        if let Some(first) = self.records.first() {
            for (name, _) in &first.agents {
                h.extend(AGENT_COLUMNS.iter().map(|c| format!("{name}_{c}")));
            }
        }
        h
    }

    pub fn to_csv(&self, config_hash: &str, seed: u64) -> String {
        let mut out = format!("# format=1 config_hash={config_hash} seed={seed}\n");
        out.push_str(&self.header().join(","));
        out.push('\n');
        for r in &self.records {
            let _ = write!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.update,
                r.env_steps,
                r.alpha,
                r.learning_rate,
                r.episodes,
                r.upper_error,
                r.root_error,
                r.fall_rate,
                r.feasibility,
                r.estimator_loss
            );
            for (_, a) in &r.agents {
                let _ = write!(
                    out,
                    ",{},{},{},{},{},{},{},{}",
                    a.reward,
                    a.policy_loss,
                    a.value_loss,
                    a.entropy,
                    a.action_std,
                    a.clip_fraction,
                    a.approx_kl,
                    a.grad_norm
                );
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_match_header_width() {
        let mut log = TrainingLog::default();
        for u in 0..3 {
            log.push(UpdateRecord {
                update: u,
                agents: vec![("lower".into(), AgentLog::default()), ("upper".into(), AgentLog::default())],
                ..Default::default()
            });
        }
        let csv = log.to_csv("00ff", 4);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "# format=1 config_hash=00ff seed=4");
        let w = lines[1].split(',').count();
        assert_eq!(w, BASE_COLUMNS.len() + 2 * AGENT_COLUMNS.len());
        assert!(lines[2..].iter().all(|l| l.split(',').count() == w));
        assert!(lines[1].contains("upper_action_std"));
    }
}
