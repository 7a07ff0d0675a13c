//! Model-based arm controllers used by the upper-body baselines. All three
//! hand the trajectory target straight to the joint PD; they differ in the
//! feedforward torque added on top.

use nalgebra::{Matrix3xX, Vector3};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControllerKind {
    Pd,
    /// PD plus an integral torque with an anti-windup clamp.
    Pid,
    /// PD plus `-Jᵀ F̃` compensation of an estimated end-effector force.
    PdId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpperController {
    pub kind: ControllerKind,
    pub ki: Vec<f64>,
    pub torque_limits: Vec<f64>,
    /// Integral torque `Ki ∫ e dt`, clamped to the torque limits.
    pub integral: Vec<f64>,
}

impl UpperController {
    /// `ki_ratio` sets `Ki = ki_ratio · Kp` per joint.
    pub fn new(kind: ControllerKind, kp: &[f64], ki_ratio: f64, torque_limits: &[f64]) -> Self {
        Self {
            kind,
            ki: kp.iter().map(|k| k * ki_ratio).collect(),
            torque_limits: torque_limits.to_vec(),
            integral: vec![0.0; kp.len()],
        }
    }

    pub fn reset(&mut self) {
        self.integral.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Feedforward torque for one control step. `compensation` is the
    /// force-compensation torque, required by `PdId`.
    pub fn feedforward(&mut self, target: &[f64], q: &[f64], dt: f64, compensation: Option<&[f64]>) -> Vec<f64> {
        match self.kind {
            ControllerKind::Pd => vec![0.0; target.len()],
            ControllerKind::Pid => {
                for i in 0..self.integral.len() {
                    let lim = self.torque_limits[i];
                    let v = self.integral[i] + self.ki[i] * (target[i] - q[i]) * dt;
                    self.integral[i] = v.clamp(-lim, lim);
                }
                self.integral.clone()
            }
            ControllerKind::PdId => {
                let c = compensation.expect("pd_id needs a compensation torque");
                c.to_vec()
            }
        }
    }
}

/// `-Σ Jᵀ F` per arm, concatenated in arm order.
pub fn force_compensation(jacobians: &[Matrix3xX<f64>], forces: &[Vector3<f64>]) -> Vec<f64> {
    let mut out = Vec::new();
    for (j, f) in jacobians.iter().zip(forces) {
        out.extend((j.transpose() * f).iter().map(|t| -t));
    }
    out
}
