//! Joint-space arm dynamics with diagonal inertia, exact gravity and exact
//! point-force transmission.

use nalgebra::{Matrix3xX, Vector3};

use crate::kinematics::{forward_kinematics, ChainKinematics, FramePlacement};
use crate::robot_model::ArmChain;

/// Stiffness of the soft position-limit spring, as a fraction of the
/// largest stiffness the integrator tolerates (`I / dt²`).
const LIMIT_STIFFNESS_FRACTION: f64 = 0.25;

#[derive(Debug, Clone)]
pub struct ArmState {
    /// Nominal chain, used by the controller side (gravity compensation,
    /// force envelopes).
    pub nominal: ArmChain,
    /// Link masses of the simulated (possibly randomized) arm.
    pub masses: Vec<f64>,
    pub nominal_masses: Vec<f64>,
    pub kp: Vec<f64>,
    pub kd: Vec<f64>,
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
    /// Last actuator torque after clamping.
    pub torque: Vec<f64>,
    pub gravity_compensation: bool,
}

/// Kinematic and static quantities at the current state, computed once per
/// substep.
#[derive(Debug, Clone)]
pub struct ArmSnapshot {
    pub kin: ChainKinematics,
    /// Holding torque of the simulated arm.
    pub hold: Vec<f64>,
    /// Holding torque predicted by the nominal model.
    pub hold_nominal: Vec<f64>,
}

impl ArmSnapshot {
    /// Gravity term entering the curriculum's torque budget.
    pub fn budget_gravity(&self) -> Vec<f64> {
        self.hold_nominal.iter().map(|h| -h).collect()
    }

    pub fn application_point(&self, u: f64) -> Vector3<f64> {
        let w = self.kin.last_joint_origin();
        w + (self.kin.distal_point - w) * u
    }
}

impl ArmState {
    pub fn new(chain: &ArmChain, mass_scale: &[f64], kp_scale: &[f64], kd_scale: &[f64]) -> Self {
        let nominal_masses: Vec<f64> = chain.links.iter().map(|l| l.mass).collect();
        let masses = nominal_masses.iter().zip(mass_scale).map(|(m, s)| m * s).collect();
        let kp = chain.joints.iter().zip(kp_scale).map(|(j, s)| j.pd_gains.0 * s).collect();
        let kd = chain.joints.iter().zip(kd_scale).map(|(j, s)| j.pd_gains.1 * s).collect();
        let q = chain.default_positions();
        let m = chain.dof();
        Self {
            nominal: chain.clone(),
            masses,
            nominal_masses,
            kp,
            kd,
            q,
            qd: vec![0.0; m],
            torque: vec![0.0; m],
            gravity_compensation: true,
        }
    }

    pub fn dof(&self) -> usize {
        self.q.len()
    }

    pub fn snapshot(&self, base: &FramePlacement, gravity: &Vector3<f64>) -> ArmSnapshot {
        let kin = forward_kinematics(&self.nominal, &self.q, base);
        let hold = kin.gravity_torque(&self.masses, gravity);
        let hold_nominal = kin.gravity_torque(&self.nominal_masses, gravity);
        ArmSnapshot {
            kin,
            hold,
            hold_nominal,
        }
    }

    /// Total mass and world-frame centre of mass of the arm.
    pub fn mass_and_com(&self, snap: &ArmSnapshot) -> (f64, Vector3<f64>) {
        let total: f64 = self.masses.iter().sum();
        if total <= 0.0 {
            return (0.0, snap.kin.joint_origins[0]);
        }
        let mut c = Vector3::zeros();
        for (m, p) in self.masses.iter().zip(&snap.kin.link_coms) {
            c += p * *m;
        }
        (total, c / total)
    }

    /// Sum of position-limit excess over all joints (rad).
    pub fn limit_excess(&self) -> f64 {
        self.nominal
            .joints
            .iter()
            .zip(&self.q)
            .map(|(j, q)| (j.position_limits.0 - q).max(0.0) + (q - j.position_limits.1).max(0.0))
            .sum()
    }

    /// One semi-implicit Euler step. `external` is a world-frame force and the
    /// Jacobian of its application point.
    pub fn substep(
        &mut self,
        snap: &ArmSnapshot,
        targets: &[f64],
        feedforward: &[f64],
        external: Option<(&Matrix3xX<f64>, &Vector3<f64>)>,
        dt: f64,
    ) {
        for j in 0..self.dof() {
            let joint = &self.nominal.joints[j];
            let lim = joint.torque_limit;
            let mut cmd = self.kp[j] * (targets[j] - self.q[j]) - self.kd[j] * self.qd[j] + feedforward[j];
            if self.gravity_compensation {
                cmd += snap.hold_nominal[j];
            }
            let tau = cmd.clamp(-lim, lim);
            self.torque[j] = tau;
            let ext = external.map_or(0.0, |(jac, f)| jac.column(j).dot(f));
            let inertia = joint.effective_inertia;
            let (lo, hi) = joint.position_limits;
            let k_lim = LIMIT_STIFFNESS_FRACTION * inertia / (dt * dt);
            let limit = if self.q[j] > hi {
                -k_lim * (self.q[j] - hi)
            } else if self.q[j] < lo {
                k_lim * (lo - self.q[j])
            } else {
                0.0
            };
            let qdd = (tau - snap.hold[j] + ext - joint.viscous_friction * self.qd[j] + limit) / inertia;
            self.qd[j] += qdd * dt;
            self.q[j] += self.qd[j] * dt;
        }
    }

    pub fn kinetic_energy(&self) -> f64 {
        self.nominal
            .joints
            .iter()
            .zip(&self.qd)
            .map(|(j, v)| 0.5 * j.effective_inertia * v * v)
            .sum()
    }
}
