//! Reduced-order floating base. The lower body is abstracted to four
//! actuated coordinates (planar position, height, heading) driven towards a
//! commanded body twist by a force-limited wrench, plus a passive roll/pitch
//! tilt that reacts to traction, arm weight and end-effector forces.

use nalgebra::{Rotation3, Vector2, Vector3};

use crate::kinematics::{FramePlacement, STANDARD_GRAVITY};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaseParams {
    /// Planar velocity tracking gain (1/s).
    pub planar_gain: f64,
    /// Vertical velocity tracking gain (1/s).
    pub vertical_gain: f64,
    /// Yaw-rate tracking gain (1/s).
    pub yaw_gain: f64,
    /// Maximum yaw torque (N·m).
    pub yaw_torque_limit: f64,
    /// Maximum leg push as a multiple of body weight.
    pub max_support_factor: f64,
    /// Tilt restoring stiffness (N·m/rad) and damping (N·m·s/rad).
    pub tilt_stiffness: f64,
    pub tilt_damping: f64,
    /// Tilt rate (rad/s) induced per m/s of push.
    pub push_tilt_gain: f64,
    /// Time constant of the support anchor (s).
    pub anchor_tau: f64,
    /// Height fractions the legs can reach.
    pub height_range: (f64, f64),
}

impl Default for BaseParams {
    fn default() -> Self {
        Self {
            planar_gain: 8.0,
            vertical_gain: 10.0,
            yaw_gain: 10.0,
            yaw_torque_limit: 20.0,
            max_support_factor: 2.5,
            tilt_stiffness: 250.0,
            tilt_damping: 20.0,
            push_tilt_gain: 1.0,
            anchor_tau: 0.4,
            height_range: (0.4, 1.2),
        }
    }
}

/// Per-step base command in the heading frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BaseCommand {
    pub lin_vel_xy: Vector2<f64>,
    pub lin_vel_z: f64,
    pub yaw_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseState {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub yaw: f64,
    pub yaw_rate: f64,
    pub roll: f64,
    pub pitch: f64,
    pub roll_rate: f64,
    pub pitch_rate: f64,
    /// Lagged planar support reference (world frame).
    pub anchor: Vector2<f64>,
    /// Integrated commanded heading.
    pub heading_ref: f64,
    pub default_height: f64,
    /// Last applied lower wrench: planar traction (2), vertical support, yaw torque.
    pub wrench: [f64; 4],
}

/// External loads on the base for one substep (world frame).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BaseLoads {
    pub force: Vector3<f64>,
    /// Moment about the base origin.
    pub moment: Vector3<f64>,
}

impl BaseState {
    pub fn new(default_height: f64) -> Self {
        Self {
            position: Vector3::new(0.0, 0.0, default_height),
            velocity: Vector3::zeros(),
            yaw: 0.0,
            yaw_rate: 0.0,
            roll: 0.0,
            pitch: 0.0,
            roll_rate: 0.0,
            pitch_rate: 0.0,
            anchor: Vector2::zeros(),
            heading_ref: 0.0,
            default_height,
            wrench: [0.0; 4],
        }
    }

    pub fn placement(&self) -> FramePlacement {
        FramePlacement::from_base_pose(self.position, self.roll, self.pitch, self.yaw)
    }

    /// Rotation by heading only.
    pub fn heading_rotation(&self) -> Rotation3<f64> {
        Rotation3::from_euler_angles(0.0, 0.0, self.yaw)
    }

    pub fn to_heading(&self, v: &Vector2<f64>) -> Vector2<f64> {
        let (s, c) = self.yaw.sin_cos();
        Vector2::new(c * v.x + s * v.y, -s * v.x + c * v.y)
    }

    pub fn from_heading(&self, v: &Vector2<f64>) -> Vector2<f64> {
        let (s, c) = self.yaw.sin_cos();
        Vector2::new(c * v.x - s * v.y, s * v.x + c * v.y)
    }

    pub fn heading_velocity(&self) -> Vector2<f64> {
        self.to_heading(&self.velocity.xy())
    }

    /// Offset of the base from its support anchor, heading frame.
    pub fn support_offset(&self) -> Vector2<f64> {
        self.to_heading(&(self.position.xy() - self.anchor))
    }

    /// World gravity direction in the base frame.
    pub fn projected_gravity(&self) -> Vector3<f64> {
        let r = self.placement().rotation;
        r.transpose() * Vector3::new(0.0, 0.0, -1.0)
    }

    /// Gravity acceleration expressed in world frame.
    pub fn gravity() -> Vector3<f64> {
        Vector3::new(0.0, 0.0, -STANDARD_GRAVITY)
    }

    pub fn tilt(&self) -> f64 {
        self.roll.abs().max(self.pitch.abs())
    }

    pub fn angular_velocity(&self) -> Vector3<f64> {
        Vector3::new(self.roll_rate, self.pitch_rate, self.yaw_rate)
    }

    /// Lower-body "joint" coordinates and rates:
    /// support offset (x, y), height above default, heading error; and the
    /// heading-frame twist.
    pub fn lower_coordinates(&self) -> ([f64; 4], [f64; 4]) {
        let off = self.support_offset();
        let v = self.heading_velocity();
        (
            [off.x, off.y, self.position.z - self.default_height, wrap_angle(self.yaw - self.heading_ref)],
            [v.x, v.y, self.velocity.z, self.yaw_rate],
        )
    }

    pub fn height_limit_excess(&self, params: &BaseParams) -> f64 {
        let lo = params.height_range.0 * self.default_height;
        let hi = params.height_range.1 * self.default_height;
        (lo - self.position.z).max(0.0) + (self.position.z - hi).max(0.0)
    }

    /// Instantaneous planar velocity change with the matching tilt kick.
    pub fn push(&mut self, dv: Vector2<f64>, params: &BaseParams) {
        self.velocity.x += dv.x;
        self.velocity.y += dv.y;
        let local = self.to_heading(&dv);
        self.pitch_rate += params.push_tilt_gain * local.x;
        self.roll_rate -= params.push_tilt_gain * local.y;
    }

    /// Semi-implicit Euler step. `mass` is the total body mass including the
    /// arms, `commanded` is the heading-frame command from the lower policy,
    /// `reference` the goal the support anchor follows.
    #[allow(clippy::too_many_arguments)]
    pub fn substep(
        &mut self,
        params: &BaseParams,
        mass: f64,
        yaw_inertia: f64,
        tilt_inertia: Vector2<f64>,
        friction: f64,
        commanded: &BaseCommand,
        reference: &BaseCommand,
        loads: &BaseLoads,
        dt: f64,
    ) {
        let g = STANDARD_GRAVITY;
        let weight = mass * g;
        let z = self.position.z;

        // planar traction, limited by friction
        let v_des = self.from_heading(&commanded.lin_vel_xy);
        let mut traction = (v_des - self.velocity.xy()) * (mass * params.planar_gain);
        let cap = friction * weight;
        let norm = traction.norm();
        if norm > cap {
            traction *= cap / norm;
        }

        // vertical support: unilateral, unable to push beyond full extension
        let mut support = weight + mass * params.vertical_gain * (commanded.lin_vel_z - self.velocity.z);
        let max_support = if z >= params.height_range.1 * self.default_height {
            0.0
        } else {
            params.max_support_factor * weight
        };
        support = support.clamp(0.0, max_support);

        let yaw_torque = (yaw_inertia * params.yaw_gain * (commanded.yaw_rate - self.yaw_rate))
            .clamp(-params.yaw_torque_limit, params.yaw_torque_limit);
        self.wrench = [traction.x, traction.y, support, yaw_torque];

        let acc = Vector3::new(
            (traction.x + loads.force.x) / mass,
            (traction.y + loads.force.y) / mass,
            (support + loads.force.z) / mass - g,
        );
        let yaw_acc = (yaw_torque + loads.moment.z) / yaw_inertia;

        // tilt: traction acts at the feet, a height `z` below the base origin
        let traction_moment = Vector3::new(z * traction.y, -z * traction.x, 0.0);
        let moment_world = loads.moment + traction_moment;
        let (s, c) = self.yaw.sin_cos();
        let m_roll = c * moment_world.x + s * moment_world.y;
        let m_pitch = -s * moment_world.x + c * moment_world.y;
        let gravity_gain = weight * z;
        let roll_acc = (m_roll - (params.tilt_stiffness - gravity_gain) * self.roll
            - params.tilt_damping * self.roll_rate)
            / tilt_inertia.x;
        let pitch_acc = (m_pitch - (params.tilt_stiffness - gravity_gain) * self.pitch
            - params.tilt_damping * self.pitch_rate)
            / tilt_inertia.y;

        self.velocity += acc * dt;
        self.position += self.velocity * dt;
        self.yaw_rate += yaw_acc * dt;
        self.yaw = wrap_angle(self.yaw + self.yaw_rate * dt);
        self.roll_rate += roll_acc * dt;
        self.pitch_rate += pitch_acc * dt;
        self.roll += self.roll_rate * dt;
        self.pitch += self.pitch_rate * dt;

        // the anchor advances with the reference command and relaxes onto the base
        let ref_world = self.from_heading(&reference.lin_vel_xy);
        let relax = (self.position.xy() - self.anchor) / params.anchor_tau;
        self.anchor += (ref_world + relax) * dt;
        self.heading_ref = wrap_angle(self.heading_ref + reference.yaw_rate * dt);
    }
}

pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut x = (a + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI;
    if x <= -std::f64::consts::PI {
        x += two_pi;
    }
    x
}
