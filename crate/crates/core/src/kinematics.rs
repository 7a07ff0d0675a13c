//! Forward kinematics, linear point Jacobians and static gravity torques for
//! the serial arm chains of a [`RobotModel`](crate::robot_model::RobotModel).
//!
//! Everything here is a pure function of its arguments. Positions are
//! expressed in whatever frame `base` maps into (usually world).

use nalgebra::{Matrix3, Matrix3xX, Rotation3, Unit, Vector3};

use crate::robot_model::{ArmChain, ArmSide, JointSpec};

/// Rigid transform with an explicit rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FramePlacement {
    pub translation: Vector3<f64>,
    pub rotation: Matrix3<f64>,
}

impl FramePlacement {
    pub fn identity() -> Self {
        Self {
            translation: Vector3::zeros(),
            rotation: Matrix3::identity(),
        }
    }

    pub fn new(translation: Vector3<f64>, rotation: Matrix3<f64>) -> Self {
        Self { translation, rotation }
    }

    /// Base placement from height and heading, with optional roll/pitch tilt.
    pub fn from_base_pose(position: Vector3<f64>, roll: f64, pitch: f64, yaw: f64) -> Self {
        Self {
            translation: position,
            rotation: Rotation3::from_euler_angles(roll, pitch, yaw).into_inner(),
        }
    }

    pub fn compose(&self, child: &FramePlacement) -> FramePlacement {
        FramePlacement {
            translation: self.translation + self.rotation * child.translation,
            rotation: self.rotation * child.rotation,
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.translation + self.rotation * p
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn inverse_transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * v
    }

    /// Max deviation of `RᵀR` from identity and of `det R` from one.
    pub fn orthonormality_error(&self) -> f64 {
        let rtr = self.rotation.transpose() * self.rotation - Matrix3::identity();
        rtr.amax().max((self.rotation.determinant() - 1.0).abs())
    }
}

/// Joint positions for one arm. Limits are soft here: see [`ArmPose::limit_violations`].
#[derive(Debug, Clone, PartialEq)]
pub struct ArmPose {
    pub side: ArmSide,
    pub joint_positions: Vec<f64>,
}

impl ArmPose {
    pub fn new(side: ArmSide, joint_positions: Vec<f64>) -> Self {
        Self { side, joint_positions }
    }

    pub fn default_for(arm: &ArmChain) -> Self {
        Self::new(arm.side, arm.default_positions())
    }

    /// Indices of joints outside their position limits.
    pub fn limit_violations(&self, arm: &ArmChain) -> Vec<usize> {
        arm.joints
            .iter()
            .zip(&self.joint_positions)
            .enumerate()
            .filter(|(_, (j, q))| !j.within_limits(**q))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Result of a forward pass over one chain.
#[derive(Debug, Clone)]
pub struct ChainKinematics {
    /// Placement of each link frame (after its joint's rotation).
    pub link_frames: Vec<FramePlacement>,
    /// Joint rotation axes in the output frame.
    pub joint_axes: Vec<Vector3<f64>>,
    /// Joint origins in the output frame.
    pub joint_origins: Vec<Vector3<f64>>,
    /// Centre of mass of each link in the output frame.
    pub link_coms: Vec<Vector3<f64>>,
    pub distal_point: Vector3<f64>,
}

impl ChainKinematics {
    /// Linear Jacobian of a point rigidly attached to the last link.
    pub fn point_jacobian(&self, point: &Vector3<f64>) -> Matrix3xX<f64> {
        let m = self.joint_axes.len();
        let mut jac = Matrix3xX::zeros(m);
        for j in 0..m {
            let col = self.joint_axes[j].cross(&(point - self.joint_origins[j]));
            jac.set_column(j, &col);
        }
        jac
    }

    /// Jacobian at the end-effector link's centre of mass.
    pub fn ee_com_jacobian(&self) -> Matrix3xX<f64> {
        self.point_jacobian(self.link_coms.last().expect("non-empty chain"))
    }

    /// Actuator torque that statically holds the chain against `gravity`,
    /// i.e. `-Σ_k J_com,kᵀ m_k g`.
    pub fn gravity_torque(&self, masses: &[f64], gravity: &Vector3<f64>) -> Vec<f64> {
        let m = self.joint_axes.len();
        let mut tau = vec![0.0; m];
        // moment of the weights of links j..m about joint j, accumulated tip to root
        for j in 0..m {
            let mut moment = Vector3::zeros();
            for k in j..m {
                let weight = gravity * masses[k];
                moment += (self.link_coms[k] - self.joint_origins[j]).cross(&weight);
            }
            tau[j] = -self.joint_axes[j].dot(&moment);
        }
        tau
    }

    pub fn ee_com(&self) -> Vector3<f64> {
        *self.link_coms.last().expect("non-empty chain")
    }

    /// Wrist joint origin, the proximal end of the force application segment.
    pub fn last_joint_origin(&self) -> Vector3<f64> {
        *self.joint_origins.last().expect("non-empty chain")
    }
}

pub fn joint_local_transform(joint: &JointSpec, q: f64) -> FramePlacement {
    let origin_rot = Rotation3::from_euler_angles(
        joint.origin_rotation.x,
        joint.origin_rotation.y,
        joint.origin_rotation.z,
    );
    let axis = Unit::new_unchecked(joint.axis);
    let joint_rot = Rotation3::from_axis_angle(&axis, q);
    FramePlacement {
        translation: joint.origin_translation,
        rotation: (origin_rot * joint_rot).into_inner(),
    }
}

/// Composes placements from `base` to the tip of `arm` at joint positions `q`.
pub fn forward_kinematics(arm: &ArmChain, q: &[f64], base: &FramePlacement) -> ChainKinematics {
    assert_eq!(q.len(), arm.dof(), "pose length must match the {} arm", arm.side);
    let m = arm.dof();
    let mut link_frames = Vec::with_capacity(m);
    let mut joint_axes = Vec::with_capacity(m);
    let mut joint_origins = Vec::with_capacity(m);
    let mut link_coms = Vec::with_capacity(m);
    let mut parent = *base;
    for (k, joint) in arm.joints.iter().enumerate() {
        let origin_rot = Rotation3::from_euler_angles(
            joint.origin_rotation.x,
            joint.origin_rotation.y,
            joint.origin_rotation.z,
        )
        .into_inner();
        // joint frame before rotation: the axis is expressed here
        let pre = parent.compose(&FramePlacement::new(joint.origin_translation, origin_rot));
        joint_axes.push(pre.rotation * joint.axis);
        joint_origins.push(pre.translation);
        let frame = parent.compose(&joint_local_transform(joint, q[k]));
        link_coms.push(frame.transform_point(&arm.links[k].com_offset));
        link_frames.push(frame);
        parent = frame;
    }
    let distal_point = parent.transform_point(&arm.distal_offset);
    ChainKinematics {
        link_frames,
        joint_axes,
        joint_origins,
        link_coms,
        distal_point,
    }
}

pub fn point_jacobian(
    arm: &ArmChain,
    q: &[f64],
    base: &FramePlacement,
    point: &Vector3<f64>,
) -> Matrix3xX<f64> {
    forward_kinematics(arm, q, base).point_jacobian(point)
}

/// Gravity-compensation torque in the frame of `gravity` (base frame when
/// `base` is identity).
pub fn gravity_torque(arm: &ArmChain, q: &[f64], gravity: &Vector3<f64>) -> Vec<f64> {
    let masses: Vec<f64> = arm.links.iter().map(|l| l.mass).collect();
    forward_kinematics(arm, q, &FramePlacement::identity()).gravity_torque(&masses, gravity)
}

pub fn clamp_to_torque_limits(limits: &[f64], torques: &[f64]) -> Vec<f64> {
    torques
        .iter()
        .zip(limits)
        .map(|(t, l)| t.clamp(-l, *l))
        .collect()
}

/// `Jᵀ F` for a 3×m Jacobian.
pub fn jacobian_transpose_times(jac: &Matrix3xX<f64>, force: &Vector3<f64>) -> Vec<f64> {
    (0..jac.ncols()).map(|j| jac.column(j).dot(force)).collect()
}

pub const STANDARD_GRAVITY: f64 = 9.81;

pub fn gravity_vector() -> Vector3<f64> {
    Vector3::new(0.0, 0.0, -STANDARD_GRAVITY)
}

#[cfg(test)]
mod tests {
    use std::f64::consts::FRAC_PI_2;

    use approx::assert_abs_diff_eq;

    use super::*;
    use crate::robot_model::{builtin_model, LinkSpec};

    fn toy() -> ArmChain {
        builtin_model("toy-arm").unwrap().arms[0].clone()
    }

    fn single_link(axis: Vector3<f64>, mass: f64, com: f64) -> ArmChain {
        ArmChain {
            side: ArmSide::Left,
            joints: vec![JointSpec {
                name: "j".into(),
                parent: "base".into(),
                axis,
                origin_translation: Vector3::zeros(),
                origin_rotation: Vector3::zeros(),
                position_limits: (-3.0, 3.0),
                torque_limit: 10.0,
                default_position: 0.0,
                pd_gains: (10.0, 1.0),
                effective_inertia: 0.1,
                viscous_friction: 0.0,
            }],
            links: vec![LinkSpec {
                name: "l".into(),
                mass,
                com_offset: Vector3::new(com, 0.0, 0.0),
            }],
            distal_offset: Vector3::new(1.0, 0.0, 0.0),
        }
    }

    #[test]
    fn toy_arm_straight_out() {
        let fk = forward_kinematics(&toy(), &[0.0, 0.0], &FramePlacement::identity());
        assert_abs_diff_eq!(fk.distal_point, Vector3::new(0.6, 0.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn toy_arm_raised_vertical() {
        let fk = forward_kinematics(&toy(), &[FRAC_PI_2, 0.0], &FramePlacement::identity());
        assert_abs_diff_eq!(fk.distal_point, Vector3::new(0.0, 0.0, 0.6), epsilon = 1e-12);
    }

    #[test]
    fn single_joint_z_axis_column() {
        let arm = single_link(Vector3::z(), 1.0, 0.5);
        let jac = point_jacobian(&arm, &[0.0], &FramePlacement::identity(), &Vector3::x());
        assert_abs_diff_eq!(jac.column(0).into_owned(), Vector3::y(), epsilon = 1e-15);
    }

    #[test]
    fn toy_arm_planar_lever_arms() {
        let arm = toy();
        let base = FramePlacement::identity();
        let fk = forward_kinematics(&arm, &[0.0, 0.0], &base);
        let jac = fk.point_jacobian(&fk.distal_point);
        assert_abs_diff_eq!(jac.column(0).into_owned(), Vector3::new(0.0, 0.0, 0.6), epsilon = 1e-12);
        assert_abs_diff_eq!(jac.column(1).into_owned(), Vector3::new(0.0, 0.0, 0.3), epsilon = 1e-12);
    }

    #[test]
    fn horizontal_link_holding_torque() {
        let arm = single_link(-Vector3::y(), 1.0, 0.5);
        let tau = gravity_torque(&arm, &[0.0], &gravity_vector());
        assert_abs_diff_eq!(tau[0], 4.905, epsilon = 1e-12);
    }

    #[test]
    fn zero_gravity_gives_zero_torque() {
        let m = builtin_model("mini-humanoid").unwrap();
        let q = [0.3, 0.4, 1.2, -0.3];
        let tau = gravity_torque(&m.arms[1], &q, &Vector3::zeros());
        assert!(tau.iter().all(|t| *t == 0.0));
    }

    #[test]
    fn hanging_toy_arm_needs_no_torque() {
        let tau = gravity_torque(&toy(), &[-FRAC_PI_2, 0.0], &gravity_vector());
        assert_abs_diff_eq!(tau[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(tau[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn clamp_examples() {
        let lim = [25.0, 25.0, 14.0, 5.0];
        assert_eq!(clamp_to_torque_limits(&lim, &[30.0; 4]), vec![25.0, 25.0, 14.0, 5.0]);
        assert_eq!(clamp_to_torque_limits(&lim, &[0.0; 4]), vec![0.0; 4]);
        assert_eq!(
            clamp_to_torque_limits(&lim, &[-6.0, 3.0, -20.0, 1.0]),
            vec![-6.0, 3.0, -14.0, 1.0]
        );
    }

    #[test]
    fn frames_stay_orthonormal() {
        let m = builtin_model("mini-humanoid").unwrap();
        let base = FramePlacement::from_base_pose(Vector3::new(0.1, 0.2, 0.5), 0.2, -0.1, 1.3);
        let fk = forward_kinematics(&m.arms[0], &[1.0, 0.7, 2.0, -1.0], &base);
        for f in &fk.link_frames {
            assert!(f.orthonormality_error() < 1e-9);
        }
    }

    #[test]
    fn limit_violations_are_flagged_not_rejected() {
        let arm = toy();
        let pose = ArmPose::new(ArmSide::Left, vec![3.5, 0.0]);
        assert_eq!(pose.limit_violations(&arm), vec![0]);
        let fk = forward_kinematics(&arm, &pose.joint_positions, &FramePlacement::identity());
        assert!(fk.distal_point.iter().all(|v| v.is_finite()));
    }
}
