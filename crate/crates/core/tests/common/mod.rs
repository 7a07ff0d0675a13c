//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use forceadapt::kinematics::{forward_kinematics, FramePlacement};
use forceadapt::robot_model::{ArmChain, JointSpec};
use nalgebra::{Matrix3, Matrix3xX, Matrix4, Vector3, Vector4};
use rand::Rng;

/// Uniform pose strictly inside the joint limits.
pub fn random_pose<R: Rng>(arm: &ArmChain, rng: &mut R) -> Vec<f64> {
    arm.joints
        .iter()
        .map(|j| rng.random_range(j.position_limits.0..j.position_limits.1))
        .collect()
}

pub fn random_vec<R: Rng>(rng: &mut R, half_width: f64) -> Vector3<f64> {
    Vector3::from_fn(|_, _| rng.random_range(-half_width..half_width))
}

/// Rodrigues rotation about a unit axis.
fn axis_angle(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    let k = axis.normalize();
    let kx = Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
    Matrix3::identity() + kx * angle.sin() + kx * kx * (1.0 - angle.cos())
}

/// Roll-pitch-yaw as `Rz(yaw) Ry(pitch) Rx(roll)`.
fn rpy(r: &Vector3<f64>) -> Matrix3<f64> {
    axis_angle(&Vector3::z(), r.z) * axis_angle(&Vector3::y(), r.y) * axis_angle(&Vector3::x(), r.x)
}

fn homogeneous(rot: &Matrix3<f64>, t: &Vector3<f64>) -> Matrix4<f64> {
    let mut h = Matrix4::identity();
    h.fixed_view_mut::<3, 3>(0, 0).copy_from(rot);
    h.fixed_view_mut::<3, 1>(0, 3).copy_from(t);
    h
}

fn joint_matrix(j: &JointSpec, q: f64) -> Matrix4<f64> {
    homogeneous(&rpy(&j.origin_rotation), &j.origin_translation) * homogeneous(&axis_angle(&j.axis, q), &Vector3::zeros())
}

/// Link frames as a plain product of 4×4 homogeneous matrices.
pub fn reference_link_frames(arm: &ArmChain, q: &[f64], base: &Matrix4<f64>) -> Vec<Matrix4<f64>> {
    let mut t = *base;
    arm.joints
        .iter()
        .zip(q)
        .map(|(j, qi)| {
            t *= joint_matrix(j, *qi);
            t
        })
        .collect()
}

pub fn apply(h: &Matrix4<f64>, p: &Vector3<f64>) -> Vector3<f64> {
    let v = h * Vector4::new(p.x, p.y, p.z, 1.0);
    Vector3::new(v.x, v.y, v.z)
}

pub fn placement_matrix(p: &FramePlacement) -> Matrix4<f64> {
    homogeneous(&p.rotation, &p.translation)
}

/// World position of a point fixed in the last link frame.
pub fn tip_point(arm: &ArmChain, q: &[f64], local: &Vector3<f64>) -> Vector3<f64> {
    let frames = reference_link_frames(arm, q, &Matrix4::identity());
    apply(frames.last().unwrap(), local)
}

/// Central-difference Jacobian of a point fixed in the last link frame.
pub fn fd_jacobian(arm: &ArmChain, q: &[f64], local: &Vector3<f64>, h: f64) -> Matrix3xX<f64> {
    let mut jac = Matrix3xX::zeros(q.len());
    for j in 0..q.len() {
        let mut qp = q.to_vec();
        let mut qm = q.to_vec();
        qp[j] += h;
        qm[j] -= h;
        let d = (tip_point(arm, &qp, local) - tip_point(arm, &qm, local)) / (2.0 * h);
        jac.set_column(j, &d);
    }
    jac
}

/// Gravitational potential energy `Σ m_k g_z z_k` with gravity along -z.
pub fn potential_energy(arm: &ArmChain, q: &[f64], g: f64) -> f64 {
    let frames = reference_link_frames(arm, q, &Matrix4::identity());
    arm.links
        .iter()
        .zip(&frames)
        .map(|(l, f)| l.mass * g * apply(f, &l.com_offset).z)
        .sum()
}

pub fn fd_potential_gradient(arm: &ArmChain, q: &[f64], g: f64, h: f64) -> Vec<f64> {
    (0..q.len())
        .map(|j| {
            let mut qp = q.to_vec();
            let mut qm = q.to_vec();
            qp[j] += h;
            qm[j] -= h;
            (potential_energy(arm, &qp, g) - potential_energy(arm, &qm, g)) / (2.0 * h)
        })
        .collect()
}

/// Local coordinates in the last link frame of a world point.
pub fn to_last_link(arm: &ArmChain, q: &[f64], world: &Vector3<f64>) -> Vector3<f64> {
    let kin = forward_kinematics(arm, q, &FramePlacement::identity());
    let f = kin.link_frames.last().unwrap();
    f.rotation.transpose() * (world - f.translation)
}

/// Relative error with an absolute floor for entries near zero.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / b.abs().max(a.abs()).max(floor)
}
