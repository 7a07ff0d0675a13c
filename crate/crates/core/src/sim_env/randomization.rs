//! Per-episode dynamics randomization.

use rand::Rng;

use crate::robot_model::RobotModel;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomizationRanges {
    pub friction: (f64, f64),
    pub link_mass_scale: (f64, f64),
    /// Added to the base mass (kg).
    pub base_mass_offset: (f64, f64),
    pub kp_scale: (f64, f64),
    pub kd_scale: (f64, f64),
    /// Control delay in seconds.
    pub delay: (f64, f64),
    pub push_interval: f64,
    pub push_velocity: f64,
}

impl Default for RandomizationRanges {
    fn default() -> Self {
        Self {
            friction: (0.5, 1.25),
            link_mass_scale: (0.9, 1.2),
            base_mass_offset: (-1.0, 3.0),
            kp_scale: (0.9, 1.1),
            kd_scale: (0.9, 1.1),
            delay: (0.0, 0.02),
            push_interval: 5.0,
            push_velocity: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainRandomizationDraw {
    pub friction: f64,
    /// One scale per arm link, in model order (left arm first).
    pub link_mass_scale: Vec<f64>,
    pub base_mass_offset: f64,
    /// One scale per arm joint.
    pub kp_scale: Vec<f64>,
    pub kd_scale: Vec<f64>,
    pub delay: f64,
    /// Seconds between pushes; non-positive disables pushes.
    pub push_interval: f64,
    pub push_velocity: f64,
}

impl DomainRandomizationDraw {
    /// The undisturbed nominal system: unit scales, no delay, no pushes.
    pub fn nominal(model: &RobotModel) -> Self {
        let links = model.arms.iter().map(|a| a.links.len()).sum();
        let joints = model.upper_dof_count();
        Self {
            friction: 1.0,
            link_mass_scale: vec![1.0; links],
            base_mass_offset: 0.0,
            kp_scale: vec![1.0; joints],
            kd_scale: vec![1.0; joints],
            delay: 0.0,
            push_interval: 0.0,
            push_velocity: 0.0,
        }
    }

    pub fn delay_substeps(&self, dt: f64) -> usize {
        (self.delay / dt).round() as usize
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

pub fn randomize<R: Rng + ?Sized>(
    rng: &mut R,
    model: &RobotModel,
    ranges: &RandomizationRanges,
) -> DomainRandomizationDraw {
    let links: usize = model.arms.iter().map(|a| a.links.len()).sum();
    let joints = model.upper_dof_count();
    let friction = uniform(rng, ranges.friction);
    let link_mass_scale = (0..links).map(|_| uniform(rng, ranges.link_mass_scale)).collect();
    let base_mass_offset = uniform(rng, ranges.base_mass_offset);
    let kp_scale = (0..joints).map(|_| uniform(rng, ranges.kp_scale)).collect();
    let kd_scale = (0..joints).map(|_| uniform(rng, ranges.kd_scale)).collect();
    let delay = uniform(rng, ranges.delay);
    DomainRandomizationDraw {
        friction,
        link_mass_scale,
        base_mass_offset,
        kp_scale,
        kd_scale,
        delay,
        push_interval: ranges.push_interval,
        push_velocity: ranges.push_velocity,
    }
}
