//! Procedural goal commands: a resampled locomotion command and smooth
//! minimum-jerk joint targets for the arms.

use nalgebra::Vector2;
use rand::Rng;

use crate::robot_model::RobotModel;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GoalCommandLower {
    pub lin_vel_xy: Vector2<f64>,
    pub ang_vel_yaw: f64,
    pub stance: bool,
    pub root_height: f64,
    pub waist_yaw: f64,
}

impl GoalCommandLower {
    pub fn standing(root_height: f64) -> Self {
        Self {
            lin_vel_xy: Vector2::zeros(),
            ang_vel_yaw: 0.0,
            stance: true,
            root_height,
            waist_yaw: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GoalSchedule {
    pub lin_vel_x: f64,
    pub lin_vel_y: f64,
    pub ang_vel_yaw: f64,
    pub stance_probability: f64,
    /// Commanded height range as fractions of the default base height.
    pub height_fraction: (f64, f64),
    pub waist_yaw: f64,
    /// Seconds between lower command resamples.
    pub command_interval: (f64, f64),
    /// Seconds between arm waypoints.
    pub waypoint_interval: (f64, f64),
    /// Waypoints are drawn within this distance of the default joint position
    /// (intersected with the joint limits).
    pub waypoint_range: f64,
}

impl Default for GoalSchedule {
    fn default() -> Self {
        Self {
            lin_vel_x: 1.0,
            lin_vel_y: 0.5,
            ang_vel_yaw: 0.5,
            stance_probability: 0.3,
            height_fraction: (0.8, 1.0),
            waist_yaw: 0.6,
            command_interval: (5.0, 10.0),
            waypoint_interval: (1.0, 3.0),
            waypoint_range: 0.8,
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

pub fn sample_lower_command<R: Rng + ?Sized>(
    rng: &mut R,
    schedule: &GoalSchedule,
    default_height: f64,
) -> GoalCommandLower {
    let stance = rng.random_bool(schedule.stance_probability.clamp(0.0, 1.0));
    let vx = uniform(rng, -schedule.lin_vel_x, schedule.lin_vel_x);
    let vy = uniform(rng, -schedule.lin_vel_y, schedule.lin_vel_y);
    let wz = uniform(rng, -schedule.ang_vel_yaw, schedule.ang_vel_yaw);
    let (h_lo, h_hi) = schedule.height_fraction;
    let root_height = default_height * uniform(rng, h_lo, h_hi);
    let waist_yaw = uniform(rng, -schedule.waist_yaw, schedule.waist_yaw);
    let (lin_vel_xy, ang_vel_yaw) = if stance {
        (Vector2::zeros(), 0.0)
    } else {
        (Vector2::new(vx, vy), wz)
    };
    GoalCommandLower {
        lin_vel_xy,
        ang_vel_yaw,
        stance,
        root_height,
        waist_yaw,
    }
}

/// Quintic blend with zero velocity and acceleration at both ends.
pub fn min_jerk(start: f64, end: f64, phase: f64) -> f64 {
    let s = phase.clamp(0.0, 1.0);
    let blend = s * s * s * (10.0 - 15.0 * s + 6.0 * s * s);
    start + (end - start) * blend
}

/// d/dt of [`min_jerk`] for a segment of length `duration`.
pub fn min_jerk_velocity(start: f64, end: f64, phase: f64, duration: f64) -> f64 {
    let s = phase.clamp(0.0, 1.0);
    let dblend = 30.0 * s * s * (1.0 - s) * (1.0 - s);
    (end - start) * dblend / duration
}

/// Admissible waypoint interval per arm joint, ordered as the model's arms.
pub fn waypoint_bounds(model: &RobotModel, range: f64) -> Vec<(f64, f64)> {
    model
        .arms
        .iter()
        .flat_map(|a| a.joints.iter())
        .map(|j| {
            let (lo, hi) = j.position_limits;
            (lo.max(j.default_position - range), hi.min(j.default_position + range))
        })
        .collect()
}

/// Piecewise minimum-jerk target over all arm joints.
#[derive(Debug, Clone, PartialEq)]
pub struct UpperTrajectory {
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    pub segment_start: f64,
    pub segment_duration: f64,
    bounds: Vec<(f64, f64)>,
    interval: (f64, f64),
}

impl UpperTrajectory {
    /// Starts holding `initial` and immediately heads for a fresh waypoint.
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        initial: Vec<f64>,
        bounds: Vec<(f64, f64)>,
        interval: (f64, f64),
        time: f64,
    ) -> Self {
        let mut traj = Self {
            end: initial.clone(),
            start: initial,
            segment_start: time,
            segment_duration: 1.0,
            bounds,
            interval,
        };
        traj.next_segment(rng, time);
        traj
    }

    pub fn sample_waypoint<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.bounds.iter().map(|(lo, hi)| uniform(rng, *lo, *hi)).collect()
    }

    fn next_segment<R: Rng + ?Sized>(&mut self, rng: &mut R, time: f64) {
        self.start = std::mem::take(&mut self.end);
        self.end = self.sample_waypoint(rng);
        self.segment_start = time;
        self.segment_duration = uniform(rng, self.interval.0, self.interval.1).max(1e-3);
    }

    /// Advances to `time`, drawing new waypoints as segments complete.
    pub fn advance<R: Rng + ?Sized>(&mut self, rng: &mut R, time: f64) {
        while time >= self.segment_start + self.segment_duration {
            let t = self.segment_start + self.segment_duration;
            self.next_segment(rng, t);
        }
    }

    fn phase(&self, time: f64) -> f64 {
        (time - self.segment_start) / self.segment_duration
    }

    pub fn target(&self, time: f64) -> Vec<f64> {
        let p = self.phase(time);
        self.start
            .iter()
            .zip(&self.end)
            .map(|(a, b)| min_jerk(*a, *b, p))
            .collect()
    }

    pub fn target_velocity(&self, time: f64) -> Vec<f64> {
        let p = self.phase(time);
        self.start
            .iter()
            .zip(&self.end)
            .map(|(a, b)| min_jerk_velocity(*a, *b, p, self.segment_duration))
            .collect()
    }
}
