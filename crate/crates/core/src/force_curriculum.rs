//! External end-effector force curriculum: torque-aware per-axis force
//! envelopes, simplex-weighted sampling, feasibility projection, the global
//! force scale schedule and the small signal-conditioning helpers around it.
//!
//! Torque bookkeeping: every function here takes `tau_gravity`, the gravity
//! term of the joint torque budget `tau_gravity + Jᵀ F`, and checks
//! `-limit <= tau_gravity + Jᵀ F <= limit`. When `F` is the force acting on
//! the robot, pass the negated holding torque from
//! [`kinematics::gravity_torque`](crate::kinematics::gravity_torque): the
//! motor must then output `hold - Jᵀ F`, whose box membership is equivalent.

use std::collections::VecDeque;

use nalgebra::{Matrix3xX, Vector2, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::InfeasibleGravity;

pub const DEFAULT_EPSILON: f64 = 1e-6;
pub const DEFAULT_FILTER_BETA: f64 = 0.9;
pub const WALKING_DEADBAND: f64 = 0.05;

/// Per-axis force box. `clip_min`/`clip_max` record the clip box that was
/// applied; an unclipped envelope carries infinite clip bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForceEnvelope {
    pub f_min: Vector3<f64>,
    pub f_max: Vector3<f64>,
    pub clip_min: Vector3<f64>,
    pub clip_max: Vector3<f64>,
}

impl ForceEnvelope {
    pub fn unclipped(f_min: Vector3<f64>, f_max: Vector3<f64>) -> Self {
        Self {
            f_min,
            f_max,
            clip_min: Vector3::repeat(f64::NEG_INFINITY),
            clip_max: Vector3::repeat(f64::INFINITY),
        }
    }

    /// Intersects with a clip box. Both ends are clamped into the box so the
    /// result stays ordered even when a raw bound lies outside it.
    pub fn clipped(&self, clip: &ClipBox) -> Self {
        let f_min = self.f_min.zip_zip_map(&clip.min, &clip.max, |f, lo, hi| f.clamp(lo, hi));
        let f_max = self.f_max.zip_zip_map(&clip.min, &clip.max, |f, lo, hi| f.clamp(lo, hi));
        Self {
            f_min,
            f_max,
            clip_min: clip.min,
            clip_max: clip.max,
        }
    }

    pub fn contains(&self, f: &Vector3<f64>) -> bool {
        (0..3).all(|i| f[i] >= self.f_min[i] && f[i] <= self.f_max[i])
    }
}

/// Axis-aligned force clip box in newtons.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipBox {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl ClipBox {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Self {
        Self { min, max }
    }

    /// X/Y ±50 N, Z [−60, 5] N. Default for all training modes.
    pub fn narrow() -> Self {
        Self::new(Vector3::new(-50.0, -50.0, -60.0), Vector3::new(50.0, 50.0, 5.0))
    }

    /// X/Y ±100 N, Z [−100, 5] N.
    pub fn wide() -> Self {
        Self::new(Vector3::new(-100.0, -100.0, -100.0), Vector3::new(100.0, 100.0, 5.0))
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "narrow" => Some(Self::narrow()),
            "wide" => Some(Self::wide()),
            _ => None,
        }
    }
}

impl Default for ClipBox {
    fn default() -> Self {
        Self::narrow()
    }
}

fn check_gravity(tau_limit: &[f64], tau_gravity: &[f64]) -> Result<(), InfeasibleGravity> {
    for (j, (lim, g)) in tau_limit.iter().zip(tau_gravity).enumerate() {
        if g.abs() > *lim {
            return Err(InfeasibleGravity {
                joint: j,
                gravity: *g,
                limit: *lim,
            });
        }
    }
    Ok(())
}

/// Largest per-axis forces whose isolated joint torque fits the remaining
/// budget at every joint. Returned unclipped.
pub fn admissible_bounds(
    jacobian: &Matrix3xX<f64>,
    tau_limit: &[f64],
    tau_gravity: &[f64],
    epsilon: f64,
) -> Result<ForceEnvelope, InfeasibleGravity> {
    let m = jacobian.ncols();
    assert_eq!(tau_limit.len(), m);
    assert_eq!(tau_gravity.len(), m);
    check_gravity(tau_limit, tau_gravity)?;
    let mut f_min = Vector3::repeat(f64::NEG_INFINITY);
    let mut f_max = Vector3::repeat(f64::INFINITY);
    for i in 0..3 {
        for j in 0..m {
            let denom = jacobian[(i, j)].abs() + epsilon;
            f_max[i] = f_max[i].min((tau_limit[j] - tau_gravity[j]) / denom);
            f_min[i] = f_min[i].max((-tau_limit[j] - tau_gravity[j]) / denom);
        }
    }
    Ok(ForceEnvelope::unclipped(f_min, f_max))
}

/// Envelope equal to the clip box itself, with no torque reasoning.
pub fn naive_envelope(clip: &ClipBox) -> ForceEnvelope {
    ForceEnvelope {
        f_min: clip.min,
        f_max: clip.max,
        clip_min: clip.min,
        clip_max: clip.max,
    }
}

/// Dirichlet sample via normalised Gamma draws.
pub fn sample_ratios<R: Rng + ?Sized>(rng: &mut R, concentration: &[f64; 3]) -> [f64; 3] {
    assert!(
        concentration.iter().all(|c| *c > 0.0 && c.is_finite()),
        "concentration must be strictly positive"
    );
    loop {
        let mut g = [0.0; 3];
        for (gi, c) in g.iter_mut().zip(concentration) {
            *gi = Gamma::new(*c, 1.0).expect("valid gamma").sample(rng);
        }
        let total: f64 = g.iter().sum();
        // all three underflowing to zero is only possible for tiny concentrations
        if total > 0.0 && total.is_finite() {
            return g.map(|x| x / total);
        }
    }
}

pub fn sample_force<R: Rng + ?Sized>(
    rng: &mut R,
    envelope: &ForceEnvelope,
    ratios: &[f64; 3],
) -> Vector3<f64> {
    Vector3::from_fn(|i, _| {
        let lo = ratios[i] * envelope.f_min[i];
        let hi = ratios[i] * envelope.f_max[i];
        if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        }
    })
}

/// Whether `tau_gravity + Jᵀ F` lies in the torque box.
pub fn torque_feasible(
    jacobian: &Matrix3xX<f64>,
    tau_limit: &[f64],
    tau_gravity: &[f64],
    force: &Vector3<f64>,
) -> bool {
    (0..jacobian.ncols()).all(|j| {
        let tau = tau_gravity[j] + jacobian.column(j).dot(force);
        tau.abs() <= tau_limit[j]
    })
}

/// Largest uniform scale `s ∈ [0, 1]` that keeps `tau_gravity + s Jᵀ F`
/// inside the torque box, and the rescaled force.
///
/// Requires a feasible gravity term; with `|tau_gravity_j| = limit_j` and a
/// force pushing further out the result is `s = 0`.
pub fn project_feasible(
    jacobian: &Matrix3xX<f64>,
    tau_limit: &[f64],
    tau_gravity: &[f64],
    force: &Vector3<f64>,
) -> (Vector3<f64>, f64) {
    let mut s: f64 = 1.0;
    for j in 0..jacobian.ncols() {
        let c = jacobian.column(j).dot(force);
        let g = tau_gravity[j];
        let lim = tau_limit[j];
        if c > 0.0 {
            s = s.min(((lim - g) / c).max(0.0));
        } else if c < 0.0 {
            s = s.min(((-lim - g) / c).max(0.0));
        }
    }
    // the closed form can land one ulp outside after the re-multiplication
    let mut scaled = force * s;
    let mut guard = 0;
    while s > 0.0 && !torque_feasible(jacobian, tau_limit, tau_gravity, &scaled) {
        s = if guard < 8 { s.next_down() } else { s * (1.0 - 1e-12) };
        scaled = force * s;
        guard += 1;
        if guard > 64 {
            s = 0.0;
            scaled = Vector3::zeros();
        }
    }
    (scaled, s)
}

/// Replaces the planar part with a vector of the same magnitude pointing
/// against the commanded velocity. Below the dead-band the force is returned
/// unchanged.
pub fn walking_projection(force: &Vector3<f64>, planar_velocity: &Vector2<f64>) -> Vector3<f64> {
    let speed = planar_velocity.norm();
    if speed <= WALKING_DEADBAND {
        return *force;
    }
    let dir = planar_velocity / speed;
    let mag = force.xy().norm();
    Vector3::new(-dir.x * mag, -dir.y * mag, force.z)
}

pub fn interpolate_application_point(
    wrist_origin: &Vector3<f64>,
    distal_point: &Vector3<f64>,
    u: f64,
) -> Vector3<f64> {
    wrist_origin + (distal_point - wrist_origin) * u
}

/// Uniform point on the segment from the last joint origin to the distal
/// point. Returns the point and the interpolation parameter.
pub fn sample_application_point<R: Rng + ?Sized>(
    rng: &mut R,
    wrist_origin: &Vector3<f64>,
    distal_point: &Vector3<f64>,
) -> (Vector3<f64>, f64) {
    let u: f64 = rng.random();
    (interpolate_application_point(wrist_origin, distal_point, u), u)
}

/// First-order low-pass on a 3-vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForceFilter {
    pub beta: f64,
    pub state: Vector3<f64>,
}

impl ForceFilter {
    pub fn new(beta: f64) -> Self {
        assert!((0.0..1.0).contains(&beta), "filter beta must be in [0, 1)");
        Self {
            beta,
            state: Vector3::zeros(),
        }
    }

    pub fn reset(&mut self) {
        self.state = Vector3::zeros();
    }

    pub fn apply(&mut self, target: &Vector3<f64>) -> Vector3<f64> {
        self.state = self.state * self.beta + target * (1.0 - self.beta);
        self.state
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchedulerConfig {
    /// Promote when the window mean error drops below this (rad).
    pub promote_threshold: f64,
    /// Demote when the window mean error rises above this (rad).
    pub demote_threshold: f64,
    pub step_size: f64,
    pub window: usize,
    /// Error recorded for an episode that ended in a fall.
    pub fall_error: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            promote_threshold: 0.25,
            demote_threshold: 0.5,
            step_size: 0.05,
            window: 50,
            fall_error: 1.0,
        }
    }
}

/// Success-gated global force scale.
#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumState {
    pub alpha: f64,
    pub config: SchedulerConfig,
    window: VecDeque<f64>,
    pub promotions: usize,
    pub demotions: usize,
}

/// What a call to [`CurriculumState::update_alpha`] did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlphaChange {
    Held,
    Promoted,
    Demoted,
}

impl CurriculumState {
    pub fn new(config: SchedulerConfig, alpha: f64) -> Self {
        assert!(config.window > 0, "window must be positive");
        Self {
            alpha: alpha.clamp(0.0, 1.0),
            config,
            window: VecDeque::with_capacity(config.window),
            promotions: 0,
            demotions: 0,
        }
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }

    pub fn window_mean(&self) -> Option<f64> {
        if self.window.is_empty() {
            None
        } else {
            Some(self.window.iter().sum::<f64>() / self.window.len() as f64)
        }
    }

    /// Records one finished episode. Once the window is full its mean decides
    /// a promotion or demotion; after either the window restarts so each step
    /// is judged on episodes played at the new scale.
    pub fn update_alpha(&mut self, episode_error: f64) -> AlphaChange {
        let e = if episode_error.is_finite() {
            episode_error
        } else {
            self.config.fall_error
        };
        if self.window.len() == self.config.window {
            self.window.pop_front();
        }
        self.window.push_back(e);
        if self.window.len() < self.config.window {
            return AlphaChange::Held;
        }
        let mean = self.window_mean().unwrap_or(0.0);
        let change = if mean < self.config.promote_threshold && self.alpha < 1.0 {
            self.alpha = (self.alpha + self.config.step_size).min(1.0);
            self.promotions += 1;
            AlphaChange::Promoted
        } else if mean > self.config.demote_threshold && self.alpha > 0.0 {
            self.alpha = (self.alpha - self.config.step_size).max(0.0);
            self.demotions += 1;
            AlphaChange::Demoted
        } else {
            AlphaChange::Held
        };
        if change != AlphaChange::Held {
            self.window.clear();
        }
        change
    }

    pub fn record_episode(&mut self, mean_upper_error: f64, fell: bool) -> AlphaChange {
        let e = if fell {
            mean_upper_error.max(self.config.fall_error)
        } else {
            mean_upper_error
        };
        self.update_alpha(e)
    }
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn x_lever() -> Matrix3xX<f64> {
        Matrix3xX::from_column_slice(&[1.0, 0.0, 0.0])
    }

    #[test]
    fn single_axis_lever_bounds() {
        let env = admissible_bounds(&x_lever(), &[10.0], &[0.0], DEFAULT_EPSILON).unwrap();
        assert_abs_diff_eq!(env.f_max.x, 10.0 / (1.0 + 1e-6), epsilon = 1e-12);
        assert_abs_diff_eq!(env.f_min.x, -10.0 / (1.0 + 1e-6), epsilon = 1e-12);
        assert_abs_diff_eq!(env.f_max.y, 10.0 / 1e-6, epsilon = 1e-3);
        let c = env.clipped(&ClipBox::narrow());
        assert_eq!(c.f_max.y, 50.0);
        assert_eq!(c.f_min.z, -60.0);
        assert_eq!(c.f_max.z, 5.0);
    }

    #[test]
    fn gravity_shifts_budget() {
        let env = admissible_bounds(&x_lever(), &[10.0], &[4.0], DEFAULT_EPSILON).unwrap();
        assert_abs_diff_eq!(env.f_max.x, 6.0, epsilon = 1e-4);
        assert_abs_diff_eq!(env.f_min.x, -14.0, epsilon = 1e-4);
    }

    #[test]
    fn infeasible_gravity_is_an_error() {
        let err = admissible_bounds(&x_lever(), &[10.0], &[10.5], DEFAULT_EPSILON).unwrap_err();
        assert_eq!(err.joint, 0);
    }

    #[test]
    fn extreme_concentration_dominates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let r = sample_ratios(&mut rng, &[1e6, 1.0, 1.0]);
            assert!(r[0] > 0.99);
        }
    }

    #[test]
    fn degenerate_ratio_axes_collapse() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let env = ForceEnvelope::unclipped(Vector3::repeat(-10.0), Vector3::repeat(10.0));
        for _ in 0..100 {
            let f = sample_force(&mut rng, &env, &[1.0, 0.0, 0.0]);
            assert!(f.x.abs() <= 10.0);
            assert_eq!((f.y, f.z), (0.0, 0.0));
        }
    }

    #[test]
    fn equal_ratios_scale_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let env = ForceEnvelope::unclipped(Vector3::repeat(-9.0), Vector3::repeat(9.0));
        let third = 1.0 / 3.0;
        for _ in 0..1000 {
            let f = sample_force(&mut rng, &env, &[third; 3]);
            assert!(f.iter().all(|v| v.abs() <= 3.0 + 1e-12));
        }
    }

    #[test]
    fn feasible_force_untouched() {
        let (f, s) = project_feasible(&x_lever(), &[10.0], &[0.0], &Vector3::new(3.0, 0.0, 0.0));
        assert_eq!(s, 1.0);
        assert_eq!(f, Vector3::new(3.0, 0.0, 0.0));
    }

    #[test]
    fn projection_halves_double_lever() {
        let jac = Matrix3xX::from_column_slice(&[2.0, 0.0, 0.0]);
        let (f, s) = project_feasible(&jac, &[10.0], &[0.0], &Vector3::new(10.0, 0.0, 0.0));
        assert_abs_diff_eq!(s, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(f.x, 5.0, epsilon = 1e-14);
        let (_, s) = project_feasible(&jac, &[10.0], &[0.0], &Vector3::new(-10.0, 0.0, 0.0));
        assert_abs_diff_eq!(s, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn saturated_gravity_admits_only_relieving_force() {
        let (_, s) = project_feasible(&x_lever(), &[10.0], &[10.0], &Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(s, 0.0);
        let (_, s) = project_feasible(&x_lever(), &[10.0], &[10.0], &Vector3::new(-1.0, 0.0, 0.0));
        assert_eq!(s, 1.0);
    }

    #[test]
    fn naive_envelopes_equal_clip_boxes() {
        let w = naive_envelope(&ClipBox::wide());
        assert_eq!(w.f_min, Vector3::new(-100.0, -100.0, -100.0));
        assert_eq!(w.f_max, Vector3::new(100.0, 100.0, 5.0));
        let n = naive_envelope(&ClipBox::narrow());
        assert_eq!(n.f_min, Vector3::new(-50.0, -50.0, -60.0));
        assert_eq!(n.f_max, Vector3::new(50.0, 50.0, 5.0));
        let z = naive_envelope(&ClipBox::new(Vector3::zeros(), Vector3::zeros()));
        assert_eq!((z.f_min, z.f_max), (Vector3::zeros(), Vector3::zeros()));
    }

    #[test]
    fn filter_passthrough_and_closed_form() {
        let mut f = ForceFilter::new(0.0);
        assert_eq!(f.apply(&Vector3::new(1.0, 2.0, 3.0)), Vector3::new(1.0, 2.0, 3.0));
        let mut f = ForceFilter::new(0.9);
        let target = Vector3::new(10.0, -4.0, 2.0);
        for k in 1..=50 {
            let out = f.apply(&target);
            let expect = target * (1.0 - 0.9f64.powi(k));
            assert_abs_diff_eq!(out, expect, epsilon = 1e-12);
        }
        assert!((f.state.x - 10.0).abs() < 0.1);
    }

    #[test]
    fn walking_projection_examples() {
        let out = walking_projection(&Vector3::new(6.0, 8.0, -3.0), &Vector2::new(1.0, 0.0));
        assert_abs_diff_eq!(out, Vector3::new(-10.0, 0.0, -3.0), epsilon = 1e-12);
        let f = Vector3::new(6.0, 8.0, -3.0);
        assert_eq!(walking_projection(&f, &Vector2::new(0.03, 0.0)), f);
    }

    #[test]
    fn application_point_endpoints() {
        let a = Vector3::new(0.0, 0.1, 0.2);
        let b = Vector3::new(0.3, 0.1, -0.2);
        assert_eq!(interpolate_application_point(&a, &b, 0.0), a);
        assert_eq!(interpolate_application_point(&a, &b, 1.0), b);
    }

    #[test]
    fn scheduler_saturates_under_success() {
        let mut s = CurriculumState::new(SchedulerConfig::default(), 0.0);
        let mut last = 0.0;
        for _ in 0..50 * 25 {
            s.update_alpha(0.0);
            assert!(s.alpha >= last && s.alpha <= 1.0);
            last = s.alpha;
        }
        assert_abs_diff_eq!(s.alpha, 1.0, epsilon = 1e-12);
        assert_eq!(s.promotions, 20);
    }

    #[test]
    fn scheduler_pinned_under_failure() {
        let mut s = CurriculumState::new(SchedulerConfig::default(), 0.0);
        for _ in 0..1000 {
            s.update_alpha(10.0);
            assert_eq!(s.alpha, 0.0);
        }
        assert_eq!(s.demotions, 0);
    }

    #[test]
    fn scheduler_alternating_stays_near_start() {
        let cfg = SchedulerConfig::default();
        let mut s = CurriculumState::new(cfg, 0.5);
        for block in 0..40 {
            let e = if block % 2 == 0 { 0.0 } else { 10.0 };
            for _ in 0..cfg.window {
                s.update_alpha(e);
            }
            assert!((s.alpha - 0.5).abs() <= cfg.step_size + 1e-12);
        }
    }

    #[test]
    fn falls_count_as_failures() {
        let cfg = SchedulerConfig::default();
        let mut s = CurriculumState::new(cfg, 0.5);
        for _ in 0..cfg.window {
            s.record_episode(0.0, true);
        }
        assert_abs_diff_eq!(s.alpha, 0.45, epsilon = 1e-12);
    }
}
