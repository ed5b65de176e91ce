//! Projection of a moving world point into a moving rolling-shutter sensor.
//!
//! The observation time `η` must satisfy `η = τ(u(η), v(η))`; it is found by
//! Newton–Raphson on `Δη = η − τ(u(η), v(η))`, or by fixed-point iteration
//! (Newton with the derivative replaced by 1).

use std::f64::consts::PI;

use crate::geom::{pose_at_time, Vec3};
use crate::sensor::{jacobian_normalized, project_static_windowed, shutter_time, SensorModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SolverMethod {
    #[default]
    Newton,
    FixedPoint,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    /// Convergence threshold on `|Δη|` (s).
    pub threshold: f64,
    pub max_iterations: usize,
    pub method: SolverMethod,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            threshold: 1e-9,
            max_iterations: 10,
            method: SolverMethod::Newton,
        }
    }
}

impl SolverSettings {
    pub fn with_method(method: SolverMethod) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }
}

/// Newton derivatives smaller than this fall back to a fixed-point step.
const MIN_NEWTON_SLOPE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RollingProjection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    /// Native coordinates: `(u, v)` for perspective, `(φ, θ)` for spherical.
    pub native: [f64; 2],
    pub eta: f64,
    /// `|η − τ(u,v)|` at the returned solution.
    pub residual: f64,
    pub iterations: usize,
    pub valid: bool,
}

/// Camera-frame position at `eta` of a world point moving with `point_velocity`.
pub fn camera_point(m: &SensorModel, x_w_mid: &Vec3, point_velocity: &Vec3, eta: f64) -> Vec3 {
    let pose = pose_at_time(&m.motion, eta);
    pose.inverse_transform_point(&(x_w_mid + point_velocity * eta))
}

/// Time derivative of the camera-frame point:
/// `R(η)ᵀ (v_p − v_c − w_c × (x_w(η) − t(η)))`.
pub fn dxc_deta(m: &SensorModel, x_w: &Vec3, point_velocity: &Vec3, eta: f64) -> Vec3 {
    let pose = pose_at_time(&m.motion, eta);
    let rel = x_w + point_velocity * eta - pose.translation;
    let world_rate = point_velocity - m.motion.linear_velocity - m.motion.angular_velocity.cross(&rel);
    pose.rotation.inverse_transform_vector(&world_rate)
}

/// Rolling-shutter projection in the principal azimuth window.
pub fn project_rolling(
    m: &SensorModel,
    x_w_mid: &Vec3,
    point_velocity: &Vec3,
    eta_0: f64,
    method: SolverMethod,
) -> RollingProjection {
    project_rolling_windowed(
        m,
        x_w_mid,
        point_velocity,
        eta_0,
        -PI,
        &SolverSettings::with_method(method),
    )
}

/// Rolling-shutter projection with spherical azimuths kept in
/// `[azimuth_lo, azimuth_lo + 2π)` throughout the iteration.
pub fn project_rolling_windowed(
    m: &SensorModel,
    x_w_mid: &Vec3,
    point_velocity: &Vec3,
    eta_0: f64,
    azimuth_lo: f64,
    settings: &SolverSettings,
) -> RollingProjection {
    let s = &m.shutter;
    let evaluate = |eta: f64| {
        let x_c = camera_point(m, x_w_mid, point_velocity, eta);
        let p = project_static_windowed(m, &x_c, azimuth_lo);
        let delta = eta - shutter_time(s, p.u, p.v);
        (x_c, p, delta)
    };

    let mut eta = eta_0;
    let (mut x_c, mut p, mut delta) = evaluate(eta);
    let mut iterations = 0;
    let mut finite = delta.is_finite();
    while finite && delta.abs() >= settings.threshold && iterations < settings.max_iterations {
        let slope = match settings.method {
            SolverMethod::FixedPoint => 1.0,
            SolverMethod::Newton => newton_slope(m, x_w_mid, point_velocity, eta, &x_c),
        };
        eta -= delta / slope;
        iterations += 1;
        (x_c, p, delta) = evaluate(eta);
        finite = delta.is_finite() && eta.is_finite();
    }
    let converged = finite && delta.abs() < settings.threshold;
    RollingProjection {
        u: p.u,
        v: p.v,
        depth: p.depth,
        native: p.native,
        eta,
        residual: delta.abs(),
        iterations,
        valid: converged && p.depth > 0.0 && p.u.is_finite() && p.v.is_finite(),
    }
}

/// `d(Δη)/dη = 1 − τ_u·du/dη − τ_v·dv/dη`, or 1 where that is unusable.
fn newton_slope(m: &SensorModel, x_w_mid: &Vec3, point_velocity: &Vec3, eta: f64, x_c: &Vec3) -> f64 {
    let Ok(j) = jacobian_normalized(m, x_c) else {
        return 1.0;
    };
    let rate = j * dxc_deta(m, x_w_mid, point_velocity, eta);
    let slope = 1.0 - m.shutter.tau_u * rate[0] - m.shutter.tau_v * rate[1];
    if slope.is_finite() && slope.abs() >= MIN_NEWTON_SLOPE {
        slope
    } else {
        1.0
    }
}
