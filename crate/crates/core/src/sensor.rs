//! Static projection functions, their Jacobians, the linear rolling-shutter
//! time function and per-pixel ray generation.
//!
//! Image coordinates are normalized to `[0,1]²` for both sensor kinds.
//! Perspective cameras look down +z with +x right and +y down. Spherical
//! sensors use +x forward, +z up; azimuth `φ = atan2(y, x) ∈ [−π, π)` maps to
//! `u = (φ + π) / 2π` and elevation maps to `v` through a per-row table.

use std::f64::consts::PI;

use nalgebra::Matrix2x3;

use crate::error::{Error, Result};
use crate::geom::{pose_at_time, rotate_point, MotionState, Vec3};

pub const TWO_PI: f64 = 2.0 * PI;

/// Linear shutter time `τ(u,v) = τ_start + u·τ_u + v·τ_v`, relative to mid-exposure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShutterSpec {
    pub tau_start: f64,
    /// Seconds per unit of normalized `u`.
    pub tau_u: f64,
    /// Seconds per unit of normalized `v`.
    pub tau_v: f64,
}

impl ShutterSpec {
    /// Shutter whose mid-exposure `τ(0.5, 0.5)` is zero.
    pub fn centered(tau_u: f64, tau_v: f64) -> Self {
        Self {
            tau_start: -0.5 * (tau_u + tau_v),
            tau_u,
            tau_v,
        }
    }

    pub fn global() -> Self {
        Self::centered(0.0, 0.0)
    }

    pub fn is_global(&self) -> bool {
        self.tau_u == 0.0 && self.tau_v == 0.0
    }

    /// `τ(1, 1)`.
    pub fn tau_end(&self) -> f64 {
        shutter_time(self, 1.0, 1.0)
    }
}

#[inline]
pub fn shutter_time(s: &ShutterSpec, u: f64, v: f64) -> f64 {
    s.tau_start + u * s.tau_u + v * s.tau_v
}

/// Pinhole intrinsics in normalized image units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PinholeIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Per-row beam elevations (rad), strictly monotone.
///
/// Row `i` is centred at `v = (i + 0.5) / H`; between centres `v` is linear in
/// elevation, and the first/last segments extend half a row past the ends.
#[derive(Debug, Clone, PartialEq)]
pub struct ElevationTable {
    angles: Vec<f64>,
    ascending: bool,
}

impl ElevationTable {
    pub fn new(angles: Vec<f64>) -> Result<Self> {
        if angles.len() < 2 {
            return Err(Error::Invalid("elevation table needs at least two rows".into()));
        }
        if angles.iter().any(|a| !a.is_finite()) {
            return Err(Error::Invalid("elevation table contains non-finite angles".into()));
        }
        let ascending = angles[1] > angles[0];
        let monotone = angles
            .windows(2)
            .all(|w| if ascending { w[1] > w[0] } else { w[1] < w[0] });
        if !monotone {
            return Err(Error::Invalid("elevation table must be strictly monotone".into()));
        }
        Ok(Self { angles, ascending })
    }

    /// Evenly spaced beams from `top` (row 0) to `bottom` (last row).
    pub fn linear(top: f64, bottom: f64, rows: usize) -> Result<Self> {
        if rows < 2 {
            return Err(Error::Invalid("elevation table needs at least two rows".into()));
        }
        let step = (bottom - top) / (rows - 1) as f64;
        Self::new((0..rows).map(|i| top + step * i as f64).collect())
    }

    pub fn rows(&self) -> usize {
        self.angles.len()
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    fn segment_for_theta(&self, theta: f64) -> usize {
        let n = self.angles.len();
        // Number of row centres already passed when walking in table order.
        let passed = if self.ascending {
            self.angles.partition_point(|&a| a <= theta)
        } else {
            self.angles.partition_point(|&a| a >= theta)
        };
        passed.saturating_sub(1).min(n - 2)
    }

    pub fn theta_to_v(&self, theta: f64) -> f64 {
        let k = self.segment_for_theta(theta);
        let (a, b) = (self.angles[k], self.angles[k + 1]);
        let h = self.angles.len() as f64;
        (k as f64 + 0.5 + (theta - a) / (b - a)) / h
    }

    pub fn dv_dtheta(&self, theta: f64) -> f64 {
        let k = self.segment_for_theta(theta);
        1.0 / (self.angles.len() as f64 * (self.angles[k + 1] - self.angles[k]))
    }

    pub fn v_to_theta(&self, v: f64) -> f64 {
        let n = self.angles.len();
        let s = v * n as f64 - 0.5;
        let k = (s.floor().max(0.0) as usize).min(n - 2);
        let (a, b) = (self.angles[k], self.angles[k + 1]);
        a + (s - k as f64) * (b - a)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Projection {
    Perspective(PinholeIntrinsics),
    Spherical(ElevationTable),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SensorKind {
    Perspective,
    Spherical,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorModel {
    pub projection: Projection,
    pub width: usize,
    pub height: usize,
    pub shutter: ShutterSpec,
    /// Sensor-to-world motion around mid-exposure.
    pub motion: MotionState,
}

impl SensorModel {
    pub fn perspective(
        intrinsics: PinholeIntrinsics,
        width: usize,
        height: usize,
        shutter: ShutterSpec,
        motion: MotionState,
    ) -> Result<Self> {
        Self::new(Projection::Perspective(intrinsics), width, height, shutter, motion)
    }

    pub fn spherical(
        elevations: ElevationTable,
        width: usize,
        shutter: ShutterSpec,
        motion: MotionState,
    ) -> Result<Self> {
        let height = elevations.rows();
        Self::new(Projection::Spherical(elevations), width, height, shutter, motion)
    }

    pub fn new(
        projection: Projection,
        width: usize,
        height: usize,
        shutter: ShutterSpec,
        motion: MotionState,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Invalid("sensor resolution must be at least 1x1".into()));
        }
        match &projection {
            Projection::Perspective(k) => {
                if !(k.fx > 0.0 && k.fy > 0.0) {
                    return Err(Error::Invalid("focal lengths must be positive".into()));
                }
            }
            Projection::Spherical(table) => {
                if table.rows() != height {
                    return Err(Error::Invalid(format!(
                        "elevation table has {} rows, sensor height is {height}",
                        table.rows()
                    )));
                }
            }
        }
        let finite = [shutter.tau_start, shutter.tau_u, shutter.tau_v]
            .iter()
            .all(|x| x.is_finite());
        if !finite {
            return Err(Error::Invalid("shutter timing must be finite".into()));
        }
        Ok(Self {
            projection,
            width,
            height,
            shutter,
            motion,
        })
    }

    pub fn kind(&self) -> SensorKind {
        match self.projection {
            Projection::Perspective(_) => SensorKind::Perspective,
            Projection::Spherical(_) => SensorKind::Spherical,
        }
    }

    /// Same sensor with an instantaneous (global) shutter.
    pub fn with_global_shutter(&self) -> Self {
        Self {
            shutter: ShutterSpec::global(),
            ..self.clone()
        }
    }

    /// Normalized coordinates of the centre of pixel (`col`, `row`).
    #[inline]
    pub fn pixel_center(&self, col: usize, row: usize) -> (f64, f64) {
        (
            (col as f64 + 0.5) / self.width as f64,
            (row as f64 + 0.5) / self.height as f64,
        )
    }

    /// Converts native image coordinates (normalized for perspective, radians
    /// for spherical) into continuous pixel coordinates.
    pub fn native_to_pixel(&self, native: [f64; 2]) -> (f64, f64) {
        match &self.projection {
            Projection::Perspective(_) => (native[0] * self.width as f64, native[1] * self.height as f64),
            Projection::Spherical(table) => (
                azimuth_to_u(native[0]) * self.width as f64,
                table.theta_to_v(native[1]) * self.height as f64,
            ),
        }
    }
}

#[inline]
pub fn azimuth_to_u(phi: f64) -> f64 {
    (phi + PI) / TWO_PI
}

#[inline]
pub fn u_to_azimuth(u: f64) -> f64 {
    u * TWO_PI - PI
}

/// Wraps `phi` into `[lo, lo + 2π)`.
#[inline]
pub fn wrap_azimuth(phi: f64, lo: f64) -> f64 {
    let mut p = phi - TWO_PI * ((phi - lo) / TWO_PI).floor();
    // Rounding can land exactly on the open end.
    if p >= lo + TWO_PI {
        p -= TWO_PI;
    }
    if p < lo {
        p = lo;
    }
    p
}

/// Result of a static (time-independent) projection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StaticProjection {
    pub u: f64,
    pub v: f64,
    /// `z` for perspective, `‖x_c‖` for spherical (m).
    pub depth: f64,
    /// Native coordinates: `(u, v)` for perspective, `(φ, θ)` for spherical.
    pub native: [f64; 2],
    pub valid: bool,
}

/// Static projection with the principal azimuth window `[−π, π)`.
pub fn project_static(m: &SensorModel, x_c: &Vec3) -> StaticProjection {
    project_static_windowed(m, x_c, -PI)
}

/// Static projection whose azimuth is wrapped into `[azimuth_lo, azimuth_lo + 2π)`.
///
/// Perspective sensors ignore the window.
pub fn project_static_windowed(m: &SensorModel, x_c: &Vec3, azimuth_lo: f64) -> StaticProjection {
    match &m.projection {
        Projection::Perspective(k) => {
            let z = x_c.z;
            let u = k.fx * x_c.x / z + k.cx;
            let v = k.fy * x_c.y / z + k.cy;
            StaticProjection {
                u,
                v,
                depth: z,
                native: [u, v],
                valid: z > 0.0 && u.is_finite() && v.is_finite(),
            }
        }
        Projection::Spherical(table) => {
            let r = x_c.norm();
            let phi = wrap_azimuth(x_c.y.atan2(x_c.x), azimuth_lo);
            let theta = if r > 0.0 { (x_c.z / r).clamp(-1.0, 1.0).asin() } else { 0.0 };
            let u = azimuth_to_u(phi);
            let v = table.theta_to_v(theta);
            StaticProjection {
                u,
                v,
                depth: r,
                native: [phi, theta],
                valid: r > 0.0 && (0.0..=1.0).contains(&v),
            }
        }
    }
}

/// Jacobian of the native projection: `d(u,v)/dx_c` for perspective,
/// `d(φ,θ)/dx_c` for spherical.
pub fn jacobian_static(m: &SensorModel, x_c: &Vec3) -> Result<Matrix2x3<f64>> {
    let (x, y, z) = (x_c.x, x_c.y, x_c.z);
    match &m.projection {
        Projection::Perspective(k) => {
            if z == 0.0 {
                return Err(Error::Invalid("perspective Jacobian at z = 0".into()));
            }
            Ok(Matrix2x3::new(
                k.fx / z,
                0.0,
                -k.fx * x / (z * z),
                0.0,
                k.fy / z,
                -k.fy * y / (z * z),
            ))
        }
        Projection::Spherical(_) => {
            let rho2 = x * x + y * y;
            if rho2 == 0.0 {
                return Err(Error::Invalid("spherical Jacobian on the pole axis".into()));
            }
            let rho = rho2.sqrt();
            let r2 = rho2 + z * z;
            Ok(Matrix2x3::new(
                -y / rho2,
                x / rho2,
                0.0,
                -x * z / (r2 * rho),
                -y * z / (r2 * rho),
                rho / r2,
            ))
        }
    }
}

/// Jacobian of the normalized coordinates `d(u,v)/dx_c`.
pub fn jacobian_normalized(m: &SensorModel, x_c: &Vec3) -> Result<Matrix2x3<f64>> {
    let j = jacobian_static(m, x_c)?;
    match &m.projection {
        Projection::Perspective(_) => Ok(j),
        Projection::Spherical(table) => {
            let theta = (x_c.z / x_c.norm()).clamp(-1.0, 1.0).asin();
            let mut out = j;
            out.row_mut(0).scale_mut(1.0 / TWO_PI);
            out.row_mut(1).scale_mut(table.dv_dtheta(theta));
            Ok(out)
        }
    }
}

/// Unit direction in the sensor frame for normalized coordinates.
pub fn sensor_direction(m: &SensorModel, u: f64, v: f64) -> Vec3 {
    match &m.projection {
        Projection::Perspective(k) => Vec3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0).normalize(),
        Projection::Spherical(table) => {
            let phi = u_to_azimuth(u);
            let theta = table.v_to_theta(v);
            Vec3::new(theta.cos() * phi.cos(), theta.cos() * phi.sin(), theta.sin())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    /// Shutter time of the pixel (s, relative to mid-exposure).
    pub eta: f64,
}

impl Ray {
    #[inline]
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// World-space ray through normalized coordinates `(u, v)` at the pixel's shutter time.
pub fn pixel_ray(m: &SensorModel, u: f64, v: f64) -> Ray {
    let eta = shutter_time(&m.shutter, u, v);
    let pose = pose_at_time(&m.motion, eta);
    let d = sensor_direction(m, u, v);
    Ray {
        origin: pose.translation,
        direction: rotate_point(&pose.rotation, &d),
        eta,
    }
}
