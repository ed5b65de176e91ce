//! Unscented-transform projection of 3D Gaussians through the rolling-shutter
//! projector, and phase modeling for particles near the spherical azimuth seam.

use std::f64::consts::PI;

use nalgebra::{Cholesky, Matrix2, Vector2};

use crate::error::{Error, Result};
use crate::geom::{Mat3, Vec3};
use crate::rolling::{project_rolling_windowed, RollingProjection, SolverSettings};
use crate::sensor::{azimuth_to_u, Projection, SensorModel, TWO_PI};

const N: usize = 3;
pub const SIGMA_COUNT: usize = 2 * N + 1;
/// `√(n + λ)` with `α = 1, κ = 0` (so `λ = 0`).
pub const SIGMA_SPREAD: f64 = 1.732_050_807_568_877_2;

/// Standard deviations covered by the extent of a projection.
pub const DEFAULT_EXTENT_SIGMAS: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaPointSet {
    pub points: [Vec3; SIGMA_COUNT],
    pub mean_weights: [f64; SIGMA_COUNT],
    pub cov_weights: [f64; SIGMA_COUNT],
}

impl SigmaPointSet {
    pub fn mean(&self) -> Vec3 {
        self.points
            .iter()
            .zip(&self.mean_weights)
            .map(|(p, w)| p * *w)
            .sum()
    }

    pub fn covariance(&self) -> Mat3 {
        let mean = self.mean();
        self.points
            .iter()
            .zip(&self.cov_weights)
            .map(|(p, w)| (p - mean) * (p - mean).transpose() * *w)
            .sum()
    }
}

/// Symmetric `2n + 1` sigma points: the mean plus `±√(n+λ)` times each
/// column of the Cholesky factor.
pub fn sigma_points(mu: &Vec3, sigma: &Mat3) -> Result<SigmaPointSet> {
    let chol = Cholesky::new(*sigma).ok_or(Error::NotPositiveDefinite)?;
    let l = chol.l();
    let mut points = [*mu; SIGMA_COUNT];
    for i in 0..N {
        let col: Vec3 = l.column(i) * SIGMA_SPREAD;
        points[1 + i] = mu + col;
        points[1 + N + i] = mu - col;
    }
    let mut weights = [1.0 / (2.0 * N as f64); SIGMA_COUNT];
    weights[0] = 0.0;
    Ok(SigmaPointSet {
        points,
        mean_weights: weights,
        cov_weights: weights,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Central,
    Negative,
    Positive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionStatus {
    Valid,
    /// A sigma point failed to converge or landed behind the sensor.
    SolverFailure,
    /// Converged, but the extent rectangle misses the image.
    OutOfView,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection2D {
    /// Native mean: `(u, v)` for perspective, `(φ, θ)` in radians for spherical.
    pub mean: [f64; 2],
    pub covariance: Matrix2<f64>,
    pub conic: Matrix2<f64>,
    /// Half-widths of the extent rectangle in native units.
    pub extent: [f64; 2],
    pub depth: f64,
    pub phase: Phase,
    pub status: ProjectionStatus,
}

impl Projection2D {
    pub fn is_valid(&self) -> bool {
        self.status == ProjectionStatus::Valid
    }

    fn failed(phase: Phase) -> Self {
        Self {
            mean: [f64::NAN; 2],
            covariance: Matrix2::zeros(),
            conic: Matrix2::zeros(),
            extent: [0.0; 2],
            depth: 0.0,
            phase,
            status: ProjectionStatus::SolverFailure,
        }
    }
}

/// Extent assigned when part of the support lies behind the sensor.
pub const UNBOUNDED_EXTENT: f64 = 1e3;

/// Central projections whose azimuth support stays this far (rad) from ±π
/// skip the auxiliary phases. Sensor motion during a sweep can carry a
/// particle across the seam, so support merely inside `(−π, π)` is not enough.
pub const SEAM_MARGIN: f64 = 0.2;

/// A rolling projector configured for one azimuth window and initial time.
#[derive(Debug, Clone, Copy)]
pub struct Projector<'a> {
    pub sensor: &'a SensorModel,
    /// World velocity shared by all sigma points of the particle.
    pub velocity: Vec3,
    pub eta_0: f64,
    pub azimuth_lo: f64,
    pub phase: Phase,
    pub solver: SolverSettings,
    pub extent_sigmas: f64,
}

impl<'a> Projector<'a> {
    pub fn central(sensor: &'a SensorModel, velocity: Vec3) -> Self {
        Self {
            sensor,
            velocity,
            eta_0: 0.0,
            azimuth_lo: -PI,
            phase: Phase::Central,
            solver: SolverSettings::default(),
            extent_sigmas: DEFAULT_EXTENT_SIGMAS,
        }
    }

    /// Azimuth window `[−2π, 0)`, solver started at `τ_start`.
    pub fn negative(sensor: &'a SensorModel, velocity: Vec3) -> Self {
        Self {
            eta_0: sensor.shutter.tau_start,
            azimuth_lo: -TWO_PI,
            phase: Phase::Negative,
            ..Self::central(sensor, velocity)
        }
    }

    /// Azimuth window `[0, 2π)`, solver started at `τ_end`.
    pub fn positive(sensor: &'a SensorModel, velocity: Vec3) -> Self {
        Self {
            eta_0: sensor.shutter.tau_end(),
            azimuth_lo: 0.0,
            phase: Phase::Positive,
            ..Self::central(sensor, velocity)
        }
    }

    pub fn with_extent_sigmas(self, extent_sigmas: f64) -> Self {
        Self { extent_sigmas, ..self }
    }

    fn project(&self, x: &Vec3) -> RollingProjection {
        project_rolling_windowed(self.sensor, x, &self.velocity, self.eta_0, self.azimuth_lo, &self.solver)
    }
}

/// Unscented-transform projection of `N(mu, sigma)` through `projector`.
pub fn ut_project(mu: &Vec3, sigma: &Mat3, projector: &Projector) -> Result<Projection2D> {
    let set = sigma_points(mu, sigma)?;
    let mut projected = [Vector2::zeros(); SIGMA_COUNT];
    let mut depths = [0.0; SIGMA_COUNT];
    // A spread point behind the sensor means the support straddles it.
    let mut unbounded = false;
    for (i, x) in set.points.iter().enumerate() {
        let r = projector.project(x);
        if i == 0 && !r.valid {
            return Ok(Projection2D::failed(projector.phase));
        }
        if !(r.depth > 0.0 && r.native[0].is_finite() && r.native[1].is_finite()) {
            unbounded = true;
            projected[i] = projected[0];
            depths[i] = depths[0];
            continue;
        }
        // Unconverged spread points still give a usable estimate.
        projected[i] = Vector2::new(r.native[0], r.native[1]);
        depths[i] = r.depth;
    }
    let mean: Vector2<f64> = projected
        .iter()
        .zip(&set.mean_weights)
        .map(|(p, w)| p * *w)
        .sum();
    let covariance: Matrix2<f64> = projected
        .iter()
        .zip(&set.cov_weights)
        .map(|(p, w)| (p - mean) * (p - mean).transpose() * *w)
        .sum();
    let covariance = 0.5 * (covariance + covariance.transpose());
    let depth: f64 = depths.iter().zip(&set.mean_weights).map(|(d, w)| d * w).sum();
    let conic = covariance.try_inverse().unwrap_or_else(Matrix2::zeros);
    // Under strong warps the sigma-point spread can exceed the UT marginal.
    let scale = projector.extent_sigmas / SIGMA_SPREAD;
    let mut extent = [0.0; 2];
    for (a, e) in extent.iter_mut().enumerate() {
        let spread = projected.iter().map(|p| (p[a] - mean[a]).abs()).fold(0.0, f64::max);
        *e = (projector.extent_sigmas * covariance[(a, a)].max(0.0).sqrt())
            .max(scale * spread)
            .max(1e-12);
        if unbounded {
            *e = UNBOUNDED_EXTENT;
        }
    }
    let mut out = Projection2D {
        mean: [mean.x, mean.y],
        covariance,
        conic,
        extent,
        depth,
        phase: projector.phase,
        status: ProjectionStatus::Valid,
    };
    if !extent_intersects_image(&out, projector.sensor) {
        out.status = ProjectionStatus::OutOfView;
    }
    Ok(out)
}

/// Normalized `(u_lo, u_hi, v_lo, v_hi)` bounds of the extent rectangle.
pub fn normalized_bounds(p: &Projection2D, sensor: &SensorModel) -> [f64; 4] {
    let [a, b] = p.mean;
    let [ea, eb] = p.extent;
    match &sensor.projection {
        Projection::Perspective(_) => [a - ea, a + ea, b - eb, b + eb],
        Projection::Spherical(table) => {
            let v0 = table.theta_to_v(b - eb);
            let v1 = table.theta_to_v(b + eb);
            [azimuth_to_u(a - ea), azimuth_to_u(a + ea), v0.min(v1), v0.max(v1)]
        }
    }
}

fn extent_intersects_image(p: &Projection2D, sensor: &SensorModel) -> bool {
    let [u0, u1, v0, v1] = normalized_bounds(p, sensor);
    u1 >= 0.0 && u0 <= 1.0 && v1 >= 0.0 && v0 <= 1.0
}

/// Phase-modeled projection for spherical sensors: up to two projections.
///
/// The central projection (window `[−π, π)`, started at mid-exposure) gates
/// the particle. Auxiliary projections in `[−2π, 0)` (from `τ_start`) and
/// `[0, 2π)` (from `τ_end`) replace it when their azimuth extent stays below
/// π; both are kept when both qualify.
pub fn phase_project(
    mu: &Vec3,
    sigma: &Mat3,
    velocity: Vec3,
    sensor: &SensorModel,
    extent_sigmas: f64,
) -> Result<Vec<Projection2D>> {
    let central = ut_project(mu, sigma, &Projector::central(sensor, velocity).with_extent_sigmas(extent_sigmas))?;
    if central.status == ProjectionStatus::OutOfView {
        return Ok(Vec::new());
    }
    // Support clear of the seam: the auxiliary windows would only reproduce it.
    if central.is_valid() && central.mean[0].abs() + central.extent[0] < PI - SEAM_MARGIN {
        return Ok(vec![central]);
    }
    let negative = ut_project(mu, sigma, &Projector::negative(sensor, velocity).with_extent_sigmas(extent_sigmas))?;
    let positive = ut_project(mu, sigma, &Projector::positive(sensor, velocity).with_extent_sigmas(extent_sigmas))?;
    let usable = |p: &Projection2D| p.is_valid() && p.extent[0] < PI;
    Ok(match (usable(&negative), usable(&positive)) {
        (true, true) => vec![negative, positive],
        (true, false) => vec![negative],
        (false, true) => vec![positive],
        (false, false) if central.is_valid() => vec![central],
        (false, false) => Vec::new(),
    })
}
