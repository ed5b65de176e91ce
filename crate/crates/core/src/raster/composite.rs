use crate::geom::{Mat3, Vec3};
use crate::sensor::Ray;

/// Hits whose response falls below this are skipped.
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
/// Compositing stops once transmittance drops below this.
pub const T_MIN: f64 = 1e-4;

/// Point of maximum Gaussian response along a ray and its ray parameter.
///
/// `τ_max = dᵀΣ⁻¹(μ − o) / dᵀΣ⁻¹d`, `x_max = o + τ_max·d`.
pub fn max_response(o: &Vec3, d: &Vec3, mu: &Vec3, sigma: &Mat3) -> (Vec3, f64) {
    let precision = sigma.try_inverse().unwrap_or_else(Mat3::zeros);
    let r = response_with_precision(o, d, mu, &precision);
    (r.x_max, r.tau)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Response {
    pub x_max: Vec3,
    pub tau: f64,
    /// Squared Mahalanobis distance of `x_max` from the mean.
    pub mahalanobis2: f64,
}

#[inline]
pub fn response_with_precision(o: &Vec3, d: &Vec3, mu: &Vec3, precision: &Mat3) -> Response {
    let pd = precision * d;
    let a = mu - o;
    let tau = pd.dot(&a) / pd.dot(d);
    let x_max = o + d * tau;
    let e = x_max - mu;
    Response {
        x_max,
        tau,
        mahalanobis2: e.dot(&(precision * e)).max(0.0),
    }
}

/// Gaussian kernel value `σ·exp(−½ m²)`.
#[inline]
pub fn kernel(opacity: f64, mahalanobis2: f64) -> f64 {
    opacity * (-0.5 * mahalanobis2).exp()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    /// Flat particle index.
    pub particle: u32,
    pub tau: f64,
    pub alpha: f64,
}

/// Sorts hits front to back; ties broken by particle index.
pub fn sort_hits(hits: &mut [Hit]) {
    hits.sort_unstable_by(|a, b| a.tau.total_cmp(&b.tau).then(a.particle.cmp(&b.particle)));
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelValue {
    pub color: Vec3,
    pub range: f64,
    pub alpha: f64,
    /// Number of leading hits that were composited (including skipped ones).
    pub consumed: usize,
}

impl PixelValue {
    pub fn empty(background: Vec3) -> Self {
        Self {
            color: background,
            range: 0.0,
            alpha: 0.0,
            consumed: 0,
        }
    }
}

/// Front-to-back compositing: `c = Σ cᵢ αᵢ Tᵢ + T_final·background`, with the
/// range channel compositing `τ_max` the same way.
pub fn integrate_pixel(hits: &[Hit], color_of: impl Fn(u32) -> Vec3, background: Vec3) -> PixelValue {
    let mut color = Vec3::zeros();
    let mut range = 0.0;
    let mut transmittance = 1.0;
    let mut consumed = 0;
    for hit in hits {
        consumed += 1;
        if hit.alpha < ALPHA_MIN || hit.tau <= 0.0 {
            continue;
        }
        let w = hit.alpha * transmittance;
        color += color_of(hit.particle) * w;
        range += hit.tau * w;
        transmittance *= 1.0 - hit.alpha;
        if transmittance < T_MIN {
            break;
        }
    }
    PixelValue {
        color: color + background * transmittance,
        range,
        alpha: 1.0 - transmittance,
        consumed,
    }
}

/// Convenience for tests: the ray parameter of `x` along `ray`.
pub fn ray_param(ray: &Ray, x: &Vec3) -> f64 {
    (x - ray.origin).dot(&ray.direction)
}
