//! Reverse-mode gradients of the rendered buffers with the per-pixel hit
//! structure (candidates, sort order, early termination) held fixed.

use nalgebra::{Matrix3, Vector4};
use rayon::prelude::*;

use super::loss::PixelGrads;
use crate::geom::{Mat3, Vec3};
use crate::raster::{response_with_precision, Channel, FrameParticle, Hit, HitTrace, PixelValue, PreparedFrame, T_MIN};
use crate::scene::{GaussianParticle, Scene};
use crate::sensor::Ray;

/// Number of scalar parameters per particle.
pub const PARAMS_PER_PARTICLE: usize = 15;

/// Partials of the loss with respect to one particle's parameters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ParticleGrad {
    pub position: Vec3,
    pub scale: Vec3,
    /// With respect to the quaternion components `(w, x, y, z)`.
    pub rotation: Vector4<f64>,
    pub camera_opacity: f64,
    pub lidar_opacity: f64,
    pub color: Vec3,
}

impl ParticleGrad {
    pub fn to_array(&self) -> [f64; PARAMS_PER_PARTICLE] {
        let mut a = [0.0; PARAMS_PER_PARTICLE];
        a[0..3].copy_from_slice(self.position.as_slice());
        a[3..6].copy_from_slice(self.scale.as_slice());
        a[6..10].copy_from_slice(self.rotation.as_slice());
        a[10] = self.camera_opacity;
        a[11] = self.lidar_opacity;
        a[12..15].copy_from_slice(self.color.as_slice());
        a
    }

    pub fn from_array(a: &[f64; PARAMS_PER_PARTICLE]) -> Self {
        Self {
            position: Vec3::new(a[0], a[1], a[2]),
            scale: Vec3::new(a[3], a[4], a[5]),
            rotation: Vector4::new(a[6], a[7], a[8], a[9]),
            camera_opacity: a[10],
            lidar_opacity: a[11],
            color: Vec3::new(a[12], a[13], a[14]),
        }
    }

    fn add(&mut self, o: &ParticleGrad) {
        self.position += o.position;
        self.scale += o.scale;
        self.rotation += o.rotation;
        self.camera_opacity += o.camera_opacity;
        self.lidar_opacity += o.lidar_opacity;
        self.color += o.color;
    }
}

/// Per-particle gradients in flat scene order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParticleGradients {
    pub particles: Vec<ParticleGrad>,
}

impl ParticleGradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            particles: vec![ParticleGrad::default(); n],
        }
    }

    pub fn accumulate(&mut self, other: &ParticleGradients) {
        for (a, b) in self.particles.iter_mut().zip(&other.particles) {
            a.add(b);
        }
    }
}

/// Flat parameter vector of a particle: position, scale, quaternion
/// `(w, x, y, z)`, camera opacity, lidar opacity, colour.
pub fn particle_params(p: &GaussianParticle) -> [f64; PARAMS_PER_PARTICLE] {
    let q = p.rotation.quaternion();
    ParticleGrad {
        position: p.position,
        scale: p.scale,
        rotation: Vector4::new(q.w, q.i, q.j, q.k),
        camera_opacity: p.camera_opacity,
        lidar_opacity: p.lidar_opacity,
        color: p.color,
    }
    .to_array()
}

/// Inverse of [`particle_params`]; the quaternion is normalized, nothing is clamped.
pub fn set_particle_params(p: &mut GaussianParticle, a: &[f64; PARAMS_PER_PARTICLE]) {
    let g = ParticleGrad::from_array(a);
    p.position = g.position;
    p.scale = g.scale;
    p.rotation = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
        g.rotation[0],
        g.rotation[1],
        g.rotation[2],
        g.rotation[3],
    ));
    p.camera_opacity = g.camera_opacity;
    p.lidar_opacity = g.lidar_opacity;
    p.color = g.color;
}

/// World-space accumulators for one particle.
#[derive(Debug, Clone, Copy)]
struct WorldGrad {
    mu: Vec3,
    /// `Σ η·∂L/∂μ(η)`, needed for the actor velocity term.
    mu_eta: Vec3,
    precision: Mat3,
    opacity: f64,
    color: Vec3,
}

impl Default for WorldGrad {
    fn default() -> Self {
        Self {
            mu: Vec3::zeros(),
            mu_eta: Vec3::zeros(),
            precision: Mat3::zeros(),
            opacity: 0.0,
            color: Vec3::zeros(),
        }
    }
}

impl WorldGrad {
    fn add(&mut self, o: &WorldGrad) {
        self.mu += o.mu;
        self.mu_eta += o.mu_eta;
        self.precision += o.precision;
        self.opacity += o.opacity;
        self.color += o.color;
    }
}

struct Eval {
    alpha: f64,
    tau: f64,
    /// `exp(−½ m²)`.
    falloff: f64,
    mu: Vec3,
    x: Vec3,
    a: f64,
}

fn eval_hit(p: &FrameParticle, ray: &Ray) -> Eval {
    let mu = p.position_at(ray.eta);
    let r = response_with_precision(&ray.origin, &ray.direction, &mu, &p.precision);
    let falloff = (-0.5 * r.mahalanobis2).exp();
    Eval {
        alpha: p.opacity * falloff,
        tau: r.tau,
        falloff,
        mu,
        x: r.x_max,
        a: ray.direction.dot(&(p.precision * ray.direction)),
    }
}

/// Composites `ids` in the given order with no thresholds or early exit.
pub fn composite_fixed(ids: &[u32], ray: &Ray, particles: &[FrameParticle], background: Vec3) -> PixelValue {
    let mut color = Vec3::zeros();
    let mut range = 0.0;
    let mut t = 1.0;
    for &i in ids {
        let p = &particles[i as usize];
        let e = eval_hit(p, ray);
        color += p.color * (e.alpha * t);
        range += e.tau * e.alpha * t;
        t *= 1.0 - e.alpha;
    }
    PixelValue {
        color: color + background * t,
        range,
        alpha: 1.0 - t,
        consumed: ids.len(),
    }
}

/// Leading hits that compositing actually uses.
pub fn consumed_ids(hits: &[Hit]) -> Vec<u32> {
    let mut t = 1.0;
    let mut out = Vec::new();
    for h in hits {
        out.push(h.particle);
        t *= 1.0 - h.alpha;
        if t < T_MIN {
            break;
        }
    }
    out
}

/// Backpropagates one pixel; `emit(k, grad)` receives world-space partials of `ids[k]`.
fn backward_pixel(
    ids: &[u32],
    ray: &Ray,
    particles: &[FrameParticle],
    background: Vec3,
    g_color: Vec3,
    g_range: f64,
    g_alpha: f64,
    mut emit: impl FnMut(usize, WorldGrad),
) {
    let evals: Vec<Eval> = ids.iter().map(|&i| eval_hit(&particles[i as usize], ray)).collect();
    let n = evals.len();
    let mut trans = Vec::with_capacity(n + 1);
    let mut t = 1.0;
    for e in &evals {
        trans.push(t);
        t *= 1.0 - e.alpha;
    }
    // B_i = f_i α_i + (1 − α_i) B_{i+1}, B_n = ∂L/∂T_final.
    let mut b_next = g_color.dot(&background) - g_alpha;
    for k in (0..n).rev() {
        let e = &evals[k];
        let p = &particles[ids[k] as usize];
        let f = g_color.dot(&p.color) + g_range * e.tau;
        let ti = trans[k];
        let d_alpha = ti * (f - b_next);
        let d_tau = g_range * e.alpha * ti;
        let d_m2 = -0.5 * e.alpha * d_alpha;
        let diff = e.mu - e.x;
        let pd = p.precision * ray.direction;
        let g_mu = p.precision * diff * (2.0 * d_m2) + pd * (d_tau / e.a);
        let g_prec = diff * diff.transpose() * d_m2 + (ray.direction * diff.transpose()) * (d_tau / e.a);
        emit(
            k,
            WorldGrad {
                mu: g_mu,
                mu_eta: g_mu * ray.eta,
                precision: 0.5 * (g_prec + g_prec.transpose()),
                opacity: d_alpha * e.falloff,
                color: g_color * (e.alpha * ti),
            },
        );
        b_next = f * e.alpha + (1.0 - e.alpha) * b_next;
    }
}

/// World-space gradients of one frame, reduced per tile and merged in tile order.
fn backward_world(frame: &PreparedFrame, trace: &HitTrace, pixel: &PixelGrads) -> Vec<WorldGrad> {
    let (w, h) = (frame.sensor.width, frame.sensor.height);
    let bg = frame.settings.background;
    let per_tile: Vec<(usize, Vec<WorldGrad>)> = (0..frame.grid.tile_count())
        .into_par_iter()
        .map(|t| {
            let cand = &frame.candidates[t];
            let mut acc = vec![WorldGrad::default(); cand.len()];
            let (x0, x1, y0, y1) = frame.grid.tile_bounds(t, w, h);
            let mut ids = Vec::new();
            for row in y0..y1 {
                for col in x0..x1 {
                    let i = row * w + col;
                    let (gc, gr, ga) = (pixel.color[i], pixel.range[i], pixel.alpha[i]);
                    if gc == Vec3::zeros() && gr == 0.0 && ga == 0.0 {
                        continue;
                    }
                    let slots = trace.pixel(i);
                    ids.clear();
                    ids.extend(slots.iter().map(|&s| cand[s as usize]));
                    let ray = frame.ray(col, row);
                    backward_pixel(&ids, &ray, &frame.particles, bg, gc, gr, ga, |k, g| {
                        acc[slots[k] as usize].add(&g);
                    });
                }
            }
            (t, acc)
        })
        .collect();
    let mut out = vec![WorldGrad::default(); frame.particles.len()];
    for (t, acc) in per_tile {
        for (s, g) in acc.iter().enumerate() {
            out[frame.candidates[t][s] as usize].add(g);
        }
    }
    out
}

/// `∂R/∂(w, x, y, z)` contracted with `g = ∂L/∂R`.
fn rotation_grad(q: &Vector4<f64>, g: &Mat3) -> Vector4<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let dw = Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0;
    let dx = Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0;
    let dy = Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0;
    let dz = Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0;
    let raw = Vector4::new(g.dot(&dw), g.dot(&dx), g.dot(&dy), g.dot(&dz));
    // Through the normalization q / |q| at |q| = 1.
    raw - q * q.dot(&raw)
}

fn to_particle_grad(g: &WorldGrad, fp: &FrameParticle, p: &GaussianParticle, channel: Channel) -> ParticleGrad {
    let rn = fp.node_rotation;
    let position = rn.transpose() * (g.mu - fp.angular_velocity.cross(&g.mu_eta));
    let g_local = rn.transpose() * g.precision * rn;
    let r = p.rotation.to_rotation_matrix().into_inner();
    let inv_s2 = p.scale.map(|s| 1.0 / (s * s));
    let d = Mat3::from_diagonal(&inv_s2);
    let rgr = r.transpose() * g_local * r;
    let scale = Vec3::new(
        -2.0 * rgr[(0, 0)] / p.scale.x.powi(3),
        -2.0 * rgr[(1, 1)] / p.scale.y.powi(3),
        -2.0 * rgr[(2, 2)] / p.scale.z.powi(3),
    );
    let g_r = g_local * r * d * 2.0;
    let q = p.rotation.quaternion();
    let rotation = rotation_grad(&Vector4::new(q.w, q.i, q.j, q.k), &g_r);
    let (camera_opacity, lidar_opacity) = match channel {
        Channel::Camera => (g.opacity, 0.0),
        Channel::Lidar => (0.0, g.opacity),
    };
    ParticleGrad {
        position,
        scale,
        rotation,
        camera_opacity,
        lidar_opacity,
        color: g.color,
    }
}

/// Gradients of a frame's image loss with respect to every particle in `scene`.
pub fn backward_frame(scene: &Scene, frame: &PreparedFrame, trace: &HitTrace, pixel: &PixelGrads) -> ParticleGradients {
    let world = backward_world(frame, trace, pixel);
    let particles = scene
        .particles()
        .zip(&frame.particles)
        .zip(&world)
        .map(|((p, fp), g)| to_particle_grad(g, fp, p, frame.channel))
        .collect();
    ParticleGradients { particles }
}
