//! Tile-based rendering of Gaussian scenes and a brute-force per-pixel oracle.
//!
//! Both paths evaluate the same per-particle maximum response along each
//! pixel ray (taken at that pixel's shutter time) and composite hits sorted by
//! ray distance. Tiling only restricts which particles a pixel looks at.

mod composite;
mod tiles;

use rayon::prelude::*;

pub use composite::{
    integrate_pixel, kernel, max_response, ray_param, response_with_precision, sort_hits, Hit, PixelValue,
    Response, ALPHA_MIN, T_MIN,
};
pub use tiles::{pixel_rect, tile_assign, PixelRect, TileGrid, DEFAULT_TILE_SIZE};

use crate::geom::{Mat3, Vec3};
use crate::scene::{node_world_particle, precision_of, NodeKind, Scene};
use crate::sensor::{pixel_ray, Ray, SensorKind, SensorModel};
use crate::ut::{phase_project, ut_project, Projection2D, Projector};

/// Tiling slack on the kernel cutoff. A particle of opacity `o` drops below
/// `α_min` beyond `√(2 ln(o/α_min))` standard deviations; the projected
/// marginals underestimate that under strong rolling-shutter warps.
pub const FOOTPRINT_SLACK: f64 = 1.5;

/// Extent multiplier for a particle of opacity `opacity`.
pub fn footprint_sigmas(opacity: f64, slack: f64) -> f64 {
    slack * (2.0 * (opacity / ALPHA_MIN).max(1.0).ln()).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Camera,
    Lidar,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSettings {
    pub tile_size: usize,
    pub background: Vec3,
    pub footprint_slack: f64,
    /// Split spherical projections near the azimuth seam.
    pub phase_modeling: bool,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            tile_size: DEFAULT_TILE_SIZE,
            background: Vec3::zeros(),
            footprint_slack: FOOTPRINT_SLACK,
            phase_modeling: true,
        }
    }
}

/// Row-major per-pixel outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameBuffers {
    pub width: usize,
    pub height: usize,
    pub color: Vec<Vec3>,
    /// Composited ray distance (m); zero where nothing was hit.
    pub range: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Shutter time of each pixel (s).
    pub eta: Vec<f64>,
}

impl FrameBuffers {
    pub fn new(width: usize, height: usize, background: Vec3) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            color: vec![background; n],
            range: vec![0.0; n],
            alpha: vec![0.0; n],
            eta: vec![0.0; n],
        }
    }

    #[inline]
    pub fn index(&self, col: usize, row: usize) -> usize {
        row * self.width + col
    }

    fn set(&mut self, i: usize, v: &PixelValue, eta: f64) {
        self.color[i] = v.color;
        self.range[i] = v.range;
        self.alpha[i] = v.alpha;
        self.eta[i] = eta;
    }
}

/// A particle in world space at mid-exposure, ready for ray evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameParticle {
    pub position: Vec3,
    pub velocity: Vec3,
    pub covariance: Mat3,
    pub precision: Mat3,
    /// Opacity of the rendered channel.
    pub opacity: f64,
    pub color: Vec3,
    /// Node rotation (node to world).
    pub node_rotation: Mat3,
    /// Angular velocity of the owning actor; zero for static nodes.
    pub angular_velocity: Vec3,
}

impl FrameParticle {
    #[inline]
    pub fn position_at(&self, eta: f64) -> Vec3 {
        self.position + self.velocity * eta
    }

    /// Response of this particle along `ray`, or `None` when it is skipped.
    #[inline]
    pub fn hit(&self, index: u32, ray: &Ray) -> Option<Hit> {
        let mu = self.position_at(ray.eta);
        let r = response_with_precision(&ray.origin, &ray.direction, &mu, &self.precision);
        let alpha = kernel(self.opacity, r.mahalanobis2);
        (alpha >= ALPHA_MIN && r.tau > 0.0).then_some(Hit {
            particle: index,
            tau: r.tau,
            alpha,
        })
    }
}

/// Flattens scene nodes in order into world-space particles for one channel.
pub fn frame_particles(scene: &Scene, channel: Channel) -> Vec<FrameParticle> {
    let mut out = Vec::with_capacity(scene.particle_count());
    for node in &scene.nodes {
        let node_rotation = node.motion.pose_mid.rotation.to_rotation_matrix().into_inner();
        let angular_velocity = match node.kind {
            NodeKind::Static => Vec3::zeros(),
            NodeKind::RigidActor => node.motion.angular_velocity,
        };
        for p in &node.particles {
            let w = node_world_particle(node, p, 0.0);
            let local = precision_of(p);
            let precision = node_rotation * local * node_rotation.transpose();
            out.push(FrameParticle {
                position: w.position,
                velocity: w.velocity,
                covariance: w.covariance,
                precision: 0.5 * (precision + precision.transpose()),
                opacity: match channel {
                    Channel::Camera => p.camera_opacity,
                    Channel::Lidar => p.lidar_opacity,
                },
                color: p.color,
                node_rotation,
                angular_velocity,
            });
        }
    }
    out
}

/// Particles, projections and tile lists for one sensor frame.
#[derive(Debug, Clone)]
pub struct PreparedFrame {
    pub sensor: SensorModel,
    pub channel: Channel,
    pub settings: RenderSettings,
    pub particles: Vec<FrameParticle>,
    /// Projections with the flat index of the particle they came from.
    pub projections: Vec<(u32, Projection2D)>,
    pub grid: TileGrid,
    /// Per tile, distinct particle indices sorted by projection depth.
    pub candidates: Vec<Vec<u32>>,
    /// Per tile and candidate, the union of that particle's pixel rectangles.
    pub footprints: Vec<Vec<PixelRect>>,
}

/// Per pixel, the tile-candidate slots that compositing consumed, in order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HitTrace {
    offsets: Vec<usize>,
    slots: Vec<u32>,
}

impl HitTrace {
    pub fn pixel(&self, i: usize) -> &[u32] {
        &self.slots[self.offsets[i]..self.offsets[i + 1]]
    }
}

fn union(a: PixelRect, b: PixelRect) -> PixelRect {
    PixelRect {
        x0: a.x0.min(b.x0),
        x1: a.x1.max(b.x1),
        y0: a.y0.min(b.y0),
        y1: a.y1.max(b.y1),
    }
}

impl PreparedFrame {
    pub fn new(scene: &Scene, sensor: &SensorModel, channel: Channel, settings: &RenderSettings) -> Self {
        let particles = frame_particles(scene, channel);
        let projections: Vec<(u32, Projection2D)> = particles
            .par_iter()
            .enumerate()
            .flat_map_iter(|(i, p)| project_particle(p, sensor, settings).into_iter().map(move |q| (i as u32, q)))
            .collect();
        let rects: Vec<Option<PixelRect>> = projections.iter().map(|(_, p)| pixel_rect(p, sensor)).collect();
        let grid = tiles::tile_assign_rects(&rects, sensor.width, sensor.height, settings.tile_size);
        let (candidates, footprints) = grid
            .lists
            .par_iter()
            .map(|list| {
                let mut keyed: Vec<(f64, u32, PixelRect)> = list
                    .iter()
                    .map(|&j| {
                        let (i, p) = &projections[j as usize];
                        (p.depth, *i, rects[j as usize].expect("assigned projections have rectangles"))
                    })
                    .collect();
                keyed.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let mut slot_of = std::collections::HashMap::with_capacity(keyed.len());
                let mut ids = Vec::with_capacity(keyed.len());
                let mut feet: Vec<PixelRect> = Vec::with_capacity(keyed.len());
                for (_, i, r) in keyed {
                    match slot_of.get(&i) {
                        Some(&s) => feet[s] = union(feet[s], r),
                        None => {
                            slot_of.insert(i, ids.len());
                            ids.push(i);
                            feet.push(r);
                        }
                    }
                }
                (ids, feet)
            })
            .unzip();
        Self {
            sensor: sensor.clone(),
            channel,
            settings: *settings,
            particles,
            projections,
            grid,
            candidates,
            footprints,
        }
    }

    pub fn tile_of(&self, col: usize, row: usize) -> usize {
        let ts = self.grid.tile_size;
        (row / ts) * self.grid.tiles_x + col / ts
    }

    pub fn ray(&self, col: usize, row: usize) -> Ray {
        let (u, v) = self.sensor.pixel_center(col, row);
        pixel_ray(&self.sensor, u, v)
    }

    /// Sorted hits of one pixel, each with its candidate slot in the pixel's tile.
    fn slot_hits(&self, col: usize, row: usize, ray: &Ray) -> Vec<(u32, Hit)> {
        let t = self.tile_of(col, row);
        let mut hits: Vec<(u32, Hit)> = self.candidates[t]
            .iter()
            .zip(&self.footprints[t])
            .enumerate()
            .filter(|(_, (_, r))| r.contains(col, row))
            .filter_map(|(s, (&i, _))| self.particles[i as usize].hit(i, ray).map(|h| (s as u32, h)))
            .collect();
        hits.sort_unstable_by(|a, b| a.1.tau.total_cmp(&b.1.tau).then(a.1.particle.cmp(&b.1.particle)));
        hits
    }

    /// Sorted hits of one pixel from its tile's candidates.
    pub fn pixel_hits(&self, col: usize, row: usize) -> (Ray, Vec<Hit>) {
        let ray = self.ray(col, row);
        let hits = self.slot_hits(col, row, &ray).into_iter().map(|(_, h)| h).collect();
        (ray, hits)
    }

    pub fn shade(&self, hits: &[Hit]) -> PixelValue {
        integrate_pixel(hits, |i| self.particles[i as usize].color, self.settings.background)
    }

    pub fn render(&self) -> FrameBuffers {
        self.render_traced().0
    }

    /// Renders and records which hits each pixel consumed.
    pub fn render_traced(&self) -> (FrameBuffers, HitTrace) {
        let (w, h) = (self.sensor.width, self.sensor.height);
        let tiles: Vec<Vec<(usize, PixelValue, f64, Vec<u32>)>> = (0..self.grid.tile_count())
            .into_par_iter()
            .map(|t| {
                let (x0, x1, y0, y1) = self.grid.tile_bounds(t, w, h);
                let mut out = Vec::with_capacity((x1 - x0) * (y1 - y0));
                let mut hits = Vec::new();
                for row in y0..y1 {
                    for col in x0..x1 {
                        let ray = self.ray(col, row);
                        let sh = self.slot_hits(col, row, &ray);
                        hits.clear();
                        hits.extend(sh.iter().map(|(_, h)| *h));
                        let v = self.shade(&hits);
                        let slots = sh[..v.consumed].iter().map(|(s, _)| *s).collect();
                        out.push((row * w + col, v, ray.eta, slots));
                    }
                }
                out
            })
            .collect();
        let mut fb = FrameBuffers::new(w, h, self.settings.background);
        let mut per_pixel = vec![Vec::new(); w * h];
        for (i, v, eta, slots) in tiles.into_iter().flatten() {
            fb.set(i, &v, eta);
            per_pixel[i] = slots;
        }
        let mut trace = HitTrace {
            offsets: Vec::with_capacity(w * h + 1),
            slots: Vec::new(),
        };
        trace.offsets.push(0);
        for s in per_pixel {
            trace.slots.extend(s);
            trace.offsets.push(trace.slots.len());
        }
        (fb, trace)
    }
}

/// Projections of one particle used for tiling; empty when it cannot contribute.
pub fn project_particle(p: &FrameParticle, sensor: &SensorModel, settings: &RenderSettings) -> Vec<Projection2D> {
    if p.opacity < ALPHA_MIN {
        return Vec::new();
    }
    let k = footprint_sigmas(p.opacity, settings.footprint_slack);
    let result = match sensor.kind() {
        SensorKind::Spherical if settings.phase_modeling => phase_project(&p.position, &p.covariance, p.velocity, sensor, k),
        _ => ut_project(
            &p.position,
            &p.covariance,
            &Projector::central(sensor, p.velocity).with_extent_sigmas(k),
        )
        .map(|q| if q.is_valid() { vec![q] } else { Vec::new() }),
    };
    result.unwrap_or_default()
}

/// Tiled render of `scene` through `sensor`.
pub fn render_frame(scene: &Scene, sensor: &SensorModel, channel: Channel, settings: &RenderSettings) -> FrameBuffers {
    PreparedFrame::new(scene, sensor, channel, settings).render()
}

/// Reference render: every pixel evaluates every particle.
pub fn render_oracle(scene: &Scene, sensor: &SensorModel, channel: Channel, settings: &RenderSettings) -> FrameBuffers {
    let particles = frame_particles(scene, channel);
    let (w, h) = (sensor.width, sensor.height);
    let rows: Vec<Vec<(PixelValue, f64)>> = (0..h)
        .into_par_iter()
        .map(|row| {
            (0..w)
                .map(|col| {
                    let (u, v) = sensor.pixel_center(col, row);
                    let ray = pixel_ray(sensor, u, v);
                    let mut hits: Vec<Hit> = particles
                        .iter()
                        .enumerate()
                        .filter(|(_, p)| p.opacity >= ALPHA_MIN)
                        .filter_map(|(i, p)| p.hit(i as u32, &ray))
                        .collect();
                    sort_hits(&mut hits);
                    let value = integrate_pixel(&hits, |i| particles[i as usize].color, settings.background);
                    (value, ray.eta)
                })
                .collect()
        })
        .collect();
    let mut fb = FrameBuffers::new(w, h, settings.background);
    for (row, values) in rows.into_iter().enumerate() {
        for (col, (v, eta)) in values.into_iter().enumerate() {
            let i = fb.index(col, row);
            fb.set(i, &v, eta);
        }
    }
    fb
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{MotionState, RigidPose, UnitQuat};
    use crate::scene::GaussianParticle;
    use crate::sensor::tests::{lidar, pinhole};
    use crate::sensor::ShutterSpec;
    use approx::assert_relative_eq;

    fn max_diff(a: &FrameBuffers, b: &FrameBuffers) -> (f64, f64) {
        let dc = a
            .color
            .iter()
            .zip(&b.color)
            .map(|(x, y)| (x - y).abs().max())
            .fold(0.0, f64::max);
        let dr = a.range.iter().zip(&b.range).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        (dc, dr)
    }

    #[test]
    fn empty_scene_is_background() {
        let scene = Scene::from_particles(Vec::new());
        let cam = pinhole(40, 30);
        let fb = render_frame(&scene, &cam, Channel::Camera, &RenderSettings::default());
        assert!(fb.alpha.iter().all(|a| *a == 0.0));
        assert!(fb.range.iter().all(|r| *r == 0.0));
        assert_eq!(fb, render_oracle(&scene, &cam, Channel::Camera, &RenderSettings::default()));
    }

    #[test]
    fn single_particle_matches_oracle_exactly() {
        let p = GaussianParticle::isotropic(Vec3::new(0.1, -0.05, 3.0), 0.2, 0.9, Vec3::new(0.8, 0.2, 0.1));
        let scene = Scene::from_particles(vec![p]);
        let cam = pinhole(64, 48);
        let s = RenderSettings::default();
        let a = render_frame(&scene, &cam, Channel::Camera, &s);
        let b = render_oracle(&scene, &cam, Channel::Camera, &s);
        assert_eq!(a, b);
        assert!(a.alpha.iter().any(|x| *x > 0.5));
    }

    #[test]
    fn one_particle_closed_form() {
        let mu = Vec3::new(0.0, 0.0, 4.0);
        let p = GaussianParticle::isotropic(mu, 0.3, 0.7, Vec3::new(0.2, 0.4, 0.6));
        let cam = pinhole(9, 9);
        let fb = render_oracle(&Scene::from_particles(vec![p.clone()]), &cam, Channel::Camera, &RenderSettings::default());
        // Centre pixel looks straight through the mean.
        let i = fb.index(4, 4);
        assert_relative_eq!(fb.alpha[i], 0.7, epsilon = 1e-12);
        assert_relative_eq!(fb.range[i], 0.7 * 4.0, epsilon = 1e-12);
        assert_relative_eq!(fb.color[i], p.color * 0.7, epsilon = 1e-12);
    }

    #[test]
    fn moving_spherical_matches_oracle() {
        let mut s = lidar(256, 32);
        s.motion.linear_velocity = Vec3::new(12.0, 0.0, 0.0);
        s.motion.angular_velocity = Vec3::new(0.0, 0.0, 0.3);
        let mut particles = Vec::new();
        for i in 0..200 {
            let a = i as f64 * 0.0314 * 1.999 - 3.14;
            let r = 6.0 + (i % 7) as f64;
            let z = ((i * 13) % 11) as f64 * 0.12 - 0.6;
            let c = Vec3::new((i % 3) as f64 / 2.0, (i % 5) as f64 / 4.0, 0.5);
            let mut p = GaussianParticle::isotropic(Vec3::new(r * a.cos(), r * a.sin(), z), 0.15, 0.8, c);
            p.scale.x *= 2.0;
            p.rotation = UnitQuat::from_euler_angles(0.1 * i as f64, 0.2, 0.0);
            particles.push(p);
        }
        let scene = Scene::from_particles(particles);
        let st = RenderSettings::default();
        for channel in [Channel::Camera, Channel::Lidar] {
            let a = render_frame(&scene, &s, channel, &st);
            let b = render_oracle(&scene, &s, channel, &st);
            let (dc, dr) = max_diff(&a, &b);
            assert!(dc < 1e-5 && dr < 1e-4, "{channel:?}: {dc} {dr}");
        }
    }

    #[test]
    fn rolling_camera_matches_oracle() {
        let mut cam = pinhole(96, 64);
        cam.shutter = ShutterSpec::centered(0.0, 0.03);
        cam.motion = MotionState {
            pose_mid: RigidPose::new(UnitQuat::from_euler_angles(0.02, -0.03, 0.01), Vec3::new(0.1, 0.0, 0.0)),
            linear_velocity: Vec3::new(8.0, 0.0, 2.0),
            angular_velocity: Vec3::new(0.0, 0.5, 0.0),
        };
        let particles: Vec<GaussianParticle> = (0..150)
            .map(|i| {
                let x = ((i * 37) % 100) as f64 / 50.0 - 1.0;
                let y = ((i * 53) % 100) as f64 / 70.0 - 0.7;
                let z = 3.0 + ((i * 17) % 40) as f64 / 10.0;
                GaussianParticle::isotropic(Vec3::new(x * z * 0.5, y * z * 0.5, z), 0.05 + (i % 4) as f64 * 0.03, 0.6, Vec3::new(0.3, (i % 2) as f64, 0.9))
            })
            .collect();
        let scene = Scene::from_particles(particles);
        let st = RenderSettings::default();
        let a = render_frame(&scene, &cam, Channel::Camera, &st);
        let b = render_oracle(&scene, &cam, Channel::Camera, &st);
        let (dc, dr) = max_diff(&a, &b);
        assert!(dc < 1e-5 && dr < 1e-4, "{dc} {dr}");
    }

    #[test]
    fn channel_swap_needs_differing_opacity() {
        let mut p = GaussianParticle::isotropic(Vec3::new(0.0, 0.0, 3.0), 0.2, 0.6, Vec3::repeat(0.5));
        let cam = pinhole(16, 16);
        let st = RenderSettings::default();
        let same = Scene::from_particles(vec![p.clone()]);
        assert_eq!(
            render_frame(&same, &cam, Channel::Camera, &st),
            render_frame(&same, &cam, Channel::Lidar, &st)
        );
        p.lidar_opacity = 0.9;
        let diff = Scene::from_particles(vec![p]);
        assert_ne!(
            render_frame(&diff, &cam, Channel::Camera, &st),
            render_frame(&diff, &cam, Channel::Lidar, &st)
        );
    }

    #[test]
    fn adding_a_particle_never_lowers_alpha() {
        let cam = pinhole(24, 24);
        let st = RenderSettings::default();
        let mut particles = vec![GaussianParticle::isotropic(Vec3::new(0.0, 0.0, 3.0), 0.3, 0.5, Vec3::repeat(0.5))];
        let before = render_oracle(&Scene::from_particles(particles.clone()), &cam, Channel::Camera, &st);
        particles.push(GaussianParticle::isotropic(Vec3::new(0.2, 0.1, 2.0), 0.2, 0.4, Vec3::repeat(0.1)));
        let after = render_oracle(&Scene::from_particles(particles), &cam, Channel::Camera, &st);
        for (a, b) in before.alpha.iter().zip(&after.alpha) {
            assert!(b >= a);
        }
    }

    #[test]
    fn worker_count_does_not_matter() {
        let p: Vec<GaussianParticle> = (0..60)
            .map(|i| GaussianParticle::isotropic(Vec3::new((i % 8) as f64 * 0.3 - 1.0, (i / 8) as f64 * 0.3 - 1.0, 3.0 + (i % 5) as f64 * 0.1), 0.15, 0.7, Vec3::repeat(0.1 * (i % 10) as f64)))
            .collect();
        let scene = Scene::from_particles(p);
        let cam = pinhole(64, 64);
        let st = RenderSettings::default();
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let a = one.install(|| render_frame(&scene, &cam, Channel::Camera, &st));
        let b = render_frame(&scene, &cam, Channel::Camera, &st);
        assert_eq!(a, b);
    }
}
