//! Analytic ray tracer over primitive scenes, simulating moving
//! rolling-shutter sensors exactly (each pixel at its own shutter time).

use std::path::Path;

use rayon::prelude::*;
use crate::error::{Error, Result};
use crate::geom::{RigidPose, Vec3};
use crate::raster::{Channel, FrameBuffers};
use crate::sensor::{pixel_ray, Ray, SensorKind, SensorModel};

/// Hits closer than this along a ray are ignored.
const MIN_T: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Sphere { radius: f64 },
    Box { half_extents: Vec3 },
    /// Rectangle in the local xy plane, normal +z.
    Plane { half_width: f64, half_height: f64 },
    Mesh { triangles: Vec<[Vec3; 3]> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub pose: RigidPose,
    pub color: Vec3,
    /// Seen by lidar only (e.g. glass for the camera).
    pub lidar_only: bool,
}

impl Primitive {
    pub fn new(shape: Shape, pose: RigidPose, color: Vec3) -> Result<Self> {
        let ok = match &shape {
            Shape::Sphere { radius } => *radius > 0.0,
            Shape::Box { half_extents } => half_extents.iter().all(|h| *h > 0.0),
            Shape::Plane { half_width, half_height } => *half_width > 0.0 && *half_height > 0.0,
            Shape::Mesh { triangles } => !triangles.is_empty(),
        };
        if !ok {
            return Err(Error::Invalid(format!("primitive sizes must be positive: {shape:?}")));
        }
        Ok(Self {
            shape,
            pose,
            color,
            lidar_only: false,
        })
    }

    pub fn sphere(center: Vec3, radius: f64, color: Vec3) -> Result<Self> {
        Self::new(Shape::Sphere { radius }, RigidPose::new(Default::default(), center), color)
    }

    pub fn cuboid(pose: RigidPose, half_extents: Vec3, color: Vec3) -> Result<Self> {
        Self::new(Shape::Box { half_extents }, pose, color)
    }

    pub fn rectangle(pose: RigidPose, half_width: f64, half_height: f64, color: Vec3) -> Result<Self> {
        Self::new(Shape::Plane { half_width, half_height }, pose, color)
    }

    /// Nearest hit distance along a unit-direction ray.
    pub fn intersect(&self, ray: &Ray) -> Option<f64> {
        let o = self.pose.inverse_transform_point(&ray.origin);
        let d = self.pose.rotation.inverse_transform_vector(&ray.direction);
        match &self.shape {
            Shape::Sphere { radius } => intersect_sphere(&o, &d, *radius),
            Shape::Box { half_extents } => intersect_box(&o, &d, half_extents),
            Shape::Plane { half_width, half_height } => {
                if d.z == 0.0 {
                    return None;
                }
                let t = -o.z / d.z;
                let p = o + d * t;
                (t > MIN_T && p.x.abs() <= *half_width && p.y.abs() <= *half_height).then_some(t)
            }
            Shape::Mesh { triangles } => triangles
                .iter()
                .filter_map(|tri| intersect_triangle(&o, &d, tri))
                .min_by(f64::total_cmp),
        }
    }

    /// Signed distance-like residual used to check points on the surface.
    pub fn surface_residual(&self, x: &Vec3) -> f64 {
        let p = self.pose.inverse_transform_point(x);
        match &self.shape {
            Shape::Sphere { radius } => (p.norm() - radius).abs(),
            Shape::Box { half_extents } => {
                let q = p.abs() - half_extents;
                let outside = q.map(|v| v.max(0.0)).norm();
                let inside = q.max().min(0.0);
                (outside + inside).abs()
            }
            Shape::Plane { half_width, half_height } => {
                let dx = (p.x.abs() - half_width).max(0.0);
                let dy = (p.y.abs() - half_height).max(0.0);
                (p.z * p.z + dx * dx + dy * dy).sqrt()
            }
            Shape::Mesh { triangles } => triangles
                .iter()
                .map(|t| point_triangle_distance(&p, t))
                .fold(f64::INFINITY, f64::min),
        }
    }
}

fn intersect_sphere(o: &Vec3, d: &Vec3, r: f64) -> Option<f64> {
    let b = o.dot(d);
    let c = o.norm_squared() - r * r;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    // Stable roots of t² + 2bt + c.
    let q = if b > 0.0 { -b - s } else { -b + s };
    let (t0, t1) = if q == 0.0 { (0.0, 0.0) } else { (c / q, q) };
    let (near, far) = (t0.min(t1), t0.max(t1));
    if near > MIN_T {
        Some(near)
    } else if far > MIN_T {
        Some(far)
    } else {
        None
    }
}

fn intersect_box(o: &Vec3, d: &Vec3, h: &Vec3) -> Option<f64> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for k in 0..3 {
        if d[k] == 0.0 {
            if o[k].abs() > h[k] {
                return None;
            }
            continue;
        }
        let a = (-h[k] - o[k]) / d[k];
        let b = (h[k] - o[k]) / d[k];
        t_near = t_near.max(a.min(b));
        t_far = t_far.min(a.max(b));
    }
    if t_near > t_far {
        return None;
    }
    if t_near > MIN_T {
        Some(t_near)
    } else if t_far > MIN_T {
        Some(t_far)
    } else {
        None
    }
}

fn intersect_triangle(o: &Vec3, d: &Vec3, tri: &[Vec3; 3]) -> Option<f64> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let p = d.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let s = o - tri[0];
    let u = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = d.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&q) * inv;
    (t > MIN_T).then_some(t)
}

fn point_triangle_distance(p: &Vec3, t: &[Vec3; 3]) -> f64 {
    let n = (t[1] - t[0]).cross(&(t[2] - t[0]));
    let nn = n.norm_squared();
    if nn > 0.0 {
        let proj = p - n * ((p - t[0]).dot(&n) / nn);
        let inside = (0..3).all(|k| {
            let a = t[k];
            let b = t[(k + 1) % 3];
            (b - a).cross(&(proj - a)).dot(&n) >= 0.0
        });
        if inside {
            return (p - proj).norm();
        }
    }
    (0..3)
        .map(|k| {
            let a = t[k];
            let b = t[(k + 1) % 3];
            let ab = b - a;
            let s = ((p - a).dot(&ab) / ab.norm_squared().max(1e-300)).clamp(0.0, 1.0);
            (p - (a + ab * s)).norm()
        })
        .fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SyntheticScene {
    pub primitives: Vec<Primitive>,
    pub background: Vec3,
}

impl SyntheticScene {
    /// Nearest primitive hit `(t, index)` visible to `channel`.
    pub fn trace(&self, ray: &Ray, channel: Channel) -> Option<(f64, usize)> {
        self.primitives
            .iter()
            .enumerate()
            .filter(|(_, p)| channel == Channel::Lidar || !p.lidar_only)
            .filter_map(|(i, p)| p.intersect(ray).map(|t| (t, i)))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
    }
}

/// Ground-truth buffers: flat colour, range along the ray (0 on a miss), and
/// alpha 1 on hits.
pub fn raytrace(s: &SyntheticScene, m: &SensorModel, channel: Channel) -> FrameBuffers {
    let (w, h) = (m.width, m.height);
    let rows: Vec<Vec<(Vec3, f64, f64, f64)>> = (0..h)
        .into_par_iter()
        .map(|row| {
            (0..w)
                .map(|col| {
                    let (u, v) = m.pixel_center(col, row);
                    let ray = pixel_ray(m, u, v);
                    match s.trace(&ray, channel) {
                        Some((t, i)) => (s.primitives[i].color, t, 1.0, ray.eta),
                        None => (s.background, 0.0, 0.0, ray.eta),
                    }
                })
                .collect()
        })
        .collect();
    let mut fb = FrameBuffers::new(w, h, s.background);
    for (i, (c, r, a, eta)) in rows.into_iter().flatten().enumerate() {
        fb.color[i] = c;
        fb.range[i] = r;
        fb.alpha[i] = a;
        fb.eta[i] = eta;
    }
    fb
}

/// Range image of a spherical sensor.
pub fn raytrace_range_image(s: &SyntheticScene, m: &SensorModel) -> Result<FrameBuffers> {
    if m.kind() != SensorKind::Spherical {
        return Err(Error::Invalid("range images need a spherical sensor".into()));
    }
    Ok(raytrace(s, m, Channel::Lidar))
}

/// Colour image of a perspective sensor.
pub fn raytrace_pinhole_image(s: &SyntheticScene, m: &SensorModel) -> Result<FrameBuffers> {
    if m.kind() != SensorKind::Perspective {
        return Err(Error::Invalid("pinhole images need a perspective sensor".into()));
    }
    Ok(raytrace(s, m, Channel::Camera))
}

/// World points of every pixel with positive range, along its shutter-time ray.
pub fn range_image_to_pointcloud(r: &FrameBuffers, m: &SensorModel) -> Vec<Vec3> {
    points_where(r, m, |i| (r.range[i] > 0.0).then_some(r.range[i]))
}

/// Like [`range_image_to_pointcloud`] for splat renders: pixels with alpha of
/// at least `min_alpha`, range normalized by alpha.
pub fn rendered_range_to_pointcloud(r: &FrameBuffers, m: &SensorModel, min_alpha: f64) -> Vec<Vec3> {
    points_where(r, m, |i| (r.alpha[i] >= min_alpha && r.alpha[i] > 0.0).then(|| r.range[i] / r.alpha[i]))
}

fn points_where(r: &FrameBuffers, m: &SensorModel, f: impl Fn(usize) -> Option<f64>) -> Vec<Vec3> {
    let mut out = Vec::new();
    for row in 0..r.height {
        for col in 0..r.width {
            let i = row * r.width + col;
            if let Some(range) = f(i) {
                let (u, v) = m.pixel_center(col, row);
                out.push(pixel_ray(m, u, v).at(range));
            }
        }
    }
    out
}

/// Coloured world points of a camera ground-truth image.
pub fn colored_points(r: &FrameBuffers, m: &SensorModel) -> Vec<(Vec3, Vec3)> {
    let mut out = Vec::new();
    for row in 0..r.height {
        for col in 0..r.width {
            let i = row * r.width + col;
            if r.range[i] > 0.0 {
                let (u, v) = m.pixel_center(col, row);
                out.push((pixel_ray(m, u, v).at(r.range[i]), r.color[i]));
            }
        }
    }
    out
}

/// Parses an ASCII OBJ (vertex positions and faces only); faces are fan-triangulated.
pub fn parse_obj(text: &str) -> std::result::Result<Vec<[Vec3; 3]>, String> {
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let c: Vec<f64> = it
                    .take(3)
                    .map(|s| s.parse::<f64>().map_err(|e| format!("line {}: {e}", n + 1)))
                    .collect::<std::result::Result<_, _>>()?;
                if c.len() != 3 {
                    return Err(format!("line {}: vertex needs 3 coordinates", n + 1));
                }
                vertices.push(Vec3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let idx: Vec<usize> = it
                    .map(|tok| {
                        let first = tok.split('/').next().unwrap_or("");
                        let k: i64 = first.parse().map_err(|_| format!("line {}: bad index {tok:?}", n + 1))?;
                        let len = vertices.len() as i64;
                        let k = if k < 0 { len + k } else { k - 1 };
                        if k < 0 || k >= len {
                            return Err(format!("line {}: index {tok} out of range", n + 1));
                        }
                        Ok(k as usize)
                    })
                    .collect::<std::result::Result<_, _>>()?;
                if idx.len() < 3 {
                    return Err(format!("line {}: face needs 3 vertices", n + 1));
                }
                for k in 1..idx.len() - 1 {
                    triangles.push([vertices[idx[0]], vertices[idx[k]], vertices[idx[k + 1]]]);
                }
            }
            _ => {}
        }
    }
    if triangles.is_empty() {
        return Err("no faces".into());
    }
    Ok(triangles)
}

pub fn load_obj(path: &Path) -> Result<Vec<[Vec3; 3]>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_obj(&text).map_err(|message| Error::Parse {
        path: path.to_path_buf(),
        message,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{MotionState, UnitQuat};
    use crate::sensor::tests::{lidar, pinhole};
    use crate::sensor::{ElevationTable, PinholeIntrinsics, ShutterSpec};
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn spinning(width: usize, rows: usize, velocity: Vec3) -> SensorModel {
        let table = ElevationTable::linear(20f64.to_radians(), -20f64.to_radians(), rows).unwrap();
        let mut motion = MotionState::default();
        motion.linear_velocity = velocity;
        SensorModel::spherical(table, width, ShutterSpec::centered(0.1, 0.0), motion).unwrap()
    }

    #[test]
    fn empty_scene_has_no_returns() {
        let s = SyntheticScene::default();
        let r = raytrace_range_image(&s, &lidar(64, 8)).unwrap();
        assert!(r.range.iter().all(|x| *x == 0.0));
        let c = raytrace_pinhole_image(&SyntheticScene { primitives: vec![], background: Vec3::repeat(0.2) }, &pinhole(8, 8)).unwrap();
        assert!(c.color.iter().all(|x| *x == Vec3::repeat(0.2)));
        assert!(raytrace_range_image(&s, &pinhole(4, 4)).is_err());
    }

    #[test]
    fn sphere_range_is_exact() {
        let s = SyntheticScene {
            primitives: vec![Primitive::sphere(Vec3::new(5.0, 0.0, 0.0), 1.0, Vec3::repeat(1.0)).unwrap()],
            background: Vec3::zeros(),
        };
        let ray = Ray { origin: Vec3::zeros(), direction: Vec3::x(), eta: 0.0 };
        assert_eq!(s.trace(&ray, Channel::Lidar).unwrap().0, 4.0);
    }

    #[test]
    fn centred_sphere_fills_a_disk() {
        let s = SyntheticScene {
            primitives: vec![Primitive::sphere(Vec3::new(0.0, 0.0, 5.0), 1.0, Vec3::new(1.0, 0.0, 0.0)).unwrap()],
            background: Vec3::zeros(),
        };
        let cam = pinhole(41, 41);
        let img = raytrace_pinhole_image(&s, &cam).unwrap();
        // Angular radius asin(1/5); tangent in normalized units.
        let radius = (1.0f64 / 5.0).asin().tan();
        for row in 0..41 {
            for col in 0..41 {
                let (u, v) = cam.pixel_center(col, row);
                let r = ((u - 0.5).powi(2) + (v - 0.5).powi(2)).sqrt();
                let hit = img.alpha[row * 41 + col] == 1.0;
                if (r - radius).abs() > 0.02 {
                    assert_eq!(hit, r < radius, "pixel {col},{row}");
                }
                if hit {
                    assert_eq!(img.color[row * 41 + col], Vec3::new(1.0, 0.0, 0.0));
                }
            }
        }
    }

    #[test]
    fn unprojected_points_lie_on_surfaces() {
        let s = SyntheticScene {
            primitives: vec![
                Primitive::sphere(Vec3::new(4.0, 1.0, 0.2), 1.5, Vec3::repeat(1.0)).unwrap(),
                Primitive::cuboid(
                    RigidPose::new(UnitQuat::from_euler_angles(0.0, 0.0, 0.4), Vec3::new(-5.0, -3.0, 0.0)),
                    Vec3::new(1.0, 2.0, 1.5),
                    Vec3::repeat(0.5),
                )
                .unwrap(),
            ],
            background: Vec3::zeros(),
        };
        let m = spinning(256, 32, Vec3::new(10.0, 2.0, 0.0));
        let r = raytrace_range_image(&s, &m).unwrap();
        let cloud = range_image_to_pointcloud(&r, &m);
        assert!(cloud.len() > 100);
        for p in cloud {
            let res = s.primitives.iter().map(|q| q.surface_residual(&p)).fold(f64::INFINITY, f64::min);
            assert!(res < 1e-9, "{res}");
        }
    }

    #[test]
    fn static_single_pixel_unprojects_forward() {
        // Odd width puts column 2 at φ = 0; row 1 of 3 is at θ = 0.
        let m = lidar(5, 3);
        let mut r = FrameBuffers::new(5, 3, Vec3::zeros());
        r.range[5 + 2] = 4.0;
        let pts = range_image_to_pointcloud(&r, &m);
        assert_eq!(pts.len(), 1);
        assert_relative_eq!(pts[0], Vec3::new(4.0, 0.0, 0.0), epsilon = 1e-12);
        assert!(range_image_to_pointcloud(&FrameBuffers::new(5, 3, Vec3::zeros()), &m).is_empty());
    }

    #[test]
    fn zero_velocity_rolling_equals_global() {
        let s = SyntheticScene {
            primitives: vec![Primitive::cuboid(RigidPose::new(UnitQuat::identity(), Vec3::new(-6.0, 0.0, 0.0)), Vec3::new(1.0, 1.5, 1.0), Vec3::repeat(0.7)).unwrap()],
            background: Vec3::zeros(),
        };
        let m = spinning(128, 16, Vec3::zeros());
        let a = raytrace_range_image(&s, &m).unwrap();
        let b = raytrace_range_image(&s, &m.with_global_shutter()).unwrap();
        assert_eq!(a.range, b.range);
    }

    #[test]
    fn doubling_resolution_agrees_on_shared_rays() {
        let s = SyntheticScene {
            primitives: vec![Primitive::sphere(Vec3::new(3.0, 0.5, 0.3), 1.0, Vec3::repeat(1.0)).unwrap()],
            background: Vec3::zeros(),
        };
        let k = PinholeIntrinsics { fx: 1.0, fy: 1.0, cx: 0.5, cy: 0.5 };
        let pose = RigidPose::new(UnitQuat::from_euler_angles(0.0, PI / 2.0 - 0.1, 0.0), Vec3::zeros());
        let lo = SensorModel::perspective(k, 15, 15, ShutterSpec::global(), MotionState::stationary(pose)).unwrap();
        let hi = SensorModel::perspective(k, 45, 45, ShutterSpec::global(), MotionState::stationary(pose)).unwrap();
        let a = raytrace(&s, &lo, Channel::Lidar);
        let b = raytrace(&s, &hi, Channel::Lidar);
        for row in 0..15 {
            for col in 0..15 {
                assert_eq!(a.range[row * 15 + col], b.range[(3 * row + 1) * 45 + 3 * col + 1]);
            }
        }
    }

    #[test]
    fn moving_sensor_sees_seam_box_twice() {
        // Box straddling φ = ±π, sensor moving along +x at 12 m/s.
        let s = SyntheticScene {
            primitives: vec![Primitive::cuboid(RigidPose::new(UnitQuat::identity(), Vec3::new(-8.0, 0.0, 0.0)), Vec3::new(1.0, 1.0, 1.0), Vec3::repeat(1.0)).unwrap()],
            background: Vec3::zeros(),
        };
        let m = spinning(1024, 256, Vec3::new(12.0, 0.0, 0.0));
        let r = raytrace_range_image(&s, &m).unwrap();
        let row = 128;
        let left = r.range[row * 1024];
        let right = r.range[row * 1024 + 1023];
        assert!(left > 0.0 && right > 0.0);
        // The sweep starts 0.05 s before mid-exposure and ends 0.05 s after.
        // Hand-computed hits: sensor x = ∓0.6 m, box face at x = −7.
        let expect = |sensor_x: f64, col: usize| {
            let (u, v) = m.pixel_center(col, row);
            let d = crate::sensor::sensor_direction(&m, u, v);
            (-7.0 - sensor_x) / d.x
        };
        assert_relative_eq!(left, expect(-0.6 + 12.0 * 0.1 * 0.5 / 1024.0, 0), epsilon = 1e-9);
        assert_relative_eq!(right, expect(0.6 - 12.0 * 0.1 * 0.5 / 1024.0, 1023), epsilon = 1e-9);
        assert!(right - left > 1.0);
    }

    #[test]
    fn rolling_shutter_skews_vertical_edge() {
        // Half-plane x ≥ 0 at depth 5, camera sliding along +x during a vertical readout.
        let plane = Primitive::rectangle(RigidPose::new(UnitQuat::identity(), Vec3::new(50.0, 0.0, 5.0)), 50.0, 50.0, Vec3::repeat(1.0)).unwrap();
        let s = SyntheticScene { primitives: vec![plane], background: Vec3::zeros() };
        let (w, h) = (200, 100);
        let k = PinholeIntrinsics { fx: 0.8, fy: 1.6, cx: 0.5, cy: 0.5 };
        let (v_lat, tau_v, depth) = (10.0, 0.05, 5.0);
        let mut motion = MotionState::default();
        motion.linear_velocity = Vec3::new(v_lat, 0.0, 0.0);
        let cam = SensorModel::perspective(k, w, h, ShutterSpec::centered(0.0, tau_v), motion).unwrap();
        let img = raytrace_pinhole_image(&s, &cam).unwrap();
        let edge = |row: usize| (0..w).find(|&c| img.alpha[row * w + c] == 1.0).unwrap() as f64;
        let pixel_angle = 1.0 / (k.fx * w as f64);
        let slope = v_lat * tau_v / (depth * pixel_angle) / h as f64;
        let measured = (edge(0) - edge(h - 1)) / (h - 1) as f64;
        assert!((measured - slope).abs() < 2.0 / h as f64, "{measured} vs {slope}");
    }

    #[test]
    fn obj_parsing() {
        let text = "# quad\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1 2/2 3/3 -1\n";
        let tris = parse_obj(text).unwrap();
        assert_eq!(tris.len(), 2);
        assert_eq!(tris[1][2], Vec3::new(0.0, 1.0, 0.0));
        assert!(parse_obj("v 0 0 0\nf 1 2 3\n").is_err());
        let mesh = Primitive::new(Shape::Mesh { triangles: tris }, RigidPose::new(UnitQuat::identity(), Vec3::new(-0.5, -0.5, 3.0)), Vec3::repeat(1.0)).unwrap();
        let ray = Ray { origin: Vec3::zeros(), direction: Vec3::z(), eta: 0.0 };
        assert_eq!(mesh.intersect(&ray), Some(3.0));
    }

    #[test]
    fn glass_is_invisible_to_camera() {
        let mut glass = Primitive::rectangle(RigidPose::new(UnitQuat::identity(), Vec3::new(0.0, 0.0, 3.0)), 1.0, 1.0, Vec3::repeat(0.9)).unwrap();
        glass.lidar_only = true;
        let s = SyntheticScene { primitives: vec![glass], background: Vec3::zeros() };
        let ray = Ray { origin: Vec3::zeros(), direction: Vec3::z(), eta: 0.0 };
        assert!(s.trace(&ray, Channel::Camera).is_none());
        assert_eq!(s.trace(&ray, Channel::Lidar).unwrap().0, 3.0);
    }
}
