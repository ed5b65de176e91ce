//! Dual-opacity Gaussian particles and the static/actor scene graph.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geom::{point_at_time, rotate_point, Mat3, MotionState, UnitQuat, Vec3};
use crate::spatial::{bounds, PointGrid};

/// Smallest admissible scale axis (m).
pub const MIN_SCALE: f64 = 1e-4;
/// Scale given to a particle initialised without any neighbour.
pub const ISOLATED_SCALE: f64 = 0.01;
pub const INIT_OPACITY: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParticle {
    /// Mean in node coordinates (m).
    pub position: Vec3,
    /// Per-axis standard deviation (m).
    pub scale: Vec3,
    pub rotation: UnitQuat,
    pub camera_opacity: f64,
    pub lidar_opacity: f64,
    pub color: Vec3,
}

impl GaussianParticle {
    /// Isotropic particle with tied opacities.
    pub fn isotropic(position: Vec3, scale: f64, opacity: f64, color: Vec3) -> Self {
        let mut p = Self {
            position,
            scale: Vec3::repeat(scale),
            rotation: UnitQuat::identity(),
            camera_opacity: opacity,
            lidar_opacity: opacity,
            color,
        };
        p.enforce_invariants();
        p
    }

    /// Clamps opacities and colour to [0,1] and scales to [`MIN_SCALE`, ∞).
    pub fn enforce_invariants(&mut self) {
        self.scale = self.scale.map(|s| if s.is_nan() { MIN_SCALE } else { s.max(MIN_SCALE) });
        self.camera_opacity = clamp01(self.camera_opacity);
        self.lidar_opacity = clamp01(self.lidar_opacity);
        self.color = self.color.map(clamp01);
        self.rotation.renormalize();
    }

    pub fn is_valid(&self) -> bool {
        self.scale.iter().all(|s| *s > 0.0 && s.is_finite())
            && (0.0..=1.0).contains(&self.camera_opacity)
            && (0.0..=1.0).contains(&self.lidar_opacity)
            && self.color.iter().all(|c| (0.0..=1.0).contains(c))
            && self.position.iter().all(|x| x.is_finite())
            && (self.rotation.norm() - 1.0).abs() < 1e-9
    }

    pub fn max_opacity(&self) -> f64 {
        self.camera_opacity.max(self.lidar_opacity)
    }
}

fn clamp01(x: f64) -> f64 {
    if x.is_nan() {
        0.0
    } else {
        x.clamp(0.0, 1.0)
    }
}

/// `Σ = R S Sᵀ Rᵀ`.
pub fn covariance_of(p: &GaussianParticle) -> Mat3 {
    let r = p.rotation.to_rotation_matrix().into_inner();
    let s2 = Mat3::from_diagonal(&p.scale.component_mul(&p.scale));
    let sigma = r * s2 * r.transpose();
    0.5 * (sigma + sigma.transpose())
}

/// `Σ⁻¹ = R S⁻² Rᵀ`, assembled directly from the factors.
pub fn precision_of(p: &GaussianParticle) -> Mat3 {
    let r = p.rotation.to_rotation_matrix().into_inner();
    let inv = Mat3::from_diagonal(&p.scale.map(|s| 1.0 / (s * s)));
    let prec = r * inv * r.transpose();
    0.5 * (prec + prec.transpose())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Static,
    RigidActor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneNode {
    pub kind: NodeKind,
    pub particles: Vec<GaussianParticle>,
    /// Node-to-world motion at mid-exposure; identity and zero velocity for static nodes.
    pub motion: MotionState,
    /// Half extents of the actor box in node coordinates.
    pub bounding_box: Option<Vec3>,
}

impl SceneNode {
    pub fn static_node(particles: Vec<GaussianParticle>) -> Self {
        Self {
            kind: NodeKind::Static,
            particles,
            motion: MotionState::default(),
            bounding_box: None,
        }
    }

    /// Rigid actor; every particle must lie inside 1.5× the box.
    pub fn rigid_actor(
        particles: Vec<GaussianParticle>,
        motion: MotionState,
        half_extents: Vec3,
    ) -> Result<Self> {
        if half_extents.iter().any(|h| !(*h > 0.0)) {
            return Err(Error::Invalid("actor box extents must be positive".into()));
        }
        let limit = half_extents * 1.5;
        if let Some(i) = particles.iter().position(|p| {
            p.position.x.abs() > limit.x || p.position.y.abs() > limit.y || p.position.z.abs() > limit.z
        }) {
            return Err(Error::Invalid(format!(
                "actor particle {i} lies outside 1.5x its bounding box"
            )));
        }
        Ok(Self {
            kind: NodeKind::RigidActor,
            particles,
            motion,
            bounding_box: Some(half_extents),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub nodes: Vec<SceneNode>,
}

/// A particle expressed in world coordinates at a given time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldParticle {
    pub position: Vec3,
    pub velocity: Vec3,
    pub covariance: Mat3,
}

impl Scene {
    pub fn new(nodes: Vec<SceneNode>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::EmptyInput("scene needs at least one node"));
        }
        Ok(Self { nodes })
    }

    pub fn from_particles(particles: Vec<GaussianParticle>) -> Self {
        Self {
            nodes: vec![SceneNode::static_node(particles)],
        }
    }

    pub fn particle_count(&self) -> usize {
        self.nodes.iter().map(|n| n.particles.len()).sum()
    }

    pub fn particles(&self) -> impl Iterator<Item = &GaussianParticle> {
        self.nodes.iter().flat_map(|n| n.particles.iter())
    }

    pub fn particles_mut(&mut self) -> impl Iterator<Item = &mut GaussianParticle> {
        self.nodes.iter_mut().flat_map(|n| n.particles.iter_mut())
    }
}

/// World-frame state of one particle at `eta`, with its rigid-actor velocity.
pub fn world_particle_at(
    scene: &Scene,
    node_index: usize,
    particle_index: usize,
    eta: f64,
) -> Result<WorldParticle> {
    let node = scene.nodes.get(node_index).ok_or(Error::IndexOutOfRange {
        what: "node",
        index: node_index,
        len: scene.nodes.len(),
    })?;
    let p = node.particles.get(particle_index).ok_or(Error::IndexOutOfRange {
        what: "particle",
        index: particle_index,
        len: node.particles.len(),
    })?;
    Ok(node_world_particle(node, p, eta))
}

pub(crate) fn node_world_particle(node: &SceneNode, p: &GaussianParticle, eta: f64) -> WorldParticle {
    let pose = &node.motion.pose_mid;
    let r_node = pose.rotation.to_rotation_matrix().into_inner();
    let x_mid = pose.transform_point(&p.position);
    let covariance = r_node * covariance_of(p) * r_node.transpose();
    let velocity = match node.kind {
        NodeKind::Static => Vec3::zeros(),
        NodeKind::RigidActor => {
            let r = rotate_point(&pose.rotation, &p.position);
            node.motion.linear_velocity + node.motion.angular_velocity.cross(&r)
        }
    };
    WorldParticle {
        position: point_at_time(&x_mid, &velocity, &Vec3::zeros(), &Vec3::zeros(), eta),
        velocity,
        covariance: 0.5 * (covariance + covariance.transpose()),
    }
}

/// Seeds particles on a spatially even subsample of `points`.
///
/// The subsample keeps the point nearest each occupied voxel centre, with the
/// voxel size bisected to the largest count not exceeding `target_count`.
/// Each particle gets an isotropic scale equal to the mean distance to its
/// three nearest retained neighbours.
pub fn init_from_pointcloud(points: &[(Vec3, Vec3)], target_count: usize) -> Result<Vec<GaussianParticle>> {
    if points.is_empty() {
        return Err(Error::EmptyInput("point cloud"));
    }
    if target_count == 0 {
        return Ok(Vec::new());
    }
    let retained: Vec<usize> = if points.len() <= target_count {
        (0..points.len()).collect()
    } else {
        voxel_subsample(points, target_count)
    };
    let positions: Vec<Vec3> = retained.iter().map(|&i| points[i].0).collect();
    let grid = PointGrid::new(&positions);
    Ok(retained
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let nn = grid.k_nearest(&positions[k], 3, Some(k));
            let scale = if nn.is_empty() {
                ISOLATED_SCALE
            } else {
                nn.iter().map(|(_, d)| d).sum::<f64>() / nn.len() as f64
            };
            GaussianParticle::isotropic(points[i].0, scale, INIT_OPACITY, points[i].1)
        })
        .collect())
}

fn voxel_select(points: &[(Vec3, Vec3)], origin: &Vec3, size: f64) -> Vec<usize> {
    let mut best: BTreeMap<(i64, i64, i64), (f64, usize)> = BTreeMap::new();
    for (i, (p, _)) in points.iter().enumerate() {
        let rel = (p - origin) / size;
        let key = (rel.x.floor() as i64, rel.y.floor() as i64, rel.z.floor() as i64);
        let center = Vec3::new(key.0 as f64 + 0.5, key.1 as f64 + 0.5, key.2 as f64 + 0.5);
        let d = (rel - center).norm_squared();
        best.entry(key)
            .and_modify(|e| {
                if d < e.0 {
                    *e = (d, i);
                }
            })
            .or_insert((d, i));
    }
    let mut out: Vec<usize> = best.into_values().map(|(_, i)| i).collect();
    out.sort_unstable();
    out
}

fn voxel_subsample(points: &[(Vec3, Vec3)], target: usize) -> Vec<usize> {
    let positions: Vec<Vec3> = points.iter().map(|(p, _)| *p).collect();
    let (lo, hi) = bounds(&positions);
    let diag = (hi - lo).norm().max(1e-9);
    let mut small = diag * 1e-7;
    let mut large = diag * 2.0;
    let mut best = voxel_select(points, &lo, large);
    for _ in 0..60 {
        let mid = (small * large).sqrt();
        let sel = voxel_select(points, &lo, mid);
        if sel.len() > target {
            small = mid;
        } else {
            if sel.len() > best.len() {
                best = sel;
            }
            large = mid;
        }
        if best.len() == target || large / small < 1.0 + 1e-6 {
            break;
        }
    }
    best
}

/// Keeps particles whose larger opacity reaches `threshold`.
pub fn prune_by_opacity(particles: &[GaussianParticle], threshold: f64) -> Vec<GaussianParticle> {
    particles
        .iter()
        .filter(|p| p.max_opacity() >= threshold)
        .cloned()
        .collect()
}
