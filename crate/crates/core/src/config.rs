//! JSON run configuration (schema version 1) and its conversion into sensors,
//! synthetic worlds and fitting settings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{MotionState, RigidPose, UnitQuat, Vec3};
use crate::optim::{FitConfig, LearningRates, LossWeights};
use crate::raster::{RenderSettings, DEFAULT_TILE_SIZE};
use crate::sensor::{ElevationTable, PinholeIntrinsics, SensorModel, ShutterSpec};
use crate::synth::{load_obj, Primitive, Shape, SyntheticScene};

pub const CONFIG_VERSION: u32 = 1;

/// Default spin period of spherical sensors (s per revolution).
pub const DEFAULT_SPIN_PERIOD: f64 = 0.1;

fn quat_from_wxyz(q: [f64; 4]) -> Result<UnitQuat> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if !(n.is_finite() && n > 1e-12) {
        return Err(Error::Invalid(format!("rotation quaternion {q:?} has no direction")));
    }
    let q = nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]);
    // Already-unit input is kept bit-exact so documents round-trip.
    Ok(if (n - 1.0).abs() < 1e-12 {
        UnitQuat::new_unchecked(q)
    } else {
        UnitQuat::from_quaternion(q)
    })
}

pub fn quat_to_wxyz(q: &UnitQuat) -> [f64; 4] {
    [q.w, q.i, q.j, q.k]
}

fn identity_wxyz() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseSpec {
    pub position: [f64; 3],
    /// Quaternion `(w, x, y, z)`, normalized on load.
    #[serde(default = "identity_wxyz")]
    pub rotation: [f64; 4],
}

impl PoseSpec {
    pub fn from_pose(p: &RigidPose) -> Self {
        Self {
            position: p.translation.into(),
            rotation: quat_to_wxyz(&p.rotation),
        }
    }

    pub fn build(&self) -> Result<RigidPose> {
        Ok(RigidPose::new(quat_from_wxyz(self.rotation)?, Vec3::from(self.position)))
    }
}

impl Default for PoseSpec {
    fn default() -> Self {
        Self::from_pose(&RigidPose::identity())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionSpec {
    /// Pose at mid-exposure.
    #[serde(default)]
    pub pose: PoseSpec,
    #[serde(default)]
    pub linear_velocity: [f64; 3],
    #[serde(default)]
    pub angular_velocity: [f64; 3],
}

impl MotionSpec {
    pub fn from_motion(m: &MotionState) -> Self {
        Self {
            pose: PoseSpec::from_pose(&m.pose_mid),
            linear_velocity: m.linear_velocity.into(),
            angular_velocity: m.angular_velocity.into(),
        }
    }

    pub fn build(&self) -> Result<MotionState> {
        Ok(MotionState {
            pose_mid: self.pose.build()?,
            linear_velocity: Vec3::from(self.linear_velocity),
            angular_velocity: Vec3::from(self.angular_velocity),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum ElevationSpec {
    /// Evenly spaced beams, row 0 at `top_deg`.
    Linear { top_deg: f64, bottom_deg: f64, rows: usize },
    Explicit { angles_deg: Vec<f64> },
}

impl ElevationSpec {
    pub fn build(&self) -> Result<ElevationTable> {
        match self {
            ElevationSpec::Linear { top_deg, bottom_deg, rows } => {
                ElevationTable::linear(top_deg.to_radians(), bottom_deg.to_radians(), *rows)
            }
            ElevationSpec::Explicit { angles_deg } => {
                ElevationTable::new(angles_deg.iter().map(|a| a.to_radians()).collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ProjectionSpec {
    /// Intrinsics in normalized image units.
    Perspective {
        width: usize,
        height: usize,
        fx: f64,
        fy: f64,
        #[serde(default = "half")]
        cx: f64,
        #[serde(default = "half")]
        cy: f64,
    },
    Spherical { width: usize, elevation: ElevationSpec },
}

fn half() -> f64 {
    0.5
}

/// Readout timing. Spherical sensors default to `tau_u = period`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShutterConfig {
    /// Seconds across the full image width.
    #[serde(default)]
    pub tau_u: Option<f64>,
    /// Seconds across the full image height.
    #[serde(default)]
    pub tau_v: f64,
    /// Spin period of a spherical sensor.
    #[serde(default)]
    pub period: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorSpec {
    pub name: String,
    pub projection: ProjectionSpec,
    #[serde(default)]
    pub shutter: ShutterConfig,
    #[serde(default)]
    pub motion: MotionSpec,
    /// Excluded from fitting and used for evaluation.
    #[serde(default)]
    pub holdout: bool,
}

impl SensorSpec {
    pub fn build(&self) -> Result<SensorModel> {
        let motion = self.motion.build()?;
        let sh = &self.shutter;
        if sh.period.is_some_and(|p| !(p > 0.0)) {
            return Err(Error::Invalid(format!("sensor {}: period must be positive", self.name)));
        }
        match &self.projection {
            ProjectionSpec::Perspective { width, height, fx, fy, cx, cy } => SensorModel::perspective(
                PinholeIntrinsics { fx: *fx, fy: *fy, cx: *cx, cy: *cy },
                *width,
                *height,
                ShutterSpec::centered(sh.tau_u.unwrap_or(0.0), sh.tau_v),
                motion,
            ),
            ProjectionSpec::Spherical { width, elevation } => {
                let tau_u = sh.tau_u.or(sh.period).unwrap_or(DEFAULT_SPIN_PERIOD);
                SensorModel::spherical(elevation.build()?, *width, ShutterSpec::centered(tau_u, sh.tau_v), motion)
            }
        }
        .map_err(|e| Error::Invalid(format!("sensor {}: {e}", self.name)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum ShapeSpec {
    Sphere { radius: f64 },
    Box { half_extents: [f64; 3] },
    Plane { half_width: f64, half_height: f64 },
    /// ASCII OBJ, resolved against the config file's directory.
    Mesh { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveSpec {
    #[serde(flatten)]
    pub shape: ShapeSpec,
    #[serde(default)]
    pub pose: PoseSpec,
    pub color: [f64; 3],
    #[serde(default)]
    pub lidar_only: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    #[serde(default)]
    pub background: [f64; 3],
    pub primitives: Vec<PrimitiveSpec>,
}

impl WorldSpec {
    pub fn build(&self, base_dir: &Path) -> Result<SyntheticScene> {
        let primitives = self
            .primitives
            .iter()
            .map(|p| {
                let shape = match &p.shape {
                    ShapeSpec::Sphere { radius } => Shape::Sphere { radius: *radius },
                    ShapeSpec::Box { half_extents } => Shape::Box {
                        half_extents: Vec3::from(*half_extents),
                    },
                    ShapeSpec::Plane { half_width, half_height } => Shape::Plane {
                        half_width: *half_width,
                        half_height: *half_height,
                    },
                    ShapeSpec::Mesh { path } => Shape::Mesh {
                        triangles: load_obj(&base_dir.join(path))?,
                    },
                };
                let mut prim = Primitive::new(shape, p.pose.build()?, Vec3::from(p.color))?;
                prim.lidar_only = p.lidar_only;
                Ok(prim)
            })
            .collect::<Result<_>>()?;
        Ok(SyntheticScene {
            primitives,
            background: Vec3::from(self.background),
        })
    }
}

/// Ablation switches; all on by default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    pub phase_modeling: bool,
    pub dual_opacity: bool,
    pub rolling_shutter: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            phase_modeling: true,
            dual_opacity: true,
            rolling_shutter: true,
        }
    }
}

/// Optimizer settings beyond iterations, seed and loss weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSpec {
    pub learning_rates: LearningRates,
    pub warmup: usize,
    pub spatial_scale: f64,
    pub prune_every: usize,
    pub prune_threshold: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        let f = FitConfig::default();
        Self {
            learning_rates: f.learning_rates,
            warmup: f.warmup,
            spatial_scale: f.spatial_scale,
            prune_every: f.prune_every,
            prune_threshold: f.prune_threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    /// Gaussian scene file used by `render` and `eval`.
    #[serde(default)]
    pub scene: Option<PathBuf>,
    /// Synthetic ground-truth world.
    #[serde(default)]
    pub world: Option<WorldSpec>,
    #[serde(default)]
    pub sensors: Vec<SensorSpec>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    /// Particle budget when seeding from ground-truth points.
    #[serde(default = "default_particles")]
    pub particles: usize,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    #[serde(default)]
    pub toggles: Toggles,
    #[serde(default = "default_tile_size")]
    pub tile_size: usize,
    /// Render background colour.
    #[serde(default)]
    pub background: [f64; 3],
    /// Half-width (rad) of the seam band scored by `ablate-phase`.
    #[serde(default = "default_band")]
    pub boundary_band: f64,
    /// Directory relative paths resolve against; set on load.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_iterations() -> usize {
    1000
}

fn default_particles() -> usize {
    5000
}

fn default_tile_size() -> usize {
    DEFAULT_TILE_SIZE
}

fn default_band() -> f64 {
    0.2
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            scene: None,
            world: None,
            sensors: Vec::new(),
            out_dir: None,
            seed: None,
            iterations: default_iterations(),
            particles: default_particles(),
            weights: LossWeights::default(),
            optimizer: OptimizerSpec::default(),
            toggles: Toggles::default(),
            tile_size: default_tile_size(),
            background: [0.0; 3],
            boundary_band: default_band(),
            base_dir: PathBuf::new(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_str(text)?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.base_dir = base;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Invalid(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.weights.validate()?;
        if self.tile_size == 0 {
            return Err(Error::Invalid("tile_size must be positive".into()));
        }
        if !(self.boundary_band > 0.0 && self.boundary_band < std::f64::consts::PI) {
            return Err(Error::Invalid("boundary_band must lie in (0, π)".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for s in &self.sensors {
            if !names.insert(s.name.as_str()) {
                return Err(Error::Invalid(format!("duplicate sensor name {:?}", s.name)));
            }
            if s.name.is_empty() || s.name.contains(['/', '\\']) {
                return Err(Error::Invalid(format!("sensor name {:?} is not a plain file name", s.name)));
            }
            s.build()?;
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    pub fn build_world(&self) -> Result<SyntheticScene> {
        self.world
            .as_ref()
            .ok_or_else(|| Error::Invalid("config has no world".into()))?
            .build(&self.base_dir)
    }

    pub fn render_settings(&self) -> RenderSettings {
        RenderSettings {
            tile_size: self.tile_size,
            background: Vec3::from(self.background),
            phase_modeling: self.toggles.phase_modeling,
            ..RenderSettings::default()
        }
    }

    /// Fitting settings; fails when no seed is set.
    pub fn fit_config(&self) -> Result<FitConfig> {
        let seed = self
            .seed
            .ok_or_else(|| Error::Invalid("fitting needs a seed (config `seed` or --seed)".into()))?;
        let o = &self.optimizer;
        Ok(FitConfig {
            iterations: self.iterations,
            learning_rates: o.learning_rates,
            weights: self.weights,
            warmup: o.warmup,
            spatial_scale: o.spatial_scale,
            prune_every: o.prune_every,
            prune_threshold: o.prune_threshold,
            phase_modeling: self.toggles.phase_modeling,
            dual_opacity: self.toggles.dual_opacity,
            rolling_shutter: self.toggles.rolling_shutter,
            seed,
            tile_size: self.tile_size,
            background: Vec3::from(self.background),
        })
    }
}
