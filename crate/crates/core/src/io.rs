//! File formats: PNG previews, PFM float images, ASCII PLY clouds, JSON
//! scenes and reports, CSV loss traces.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{quat_to_wxyz, MotionSpec};
use crate::error::{Error, Result};
use crate::geom::{UnitQuat, Vec3};
use crate::optim::LossRecord;
use crate::raster::FrameBuffers;
use crate::scene::{GaussianParticle, NodeKind, Scene, SceneNode};

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn to_u8(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit RGB PNG of the colour buffer.
pub fn write_png(path: &Path, fb: &FrameBuffers) -> Result<()> {
    let data: Vec<u8> = fb.color.iter().flat_map(|c| [to_u8(c.x), to_u8(c.y), to_u8(c.z)]).collect();
    let img = image::RgbImage::from_raw(fb.width as u32, fb.height as u32, data)
        .ok_or_else(|| Error::ShapeMismatch("colour buffer does not match its size".into()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path)?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<(usize, usize, Vec<Vec3>)> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let px = img
        .pixels()
        .map(|p| Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64) / 255.0)
        .collect();
    Ok((w as usize, h as usize, px))
}

/// Single-channel little-endian PFM; rows are stored bottom to top.
pub fn write_pfm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::ShapeMismatch(format!(
            "{} values for a {width}x{height} image",
            values.len()
        )));
    }
    let mut out = format!("Pf\n{width} {height}\n-1.0\n").into_bytes();
    for row in (0..height).rev() {
        for v in &values[row * width..(row + 1) * width] {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    write_bytes(path, &out)
}

pub fn read_pfm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(parse_err(path, "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "Pf" {
        return Err(parse_err(path, format!("unsupported PFM type {:?}", fields[0])));
    }
    let width: usize = fields[1].parse().map_err(|_| parse_err(path, "bad width"))?;
    let height: usize = fields[2].parse().map_err(|_| parse_err(path, "bad height"))?;
    let scale: f64 = fields[3].parse().map_err(|_| parse_err(path, "bad scale"))?;
    let body = &bytes[pos.min(bytes.len())..];
    if body.len() != width * height * 4 {
        return Err(parse_err(path, format!("expected {} data bytes, found {}", width * height * 4, body.len())));
    }
    let mut values = vec![0.0; width * height];
    for (k, chunk) in body.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if scale < 0.0 { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (row, col) = (height - 1 - k / width, k % width);
        values[row * width + col] = v as f64;
    }
    Ok((width, height, values))
}

/// ASCII PLY with `x y z red green blue` vertices.
pub fn write_ply(path: &Path, points: &[(Vec3, Vec3)]) -> Result<()> {
    let mut s = String::new();
    let _ = write!(
        s,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        points.len()
    );
    for (p, c) in points {
        let _ = writeln!(s, "{} {} {} {} {} {}", p.x, p.y, p.z, to_u8(c.x), to_u8(c.y), to_u8(c.z));
    }
    write_bytes(path, s.as_bytes())
}

pub fn read_ply(path: &Path) -> Result<Vec<(Vec3, Vec3)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(parse_err(path, "missing ply magic"));
    }
    let mut count = None;
    let mut props = Vec::new();
    for line in lines.by_ref() {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["format", f, ..] if *f != "ascii" => return Err(parse_err(path, "only ASCII PLY is supported")),
            ["element", "vertex", n] => count = Some(n.parse::<usize>().map_err(|_| parse_err(path, "bad vertex count"))?),
            ["property", _, name] if count.is_some() => props.push(name.to_string()),
            ["end_header"] => break,
            _ => {}
        }
    }
    let count = count.ok_or_else(|| parse_err(path, "no vertex element"))?;
    let col = |name: &str| props.iter().position(|p| p == name);
    let (xi, yi, zi) = match (col("x"), col("y"), col("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(parse_err(path, "vertices need x, y and z")),
    };
    let rgb = (col("red"), col("green"), col("blue"));
    let mut out = Vec::with_capacity(count);
    for (n, line) in lines.take(count).enumerate() {
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_err(path, format!("vertex {n}: bad number")))?;
        if v.len() < props.len() {
            return Err(parse_err(path, format!("vertex {n}: expected {} values", props.len())));
        }
        let color = match rgb {
            (Some(r), Some(g), Some(b)) => Vec3::new(v[r], v[g], v[b]) / 255.0,
            _ => Vec3::repeat(0.5),
        };
        out.push((Vec3::new(v[xi], v[yi], v[zi]), color));
    }
    if out.len() != count {
        return Err(parse_err(path, format!("expected {count} vertices, found {}", out.len())));
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| parse_err(path, e.to_string()))
}

pub fn write_trace_csv(path: &Path, trace: &[LossRecord]) -> Result<()> {
    let mut s = String::from(LossRecord::CSV_HEADER);
    s.push('\n');
    for r in trace {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    write_bytes(path, s.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticleDoc {
    pub position: [f64; 3],
    pub scale: [f64; 3],
    /// `(w, x, y, z)`.
    pub rotation: [f64; 4],
    pub camera_opacity: f64,
    pub lidar_opacity: f64,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKindDoc {
    Static,
    RigidActor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeDoc {
    pub kind: NodeKindDoc,
    #[serde(default)]
    pub motion: MotionSpec,
    #[serde(default)]
    pub bounding_box: Option<[f64; 3]>,
    pub particles: Vec<ParticleDoc>,
}

/// Serialized Gaussian scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneDoc {
    pub version: u32,
    pub nodes: Vec<NodeDoc>,
}

impl SceneDoc {
    pub fn from_scene(scene: &Scene) -> Self {
        let nodes = scene
            .nodes
            .iter()
            .map(|n| NodeDoc {
                kind: match n.kind {
                    NodeKind::Static => NodeKindDoc::Static,
                    NodeKind::RigidActor => NodeKindDoc::RigidActor,
                },
                motion: MotionSpec::from_motion(&n.motion),
                bounding_box: n.bounding_box.map(Into::into),
                particles: n
                    .particles
                    .iter()
                    .map(|p| ParticleDoc {
                        position: p.position.into(),
                        scale: p.scale.into(),
                        rotation: quat_to_wxyz(&p.rotation),
                        camera_opacity: p.camera_opacity,
                        lidar_opacity: p.lidar_opacity,
                        color: p.color.into(),
                    })
                    .collect(),
            })
            .collect();
        Self {
            version: crate::config::CONFIG_VERSION,
            nodes,
        }
    }

    pub fn to_scene(&self) -> Result<Scene> {
        if self.version != crate::config::CONFIG_VERSION {
            return Err(Error::Invalid(format!("unsupported scene version {}", self.version)));
        }
        let nodes = self
            .nodes
            .iter()
            .map(|n| {
                let particles = n
                    .particles
                    .iter()
                    .map(|d| {
                        let q = nalgebra::Quaternion::new(d.rotation[0], d.rotation[1], d.rotation[2], d.rotation[3]);
                        let p = GaussianParticle {
                            position: Vec3::from(d.position),
                            scale: Vec3::from(d.scale),
                            // Stored unit quaternions are kept bit-exact.
                            rotation: if (q.norm() - 1.0).abs() < 1e-12 {
                                UnitQuat::new_unchecked(q)
                            } else {
                                UnitQuat::from_quaternion(q)
                            },
                            camera_opacity: d.camera_opacity,
                            lidar_opacity: d.lidar_opacity,
                            color: Vec3::from(d.color),
                        };
                        if p.is_valid() {
                            Ok(p)
                        } else {
                            Err(Error::Invalid(format!("particle violates invariants: {d:?}")))
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                match n.kind {
                    NodeKindDoc::Static => Ok(SceneNode::static_node(particles)),
                    NodeKindDoc::RigidActor => {
                        let bb = n
                            .bounding_box
                            .ok_or_else(|| Error::Invalid("rigid actor needs a bounding box".into()))?;
                        SceneNode::rigid_actor(particles, n.motion.build()?, Vec3::from(bb))
                    }
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Scene::new(nodes)
    }
}

pub fn save_scene(path: &Path, scene: &Scene) -> Result<()> {
    write_json(path, &SceneDoc::from_scene(scene))
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    read_json::<SceneDoc>(path)?.to_scene()
}

/// Particle centres and colours as a coloured cloud.
pub fn scene_points(scene: &Scene) -> Vec<(Vec3, Vec3)> {
    scene
        .nodes
        .iter()
        .flat_map(|n| {
            n.particles
                .iter()
                .map(move |p| (n.motion.pose_mid.transform_point(&p.position), p.color))
        })
        .collect()
}
