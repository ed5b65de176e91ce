//! End-to-end runs on synthetic worlds: ground truth, initialization,
//! fitting, evaluation and the three ablations.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::metrics::{chamfer, psnr, ssim, ImageMetrics, MetricReport, SSIM_WINDOW};
use crate::optim::{fit, loss_total, FitResult, FrameLoss, TrainingFrame};
use crate::raster::{render_frame, Channel, FrameBuffers, RenderSettings};
use crate::scene::{init_from_pointcloud, Scene};
use crate::sensor::{u_to_azimuth, SensorKind, SensorModel};
use crate::spatial::PointGrid;
use crate::synth::{colored_points, range_image_to_pointcloud, raytrace, rendered_range_to_pointcloud};

/// Rendered lidar pixels below this alpha count as no return.
pub const RETURN_ALPHA: f64 = 0.5;

/// Lidar seed points farther than this (m) from any camera point stay grey.
const COLOR_RADIUS: f64 = 0.1;

/// Cameras supervise colour, spherical sensors supervise range.
pub fn channel_of(m: &SensorModel) -> Channel {
    match m.kind() {
        SensorKind::Perspective => Channel::Camera,
        SensorKind::Spherical => Channel::Lidar,
    }
}

#[derive(Debug, Clone)]
pub struct GroundTruthFrame {
    pub name: String,
    pub sensor: SensorModel,
    pub channel: Channel,
    pub buffers: FrameBuffers,
    pub holdout: bool,
}

impl GroundTruthFrame {
    pub fn training(&self) -> TrainingFrame {
        TrainingFrame {
            sensor: self.sensor.clone(),
            channel: self.channel,
            target: self.buffers.clone(),
        }
    }
}

/// Ray-traces every configured sensor against the configured world.
pub fn generate_ground_truth(cfg: &RunConfig) -> Result<Vec<GroundTruthFrame>> {
    let world = cfg.build_world()?;
    if cfg.sensors.is_empty() {
        return Err(Error::Invalid("config lists no sensors".into()));
    }
    cfg.sensors
        .iter()
        .map(|spec| {
            let sensor = spec.build()?;
            let channel = channel_of(&sensor);
            let buffers = raytrace(&world, &sensor, channel);
            Ok(GroundTruthFrame {
                name: spec.name.clone(),
                sensor,
                channel,
                buffers,
                holdout: spec.holdout,
            })
        })
        .collect()
}

/// Coloured seed points from the training frames: camera hits carry their
/// pixel colour, lidar points take the colour of the nearest camera point.
pub fn seed_points(frames: &[GroundTruthFrame]) -> Vec<(Vec3, Vec3)> {
    let train = frames.iter().filter(|f| !f.holdout);
    let mut cam = Vec::new();
    let mut lidar = Vec::new();
    for f in train {
        match f.channel {
            Channel::Camera => cam.extend(colored_points(&f.buffers, &f.sensor)),
            Channel::Lidar => lidar.extend(range_image_to_pointcloud(&f.buffers, &f.sensor)),
        }
    }
    let cam_pos: Vec<Vec3> = cam.iter().map(|(p, _)| *p).collect();
    let grid = PointGrid::new(&cam_pos);
    let mut out = cam.clone();
    out.extend(lidar.into_iter().map(|p| {
        let color = match grid.nearest(&p, None) {
            Some((i, d)) if d <= COLOR_RADIUS => cam[i].1,
            _ => Vec3::repeat(0.5),
        };
        (p, color)
    }));
    out
}

pub fn initial_scene(cfg: &RunConfig, frames: &[GroundTruthFrame]) -> Result<Scene> {
    let points = seed_points(frames);
    Ok(Scene::from_particles(init_from_pointcloud(&points, cfg.particles)?))
}

pub fn training_frames(frames: &[GroundTruthFrame]) -> Vec<TrainingFrame> {
    frames.iter().filter(|f| !f.holdout).map(GroundTruthFrame::training).collect()
}

/// Held-out frames when any exist, otherwise all frames.
pub fn evaluation_frames(frames: &[GroundTruthFrame]) -> Vec<&GroundTruthFrame> {
    let held: Vec<&GroundTruthFrame> = frames.iter().filter(|f| f.holdout).collect();
    if held.is_empty() {
        frames.iter().collect()
    } else {
        held
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metrics: MetricReport,
    /// Mean absolute colour error over camera pixels.
    pub color_l1: Option<f64>,
    /// Mean absolute range error over lidar pixels with a true return.
    pub range_l1: Option<f64>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Scores `scene` against ground-truth frames. With `rolling_shutter` off the
/// scene is rendered through global-shutter copies of the sensors.
pub fn evaluate_scene(
    scene: &Scene,
    frames: &[&GroundTruthFrame],
    settings: &RenderSettings,
    rolling_shutter: bool,
) -> Result<Evaluation> {
    let mut images = Vec::new();
    let (mut color_l1, mut range_l1) = (Vec::new(), Vec::new());
    for f in frames {
        let sensor = if rolling_shutter {
            f.sensor.clone()
        } else {
            f.sensor.with_global_shutter()
        };
        let r = render_frame(scene, &sensor, f.channel, settings);
        let t = &f.buffers;
        let mut m = ImageMetrics {
            name: f.name.clone(),
            psnr: None,
            ssim: None,
            chamfer: None,
        };
        match f.channel {
            Channel::Camera => {
                m.psnr = Some(psnr(&r.color, &t.color)?);
                if t.width >= SSIM_WINDOW && t.height >= SSIM_WINDOW {
                    m.ssim = Some(ssim(&r.color, &t.color, t.width, t.height)?);
                }
                let l1: f64 = r.color.iter().zip(&t.color).map(|(a, b)| (a - b).abs().sum()).sum();
                color_l1.push(l1 / (3 * t.color.len()) as f64);
            }
            Channel::Lidar => {
                let truth = range_image_to_pointcloud(t, &f.sensor);
                let fitted = rendered_range_to_pointcloud(&r, &sensor, RETURN_ALPHA);
                if !truth.is_empty() {
                    m.chamfer = Some(if fitted.is_empty() { f64::INFINITY } else { chamfer(&fitted, &truth)? });
                }
                let diffs: Vec<f64> = (0..t.range.len())
                    .filter(|&i| t.range[i] > 0.0)
                    .map(|i| (r.range[i] - t.range[i]).abs())
                    .collect();
                if let Some(x) = mean(&diffs) {
                    range_l1.push(x);
                }
            }
        }
        images.push(m);
    }
    Ok(Evaluation {
        metrics: MetricReport::from_images(images),
        color_l1: mean(&color_l1),
        range_l1: mean(&range_l1),
    })
}

/// Total loss of `scene` over all training frames under the config's weights.
pub fn training_loss(scene: &Scene, cfg: &RunConfig, frames: &[GroundTruthFrame]) -> Result<f64> {
    let settings = cfg.render_settings();
    let train: Vec<&GroundTruthFrame> = frames.iter().filter(|f| !f.holdout).collect();
    let sensors: Vec<SensorModel> = train
        .iter()
        .map(|f| {
            if cfg.toggles.rolling_shutter {
                f.sensor.clone()
            } else {
                f.sensor.with_global_shutter()
            }
        })
        .collect();
    let rendered: Vec<FrameBuffers> = train
        .iter()
        .zip(&sensors)
        .map(|(f, s)| render_frame(scene, s, f.channel, &settings))
        .collect();
    let losses: Vec<FrameLoss> = train
        .iter()
        .zip(&rendered)
        .map(|(f, r)| FrameLoss {
            channel: f.channel,
            rendered: r,
            target: &f.buffers,
        })
        .collect();
    let particles: Vec<_> = scene.particles().cloned().collect();
    Ok(loss_total(&losses, &particles, &cfg.weights)?.total)
}

pub struct FitOutcome {
    pub initial: Scene,
    pub fit: FitResult,
    pub evaluation: Evaluation,
}

/// Seeds a scene from the training frames, fits it and scores the result.
pub fn run_fit(cfg: &RunConfig, frames: &[GroundTruthFrame]) -> Result<FitOutcome> {
    let fc = cfg.fit_config()?;
    let initial = initial_scene(cfg, frames)?;
    let train = training_frames(frames);
    let result = fit(&initial, &train, &fc)?;
    let evaluation = evaluate_scene(
        &result.scene,
        &evaluation_frames(frames),
        &cfg.render_settings(),
        cfg.toggles.rolling_shutter,
    )?;
    Ok(FitOutcome {
        initial,
        fit: result,
        evaluation,
    })
}

/// Coverage and mean normalized range of one seam edge.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EdgeStats {
    /// Ground-truth returns in the edge band.
    pub truth_returns: usize,
    /// Of those, pixels the render also returns (alpha ≥ 0.5).
    pub rendered_returns: usize,
    pub truth_mean_range: f64,
    pub rendered_mean_range: f64,
}

impl EdgeStats {
    pub fn coverage(&self) -> f64 {
        if self.truth_returns == 0 {
            0.0
        } else {
            self.rendered_returns as f64 / self.truth_returns as f64
        }
    }

    /// Covered on at least half the true returns, mean range within 10%.
    pub fn observed(&self) -> bool {
        self.truth_returns > 0
            && self.coverage() >= 0.5
            && (self.rendered_mean_range - self.truth_mean_range).abs() <= 0.1 * self.truth_mean_range
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandScore {
    pub rmse: f64,
    pub pixels: usize,
    /// Sweep start (`φ → −π`) and sweep end (`φ → π`).
    pub edges: [EdgeStats; 2],
}

/// Range RMSE over true returns with `|φ| > π − band`, plus per-edge stats.
pub fn seam_band_score(rendered: &FrameBuffers, truth: &FrameBuffers, sensor: &SensorModel, band: f64) -> BandScore {
    let (w, h) = (truth.width, truth.height);
    let mut se = 0.0;
    let mut n = 0;
    let mut edges = [EdgeStats::default(); 2];
    let mut sums = [[0.0; 2]; 2];
    for row in 0..h {
        for col in 0..w {
            let (u, _) = sensor.pixel_center(col, row);
            let phi = u_to_azimuth(u);
            if phi.abs() <= PI - band {
                continue;
            }
            let i = row * w + col;
            if truth.range[i] <= 0.0 {
                continue;
            }
            se += (rendered.range[i] - truth.range[i]).powi(2);
            n += 1;
            let e = usize::from(phi > 0.0);
            edges[e].truth_returns += 1;
            sums[e][0] += truth.range[i];
            if rendered.alpha[i] >= RETURN_ALPHA {
                edges[e].rendered_returns += 1;
                sums[e][1] += rendered.range[i] / rendered.alpha[i];
            }
        }
    }
    for (e, s) in edges.iter_mut().zip(&sums) {
        if e.truth_returns > 0 {
            e.truth_mean_range = s[0] / e.truth_returns as f64;
        }
        if e.rendered_returns > 0 {
            e.rendered_mean_range = s[1] / e.rendered_returns as f64;
        }
    }
    BandScore {
        rmse: if n > 0 { (se / n as f64).sqrt() } else { 0.0 },
        pixels: n,
        edges,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseAblation {
    #[serde(rename = "RMSE_phase")]
    pub rmse_phase: f64,
    #[serde(rename = "RMSE_central")]
    pub rmse_central: f64,
    pub ratio: f64,
    pub band: f64,
    pub phase: Vec<BandScore>,
    pub central: Vec<BandScore>,
    /// The object shows at both seam edges at the right ranges in every
    /// scored frame of the phase-modeled render.
    pub double_observation: bool,
}

fn pooled_rmse(scores: &[BandScore]) -> f64 {
    let n: usize = scores.iter().map(|s| s.pixels).sum();
    let se: f64 = scores.iter().map(|s| s.rmse * s.rmse * s.pixels as f64).sum();
    if n == 0 {
        0.0
    } else {
        (se / n as f64).sqrt()
    }
}

/// Fits with phase modeling, then renders the fitted scene with and without
/// it and scores the seam band of every evaluation lidar frame.
pub fn ablate_phase(cfg: &RunConfig, frames: &[GroundTruthFrame]) -> Result<(PhaseAblation, FitOutcome)> {
    let mut cfg = cfg.clone();
    cfg.toggles.phase_modeling = true;
    let outcome = run_fit(&cfg, frames)?;
    let lidar: Vec<&GroundTruthFrame> = evaluation_frames(frames)
        .into_iter()
        .filter(|f| f.channel == Channel::Lidar)
        .collect();
    if lidar.is_empty() {
        return Err(Error::Invalid("phase ablation needs a spherical sensor".into()));
    }
    let mut with = Vec::new();
    let mut without = Vec::new();
    for f in &lidar {
        for (on, out) in [(true, &mut with), (false, &mut without)] {
            let settings = RenderSettings {
                phase_modeling: on,
                ..cfg.render_settings()
            };
            let r = render_frame(&outcome.fit.scene, &f.sensor, Channel::Lidar, &settings);
            out.push(seam_band_score(&r, &f.buffers, &f.sensor, cfg.boundary_band));
        }
    }
    let rmse_phase = pooled_rmse(&with);
    let rmse_central = pooled_rmse(&without);
    let double_observation = with.iter().all(|s| s.edges.iter().all(EdgeStats::observed));
    Ok((
        PhaseAblation {
            rmse_phase,
            rmse_central,
            ratio: if rmse_central > 0.0 { rmse_phase / rmse_central } else { f64::INFINITY },
            band: cfg.boundary_band,
            phase: with,
            central: without,
            double_observation,
        },
        outcome,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub dual_opacity: bool,
    pub rolling_shutter: bool,
    /// Final total loss over the training frames.
    pub total_loss: f64,
    pub evaluation: Evaluation,
    pub particles: usize,
}

fn run_arm(cfg: &RunConfig, frames: &[GroundTruthFrame]) -> Result<(ArmSummary, FitOutcome)> {
    let outcome = run_fit(cfg, frames)?;
    let total_loss = training_loss(&outcome.fit.scene, cfg, frames)?;
    Ok((
        ArmSummary {
            dual_opacity: cfg.toggles.dual_opacity,
            rolling_shutter: cfg.toggles.rolling_shutter,
            total_loss,
            evaluation: outcome.evaluation.clone(),
            particles: outcome.fit.scene.particle_count(),
        },
        outcome,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpacityAblation {
    pub dual: ArmSummary,
    pub tied: ArmSummary,
    /// Dual opacity reaches strictly lower loss and Chamfer distance.
    pub dual_wins: bool,
}

/// Fits the same budget with dual and with tied opacity.
pub fn ablate_opacity(cfg: &RunConfig, frames: &[GroundTruthFrame]) -> Result<(OpacityAblation, [FitOutcome; 2])> {
    let mut dual_cfg = cfg.clone();
    dual_cfg.toggles.dual_opacity = true;
    let mut tied_cfg = cfg.clone();
    tied_cfg.toggles.dual_opacity = false;
    let (dual, a) = run_arm(&dual_cfg, frames)?;
    let (tied, b) = run_arm(&tied_cfg, frames)?;
    let cd = |s: &ArmSummary| s.evaluation.metrics.chamfer.unwrap_or(f64::INFINITY);
    let dual_wins = dual.total_loss < tied.total_loss && cd(&dual) < cd(&tied);
    Ok((OpacityAblation { dual, tied, dual_wins }, [a, b]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShutterAblation {
    pub rolling: ArmSummary,
    pub global: ArmSummary,
    /// The global-shutter fit has strictly higher colour and range error.
    pub rolling_wins: bool,
}

/// Fits the same budget with the rolling-shutter model and with a global
/// shutter; each arm is scored through the sensor model it was fitted with.
pub fn ablate_shutter(cfg: &RunConfig, frames: &[GroundTruthFrame]) -> Result<(ShutterAblation, [FitOutcome; 2])> {
    let mut rs_cfg = cfg.clone();
    rs_cfg.toggles.rolling_shutter = true;
    let mut gs_cfg = cfg.clone();
    gs_cfg.toggles.rolling_shutter = false;
    let (rolling, a) = run_arm(&rs_cfg, frames)?;
    let (global, b) = run_arm(&gs_cfg, frames)?;
    let worse = |g: Option<f64>, r: Option<f64>| matches!((g, r), (Some(g), Some(r)) if g > r);
    let rolling_wins = worse(global.evaluation.color_l1, rolling.evaluation.color_l1)
        && worse(global.evaluation.range_l1, rolling.evaluation.range_l1);
    Ok((ShutterAblation { rolling, global, rolling_wins }, [a, b]))
}
