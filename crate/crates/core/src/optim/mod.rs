//! Losses, reverse-mode gradients and the Adam fitting loop.

mod backward;
mod loss;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use backward::{
    backward_frame, composite_fixed, consumed_ids, particle_params, set_particle_params, ParticleGrad,
    ParticleGradients, PARAMS_PER_PARTICLE,
};
pub use loss::{
    image_loss, loss_total, opacity_consistency_grad, opacity_consistency_loss, FrameLoss, LossBreakdown, LossWeights,
    PixelGrads,
};

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::raster::{frame_particles, Channel, FrameBuffers, PreparedFrame, RenderSettings};
use crate::scene::Scene;
use crate::sensor::SensorModel;

/// A supervised sensor frame.
#[derive(Debug, Clone)]
pub struct TrainingFrame {
    pub sensor: SensorModel,
    pub channel: Channel,
    pub target: FrameBuffers,
}

/// Renders `frames`, evaluates the loss and backpropagates it.
pub fn evaluate(
    scene: &Scene,
    frames: &[&TrainingFrame],
    settings: &RenderSettings,
    w: &LossWeights,
) -> Result<(LossBreakdown, ParticleGradients)> {
    w.validate()?;
    let n = scene.particle_count();
    let mut grads = ParticleGradients::zeros(n);
    let mut total = LossBreakdown::default();
    for f in frames {
        let prepared = PreparedFrame::new(scene, &f.sensor, f.channel, settings);
        let (rendered, trace) = prepared.render_traced();
        let frame = FrameLoss {
            channel: f.channel,
            rendered: &rendered,
            target: &f.target,
        };
        let (l, pixel) = image_loss(&frame, w, true)?;
        total.total += l.total;
        total.color_l1 += l.color_l1;
        total.dssim += l.dssim;
        total.range_l1 += l.range_l1;
        total.empty_range += l.empty_range;
        if let Some(pixel) = pixel {
            grads.accumulate(&backward_frame(scene, &prepared, &trace, &pixel));
        }
    }
    total.opacity = opacity_consistency_loss(scene.particles());
    total.total += w.w_opacity * total.opacity;
    for (g, p) in grads.particles.iter_mut().zip(scene.particles()) {
        let s = opacity_consistency_grad(p) * w.w_opacity;
        g.camera_opacity += s;
        g.lidar_opacity -= s;
    }
    Ok((total, grads))
}

/// Hit structure of a frame frozen at the current scene.
#[derive(Debug, Clone)]
pub struct FrozenFrame {
    pub prepared: PreparedFrame,
    /// Per pixel, the composited particle indices in order.
    pub hits: Vec<Vec<u32>>,
}

impl FrozenFrame {
    pub fn new(scene: &Scene, sensor: &SensorModel, channel: Channel, settings: &RenderSettings) -> Self {
        let prepared = PreparedFrame::new(scene, sensor, channel, settings);
        let (w, h) = (sensor.width, sensor.height);
        let hits = (0..w * h)
            .into_par_iter()
            .map(|i| consumed_ids(&prepared.pixel_hits(i % w, i / w).1))
            .collect();
        Self { prepared, hits }
    }

    /// Renders `scene` with this frame's structure.
    pub fn render(&self, scene: &Scene) -> FrameBuffers {
        let sensor = &self.prepared.sensor;
        let (w, h) = (sensor.width, sensor.height);
        let particles = frame_particles(scene, self.prepared.channel);
        let bg = self.prepared.settings.background;
        let mut fb = FrameBuffers::new(w, h, bg);
        for (i, ids) in self.hits.iter().enumerate() {
            let ray = self.prepared.ray(i % w, i / w);
            let v = composite_fixed(ids, &ray, &particles, bg);
            fb.color[i] = v.color;
            fb.range[i] = v.range;
            fb.alpha[i] = v.alpha;
            fb.eta[i] = ray.eta;
        }
        fb
    }
}

/// Loss of `scene` under frozen hit structures.
pub fn frozen_loss(scene: &Scene, frames: &[(FrozenFrame, &FrameBuffers)], w: &LossWeights) -> Result<f64> {
    let rendered: Vec<FrameBuffers> = frames.iter().map(|(f, _)| f.render(scene)).collect();
    let losses: Vec<FrameLoss> = frames
        .iter()
        .zip(&rendered)
        .map(|((f, target), r)| FrameLoss {
            channel: f.prepared.channel,
            rendered: r,
            target,
        })
        .collect();
    let particles: Vec<_> = scene.particles().cloned().collect();
    Ok(loss_total(&losses, &particles, w)?.total)
}

/// Central-difference gradients of the frozen-structure loss.
pub fn finite_difference_gradients(
    scene: &Scene,
    frames: &[&TrainingFrame],
    settings: &RenderSettings,
    w: &LossWeights,
    h: f64,
) -> Result<ParticleGradients> {
    let frozen: Vec<(FrozenFrame, &FrameBuffers)> = frames
        .iter()
        .map(|f| (FrozenFrame::new(scene, &f.sensor, f.channel, settings), &f.target))
        .collect();
    let mut out = ParticleGradients::zeros(scene.particle_count());
    let mut flat = 0;
    for (ni, node) in scene.nodes.iter().enumerate() {
        for pi in 0..node.particles.len() {
            let base = particle_params(&node.particles[pi]);
            let mut g = [0.0; PARAMS_PER_PARTICLE];
            for k in 0..PARAMS_PER_PARTICLE {
                let eval = |delta: f64| -> Result<f64> {
                    let mut s = scene.clone();
                    let mut a = base;
                    a[k] += delta;
                    set_particle_params(&mut s.nodes[ni].particles[pi], &a);
                    frozen_loss(&s, &frozen, w)
                };
                g[k] = (eval(h)? - eval(-h)?) / (2.0 * h);
            }
            out.particles[flat] = ParticleGrad::from_array(&g);
            flat += 1;
        }
    }
    Ok(out)
}

/// Per-group Adam learning rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub position_init: f64,
    pub position_final: f64,
    pub scale: f64,
    pub rotation: f64,
    pub camera_opacity: f64,
    pub lidar_opacity: f64,
    pub color: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position_init: 1.6e-4,
            position_final: 1.6e-6,
            scale: 5e-3,
            rotation: 1e-3,
            camera_opacity: 0.05,
            lidar_opacity: 0.05,
            color: 2.5e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub iterations: usize,
    pub learning_rates: LearningRates,
    pub weights: LossWeights,
    /// Linear learning-rate warm-up length (iterations).
    pub warmup: usize,
    /// Multiplier on the position learning rate (scene extent).
    pub spatial_scale: f64,
    /// Prune every this many iterations; 0 disables pruning.
    pub prune_every: usize,
    pub prune_threshold: f64,
    pub phase_modeling: bool,
    pub dual_opacity: bool,
    pub rolling_shutter: bool,
    pub seed: u64,
    pub tile_size: usize,
    pub background: Vec3,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            learning_rates: LearningRates::default(),
            weights: LossWeights::default(),
            warmup: 500,
            spatial_scale: 1.0,
            prune_every: 500,
            prune_threshold: 0.005,
            phase_modeling: true,
            dual_opacity: true,
            rolling_shutter: true,
            seed: 0,
            tile_size: crate::raster::DEFAULT_TILE_SIZE,
            background: Vec3::zeros(),
        }
    }
}

impl FitConfig {
    pub fn render_settings(&self) -> RenderSettings {
        RenderSettings {
            tile_size: self.tile_size,
            background: self.background,
            phase_modeling: self.phase_modeling,
            ..RenderSettings::default()
        }
    }

    /// Learning rates in effect at iteration `t`.
    pub fn rates_at(&self, t: usize) -> LearningRates {
        let lr = &self.learning_rates;
        let warm = if self.warmup == 0 {
            1.0
        } else {
            ((t + 1) as f64 / self.warmup as f64).min(1.0)
        };
        let frac = if self.iterations <= 1 {
            0.0
        } else {
            (t as f64 / (self.iterations - 1) as f64).clamp(0.0, 1.0)
        };
        let position = if lr.position_init > 0.0 && lr.position_final > 0.0 {
            (lr.position_init.ln() * (1.0 - frac) + lr.position_final.ln() * frac).exp()
        } else {
            lr.position_init * (1.0 - frac) + lr.position_final * frac
        };
        LearningRates {
            position_init: position * self.spatial_scale * warm,
            position_final: position * self.spatial_scale * warm,
            scale: lr.scale * warm,
            rotation: lr.rotation * warm,
            camera_opacity: lr.camera_opacity * warm,
            lidar_opacity: lr.lidar_opacity * warm,
            color: lr.color * warm,
        }
    }
}

/// One row of the loss trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub particles: usize,
    pub total: f64,
    pub color_l1: f64,
    pub dssim: f64,
    pub range_l1: f64,
    pub opacity: f64,
}

impl LossRecord {
    pub const CSV_HEADER: &'static str = "iteration,particles,total,color_l1,dssim,range_l1,opacity";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e}",
            self.iteration, self.particles, self.total, self.color_l1, self.dssim, self.range_l1, self.opacity
        )
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-15;

#[derive(Debug, Clone, Default)]
struct Adam {
    m: Vec<[f64; PARAMS_PER_PARTICLE]>,
    v: Vec<[f64; PARAMS_PER_PARTICLE]>,
    steps: usize,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![[0.0; PARAMS_PER_PARTICLE]; n],
            v: vec![[0.0; PARAMS_PER_PARTICLE]; n],
            steps: 0,
        }
    }

    fn retain(&mut self, keep: &[bool]) {
        let mut k = keep.iter();
        self.m.retain(|_| *k.next().unwrap_or(&true));
        let mut k = keep.iter();
        self.v.retain(|_| *k.next().unwrap_or(&true));
    }
}

fn lr_of(rates: &LearningRates, k: usize) -> f64 {
    match k {
        0..=2 => rates.position_init,
        3..=5 => rates.scale,
        6..=9 => rates.rotation,
        10 => rates.camera_opacity,
        11 => rates.lidar_opacity,
        _ => rates.color,
    }
}

/// One Adam step on every particle. Scales move in log space.
fn adam_step(scene: &mut Scene, grads: &ParticleGradients, adam: &mut Adam, rates: &LearningRates, tied: bool) {
    adam.steps += 1;
    let bc1 = 1.0 - BETA1.powi(adam.steps as i32);
    let bc2 = 1.0 - BETA2.powi(adam.steps as i32);
    for (i, p) in scene.particles_mut().enumerate() {
        let mut g = grads.particles[i].to_array();
        let mut params = particle_params(p);
        for k in 3..6 {
            g[k] *= params[k];
        }
        if tied {
            g[10] += g[11];
            g[11] = 0.0;
        }
        let (m, v) = (&mut adam.m[i], &mut adam.v[i]);
        for k in 0..PARAMS_PER_PARTICLE {
            m[k] = BETA1 * m[k] + (1.0 - BETA1) * g[k];
            v[k] = BETA2 * v[k] + (1.0 - BETA2) * g[k] * g[k];
            let step = lr_of(rates, k) * (m[k] / bc1) / ((v[k] / bc2).sqrt() + ADAM_EPS);
            if (3..6).contains(&k) {
                params[k] *= (-step).exp();
            } else {
                params[k] -= step;
            }
        }
        if tied {
            params[11] = params[10];
        }
        set_particle_params(p, &params);
        p.enforce_invariants();
    }
}

fn prune(scene: &mut Scene, adam: &mut Adam, threshold: f64) {
    let keep: Vec<bool> = scene.particles().map(|p| p.max_opacity() >= threshold).collect();
    if keep.iter().all(|k| *k) {
        return;
    }
    let mut k = keep.iter();
    for node in &mut scene.nodes {
        node.particles.retain(|_| *k.next().unwrap_or(&true));
    }
    adam.retain(&keep);
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub scene: Scene,
    pub trace: Vec<LossRecord>,
}

/// Fits `scene` to `frames` with Adam. Each iteration uses one camera frame
/// and one lidar frame, cycling through shuffled orders fixed by the seed.
pub fn fit(scene: &Scene, frames: &[TrainingFrame], config: &FitConfig) -> Result<FitResult> {
    if frames.is_empty() {
        return Err(Error::EmptyInput("training frames"));
    }
    config.weights.validate()?;
    let mut weights = config.weights;
    if !config.dual_opacity {
        weights.w_opacity = 0.0;
    }
    let frames: Vec<TrainingFrame> = frames
        .iter()
        .map(|f| TrainingFrame {
            sensor: if config.rolling_shutter {
                f.sensor.clone()
            } else {
                f.sensor.with_global_shutter()
            },
            ..f.clone()
        })
        .collect();
    let mut scene = scene.clone();
    if !config.dual_opacity {
        for p in scene.particles_mut() {
            p.lidar_opacity = p.camera_opacity;
        }
    }
    let settings = config.render_settings();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut orders: Vec<Vec<usize>> = [Channel::Camera, Channel::Lidar]
        .iter()
        .map(|c| (0..frames.len()).filter(|&i| frames[i].channel == *c).collect())
        .collect();
    let mut cursors = [0usize; 2];
    let mut adam = Adam::new(scene.particle_count());
    let mut trace = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let mut batch = Vec::with_capacity(2);
        for (order, cursor) in orders.iter_mut().zip(cursors.iter_mut()) {
            if order.is_empty() {
                continue;
            }
            if *cursor % order.len() == 0 {
                order.shuffle(&mut rng);
            }
            batch.push(&frames[order[*cursor % order.len()]]);
            *cursor += 1;
        }
        let (loss, grads) = evaluate(&scene, &batch, &settings, &weights)?;
        let record = LossRecord {
            iteration: it,
            particles: scene.particle_count(),
            total: loss.total,
            color_l1: loss.color_l1,
            dssim: loss.dssim,
            range_l1: loss.range_l1,
            opacity: loss.opacity,
        };
        trace.push(record);
        if !loss.total.is_finite() || grads.particles.iter().any(|g| g.to_array().iter().any(|x| !x.is_finite())) {
            return Err(Error::Divergence { iteration: it, trace });
        }
        adam_step(&mut scene, &grads, &mut adam, &config.rates_at(it), !config.dual_opacity);
        if config.prune_every > 0 && (it + 1) % config.prune_every == 0 && it + 1 < config.iterations {
            prune(&mut scene, &mut adam, config.prune_threshold);
        }
    }
    Ok(FitResult { scene, trace })
}
