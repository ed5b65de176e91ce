use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::metrics::ssim_with_grad;
use crate::raster::{Channel, FrameBuffers};
use crate::scene::GaussianParticle;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Weight of the L1 colour term; `1 − λ` goes to D-SSIM.
    pub lambda_rgb: f64,
    pub w_depth: f64,
    pub w_opacity: f64,
    /// Weight of the mean rendered range over lidar pixels without a
    /// ground-truth return. Zero leaves those pixels unsupervised.
    pub w_empty: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_rgb: 0.2,
            w_depth: 1.0,
            w_opacity: 1.0,
            w_empty: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.lambda_rgb) && self.w_depth >= 0.0 && self.w_opacity >= 0.0 && self.w_empty >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("loss weights out of range: {self:?}")))
        }
    }
}

/// Unweighted loss terms and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub color_l1: f64,
    /// `1 − SSIM`.
    pub dssim: f64,
    pub range_l1: f64,
    /// Mean rendered range where the target has no return.
    pub empty_range: f64,
    pub opacity: f64,
}

impl LossBreakdown {
    fn add(&mut self, other: &LossBreakdown) {
        self.total += other.total;
        self.color_l1 += other.color_l1;
        self.dssim += other.dssim;
        self.range_l1 += other.range_l1;
        self.empty_range += other.empty_range;
        self.opacity += other.opacity;
    }
}

/// Loss gradients with respect to the rendered buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelGrads {
    pub color: Vec<Vec3>,
    pub range: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl PixelGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            color: vec![Vec3::zeros(); n],
            range: vec![0.0; n],
            alpha: vec![0.0; n],
        }
    }
}

/// A rendered buffer, its reference and the channel it supervises.
#[derive(Debug, Clone, Copy)]
pub struct FrameLoss<'a> {
    pub channel: Channel,
    pub rendered: &'a FrameBuffers,
    pub target: &'a FrameBuffers,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `Σᵢ |σ_c,i − σ_L,i|`.
pub fn opacity_consistency_loss<'a>(particles: impl IntoIterator<Item = &'a GaussianParticle>) -> f64 {
    particles
        .into_iter()
        .map(|p| (p.camera_opacity - p.lidar_opacity).abs())
        .sum()
}

/// Subgradient of the opacity term with respect to `σ_c` (zero at ties).
pub fn opacity_consistency_grad(p: &GaussianParticle) -> f64 {
    sign(p.camera_opacity - p.lidar_opacity)
}

/// Image terms of one frame: colour L1 and D-SSIM for the camera channel,
/// masked range L1 (plus the optional empty-pixel term) for the lidar channel.
pub fn image_loss(frame: &FrameLoss, w: &LossWeights, want_grad: bool) -> Result<(LossBreakdown, Option<PixelGrads>)> {
    let (r, t) = (frame.rendered, frame.target);
    if (r.width, r.height) != (t.width, t.height) || r.color.len() != t.color.len() {
        return Err(Error::ShapeMismatch(format!(
            "rendered {}x{} vs target {}x{}",
            r.width, r.height, t.width, t.height
        )));
    }
    let n = r.color.len();
    let mut out = LossBreakdown::default();
    let mut grads = want_grad.then(|| PixelGrads::zeros(n));
    match frame.channel {
        Channel::Camera => {
            let scale = 1.0 / (3 * n) as f64;
            let mut l1 = 0.0;
            for i in 0..n {
                let d = r.color[i] - t.color[i];
                l1 += d.abs().sum();
                if let Some(g) = grads.as_mut() {
                    g.color[i] = d.map(sign) * (w.lambda_rgb * scale);
                }
            }
            out.color_l1 = l1 * scale;
            if w.lambda_rgb < 1.0 {
                let (s, g_ssim) = ssim_with_grad(&r.color, &t.color, r.width, r.height)?;
                out.dssim = 1.0 - s;
                if let Some(g) = grads.as_mut() {
                    for (gc, gs) in g.color.iter_mut().zip(&g_ssim) {
                        *gc -= gs * (1.0 - w.lambda_rgb);
                    }
                }
            }
            out.total = w.lambda_rgb * out.color_l1 + (1.0 - w.lambda_rgb) * out.dssim;
        }
        Channel::Lidar => {
            let count = t.range.iter().filter(|x| **x > 0.0).count();
            if count > 0 {
                let scale = 1.0 / count as f64;
                let mut l1 = 0.0;
                for i in 0..n {
                    if t.range[i] > 0.0 {
                        let d = r.range[i] - t.range[i];
                        l1 += d.abs();
                        if let Some(g) = grads.as_mut() {
                            g.range[i] = sign(d) * w.w_depth * scale;
                        }
                    }
                }
                out.range_l1 = l1 * scale;
            }
            if w.w_empty > 0.0 && count < n {
                let scale = 1.0 / (n - count) as f64;
                let mut sum = 0.0;
                for i in 0..n {
                    if t.range[i] <= 0.0 {
                        sum += r.range[i].abs();
                        if let Some(g) = grads.as_mut() {
                            g.range[i] = sign(r.range[i]) * w.w_empty * scale;
                        }
                    }
                }
                out.empty_range = sum * scale;
            }
            out.total = w.w_depth * out.range_l1 + w.w_empty * out.empty_range;
        }
    }
    Ok((out, grads))
}

/// `λ·L1 + (1−λ)·(1−SSIM)` over camera frames, `w_depth·L1(range)` over
/// lidar frames, plus `w_opacity·Σ|σ_c − σ_L|`.
pub fn loss_total(frames: &[FrameLoss], particles: &[GaussianParticle], w: &LossWeights) -> Result<LossBreakdown> {
    w.validate()?;
    let mut total = LossBreakdown::default();
    for f in frames {
        total.add(&image_loss(f, w, false)?.0);
    }
    total.opacity = opacity_consistency_loss(particles);
    total.total += w.w_opacity * total.opacity;
    Ok(total)
}
