//! Image and point-cloud quality metrics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::spatial::PointGrid;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;
/// Clouds up to this size use the brute-force Chamfer path.
pub const CHAMFER_BRUTE_LIMIT: usize = 10_000;

fn check_shape(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!("{a} vs {b} pixels")));
    }
    if a == 0 {
        return Err(Error::EmptyInput("image"));
    }
    Ok(())
}

/// `10·log10(1/MSE)` over all channels, capped at [`PSNR_CAP`].
pub fn psnr(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    check_shape(a.len(), b.len())?;
    let mse = a.iter().zip(b).map(|(x, y)| (x - y).norm_squared()).sum::<f64>() / (3 * a.len()) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - c;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable "valid" correlation with the SSIM window.
fn blur_valid(img: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Adjoint of [`blur_valid`]: spreads a valid-size map back onto the image.
fn blur_valid_adjoint(map: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let m = map[y * ow + x];
            for i in 0..SSIM_WINDOW {
                tmp[(y + i) * ow + x] += k[i] * m;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let t = tmp[y * ow + x];
            for i in 0..SSIM_WINDOW {
                out[y * w + x + i] += k[i] * t;
            }
        }
    }
    out
}

/// Mean SSIM of one channel and, if requested, its gradient with respect to `a`.
fn ssim_channel(a: &[f64], b: &[f64], w: usize, h: usize, want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let k = gaussian_kernel();
    let mu_a = blur_valid(a, w, h, &k);
    let mu_b = blur_valid(b, w, h, &k);
    let sq = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<f64>>();
    let e_aa = blur_valid(&sq(a, a), w, h, &k);
    let e_bb = blur_valid(&sq(b, b), w, h, &k);
    let e_ab = blur_valid(&sq(a, b), w, h, &k);
    let n = mu_a.len();
    let mut total = 0.0;
    let (mut g_mu, mut g_aa, mut g_ab) = if want_grad {
        (vec![0.0; n], vec![0.0; n], vec![0.0; n])
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let var_a = e_aa[i] - ma * ma;
        let var_b = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let a1 = 2.0 * ma * mb + C1;
        let a2 = 2.0 * cov + C2;
        let b1 = ma * ma + mb * mb + C1;
        let b2 = var_a + var_b + C2;
        let s = a1 * a2 / (b1 * b2);
        total += s;
        if want_grad {
            let inv = 1.0 / (b1 * b2);
            g_mu[i] = 2.0 * mb * (a2 - a1) * inv - 2.0 * ma * s / b1 + 2.0 * ma * s / b2;
            g_aa[i] = -s / b2;
            g_ab[i] = 2.0 * a1 * inv;
        }
    }
    let mean = total / n as f64;
    if !want_grad {
        return (mean, None);
    }
    let scale = 1.0 / n as f64;
    let back_mu = blur_valid_adjoint(&g_mu, w, h, &k);
    let back_aa = blur_valid_adjoint(&g_aa, w, h, &k);
    let back_ab = blur_valid_adjoint(&g_ab, w, h, &k);
    let grad = (0..a.len())
        .map(|q| scale * (back_mu[q] + 2.0 * a[q] * back_aa[q] + b[q] * back_ab[q]))
        .collect();
    (mean, Some(grad))
}

fn split_channel(img: &[Vec3], c: usize) -> Vec<f64> {
    img.iter().map(|p| p[c]).collect()
}

fn check_ssim_shape(a: &[Vec3], b: &[Vec3], w: usize, h: usize) -> Result<()> {
    check_shape(a.len(), b.len())?;
    if a.len() != w * h {
        return Err(Error::ShapeMismatch(format!("{} pixels for {w}x{h}", a.len())));
    }
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::ShapeMismatch(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}")));
    }
    Ok(())
}

/// Mean SSIM over valid window positions, averaged over the three channels.
pub fn ssim(a: &[Vec3], b: &[Vec3], w: usize, h: usize) -> Result<f64> {
    check_ssim_shape(a, b, w, h)?;
    Ok((0..3)
        .map(|c| ssim_channel(&split_channel(a, c), &split_channel(b, c), w, h, false).0)
        .sum::<f64>()
        / 3.0)
}

/// SSIM and its gradient with respect to every pixel of `a`.
pub fn ssim_with_grad(a: &[Vec3], b: &[Vec3], w: usize, h: usize) -> Result<(f64, Vec<Vec3>)> {
    check_ssim_shape(a, b, w, h)?;
    let per: Vec<(f64, Vec<f64>)> = (0..3)
        .into_par_iter()
        .map(|c| {
            let (s, g) = ssim_channel(&split_channel(a, c), &split_channel(b, c), w, h, true);
            (s, g.unwrap_or_default())
        })
        .collect();
    let value = per.iter().map(|(s, _)| s).sum::<f64>() / 3.0;
    let grad = (0..a.len())
        .map(|i| Vec3::new(per[0].1[i], per[1].1[i], per[2].1[i]) / 3.0)
        .collect();
    Ok((value, grad))
}

fn mean_nearest(from: &[Vec3], to: &[Vec3]) -> f64 {
    let total: f64 = if to.len() <= CHAMFER_BRUTE_LIMIT && from.len() <= CHAMFER_BRUTE_LIMIT {
        from.par_iter()
            .map(|p| to.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min))
            .collect::<Vec<f64>>()
            .iter()
            .sum()
    } else {
        let grid = PointGrid::new(to);
        from.par_iter()
            .map(|p| grid.nearest(p, None).map_or(f64::INFINITY, |(_, d)| d))
            .collect::<Vec<f64>>()
            .iter()
            .sum()
    };
    total / from.len() as f64
}

/// Symmetric mean nearest-neighbour distance (m).
pub fn chamfer(p: &[Vec3], q: &[Vec3]) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::EmptyInput("point cloud"));
    }
    Ok(0.5 * (mean_nearest(p, q) + mean_nearest(q, p)))
}

/// Brute-force Chamfer distance regardless of size.
pub fn chamfer_brute(p: &[Vec3], q: &[Vec3]) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::EmptyInput("point cloud"));
    }
    let one = |from: &[Vec3], to: &[Vec3]| {
        from.iter()
            .map(|a| to.iter().map(|b| (a - b).norm()).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / from.len() as f64
    };
    Ok(0.5 * (one(p, q) + one(q, p)))
}

/// Grid-accelerated Chamfer distance regardless of size.
pub fn chamfer_grid(p: &[Vec3], q: &[Vec3]) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::EmptyInput("point cloud"));
    }
    let one = |from: &[Vec3], to: &[Vec3]| {
        let grid = PointGrid::new(to);
        from.iter().map(|a| grid.nearest(a, None).map_or(f64::INFINITY, |(_, d)| d)).sum::<f64>()
            / from.len() as f64
    };
    Ok(0.5 * (one(p, q) + one(q, p)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub chamfer: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Mean PSNR over colour images (dB).
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    /// Mean Chamfer distance over range images (m).
    pub chamfer: Option<f64>,
    pub images: Vec<ImageMetrics>,
}

impl MetricReport {
    pub fn from_images(images: Vec<ImageMetrics>) -> Self {
        let mean = |f: fn(&ImageMetrics) -> Option<f64>| {
            let v: Vec<f64> = images.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        Self {
            psnr: mean(|m| m.psnr),
            ssim: mean(|m| m.ssim),
            chamfer: mean(|m| m.chamfer),
            images,
        }
    }
}
