//! Reconstruction quality metrics: MAE/σ, PSNR and SSIM.

use crate::degrade::gaussian_kernel_1d;
use crate::error::{ensure, Result};
use crate::tensor::Tensor;

/// Reported in place of an infinite PSNR (identical images).
pub const PSNR_CAP_DB: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

fn same_shape(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<()> {
    ensure!(
        a.shape() == b.shape(),
        "metric inputs differ in shape: {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    ensure!(!a.is_empty(), "metric inputs are empty");
    Ok(())
}

/// Mean absolute error over every value, divided by `sigma`.
pub fn mae_over_sigma(recon: &Tensor<f32>, reference: &Tensor<f32>, sigma: f64) -> Result<f64> {
    same_shape(recon, reference)?;
    ensure!(sigma > 0.0, "sigma must be positive, got {sigma}");
    let total: f64 = recon
        .data()
        .iter()
        .zip(reference.data())
        .map(|(&a, &b)| f64::from(a - b).abs())
        .sum();
    Ok(total / recon.len() as f64 / sigma)
}

pub fn mse(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    same_shape(a, b)?;
    let total: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum();
    Ok(total / a.len() as f64)
}

/// `10·log10(max² / MSE)`; infinite for identical inputs.
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>, max_val: f64) -> Result<f64> {
    ensure!(max_val > 0.0, "PSNR peak must be positive");
    let m = mse(a, b)?;
    Ok(if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_val * max_val / m).log10()
    })
}

/// PSNR as it appears in reports.
pub fn psnr_capped(a: &Tensor<f32>, b: &Tensor<f32>, max_val: f64) -> Result<f64> {
    Ok(psnr(a, b, max_val)?.min(PSNR_CAP_DB))
}

/// Per-image luminance planes of a `(b, h, w, 3)` batch.
pub fn luminance(img: &Tensor<f32>) -> Result<Vec<Vec<f64>>> {
    let (b, h, w, c) = img.dims4()?;
    ensure!(c == 3, "luminance needs 3 channels, got {c}");
    Ok(img
        .data()
        .chunks_exact(h * w * 3)
        .take(b)
        .map(|im| {
            im.chunks_exact(3)
                .map(|p| LUMA[0] * f64::from(p[0]) + LUMA[1] * f64::from(p[1]) + LUMA[2] * f64::from(p[2]))
                .collect()
        })
        .collect())
}

/// Valid-region separable filtering of an `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = k.iter().enumerate().map(|(t, &kt)| kt * plane[y * w + x + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k.iter().enumerate().map(|(t, &kt)| kt * rows[(y + t) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of two `h × w` planes with values in `[0, 1]`.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    ensure!(
        h >= SSIM_WINDOW && w >= SSIM_WINDOW,
        "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
    );
    ensure!(a.len() == h * w && b.len() == h * w, "plane size mismatch");
    let k = gaussian_kernel_1d(SSIM_SIGMA, SSIM_WINDOW);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let mu_a = filter_valid(a, h, w, &k);
    let mu_b = filter_valid(b, h, w, &k);
    let e_aa = filter_valid(&aa, h, w, &k);
    let e_bb = filter_valid(&bb, h, w, &k);
    let e_ab = filter_valid(&ab, h, w, &k);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| ssim_formula(mu_a[i], mu_b[i], e_aa[i], e_bb[i], e_ab[i], c1, c2))
        .sum();
    Ok(total / n as f64)
}

/// The SSIM index of one window from its first and second moments.
pub fn ssim_formula(mu_a: f64, mu_b: f64, e_aa: f64, e_bb: f64, e_ab: f64, c1: f64, c2: f64) -> f64 {
    let var_a = e_aa - mu_a * mu_a;
    let var_b = e_bb - mu_b * mu_b;
    let cov = e_ab - mu_a * mu_b;
    ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
}

/// SSIM of each image pair in two `(b, h, w, 3)` batches, on luminance.
pub fn ssim_per_image(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<Vec<f64>> {
    same_shape(a, b)?;
    let (_, h, w, _) = a.dims4()?;
    let la = luminance(a)?;
    let lb = luminance(b)?;
    la.iter().zip(&lb).map(|(x, y)| ssim_plane(x, y, h, w)).collect()
}

/// Mean SSIM over the batch.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    let per = ssim_per_image(a, b)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Standard deviation of every pixel value in a set of images.
pub fn pixel_std<'a>(images: impl IntoIterator<Item = &'a Tensor<f32>>) -> f64 {
    let (mut n, mut s, mut ss) = (0usize, 0.0f64, 0.0f64);
    for img in images {
        for &v in img.data() {
            let v = f64::from(v);
            n += 1;
            s += v;
            ss += v * v;
        }
    }
    if n == 0 {
        return 0.0;
    }
    let mean = s / n as f64;
    (ss / n as f64 - mean * mean).max(0.0).sqrt()
}

/// Metrics of one image pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageMetrics {
    pub mae_over_sigma: f64,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Metrics of one evaluation setting, averaged over the images.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub task: String,
    pub param: String,
    pub mae_over_sigma: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub n_images: usize,
    pub per_image: Vec<ImageMetrics>,
}

impl MetricReport {
    /// Score reconstructions (clamped to `[0, 1]`) against references.
    pub fn evaluate(
        task: impl Into<String>,
        param: impl Into<String>,
        recon: &Tensor<f32>,
        reference: &Tensor<f32>,
        sigma: f64,
    ) -> Result<Self> {
        let recon = recon.map(|v| v.clamp(0.0, 1.0));
        let (b, ..) = recon.dims4()?;
        ensure!(b >= 1, "no images to evaluate");
        let ssims = ssim_per_image(&recon, reference)?;
        let mut per_image = Vec::with_capacity(b);
        for (i, s) in ssims.into_iter().enumerate() {
            let r = recon.slice_batch(i, 1)?;
            let t = reference.slice_batch(i, 1)?;
            per_image.push(ImageMetrics {
                mae_over_sigma: mae_over_sigma(&r, &t, sigma)?,
                psnr_db: psnr_capped(&r, &t, 1.0)?,
                ssim: s,
            });
        }
        Ok(Self::from_images(task, param, per_image))
    }

    pub fn from_images(task: impl Into<String>, param: impl Into<String>, per_image: Vec<ImageMetrics>) -> Self {
        let n = per_image.len().max(1) as f64;
        let mean = |f: fn(&ImageMetrics) -> f64| per_image.iter().map(f).sum::<f64>() / n;
        Self {
            task: task.into(),
            param: param.into(),
            mae_over_sigma: mean(|m| m.mae_over_sigma),
            psnr_db: mean(|m| m.psnr_db),
            ssim: mean(|m| m.ssim),
            n_images: per_image.len(),
            per_image,
        }
    }
}
