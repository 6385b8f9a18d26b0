//! Corruption pipelines for the restoration tasks: blind pixel masking,
//! additive Gaussian noise and separable Gaussian blur.
//!
//! Images are `(b, h, w, 3)` tensors in `[0, 1]`. Randomised pipelines
//! derive one stream per image from `(seed, image index)`, so results do not
//! depend on how a batch is split up.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{ensure, Result};
use crate::tensor::Tensor;

pub const RANGE_MIN: f32 = 0.0;
pub const RANGE_MAX: f32 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DegradeKind {
    /// Zero out exactly `⌊fraction · h · w⌋` pixels per image.
    Mask { fraction: f64 },
    /// Add `N(0, (sigma_frac · range)²)` noise and clamp.
    Noise { sigma_frac: f64 },
    /// `sigma = (σx, σy)` in pixels, `ksize = (kx, ky)` odd.
    Blur { sigma: (f64, f64), ksize: (usize, usize) },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegradeSpec {
    pub kind: DegradeKind,
    pub seed: u64,
}

impl fmt::Display for DegradeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DegradeKind::Mask { fraction } => write!(f, "mask {fraction}"),
            DegradeKind::Noise { sigma_frac } => write!(f, "noise {sigma_frac}"),
            DegradeKind::Blur { sigma, ksize } => {
                write!(f, "blur sigma ({}, {}) ksize ({}, {})", sigma.0, sigma.1, ksize.0, ksize.1)
            }
        }
    }
}

/// A corrupted batch; `mask` is `(b, h, w, 1)` with 1 at kept pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Degraded {
    pub image: Tensor<f32>,
    pub mask: Option<Tensor<f32>>,
}

impl DegradeSpec {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            DegradeKind::Mask { fraction } => {
                ensure!((0.0..=1.0).contains(&fraction), "mask fraction {fraction} outside [0, 1]")
            }
            DegradeKind::Noise { sigma_frac } => {
                ensure!((0.0..=1.0).contains(&sigma_frac), "noise level {sigma_frac} outside [0, 1]")
            }
            DegradeKind::Blur { sigma, ksize } => {
                ensure!(sigma.0 > 0.0 && sigma.1 > 0.0, "blur sigmas must be positive");
                ensure!(
                    ksize.0 % 2 == 1 && ksize.1 % 2 == 1,
                    "blur kernel sizes must be odd, got {ksize:?}"
                );
            }
        }
        Ok(())
    }

    /// Corrupt a batch. `offset` is the index of its first image in the
    /// wider sequence, so per-image streams stay stable across batching.
    pub fn apply(&self, img: &Tensor<f32>, offset: u64) -> Result<Degraded> {
        self.validate()?;
        Ok(match self.kind {
            DegradeKind::Mask { fraction } => {
                let (image, mask) = blind_mask_from(img, fraction, self.seed, offset)?;
                Degraded {
                    image,
                    mask: Some(mask),
                }
            }
            DegradeKind::Noise { sigma_frac } => Degraded {
                image: gaussian_noise_from(img, sigma_frac, self.seed, offset)?,
                mask: None,
            },
            DegradeKind::Blur { sigma, ksize } => Degraded {
                image: gaussian_blur(img, sigma.0, sigma.1, ksize.0, ksize.1)?,
                mask: None,
            },
        })
    }
}

fn image_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Number of masked pixels for a fraction of `n`, robust to representation
/// error in the fraction (0.29 · 100 is 28.999…).
pub fn masked_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64) + 1e-9).floor().min(n as f64) as usize
}

pub fn blind_mask(img: &Tensor<f32>, fraction: f64, seed: u64) -> Result<(Tensor<f32>, Tensor<f32>)> {
    blind_mask_from(img, fraction, seed, 0)
}

fn blind_mask_from(img: &Tensor<f32>, fraction: f64, seed: u64, offset: u64) -> Result<(Tensor<f32>, Tensor<f32>)> {
    ensure!((0.0..=1.0).contains(&fraction), "mask fraction {fraction} outside [0, 1]");
    let (b, h, w, c) = img.dims4()?;
    let n = h * w;
    let drop = masked_count(fraction, n);
    let mut out = img.clone();
    let mut mask = Tensor::full(&[b, h, w, 1], 1.0f32);
    let mut order: Vec<usize> = (0..n).collect();
    for bi in 0..b {
        let mut rng = image_rng(seed, offset + bi as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        for &p in &order[..drop] {
            mask.data_mut()[bi * n + p] = 0.0;
            out.data_mut()[(bi * n + p) * c..(bi * n + p + 1) * c].fill(0.0);
        }
    }
    Ok((out, mask))
}

/// Raw zero-mean normal noise with the given standard deviation.
pub fn noise_field(shape: &[usize], std: f64, seed: u64, offset: u64) -> Result<Tensor<f32>> {
    ensure!(std >= 0.0 && std.is_finite(), "noise deviation {std} invalid");
    let mut t = Tensor::zeros(shape);
    if std == 0.0 {
        return Ok(t);
    }
    let normal = Normal::new(0.0, std).expect("positive deviation");
    let per_image = t.len() / shape[0].max(1);
    for (bi, chunk) in t.data_mut().chunks_mut(per_image.max(1)).enumerate() {
        let mut rng = image_rng(seed, offset + bi as u64);
        for v in chunk {
            *v = normal.sample(&mut rng) as f32;
        }
    }
    Ok(t)
}

pub fn gaussian_noise(img: &Tensor<f32>, sigma_frac: f64, seed: u64) -> Result<Tensor<f32>> {
    gaussian_noise_from(img, sigma_frac, seed, 0)
}

fn gaussian_noise_from(img: &Tensor<f32>, sigma_frac: f64, seed: u64, offset: u64) -> Result<Tensor<f32>> {
    ensure!(sigma_frac >= 0.0, "noise level {sigma_frac} is negative");
    img.dims4()?;
    let std = sigma_frac * f64::from(RANGE_MAX - RANGE_MIN);
    let noise = noise_field(img.shape(), std, seed, offset)?;
    let data = img
        .data()
        .iter()
        .zip(noise.data())
        .map(|(&v, &n)| (v + n).clamp(RANGE_MIN, RANGE_MAX))
        .collect();
    Tensor::new(img.shape(), data)
}

/// Normalised 1-D Gaussian taps of odd length `size`.
pub fn gaussian_kernel_1d(sigma: f64, size: usize) -> Vec<f64> {
    let r = (size / 2) as f64;
    let taps: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Mirror an out-of-range index back into `0..n` without repeating the edge.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m >= n as isize { period - m } else { m }) as usize
}

/// Separable Gaussian blur with reflect padding. `kx`/`sx` act along the
/// width, `ky`/`sy` along the height.
pub fn gaussian_blur(img: &Tensor<f32>, sx: f64, sy: f64, kx: usize, ky: usize) -> Result<Tensor<f32>> {
    ensure!(kx % 2 == 1 && ky % 2 == 1, "blur kernel sizes must be odd, got ({kx}, {ky})");
    ensure!(sx > 0.0 && sy > 0.0, "blur sigmas must be positive");
    let (b, h, w, c) = img.dims4()?;
    let hx = gaussian_kernel_1d(sx, kx);
    let hy = gaussian_kernel_1d(sy, ky);
    let (rx, ry) = ((kx / 2) as isize, (ky / 2) as isize);
    let src = img.data();
    let mut tmp = vec![0.0f64; src.len()];
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (t, &k) in hx.iter().enumerate() {
                        let xx = reflect_index(x as isize + t as isize - rx, w);
                        acc += k * f64::from(src[((bi * h + y) * w + xx) * c + ch]);
                    }
                    tmp[((bi * h + y) * w + x) * c + ch] = acc;
                }
            }
        }
    }
    let mut out = vec![0.0f32; src.len()];
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (t, &k) in hy.iter().enumerate() {
                        let yy = reflect_index(y as isize + t as isize - ry, h);
                        acc += k * tmp[((bi * h + yy) * w + x) * c + ch];
                    }
                    out[((bi * h + y) * w + x) * c + ch] = acc as f32;
                }
            }
        }
    }
    Tensor::new(img.shape(), out)
}
