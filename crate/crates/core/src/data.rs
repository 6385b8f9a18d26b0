//! Image folders, deterministic splits, PNG codecs, sample grids and
//! metric CSVs.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{DynamicImage, ImageBuffer, Rgb, RgbImage, Rgba, RgbaImage};
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Error, Result};
use crate::metrics::MetricReport;
use crate::tensor::Tensor;

pub const GRID_SEPARATOR: u32 = 2;
pub const METRICS_HEADER: &str = "task,param,psnr_db,ssim,mae_over_sigma,n_images";

const EXTENSIONS: [&str; 7] = ["png", "jpg", "jpeg", "bmp", "gif", "tif", "tiff"];

/// An in-memory image set with a seeded train/test split. Every image is a
/// `(1, r, r, 3)` tensor in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Tensor<f32>>,
    pub paths: Vec<PathBuf>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub resolution: usize,
    pub split: f64,
    pub seed: u64,
    pub skipped: usize,
}

impl Dataset {
    /// Build from decoded images; `paths` may be empty for synthetic data.
    pub fn from_images(images: Vec<Tensor<f32>>, paths: Vec<PathBuf>, split: f64, seed: u64) -> Result<Self> {
        ensure!((0.0..=1.0).contains(&split), "split {split} outside [0, 1]");
        ensure!(!images.is_empty(), "dataset has no images");
        let resolution = images[0].shape()[1];
        for img in &images {
            ensure!(
                img.shape() == [1, resolution, resolution, 3],
                "dataset image has shape {:?}, expected [1, {resolution}, {resolution}, 3]",
                img.shape()
            );
        }
        let (train, test) = split_indices(images.len(), split, seed);
        Ok(Self {
            images,
            paths,
            train,
            test,
            resolution,
            split,
            seed,
            skipped: 0,
        })
    }

    /// `n` procedurally generated images.
    pub fn synthetic(n: usize, resolution: usize, split: f64, seed: u64) -> Result<Self> {
        ensure!(n >= 1, "synthetic dataset needs at least one image");
        ensure!(resolution >= 1, "resolution must be positive");
        let images = (0..n).map(|i| synthetic_image(resolution, seed, i as u64)).collect();
        Self::from_images(images, Vec::new(), split, seed)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Stack the given image indices into one `(n, r, r, 3)` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let parts = indices
            .iter()
            .map(|&i| {
                self.images
                    .get(i)
                    .ok_or_else(|| Error::contract(format!("image index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&parts)
    }

    pub fn train_batch_all(&self) -> Result<Tensor<f32>> {
        self.batch(&self.train)
    }

    /// The test split, failing when it is empty.
    pub fn test_images(&self) -> Result<Tensor<f32>> {
        if self.test.is_empty() {
            return Err(Error::Data(format!(
                "test split is empty (split ratio {}); evaluation needs held-out images",
                self.split
            )));
        }
        self.batch(&self.test)
    }

    /// Training-set visiting order for one epoch.
    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order = self.train.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch + 1);
        order.shuffle(&mut rng);
        order
    }

    /// Value range over all loaded pixels.
    pub fn value_range(&self) -> (f32, f32) {
        self.images
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    }
}

/// Seeded permutation split with `round(split · n)` training images.
pub fn split_indices(n: usize, split: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    perm.shuffle(&mut rng);
    let n_train = ((split * n as f64).round() as usize).min(n);
    let test = perm.split_off(n_train);
    (perm, test)
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Decode every image in `dir` (non-recursive, sorted by name), center
/// crop, resize to `resolution` and split.
pub fn load_dataset(dir: &Path, resolution: usize, split: f64, seed: u64) -> Result<Dataset> {
    ensure!(resolution >= 1, "resolution must be positive");
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && has_image_extension(&path) {
            files.push(path);
        }
    }
    files.sort();
    let mut images = Vec::new();
    let mut paths = Vec::new();
    let mut skipped = 0;
    for path in files {
        match image::open(&path) {
            Ok(img) => {
                images.push(to_tensor(&prepare(&img, resolution)));
                paths.push(path);
            }
            Err(e) => {
                warn!("skipping unreadable image {}: {e}", path.display());
                skipped += 1;
            }
        }
    }
    if images.len() < 2 {
        return Err(Error::Data(format!(
            "{} holds {} usable image(s) ({skipped} unreadable); at least 2 are required",
            dir.display(),
            images.len()
        )));
    }
    let mut ds = Dataset::from_images(images, paths, split, seed)?;
    ds.skipped = skipped;
    let (lo, hi) = ds.value_range();
    info!(
        "loaded {} images from {} ({} skipped), {} train / {} test, values in [{lo:.4}, {hi:.4}]",
        ds.len(),
        dir.display(),
        skipped,
        ds.train.len(),
        ds.test.len()
    );
    Ok(ds)
}

/// Center crop to a square and resize to `resolution²`.
pub fn prepare(img: &DynamicImage, resolution: usize) -> RgbImage {
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let side = w.min(h);
    let cropped = imageops::crop_imm(&rgb, (w - side) / 2, (h - side) / 2, side, side).to_image();
    let r = resolution as u32;
    if side == r {
        cropped
    } else {
        imageops::resize(&cropped, r, r, FilterType::Triangle)
    }
}

/// `(1, h, w, 3)` tensor with values `v / 255`.
pub fn to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| f32::from(v) / 255.0).collect();
    Tensor::new(&[1, h as usize, w as usize, 3], data).expect("rgb buffer matches its shape")
}

pub fn quantize_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// An image read for restoration: RGB values plus the alpha channel as a
/// kept-pixel mask (alpha ≥ 128 counts as kept) when the file carries one.
#[derive(Debug, Clone)]
pub struct LoadedImage {
    pub image: Tensor<f32>,
    pub mask: Option<Tensor<f32>>,
    pub original_size: (u32, u32),
}

fn open_image(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Kept-pixel mask from the alpha channel, `(1, h, w, 1)`.
fn alpha_mask(img: &DynamicImage) -> Result<Tensor<f32>> {
    let rgba = img.to_rgba8();
    let (w, h) = rgba.dimensions();
    let data = rgba.pixels().map(|p| if p[3] >= 128 { 1.0 } else { 0.0 }).collect();
    Tensor::new(&[1, h as usize, w as usize, 1], data)
}

/// Center crop to a square and resize with `filter` unless already there.
fn fit(img: &DynamicImage, resolution: usize, filter: FilterType) -> DynamicImage {
    let (w, h) = (img.width(), img.height());
    let side = w.min(h);
    let cropped = img.crop_imm((w - side) / 2, (h - side) / 2, side, side);
    let r = resolution as u32;
    if side == r {
        cropped
    } else {
        cropped.resize_exact(r, r, filter)
    }
}

pub fn load_image(path: &Path) -> Result<LoadedImage> {
    let img = open_image(path)?;
    let mask = img.color().has_alpha().then(|| alpha_mask(&img)).transpose()?;
    Ok(LoadedImage {
        image: to_tensor(&img.to_rgb8()),
        mask,
        original_size: (img.width(), img.height()),
    })
}

/// Like [`load_image`] but center-cropped and resized to `resolution²`;
/// the mask is resized with nearest-neighbour so it stays binary.
pub fn load_image_at(path: &Path, resolution: usize) -> Result<LoadedImage> {
    let img = open_image(path)?;
    let mask = img
        .color()
        .has_alpha()
        .then(|| alpha_mask(&fit(&img, resolution, FilterType::Nearest)))
        .transpose()?;
    Ok(LoadedImage {
        image: to_tensor(&fit(&img, resolution, FilterType::Triangle).to_rgb8()),
        mask,
        original_size: (img.width(), img.height()),
    })
}

/// A standalone mask image: luma ≥ 128 marks kept pixels.
pub fn load_mask(path: &Path, resolution: usize) -> Result<Tensor<f32>> {
    let img = fit(&open_image(path)?, resolution, FilterType::Nearest).to_luma8();
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| if p[0] >= 128 { 1.0 } else { 0.0 }).collect();
    Tensor::new(&[1, h as usize, w as usize, 1], data)
}

fn image_dims(img: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    let (b, h, w, c) = img.dims4()?;
    ensure!(b == 1, "expected a single image, got a batch of {b}");
    Ok((h, w, c))
}

fn to_rgb8(img: &Tensor<f32>) -> Result<RgbImage> {
    let (h, w, c) = image_dims(img)?;
    ensure!(c == 3, "expected 3 channels, got {c}");
    let raw = img.data().iter().map(|&v| quantize_u8(v)).collect();
    Ok(ImageBuffer::from_raw(w as u32, h as u32, raw).expect("buffer matches dimensions"))
}

fn write_image(path: &Path, img: DynamicImage) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Write a `(1, h, w, 3)` tensor as an 8-bit RGB PNG.
pub fn save_png(path: &Path, img: &Tensor<f32>) -> Result<()> {
    write_image(path, DynamicImage::ImageRgb8(to_rgb8(img)?))
}

/// Write an RGBA PNG whose alpha channel carries the kept-pixel mask.
pub fn save_png_masked(path: &Path, img: &Tensor<f32>, mask: &Tensor<f32>) -> Result<()> {
    let (h, w, c) = image_dims(img)?;
    ensure!(c == 3, "expected 3 channels, got {c}");
    ensure!(
        mask.shape() == [1, h, w, 1],
        "mask shape {:?} does not match image {h}x{w}",
        mask.shape()
    );
    let rgb = to_rgb8(img)?;
    let out = RgbaImage::from_fn(w as u32, h as u32, |x, y| {
        let p = rgb.get_pixel(x, y);
        let kept = mask.data()[y as usize * w + x as usize] > 0.5;
        Rgba([p[0], p[1], p[2], if kept { 255 } else { 0 }])
    });
    write_image(path, DynamicImage::ImageRgba8(out))
}

/// Tile rows of equally sized `(1, h, w, 3)` images with 2-pixel white
/// separators and write the result as a PNG.
pub fn emit_grid(rows: &[Vec<Tensor<f32>>], path: &Path) -> Result<()> {
    let grid = render_grid(rows)?;
    write_image(path, DynamicImage::ImageRgb8(grid))
}

pub fn render_grid(rows: &[Vec<Tensor<f32>>]) -> Result<RgbImage> {
    ensure!(!rows.is_empty() && rows.iter().all(|r| !r.is_empty()), "grid needs images");
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0) as u32;
    let (h, w, _) = image_dims(&rows[0][0])?;
    let (h, w) = (h as u32, w as u32);
    let sep = GRID_SEPARATOR;
    let n_rows = rows.len() as u32;
    let width = cols * w + (cols - 1) * sep;
    let height = n_rows * h + (n_rows - 1) * sep;
    let mut grid = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            let (ih, iw, _) = image_dims(img)?;
            ensure!(
                (ih as u32, iw as u32) == (h, w),
                "grid images must share one resolution: {ih}x{iw} vs {h}x{w}"
            );
            let tile = to_rgb8(img)?;
            imageops::replace(&mut grid, &tile, (c as u32 * (w + sep)) as i64, (r as u32 * (h + sep)) as i64);
        }
    }
    Ok(grid)
}

/// Write one CSV row per report under the standard header. Labels that
/// contain commas, such as `(1,5)`, are quoted.
pub fn write_metrics_csv(path: &Path, reports: &[MetricReport]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Data(format!("writing {}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(METRICS_HEADER.split(',')).map_err(csv_err)?;
    for r in reports {
        w.write_record([
            r.task.clone(),
            r.param.clone(),
            format!("{:.4}", r.psnr_db),
            format!("{:.6}", r.ssim),
            format!("{:.6}", r.mae_over_sigma),
            r.n_images.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// A smooth procedural image: a two-colour gradient with a rectangle and a
/// disc on top. Fully determined by `(seed, index)`.
pub fn synthetic_image(resolution: usize, seed: u64, index: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_1A6E);
    rng.set_stream(index);
    let mut colour = || -> [f32; 3] { [rng.random(), rng.random(), rng.random()] };
    let (c0, c1, c_rect, c_disc) = (colour(), colour(), colour(), colour());
    let r = resolution as f32;
    let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let rx0 = rng.random_range(0.0..0.6) * r;
    let ry0 = rng.random_range(0.0..0.6) * r;
    let rx1 = rx0 + rng.random_range(0.2..0.4) * r;
    let ry1 = ry0 + rng.random_range(0.2..0.4) * r;
    let (cx, cy) = (rng.random_range(0.2..0.8) * r, rng.random_range(0.2..0.8) * r);
    let rad = rng.random_range(0.1..0.25) * r;
    Tensor::from_fn(&[1, resolution, resolution, 3], |i| {
        let ch = i % 3;
        let p = i / 3;
        let (y, x) = ((p / resolution) as f32 + 0.5, (p % resolution) as f32 + 0.5);
        if (x - cx).powi(2) + (y - cy).powi(2) <= rad * rad {
            c_disc[ch]
        } else if (rx0..rx1).contains(&x) && (ry0..ry1).contains(&y) {
            c_rect[ch]
        } else {
            let t = (((x / r - 0.5) * dx + (y / r - 0.5) * dy) + 0.71) / 1.42;
            c0[ch] + (c1[ch] - c0[ch]) * t.clamp(0.0, 1.0)
        }
    })
}
