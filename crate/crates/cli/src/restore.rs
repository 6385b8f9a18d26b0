//! `aren restore`: run one already-degraded image through a checkpoint.

use std::path::{Path, PathBuf};

use aren::data::{emit_grid, load_image_at, load_mask, save_png};
use aren::train::with_mask_channel;
use aren::Tensor;
use log::{info, warn};

use crate::config::TaskKind;
use crate::error::{CliError, Result};
use crate::eval::LoadedModel;

#[derive(Debug, Clone)]
pub struct RestoreRequest {
    pub checkpoint: PathBuf,
    pub input: PathBuf,
    pub output: PathBuf,
    /// Kept-pixel mask image; otherwise the input's alpha channel is used.
    pub mask: Option<PathBuf>,
    /// Must match the checkpoint's training task when given.
    pub task: Option<TaskKind>,
}

/// `out.png` → `out_grid.png`.
pub fn grid_path(output: &Path) -> PathBuf {
    let stem = output.file_stem().and_then(|s| s.to_str()).unwrap_or("restored");
    output.with_file_name(format!("{stem}_grid.png"))
}

/// Returns the reconstruction, also written to `req.output`.
pub fn run_restore(req: &RestoreRequest) -> Result<Tensor<f32>> {
    let loaded = LoadedModel::load(&req.checkpoint)?;
    let cfg = &loaded.config;
    if let Some(task) = req.task {
        if task != cfg.task.kind {
            return Err(CliError::config(format!(
                "checkpoint was trained for task {}, not {}",
                cfg.task.kind.name(),
                task.name()
            )));
        }
    }
    let res = cfg.data.resolution;
    let img = load_image_at(&req.input, res)?;
    let (w, h) = img.original_size;
    if (w as usize, h as usize) != (res, res) {
        warn!(
            "{} is {w}x{h}; center-cropping and resizing to the model's {res}x{res}",
            req.input.display()
        );
    }

    let input = if cfg.model.mask_input {
        let mask = match (&req.mask, img.mask) {
            (Some(path), _) => load_mask(path, res)?,
            (None, Some(alpha)) => alpha,
            (None, None) => {
                return Err(aren::Error::Data(format!(
                    "this checkpoint restores masked images and needs the mask: give {} an alpha channel or pass --mask",
                    req.input.display()
                ))
                .into())
            }
        };
        // masked pixels are zero whatever the file stored under them
        let mut masked = img.image.clone();
        for (px, &m) in masked.data_mut().chunks_exact_mut(3).zip(mask.data()) {
            if m == 0.0 {
                px.fill(0.0);
            }
        }
        with_mask_channel(&masked, &mask)?
    } else {
        if req.mask.is_some() {
            warn!("checkpoint takes no mask channel; ignoring --mask");
        }
        img.image.clone()
    };

    let recon = loaded.reconstruct(&input)?.map(|v| v.clamp(0.0, 1.0));
    save_png(&req.output, &recon)?;
    let shown = if cfg.model.mask_input {
        Tensor::from_fn(img.image.shape(), |i| input.data()[(i / 3) * 4 + i % 3])
    } else {
        img.image
    };
    let grid = grid_path(&req.output);
    emit_grid(&[vec![shown, recon.clone()]], &grid)?;
    info!("wrote {} and {}", req.output.display(), grid.display());
    Ok(recon)
}
