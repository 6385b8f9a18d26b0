//! `aren corrupt`: apply one degradation to an image file.

use std::fs;
use std::path::Path;

use aren::data::{load_image, save_png, save_png_masked};
use aren::degrade::{DegradeKind, DegradeSpec};
use log::info;

use crate::error::Result;

/// Identity settings copy the source bytes instead of re-encoding.
fn is_identity(kind: &DegradeKind) -> bool {
    matches!(kind, DegradeKind::Noise { sigma_frac } if *sigma_frac == 0.0)
}

/// Degrade `input` at its native resolution. Masking writes an RGBA PNG
/// whose alpha channel is the kept-pixel mask.
pub fn run_corrupt(input: &Path, output: &Path, spec: &DegradeSpec) -> Result<()> {
    spec.validate()?;
    if is_identity(&spec.kind) {
        if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| aren::Error::io(parent, e))?;
        }
        fs::copy(input, output).map_err(|e| aren::Error::io(output, e))?;
        info!("{} is an identity; copied {}", spec.kind, input.display());
        return Ok(());
    }
    let img = load_image(input)?;
    let out = spec.apply(&img.image, 0)?;
    match &out.mask {
        Some(mask) => save_png_masked(output, &out.image, mask)?,
        None => save_png(output, &out.image)?,
    }
    info!("applied {} (seed {}) to {}", spec.kind, spec.seed, input.display());
    Ok(())
}
