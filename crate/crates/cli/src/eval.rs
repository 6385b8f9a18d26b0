//! `aren eval`: degradation sweeps over the test split.

use std::fs;
use std::path::{Path, PathBuf};

use aren::aren::AttentiveVqVae;
use aren::checkpoint::Checkpoint;
use aren::data::{emit_grid, write_metrics_csv};
use aren::degrade::{DegradeKind, DegradeSpec};
use aren::metrics::MetricReport;
use aren::params::ParamStore;
use aren::Tensor;
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Overrides, RunConfig, TaskKind};
use crate::error::{CliError, Result};
use crate::train::{checkpoint_config, load_data, model_input};

pub const METRICS_FILE: &str = "metrics.csv";
pub const GRID_DIR: &str = "grids";
/// Test images shown in each sample grid.
pub const GRID_ROWS: usize = 4;

pub const MASK_SWEEP: [f64; 5] = [0.3, 0.4, 0.5, 0.6, 0.7];
pub const NOISE_SWEEP: [f64; 3] = [0.2, 0.3, 0.4];
/// Vertical blur sigmas; the horizontal sigma stays at 1.
pub const BLUR_SWEEP: [f64; 3] = [3.0, 5.0, 8.0];

/// A generator restored from a checkpoint, plus the run it came from.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub model: AttentiveVqVae,
    pub store: ParamStore<f32>,
    pub config: RunConfig,
    pub sigma: f64,
}

impl LoadedModel {
    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        let (config, state) = checkpoint_config(&ckpt)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let (model, mut store) = AttentiveVqVae::new(config.model_config(), &mut rng)?;
        ckpt.restore_store("gen/", &mut store)?;
        Ok(Self {
            model,
            store,
            config,
            sigma: state.sigma,
        })
    }

    pub fn reconstruct(&self, input: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.model.reconstruct(&self.store, input)?.0)
    }
}

/// One sweep entry: a CSV label and the degradation to apply.
#[derive(Debug, Clone, PartialEq)]
pub struct Setting {
    pub label: String,
    pub kind: Option<DegradeKind>,
}

pub fn sweep_settings(task: TaskKind, blur_ksize: [usize; 2]) -> Vec<Setting> {
    match task {
        TaskKind::None => vec![Setting {
            label: "clean".into(),
            kind: None,
        }],
        TaskKind::Mask => MASK_SWEEP
            .iter()
            .map(|&fraction| Setting {
                label: format!("{}", (fraction * 100.0).round()),
                kind: Some(DegradeKind::Mask { fraction }),
            })
            .collect(),
        TaskKind::Noise => NOISE_SWEEP
            .iter()
            .map(|&sigma_frac| Setting {
                label: format!("{sigma_frac}"),
                kind: Some(DegradeKind::Noise { sigma_frac }),
            })
            .collect(),
        TaskKind::Blur => BLUR_SWEEP
            .iter()
            .map(|&sy| Setting {
                label: format!("(1,{sy})"),
                kind: Some(DegradeKind::Blur {
                    sigma: (1.0, sy),
                    ksize: (blur_ksize[0], blur_ksize[1]),
                }),
            })
            .collect(),
    }
}

fn grid_name(task: TaskKind, label: &str) -> String {
    let clean: String = label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '_' })
        .collect();
    format!("{}_{}.png", task.name(), clean.trim_matches('_'))
}

/// Evaluate a checkpoint. The run configuration is the `--config` file if
/// given, else the checkpoint's own, with flag overrides on top; `sweep`
/// defaults to its task.
pub fn run_eval(checkpoint: &Path, overrides: &Overrides, sweep: Option<TaskKind>) -> Result<Vec<MetricReport>> {
    let loaded = LoadedModel::load(checkpoint)?;
    let mut cfg = match &overrides.config {
        Some(path) => RunConfig::load(path)?,
        None => loaded.config.clone(),
    };
    cfg.state = None;
    overrides.apply(&mut cfg);
    let diff = loaded.config.incompatibilities(&cfg);
    if !diff.is_empty() {
        return Err(CliError::Incompatible(diff));
    }
    cfg.validate()?;
    let task = sweep.unwrap_or(cfg.task.kind);
    if cfg.model.mask_input && task != TaskKind::Mask {
        return Err(CliError::config(format!(
            "checkpoint takes a mask channel; only the mask sweep applies, not {}",
            task.name()
        )));
    }

    let ds = load_data(&cfg)?;
    ds.test_images()?;
    let out_dir = &cfg.output.dir;
    let grid_dir = out_dir.join(GRID_DIR);
    fs::create_dir_all(&grid_dir).map_err(|e| aren::Error::io(&grid_dir, e))?;

    let batch = cfg.train.batch_size;
    let mut reports = Vec::new();
    for setting in sweep_settings(task, cfg.task.blur_ksize) {
        let spec = setting.kind.map(|kind| DegradeSpec {
            kind,
            seed: cfg.task.seed,
        });
        let mut per_image = Vec::new();
        let mut rows: Vec<Vec<Tensor<f32>>> = Vec::new();
        let mut active: Vec<Vec<bool>> = Vec::new();
        for (chunk_index, chunk) in ds.test.chunks(batch).enumerate() {
            let clean = ds.batch(chunk)?;
            let offset = (chunk_index * batch) as u64;
            let input = model_input(&cfg, spec.as_ref(), &clean, offset)?;
            let shown = match &spec {
                Some(s) => s.apply(&clean, offset)?.image,
                None => clean.clone(),
            };
            let (recon, indices) = loaded.model.reconstruct(&loaded.store, &input)?;
            per_image.extend(MetricReport::evaluate(task.name(), &setting.label, &recon, &clean, loaded.sigma)?.per_image);
            if active.is_empty() {
                active = vec![vec![false; cfg.model.codebook_size]; indices.len()];
            }
            for (seen, idx) in active.iter_mut().zip(&indices) {
                idx.iter().for_each(|&i| seen[i] = true);
            }
            for i in 0..chunk.len() {
                if rows.len() < GRID_ROWS {
                    rows.push(vec![
                        shown.slice_batch(i, 1)?,
                        recon.slice_batch(i, 1)?.map(|v| v.clamp(0.0, 1.0)),
                        clean.slice_batch(i, 1)?,
                    ]);
                }
            }
        }
        let report = MetricReport::from_images(task.name(), setting.label.clone(), per_image);
        let counts: Vec<String> = active
            .iter()
            .map(|seen| seen.iter().filter(|&&s| s).count().to_string())
            .collect();
        info!(
            "{} {}: PSNR {:.3} dB, SSIM {:.4}, MAE/sigma {:.4} over {} images; active codes {}",
            report.task,
            report.param,
            report.psnr_db,
            report.ssim,
            report.mae_over_sigma,
            report.n_images,
            counts.join("/")
        );
        emit_grid(&rows, &grid_dir.join(grid_name(task, &setting.label)))?;
        reports.push(report);
    }
    write_metrics_csv(&out_dir.join(METRICS_FILE), &reports)?;
    Ok(reports)
}

pub fn metrics_path(cfg: &RunConfig) -> PathBuf {
    cfg.output.dir.join(METRICS_FILE)
}
