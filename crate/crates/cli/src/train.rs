//! `aren train`: the epoch loop, logs, checkpoints and resume.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use aren::checkpoint::Checkpoint;
use aren::data::{load_dataset, Dataset};
use aren::degrade::DegradeSpec;
use aren::metrics::{mae_over_sigma, pixel_std};
use aren::train::{with_mask_channel, Trainer};
use aren::Tensor;
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, RunState, EFFECTIVE_CONFIG};
use crate::error::{CliError, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const LOG_FILE: &str = "train_log.csv";
pub const SUMMARY_FILE: &str = "summary.toml";
const LOG_HEADER: &str = "epoch,step,l1,vq,g_adv,d_loss,total,mae_over_sigma,active,seconds";

/// Written next to the checkpoint when training ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub epochs: u64,
    pub sigma: f64,
    /// Eval-mode MAE/σ on the training split before the first step; absent
    /// for resumed runs.
    pub initial_mae_over_sigma: Option<f64>,
    pub final_mae_over_sigma: f64,
    pub seconds: f64,
}

pub fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let d = &cfg.data;
    let ds = match (&d.dir, d.synthetic) {
        (Some(dir), _) => load_dataset(dir, d.resolution, d.split, d.seed)?,
        (None, Some(n)) => Dataset::synthetic(n, d.resolution, d.split, d.seed)?,
        (None, None) => return Err(CliError::config("one of data.dir or data.synthetic is required")),
    };
    Ok(ds)
}

/// The model input for a clean batch: degraded when a task is set, with
/// the mask appended as a channel in mask-input mode.
pub fn model_input(cfg: &RunConfig, spec: Option<&DegradeSpec>, clean: &Tensor<f32>, offset: u64) -> Result<Tensor<f32>> {
    let Some(spec) = spec else { return Ok(clean.clone()) };
    let out = spec.apply(clean, offset)?;
    match (cfg.model.mask_input, out.mask) {
        (true, Some(mask)) => Ok(with_mask_channel(&out.image, &mask)?),
        (true, None) => Err(CliError::config("model.mask_input requires a mask task")),
        (false, _) => Ok(out.image),
    }
}

/// Eval-mode MAE/σ over the whole training split, with each image
/// corrupted by its own fixed stream.
pub fn train_split_mae(trainer: &Trainer, cfg: &RunConfig, ds: &Dataset, sigma: f64) -> Result<f64> {
    let spec = cfg.task.spec();
    let mut total = 0.0;
    for (chunk_index, chunk) in ds.train.chunks(cfg.train.batch_size).enumerate() {
        let clean = ds.batch(chunk)?;
        let input = model_input(cfg, spec.as_ref(), &clean, (chunk_index * cfg.train.batch_size) as u64)?;
        let recon = trainer.reconstruct(&input)?;
        total += mae_over_sigma(&recon, &clean, sigma)? * chunk.len() as f64;
    }
    Ok(total / ds.train.len() as f64)
}

/// Parse a checkpoint's embedded configuration, which must carry a
/// `[state]` record.
pub fn checkpoint_config(ckpt: &Checkpoint) -> Result<(RunConfig, RunState)> {
    let cfg = RunConfig::parse(&ckpt.config)?;
    let state = cfg
        .state
        .ok_or_else(|| CliError::config("checkpoint configuration has no [state] section"))?;
    Ok((cfg, state))
}

#[derive(Default)]
struct EpochStats {
    steps: u64,
    l1: f64,
    vq: f64,
    g_adv: f64,
    d_loss: f64,
    total: f64,
    mae: f64,
    active: Vec<usize>,
}

fn append(path: &Path, line: &str) -> Result<()> {
    use std::io::Write;
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| aren::Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| aren::Error::io(path, e).into())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| aren::Error::io(path, e).into())
}

fn save_checkpoint(trainer: &Trainer, cfg: &RunConfig, sigma: f64, path: &Path) -> Result<()> {
    let mut snapshot = cfg.clone();
    snapshot.state = Some(RunState {
        step: trainer.step,
        sigma,
    });
    trainer.to_checkpoint(snapshot.to_toml())?.save(path)?;
    Ok(())
}

/// Run (or resume) training; returns the summary written to the output dir.
pub fn run_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainSummary> {
    cfg.validate()?;
    let out_dir = &cfg.output.dir;
    fs::create_dir_all(out_dir).map_err(|e| aren::Error::io(out_dir, e))?;
    write_text(&out_dir.join(EFFECTIVE_CONFIG), &cfg.to_toml())?;

    let ds = load_data(cfg)?;
    if ds.train.is_empty() {
        return Err(aren::Error::Data(format!("training split is empty (split ratio {})", cfg.data.split)).into());
    }
    let train_images: Vec<&Tensor<f32>> = ds.train.iter().map(|&i| &ds.images[i]).collect();
    let sigma = pixel_std(train_images);
    if sigma <= 0.0 {
        return Err(aren::Error::Data("training images have zero pixel variance".into()).into());
    }
    info!("training split: {} images, pixel std {sigma:.4}", ds.train.len());

    let mut trainer = Trainer::new(cfg.model_config(), cfg.train_options())?;
    let log_path = out_dir.join(LOG_FILE);
    if let Some(path) = resume {
        let ckpt = Checkpoint::load(path)?;
        let (saved, state) = checkpoint_config(&ckpt)?;
        let diff = saved.incompatibilities(cfg);
        if !diff.is_empty() {
            return Err(CliError::Incompatible(diff));
        }
        if (state.sigma - sigma).abs() > 1e-12 {
            warn!("training data changed since the checkpoint (pixel std {} vs {sigma})", state.sigma);
        }
        trainer.load_checkpoint(&ckpt, state.step)?;
        info!("resumed from {} at step {}", path.display(), state.step);
    } else {
        write_text(&log_path, &format!("{LOG_HEADER}\n"))?;
    }

    let batch = cfg.train.batch_size;
    let per_epoch = ds.train.len().div_ceil(batch) as u64;
    let mut total_steps = cfg.train.epochs * per_epoch;
    if let Some(max) = cfg.train.max_steps {
        total_steps = total_steps.min(max);
    }
    let initial = if trainer.step == 0 {
        let mae = train_split_mae(&trainer, cfg, &ds, sigma)?;
        info!("initial MAE/sigma {mae:.4}");
        Some(mae)
    } else {
        None
    };

    let spec = cfg.task.spec();
    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    let started = Instant::now();
    let mut epoch_start = Instant::now();
    let mut acc = EpochStats::default();
    let mut order_epoch = u64::MAX;
    let mut order = Vec::new();
    while trainer.step < total_steps {
        let step = trainer.step;
        let epoch = step / per_epoch;
        if epoch != order_epoch {
            order = ds.epoch_order(epoch);
            order_epoch = epoch;
        }
        let pos = (step % per_epoch) as usize * batch;
        let indices = &order[pos..(pos + batch).min(order.len())];
        let clean = ds.batch(indices)?;
        let input = model_input(cfg, spec.as_ref(), &clean, step * batch as u64)?;
        let stats = trainer.step(&input, &clean)?;
        acc.steps += 1;
        acc.l1 += stats.l1;
        acc.vq += stats.vq;
        acc.g_adv += stats.g_adv;
        acc.d_loss += stats.d_loss;
        acc.total += stats.total;
        acc.mae += mae_over_sigma(&stats.recon, &clean, sigma)?;
        acc.active = stats.active;

        let epoch_done = trainer.step % per_epoch == 0;
        if epoch_done || trainer.step == total_steps {
            let n = acc.steps as f64;
            let secs = epoch_start.elapsed().as_secs_f64();
            let active = acc.active.iter().map(usize::to_string).collect::<Vec<_>>().join("/");
            info!(
                "epoch {} step {}: l1 {:.5} vq {:.5} g_adv {:.4} d {:.4} MAE/sigma {:.4} active {active} ({secs:.1} s/epoch)",
                epoch + 1,
                trainer.step,
                acc.l1 / n,
                acc.vq / n,
                acc.g_adv / n,
                acc.d_loss / n,
                acc.mae / n,
            );
            let mut line = String::new();
            write!(
                line,
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{active},{secs:.3}",
                epoch + 1,
                trainer.step,
                acc.l1 / n,
                acc.vq / n,
                acc.g_adv / n,
                acc.d_loss / n,
                acc.total / n,
                acc.mae / n,
            )
            .expect("writing to a String cannot fail");
            append(&log_path, &line)?;
            if (epoch_done && (epoch + 1) % cfg.train.checkpoint_every == 0) || trainer.step == total_steps {
                save_checkpoint(&trainer, cfg, sigma, &ckpt_path)?;
            }
            acc = EpochStats::default();
            epoch_start = Instant::now();
        }
    }
    if !ckpt_path.exists() {
        save_checkpoint(&trainer, cfg, sigma, &ckpt_path)?;
    }

    let final_mae = train_split_mae(&trainer, cfg, &ds, sigma)?;
    info!("final MAE/sigma {final_mae:.4} after {} steps", trainer.step);
    let summary = TrainSummary {
        steps: trainer.step,
        epochs: trainer.step.div_ceil(per_epoch),
        sigma,
        initial_mae_over_sigma: initial,
        final_mae_over_sigma: final_mae,
        seconds: started.elapsed().as_secs_f64(),
    };
    let text = toml::to_string(&summary).expect("summary always serialises");
    write_text(&out_dir.join(SUMMARY_FILE), &text)?;
    Ok(summary)
}

pub fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.output.dir.join(CHECKPOINT_FILE)
}
