//! Run configuration: a TOML file with `[model]`, `[data]`, `[train]`,
//! `[task]` and `[output]` sections, overridable from the command line.

use std::fs;
use std::path::{Path, PathBuf};

use aren::aren::ModelConfig;
use aren::degrade::{DegradeKind, DegradeSpec};
use aren::train::TrainOptions;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const OUTPUT_DIR_ENV: &str = "AREN_OUTPUT_DIR";
pub const EFFECTIVE_CONFIG: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub levels: usize,
    pub latent_dim: usize,
    pub codebook_size: usize,
    pub attention: bool,
    /// Feed the kept-pixel mask as a fourth input channel.
    pub mask_input: bool,
    pub max_attention_pixels: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let desk = ModelConfig::desk(1, true);
        Self {
            levels: desk.levels,
            latent_dim: desk.latent_dim,
            codebook_size: desk.codebook_size,
            attention: true,
            mask_input: false,
            max_attention_pixels: desk.max_attention_pixels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Image folder; exclusive with `synthetic`.
    pub dir: Option<PathBuf>,
    /// Number of procedurally generated images to use instead of a folder.
    pub synthetic: Option<usize>,
    pub resolution: usize,
    pub split: f64,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            dir: None,
            synthetic: None,
            resolution: 32,
            split: 0.8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub beta: f64,
    pub lambda_adv: f64,
    pub seed: u64,
    /// Stop after this many optimisation steps in total.
    pub max_steps: Option<u64>,
    pub checkpoint_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let opts = TrainOptions::default();
        Self {
            epochs: 50,
            batch_size: 16,
            lr: opts.lr,
            beta: ModelConfig::desk(1, true).beta,
            lambda_adv: opts.lambda_adv,
            seed: 0,
            max_steps: None,
            checkpoint_every: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    None,
    Mask,
    Noise,
    Blur,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::None => "none",
            TaskKind::Mask => "mask",
            TaskKind::Noise => "noise",
            TaskKind::Blur => "blur",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub kind: TaskKind,
    pub mask_fraction: f64,
    pub noise_sigma: f64,
    pub blur_sigma: [f64; 2],
    pub blur_ksize: [usize; 2],
    pub seed: u64,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self {
            kind: TaskKind::None,
            mask_fraction: 0.5,
            noise_sigma: 0.3,
            blur_sigma: [1.0, 5.0],
            blur_ksize: [3, 15],
            seed: 0,
        }
    }
}

impl TaskSection {
    pub fn degrade_kind(&self) -> Option<DegradeKind> {
        match self.kind {
            TaskKind::None => None,
            TaskKind::Mask => Some(DegradeKind::Mask {
                fraction: self.mask_fraction,
            }),
            TaskKind::Noise => Some(DegradeKind::Noise {
                sigma_frac: self.noise_sigma,
            }),
            TaskKind::Blur => Some(DegradeKind::Blur {
                sigma: (self.blur_sigma[0], self.blur_sigma[1]),
                ksize: (self.blur_ksize[0], self.blur_ksize[1]),
            }),
        }
    }

    pub fn spec(&self) -> Option<DegradeSpec> {
        self.degrade_kind().map(|kind| DegradeSpec { kind, seed: self.seed })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/aren"),
        }
    }
}

/// Progress recorded in checkpoints so a run can resume exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunState {
    pub step: u64,
    /// Pixel standard deviation of the training split, the MAE/σ divisor.
    pub sigma: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub task: TaskSection,
    pub output: OutputSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub state: Option<RunState>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| aren::Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serialises")
    }

    /// Every problem at once, so a bad file is fixed in one pass.
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        let m = &self.model;
        if !(1..=3).contains(&m.levels) {
            errors.push(format!("model.levels must be in 1..=3, got {}", m.levels));
        }
        if m.codebook_size < 2 {
            errors.push(format!("model.codebook_size must be at least 2, got {}", m.codebook_size));
        }
        if m.latent_dim == 0 {
            errors.push("model.latent_dim must be positive".into());
        }
        if m.mask_input && self.task.kind != TaskKind::Mask {
            errors.push(format!(
                "model.mask_input needs task.kind = \"mask\", got \"{}\"",
                self.task.kind.name()
            ));
        }

        let d = &self.data;
        match (&d.dir, d.synthetic) {
            (Some(_), Some(_)) => errors.push("data.dir and data.synthetic are mutually exclusive".into()),
            (None, None) => errors.push("one of data.dir or data.synthetic is required".into()),
            (Some(dir), None) if !dir.is_dir() => {
                errors.push(format!("data.dir {} is not a directory", dir.display()))
            }
            (None, Some(n)) if n < 2 => errors.push(format!("data.synthetic needs at least 2 images, got {n}")),
            _ => {}
        }
        let levels = m.levels.clamp(1, 3);
        let reduction = 4usize << levels;
        if d.resolution == 0 || d.resolution % reduction != 0 {
            errors.push(format!(
                "data.resolution {} must be a positive multiple of {reduction} for {levels} level(s)",
                d.resolution
            ));
        }
        if !(0.0..=1.0).contains(&d.split) {
            errors.push(format!("data.split must be in [0, 1], got {}", d.split));
        }

        let t = &self.train;
        if t.epochs == 0 {
            errors.push("train.epochs must be positive".into());
        }
        if t.batch_size == 0 {
            errors.push("train.batch_size must be positive".into());
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            errors.push(format!("train.lr must be positive, got {}", t.lr));
        }
        if !(t.beta >= 0.0 && t.beta.is_finite()) {
            errors.push(format!("train.beta must be non-negative, got {}", t.beta));
        }
        if !(t.lambda_adv >= 0.0 && t.lambda_adv.is_finite()) {
            errors.push(format!("train.lambda_adv must be non-negative, got {}", t.lambda_adv));
        }
        if t.checkpoint_every == 0 {
            errors.push("train.checkpoint_every must be positive".into());
        }

        if let Some(spec) = self.task.spec() {
            if let Err(e) = spec.validate() {
                errors.push(format!("task: {e}"));
            }
        }

        if errors.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(errors))
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            image_size: self.data.resolution,
            in_channels: if self.model.mask_input { 4 } else { 3 },
            latent_dim: self.model.latent_dim,
            codebook_size: self.model.codebook_size,
            beta: self.train.beta,
            max_attention_pixels: self.model.max_attention_pixels,
            ..ModelConfig::desk(self.model.levels, self.model.attention)
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            lr: self.train.lr,
            lambda_adv: self.train.lambda_adv,
            seed: self.train.seed,
        }
    }

    /// Fields that must agree between a checkpoint and a configuration
    /// using it, as `key: checkpoint vs config` lines.
    pub fn incompatibilities(&self, other: &RunConfig) -> Vec<String> {
        let mut diff = Vec::new();
        let mut cmp = |key: &str, a: String, b: String| {
            if a != b {
                diff.push(format!("  {key}: checkpoint {a}, config {b}"));
            }
        };
        let (a, b) = (&self.model, &other.model);
        cmp("model.levels", a.levels.to_string(), b.levels.to_string());
        cmp("model.latent_dim", a.latent_dim.to_string(), b.latent_dim.to_string());
        cmp("model.codebook_size", a.codebook_size.to_string(), b.codebook_size.to_string());
        cmp("model.attention", a.attention.to_string(), b.attention.to_string());
        cmp(
            "input channels",
            self.model_config().in_channels.to_string(),
            other.model_config().in_channels.to_string(),
        );
        cmp(
            "data.resolution",
            self.data.resolution.to_string(),
            other.data.resolution.to_string(),
        );
        diff
    }
}

/// Command-line overrides shared by the commands that build a run.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// TOML run configuration; defaults apply to anything it omits.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub levels: Option<usize>,
    /// Drop the attention layer from every level.
    #[arg(long)]
    pub no_attention: bool,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub codebook_size: Option<usize>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Use this many procedurally generated images instead of a folder.
    #[arg(long)]
    pub synthetic: Option<usize>,
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub lr: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub lambda_adv: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long, value_enum)]
    pub task: Option<TaskKind>,
    #[arg(long, env = OUTPUT_DIR_ENV)]
    pub output_dir: Option<PathBuf>,
}

impl Overrides {
    /// The file (or defaults) with every given flag applied on top.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        cfg.state = None;
        self.apply(&mut cfg);
        Ok(cfg)
    }

    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.levels {
            cfg.model.levels = v;
        }
        if self.no_attention {
            cfg.model.attention = false;
        }
        if let Some(v) = self.latent_dim {
            cfg.model.latent_dim = v;
        }
        if let Some(v) = self.codebook_size {
            cfg.model.codebook_size = v;
        }
        if let Some(v) = &self.data_dir {
            cfg.data.dir = Some(v.clone());
            cfg.data.synthetic = None;
        }
        if let Some(v) = self.synthetic {
            cfg.data.synthetic = Some(v);
            cfg.data.dir = None;
        }
        if let Some(v) = self.resolution {
            cfg.data.resolution = v;
        }
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.train.lr = v;
        }
        if let Some(v) = self.lambda_adv {
            cfg.train.lambda_adv = v;
        }
        if let Some(v) = self.seed {
            cfg.train.seed = v;
            cfg.data.seed = v;
            cfg.task.seed = v;
        }
        if let Some(v) = self.max_steps {
            cfg.train.max_steps = Some(v);
        }
        if let Some(v) = self.task {
            cfg.task.kind = v;
            if v == TaskKind::Mask && self.config.is_none() {
                cfg.model.mask_input = true;
            }
        }
        if let Some(v) = &self.output_dir {
            cfg.output.dir = v.clone();
        }
    }
}
