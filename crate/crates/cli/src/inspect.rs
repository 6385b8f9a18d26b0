//! `aren inspect`: parameter accounting per module and optional timing.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use aren::adversarial::{Discriminator, DiscriminatorSpec};
use aren::aren::{AttentiveVqVae, Bottleneck};
use aren::data::Dataset;
use aren::graph::Graph;
use aren::layers::Mode;
use aren::params::ParamStore;
use aren::train::Trainer;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::Result;
use crate::train::model_input;

#[derive(Debug, Clone, PartialEq)]
pub struct Inspection {
    pub levels: usize,
    pub attention: bool,
    pub latent_dim: usize,
    pub codebook_size: usize,
    pub resolution: usize,
    pub in_channels: usize,
    /// `(module, trainable parameters)`, encoder first.
    pub modules: Vec<(String, usize)>,
    pub generator: usize,
    pub discriminator: usize,
    /// Operation counts of one forward pass.
    pub ops: BTreeMap<&'static str, usize>,
    pub seconds_per_step: Option<f64>,
}

/// Build the configured model (and the discriminator) and count.
/// `time_steps > 0` also times that many training steps on synthetic data.
pub fn inspect(cfg: &RunConfig, time_steps: usize) -> Result<Inspection> {
    let mut cfg = cfg.clone();
    if cfg.data.dir.is_none() && cfg.data.synthetic.is_none() {
        cfg.data.synthetic = Some(cfg.train.batch_size.max(2));
    }
    cfg.validate()?;
    let mc = cfg.model_config();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let (model, store) = AttentiveVqVae::new::<f32, _>(mc.clone(), &mut rng)?;
    let breakdown = model.param_breakdown();
    let mut modules = vec![("base".to_string(), breakdown.base)];
    modules.extend(breakdown.levels.iter().map(|&(id, n)| (format!("level{id}"), n)));
    modules.push(("decoder".into(), breakdown.decoder));

    let mut disc_store = ParamStore::<f32>::new();
    let disc = Discriminator::new(&mut disc_store, &mut rng, DiscriminatorSpec::default())?;

    let mut g = Graph::new();
    let x = g.constant(aren::Tensor::zeros(&[1, mc.image_size, mc.image_size, mc.in_channels]))?;
    model.forward(&mut g, &store, x, Mode::Eval, Bottleneck::Quantize)?;
    let mut ops = BTreeMap::new();
    for op in g.op_trace().into_iter().filter(|&op| op != "leaf") {
        *ops.entry(op).or_insert(0) += 1;
    }

    let seconds_per_step = if time_steps > 0 {
        let ds = Dataset::synthetic(cfg.train.batch_size, mc.image_size, 1.0, cfg.data.seed)?;
        let clean = ds.train_batch_all()?;
        let spec = cfg.task.spec();
        let mut trainer = Trainer::new(mc.clone(), cfg.train_options())?;
        // the first step also seeds the codebooks; keep it out of the timing
        trainer.step(&model_input(&cfg, spec.as_ref(), &clean, 0)?, &clean)?;
        let start = Instant::now();
        for s in 0..time_steps {
            let input = model_input(&cfg, spec.as_ref(), &clean, s as u64 + 1)?;
            trainer.step(&input, &clean)?;
        }
        Some(start.elapsed().as_secs_f64() / time_steps as f64)
    } else {
        None
    };

    Ok(Inspection {
        levels: mc.levels,
        attention: mc.attention,
        latent_dim: mc.latent_dim,
        codebook_size: mc.codebook_size,
        resolution: mc.image_size,
        in_channels: mc.in_channels,
        modules,
        generator: breakdown.total(),
        discriminator: disc.param_count(),
        ops,
        seconds_per_step,
    })
}

impl fmt::Display for Inspection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "model levels={} attention={} latent_dim={} codebook_size={} resolution={} in_channels={}",
            self.levels,
            if self.attention { "on" } else { "off" },
            self.latent_dim,
            self.codebook_size,
            self.resolution,
            self.in_channels
        )?;
        for (name, n) in &self.modules {
            writeln!(f, "{name:<14} {n:>12}")?;
        }
        writeln!(f, "{:<14} {:>12}", "generator", self.generator)?;
        writeln!(f, "{:<14} {:>12}", "discriminator", self.discriminator)?;
        writeln!(f, "{:<14} {:>12}", "total", self.generator + self.discriminator)?;
        let ops: Vec<String> = self.ops.iter().map(|(op, n)| format!("{op}={n}")).collect();
        writeln!(f, "forward ops {}", ops.join(" "))?;
        if let Some(s) = self.seconds_per_step {
            writeln!(f, "seconds_per_step {s:.4}")?;
        }
        Ok(())
    }
}
