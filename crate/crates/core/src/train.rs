//! One optimisation step of the full objective: reconstruction L1, VQ
//! losses and the adversarial term, followed by a discriminator update.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adversarial::{gan_losses, Discriminator, DiscriminatorSpec};
use crate::aren::{AttentiveVqVae, Bottleneck, ModelConfig};
use crate::checkpoint::Checkpoint;
use crate::error::{ensure, Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{apply_bn_updates, Mode};
use crate::optim::{adam_step, AdamState, Moments};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const DEFAULT_LAMBDA_ADV: f64 = 0.1;

const GEN_PREFIX: &str = "gen/";
const DISC_PREFIX: &str = "disc/";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub lr: f64,
    /// Weight of the generator's adversarial loss; 0 disables the
    /// discriminator entirely.
    pub lambda_adv: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            lambda_adv: DEFAULT_LAMBDA_ADV,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub l1: f64,
    pub vq: f64,
    pub g_adv: f64,
    pub d_loss: f64,
    pub total: f64,
    /// Distinct codebook entries used in this batch, bottom level first.
    pub active: Vec<usize>,
    pub recon: Tensor<f32>,
}

/// Model, discriminator and both optimisers.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: AttentiveVqVae,
    pub store: ParamStore<f32>,
    pub disc: Option<Discriminator>,
    pub disc_store: ParamStore<f32>,
    pub gen_opt: AdamState<f32>,
    pub disc_opt: AdamState<f32>,
    pub options: TrainOptions,
    /// Completed optimisation steps.
    pub step: u64,
}

fn item(g: &Graph<f32>, v: Var) -> f64 {
    f64::from(g.item(v))
}

impl Trainer {
    pub fn new(config: ModelConfig, options: TrainOptions) -> Result<Self> {
        ensure!(options.lr > 0.0, "learning rate must be positive");
        ensure!(options.lambda_adv >= 0.0, "adversarial weight must be non-negative");
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        let (model, store) = AttentiveVqVae::new(config, &mut rng)?;
        let mut disc_store = ParamStore::new();
        let disc = if options.lambda_adv > 0.0 {
            Some(Discriminator::new(&mut disc_store, &mut rng, DiscriminatorSpec::default())?)
        } else {
            None
        };
        Ok(Self {
            model,
            store,
            disc,
            disc_store,
            gen_opt: AdamState::new(options.lr),
            disc_opt: AdamState::new(options.lr),
            options,
            step: 0,
        })
    }

    /// Seed the codebooks from encoder outputs of `input`. Called by the
    /// first step; determined by the run seed alone.
    fn init_codebooks(&mut self, input: &Tensor<f32>) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.options.seed);
        rng.set_stream(1);
        self.model.init_codebooks(&mut self.store, input, &mut rng)
    }

    /// One generator update followed by one discriminator update.
    pub fn step(&mut self, input: &Tensor<f32>, target: &Tensor<f32>) -> Result<StepStats> {
        if self.step == 0 {
            self.init_codebooks(input)?;
        }
        let step = self.step;
        let numeric = |e: Error| match e {
            Error::Numeric(m) => Error::Numeric(format!("step {step}: {m}")),
            other => other,
        };

        let mut g = Graph::new();
        let x = g.constant(input.clone())?;
        let y = g.constant(target.clone())?;
        let out = self
            .model
            .forward(&mut g, &self.store, x, Mode::Train, Bottleneck::Quantize)
            .map_err(numeric)?;
        let diff = g.sub(out.recon, y)?;
        let abs = g.abs(diff)?;
        let l1 = g.mean(abs)?;
        let mut total = l1;
        let mut vq = 0.0;
        for &(cb, commit) in &out.hierarchy.vq_losses {
            vq += item(&g, cb) + item(&g, commit);
            total = g.add(total, cb)?;
            total = g.add(total, commit)?;
        }
        let mut g_adv = 0.0;
        if let Some(disc) = &self.disc {
            let logits = disc.forward(&mut g, &self.disc_store, out.recon, Mode::Train)?;
            let adv = g.bce_with_logits(logits, 1.0).map_err(numeric)?;
            g_adv = item(&g, adv);
            let weighted = g.scale(adv, self.options.lambda_adv)?;
            total = g.add(total, weighted)?;
        }
        let total_value = item(&g, total);
        if !total_value.is_finite() {
            return Err(Error::Numeric(format!("step {step}: non-finite loss {total_value}")));
        }
        let recon = g.value(out.recon).clone();
        let active = out
            .hierarchy
            .indices
            .iter()
            .map(|idx| {
                let mut seen = idx.clone();
                seen.sort_unstable();
                seen.dedup();
                seen.len()
            })
            .collect();
        let l1_value = item(&g, l1);

        let grads = g.backward(total).map_err(numeric)?;
        grads.write_to(&g, &mut self.store)?;
        let updates = g
            .take_bn_updates()
            .into_iter()
            .filter(|(name, _)| self.store.contains(&format!("{name}.running_mean")))
            .collect();
        apply_bn_updates(&mut self.store, updates)?;
        adam_step(&mut self.store, &mut self.gen_opt)?;
        self.check_finite(step)?;

        let mut d_loss = 0.0;
        if let Some(disc) = &self.disc {
            let mut g = Graph::new();
            let real = g.constant(target.clone())?;
            let fake = g.constant(recon.clone())?;
            let real_logits = disc.forward(&mut g, &self.disc_store, real, Mode::Train)?;
            let fake_logits = disc.forward(&mut g, &self.disc_store, fake, Mode::Train)?;
            let (d, _) = gan_losses(&mut g, real_logits, fake_logits).map_err(numeric)?;
            d_loss = item(&g, d);
            let grads = g.backward(d).map_err(numeric)?;
            grads.write_to(&g, &mut self.disc_store)?;
            let updates = g.take_bn_updates();
            apply_bn_updates(&mut self.disc_store, updates)?;
            adam_step(&mut self.disc_store, &mut self.disc_opt)?;
        }

        self.step += 1;
        Ok(StepStats {
            step,
            l1: l1_value,
            vq,
            g_adv,
            d_loss,
            total: total_value,
            active,
            recon,
        })
    }

    fn check_finite(&self, step: u64) -> Result<()> {
        match self.store.iter().find(|(_, p)| !p.tensor.is_finite()) {
            Some((name, _)) => Err(Error::Numeric(format!("step {step}: parameter {name} became non-finite"))),
            None => Ok(()),
        }
    }

    /// Reconstruct a batch in evaluation mode.
    pub fn reconstruct(&self, input: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.model.reconstruct(&self.store, input)?.0)
    }

    /// All weights and optimiser moments under `config` text.
    pub fn to_checkpoint(&self, config: impl Into<String>) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new(config);
        ckpt.insert_store(GEN_PREFIX, &self.store)?;
        ckpt.insert_store(DISC_PREFIX, &self.disc_store)?;
        for (tag, store, opt) in [
            ("gen", &self.store, &self.gen_opt),
            ("disc", &self.disc_store, &self.disc_opt),
        ] {
            for (name, m) in opt.moments() {
                let shape = store.tensor(name)?.shape().to_vec();
                ckpt.insert(format!("adam.{tag}.m/{name}"), Tensor::new(&shape, m.first.clone())?)?;
                ckpt.insert(format!("adam.{tag}.v/{name}"), Tensor::new(&shape, m.second.clone())?)?;
            }
        }
        Ok(ckpt)
    }

    /// Restore weights and moments into a trainer built from the same
    /// configuration; `step` comes from the checkpoint's state record.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint, step: u64) -> Result<()> {
        ckpt.restore_store(GEN_PREFIX, &mut self.store)?;
        ckpt.restore_store(DISC_PREFIX, &mut self.disc_store)?;
        for (tag, store, opt) in [
            ("gen", &self.store, &mut self.gen_opt),
            ("disc", &self.disc_store, &mut self.disc_opt),
        ] {
            *opt = AdamState::new(opt.lr);
            let mut any = false;
            for (name, p) in store.iter().filter(|(_, p)| p.trainable) {
                let (Some(m), Some(v)) = (
                    ckpt.entries.get(&format!("adam.{tag}.m/{name}")),
                    ckpt.entries.get(&format!("adam.{tag}.v/{name}")),
                ) else {
                    continue;
                };
                ensure!(
                    m.shape() == p.tensor.shape() && v.shape() == p.tensor.shape(),
                    "optimiser moments for {name} do not match the parameter shape"
                );
                opt.set_moments(
                    name,
                    Moments {
                        first: m.data().to_vec(),
                        second: v.data().to_vec(),
                    },
                );
                any = true;
            }
            if any {
                opt.step = step;
            }
        }
        self.step = step;
        Ok(())
    }
}

/// Append the kept-pixel mask as a fourth input channel.
pub fn with_mask_channel(img: &Tensor<f32>, mask: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (b, h, w, c) = img.dims4()?;
    ensure!(c == 3, "expected an RGB batch, got {c} channels");
    ensure!(
        mask.shape() == [b, h, w, 1],
        "mask shape {:?} does not match image batch {:?}",
        mask.shape(),
        img.shape()
    );
    let mut data = Vec::with_capacity(b * h * w * 4);
    for (px, m) in img.data().chunks_exact(3).zip(mask.data()) {
        data.extend_from_slice(px);
        data.push(*m);
    }
    Tensor::new(&[b, h, w, 4], data)
}
