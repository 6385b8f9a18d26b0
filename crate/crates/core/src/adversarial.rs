//! Fully convolutional patch discriminator and its cross-entropy objective.

use rand::Rng;

use crate::blocks::LEAKY_SLOPE;
use crate::error::{ensure, Result};
use crate::graph::{Graph, Var};
use crate::layers::{BatchNorm, Conv2d, Mode};
use crate::params::ParamStore;
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorSpec {
    pub filters: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
    pub alpha: f64,
    pub in_channels: usize,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        Self {
            filters: vec![128, 128, 128, 64, 64, 1],
            strides: vec![2, 2, 2, 1, 1, 1],
            kernel: 3,
            alpha: LEAKY_SLOPE,
            in_channels: 3,
        }
    }
}

impl DiscriminatorSpec {
    pub fn reduction(&self) -> usize {
        self.strides.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Stage {
    conv: Conv2d,
    bn: Option<BatchNorm>,
}

/// Conv → BatchNorm → LeakyReLU per stage; the last stage is a bare
/// convolution producing one logit per patch.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub spec: DiscriminatorSpec,
    stages: Vec<Stage>,
}

impl Discriminator {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        spec: DiscriminatorSpec,
    ) -> Result<Self> {
        ensure!(
            !spec.filters.is_empty() && spec.filters.len() == spec.strides.len(),
            "discriminator needs one stride per stage"
        );
        let n = spec.filters.len();
        let mut ch = spec.in_channels;
        let mut stages = Vec::with_capacity(n);
        for (i, (&f, &s)) in spec.filters.iter().zip(&spec.strides).enumerate() {
            let conv = Conv2d::new(store, rng, format!("disc.l{i}.conv"), ch, f, spec.kernel, s)?;
            let bn = if i + 1 < n {
                Some(BatchNorm::new(store, format!("disc.l{i}.bn"), f)?)
            } else {
                None
            };
            stages.push(Stage { conv, bn });
            ch = f;
        }
        Ok(Self { spec, stages })
    }

    /// Raw patch logits `(b, h/8, w/8, 1)` for the reference strides.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, img: Var, mode: Mode) -> Result<Var> {
        let mut h = img;
        for stage in &self.stages {
            h = stage.conv.forward(g, store, h)?;
            if let Some(bn) = &stage.bn {
                h = bn.forward(g, store, h, mode)?;
                h = g.leaky_relu(h, self.spec.alpha)?;
            }
        }
        Ok(h)
    }

    pub fn conv_param_count(&self) -> usize {
        self.stages.iter().map(|s| s.conv.param_count()).sum()
    }

    pub fn param_count(&self) -> usize {
        self.conv_param_count()
            + self
                .stages
                .iter()
                .filter_map(|s| s.bn.as_ref())
                .map(BatchNorm::param_count)
                .sum::<usize>()
    }
}

/// Patch-averaged cross-entropy losses:
/// `d = BCE(real, 1) + BCE(fake, 0)` and `g = BCE(fake, 1)`.
pub fn gan_losses<T: Scalar>(g: &mut Graph<T>, real_logits: Var, fake_logits: Var) -> Result<(Var, Var)> {
    ensure!(
        g.shape(real_logits) == g.shape(fake_logits),
        "logit shapes differ: {:?} vs {:?}",
        g.shape(real_logits),
        g.shape(fake_logits)
    );
    let real = g.bce_with_logits(real_logits, 1.0)?;
    let fake = g.bce_with_logits(fake_logits, 0.0)?;
    let d = g.add(real, fake)?;
    let gen = g.bce_with_logits(fake_logits, 1.0)?;
    Ok((d, gen))
}
