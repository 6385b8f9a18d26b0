//! Residual building blocks and the base residual encoder.

use rand::Rng;

use crate::error::{ensure, Result};
use crate::graph::{Graph, Var};
use crate::layers::{BatchNorm, Conv2d, Mode};
use crate::params::ParamStore;
use crate::tensor::Scalar;

pub const LEAKY_SLOPE: f64 = 0.1;
pub const KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockConfig {
    pub filters: usize,
    pub alpha: f64,
    pub stride: usize,
    pub kernel: usize,
}

impl BlockConfig {
    pub fn identity(filters: usize) -> Self {
        Self {
            filters,
            alpha: LEAKY_SLOPE,
            stride: 1,
            kernel: KERNEL,
        }
    }

    pub fn strided(filters: usize) -> Self {
        Self {
            stride: 2,
            ..Self::identity(filters)
        }
    }
}

/// BatchNorm → LeakyReLU → Conv(3×3, stride 1), added to the input.
#[derive(Debug, Clone, PartialEq)]
pub struct IdResBlock {
    pub cfg: BlockConfig,
    pub bn: BatchNorm,
    pub conv: Conv2d,
}

impl IdResBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        fin: usize,
        cfg: BlockConfig,
    ) -> Result<Self> {
        ensure!(
            cfg.stride == 1 && cfg.filters == fin,
            "{name}: identity block needs stride 1 and filters == input channels ({} vs {fin})",
            cfg.filters
        );
        Ok(Self {
            cfg,
            bn: BatchNorm::new(store, format!("{name}.bn"), fin)?,
            conv: Conv2d::new(store, rng, format!("{name}.conv"), fin, cfg.filters, cfg.kernel, 1)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let f = *g.shape(x).last().unwrap_or(&0);
        ensure!(
            f == self.cfg.filters,
            "identity block with {} filters got {f} channels",
            self.cfg.filters
        );
        let h = self.bn.forward(g, store, x, mode)?;
        let h = g.leaky_relu(h, self.cfg.alpha)?;
        let h = self.conv.forward(g, store, h)?;
        g.add(x, h)
    }

    pub fn param_count(&self) -> usize {
        self.bn.param_count() + self.conv.param_count()
    }
}

/// Main path BatchNorm → LeakyReLU → Conv(3×3, stride 2); shortcut
/// Conv(3×3, stride 2) on the raw input; the two are summed.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvResBlock {
    pub cfg: BlockConfig,
    pub bn: BatchNorm,
    pub conv: Conv2d,
    pub shortcut: Conv2d,
}

impl ConvResBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        fin: usize,
        cfg: BlockConfig,
    ) -> Result<Self> {
        ensure!(cfg.stride == 2, "{name}: conv residual block needs stride 2");
        Ok(Self {
            cfg,
            bn: BatchNorm::new(store, format!("{name}.bn"), fin)?,
            conv: Conv2d::new(store, rng, format!("{name}.conv"), fin, cfg.filters, cfg.kernel, 2)?,
            shortcut: Conv2d::new(store, rng, format!("{name}.shortcut"), fin, cfg.filters, cfg.kernel, 2)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let h = self.bn.forward(g, store, x, mode)?;
        let h = g.leaky_relu(h, self.cfg.alpha)?;
        let h = self.conv.forward(g, store, h)?;
        let s = self.shortcut.forward(g, store, x)?;
        g.add(h, s)
    }

    pub fn param_count(&self) -> usize {
        self.bn.param_count() + self.conv.param_count() + self.shortcut.param_count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ResBlock {
    Identity(IdResBlock),
    Strided(ConvResBlock),
}

impl ResBlock {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        match self {
            ResBlock::Identity(b) => b.forward(g, store, x, mode),
            ResBlock::Strided(b) => b.forward(g, store, x, mode),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            ResBlock::Identity(b) => b.param_count(),
            ResBlock::Strided(b) => b.param_count(),
        }
    }
}

/// One residual block per entry of `filters`; the first `strided` of them
/// halve the resolution, the rest are identity blocks.
pub fn residual_stack<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    name: &str,
    fin: usize,
    filters: &[usize],
    strided: usize,
) -> Result<Vec<ResBlock>> {
    ensure!(
        strided <= filters.len(),
        "{name}: {strided} downsampling steps need at least that many blocks, got {}",
        filters.len()
    );
    let mut blocks = Vec::with_capacity(filters.len());
    let mut ch = fin;
    for (i, &f) in filters.iter().enumerate() {
        let block_name = format!("{name}.block{i}");
        let block = if i < strided {
            ResBlock::Strided(ConvResBlock::new(store, rng, &block_name, ch, BlockConfig::strided(f))?)
        } else {
            ResBlock::Identity(IdResBlock::new(store, rng, &block_name, ch, BlockConfig::identity(f))?)
        };
        blocks.push(block);
        ch = f;
    }
    Ok(blocks)
}

pub fn run_stack<T: Scalar>(
    blocks: &[ResBlock],
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    mut x: Var,
    mode: Mode,
) -> Result<Var> {
    for b in blocks {
        x = b.forward(g, store, x, mode)?;
    }
    Ok(x)
}

/// Two stride-2 residual blocks, one identity block and a 1×1 projection to
/// the latent width: `(b, H, W, in) → (b, H/4, W/4, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseEncoder {
    pub blocks: Vec<ResBlock>,
    pub head: Conv2d,
    pub downsample: usize,
}

impl BaseEncoder {
    pub const DOWNSAMPLE_STEPS: usize = 2;

    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        in_channels: usize,
        filters: &[usize],
        latent_dim: usize,
    ) -> Result<Self> {
        let blocks = residual_stack(store, rng, "base", in_channels, filters, Self::DOWNSAMPLE_STEPS)?;
        let last = *filters.last().expect("non-empty after residual_stack check");
        Ok(Self {
            blocks,
            head: Conv2d::new(store, rng, "base.head", last, latent_dim, 1, 1)?,
            downsample: 1 << Self::DOWNSAMPLE_STEPS,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, img: Var, mode: Mode) -> Result<Var> {
        let (_, h, w, _) = g.value(img).dims4()?;
        ensure!(
            h % self.downsample == 0 && w % self.downsample == 0,
            "base encoder input {h}x{w} is not divisible by {}",
            self.downsample
        );
        let x = run_stack(&self.blocks, g, store, img, mode)?;
        self.head.forward(g, store, x)
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(ResBlock::param_count).sum::<usize>() + self.head.param_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check_params;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
    }

    fn zero_convs(store: &mut ParamStore<f64>) {
        for (name, p) in store.iter_mut() {
            if name.ends_with(".w") || name.ends_with(".b") {
                p.tensor.data_mut().fill(0.0);
            }
        }
    }

    #[test]
    fn zero_identity_block_is_identity() {
        let mut store = ParamStore::<f64>::new();
        let block = IdResBlock::new(&mut store, &mut rng(), "id", 4, BlockConfig::identity(4)).unwrap();
        zero_convs(&mut store);
        let x = random(&[2, 5, 5, 4], 1);
        let mut g = Graph::new();
        let xv = g.constant(x.clone()).unwrap();
        let y = block.forward(&mut g, &store, xv, Mode::Train).unwrap();
        assert_eq!(g.value(y).data(), x.data());
    }

    #[test]
    fn identity_block_rejects_channel_mismatch() {
        let mut store = ParamStore::<f64>::new();
        assert!(IdResBlock::new(&mut store, &mut rng(), "id", 4, BlockConfig::identity(8)).is_err());
        let block = IdResBlock::new(&mut store, &mut rng(), "id2", 4, BlockConfig::identity(4)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 2, 3])).unwrap();
        assert!(block.forward(&mut g, &store, x, Mode::Train).is_err());
    }

    #[test]
    fn zero_conv_block_outputs_zero_at_half_resolution() {
        let mut store = ParamStore::<f64>::new();
        let block = ConvResBlock::new(&mut store, &mut rng(), "cb", 3, BlockConfig::strided(6)).unwrap();
        zero_convs(&mut store);
        let mut g = Graph::new();
        let x = g.constant(random(&[1, 5, 4, 3], 2)).unwrap();
        let y = block.forward(&mut g, &store, x, Mode::Train).unwrap();
        assert_eq!(g.shape(y), [1, 3, 2, 6]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stacks_divide_resolution_by_powers_of_two() {
        for n in 0..4 {
            let mut store = ParamStore::<f32>::new();
            let blocks = residual_stack(&mut store, &mut rng(), "s", 2, &vec![2; n.max(1)], n).unwrap();
            let mut g = Graph::new();
            let x = g.constant(Tensor::zeros(&[1, 16, 16, 2])).unwrap();
            let y = run_stack(&blocks, &mut g, &store, x, Mode::Train).unwrap();
            assert_eq!(g.shape(y), [1, 16 >> n, 16 >> n, 2]);
        }
    }

    fn block_grad_check(strided: bool) -> f64 {
        let mut store = ParamStore::<f64>::new();
        let block = if strided {
            ResBlock::Strided(ConvResBlock::new(&mut store, &mut rng(), "b", 2, BlockConfig::strided(3)).unwrap())
        } else {
            ResBlock::Identity(IdResBlock::new(&mut store, &mut rng(), "b", 2, BlockConfig::identity(2)).unwrap())
        };
        store.get_mut("b.bn.gamma").unwrap().tensor = random(&[2], 3);
        let x = random(&[2, 4, 4, 2], 4);
        let out_shape = if strided { [2, 2, 2, 3] } else { [2, 4, 4, 2] };
        let proj = random(&out_shape, 5);
        let names: Vec<String> = store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.to_owned())
            .collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let f = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let xv = g.constant(x.clone())?;
            let y = block.forward(g, s, xv, Mode::Train)?;
            let p = g.constant(proj.clone())?;
            let y = g.mul(y, p)?;
            g.sum(y)
        };
        let report = grad_check_params(f, &store, &names, 1e-5).unwrap();
        let input = crate::gradcheck::grad_check(
            |g, xv| {
                let y = block.forward(g, &store, xv, Mode::Train)?;
                let p = g.constant(proj.clone())?;
                let y = g.mul(y, p)?;
                g.sum(y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        report.max_relative_error.max(input)
    }

    #[test]
    fn identity_block_gradients() {
        let err = block_grad_check(false);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn conv_block_gradients() {
        let err = block_grad_check(true);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn base_encoder_shapes_and_count() {
        let mut store = ParamStore::<f32>::new();
        let enc = BaseEncoder::new(&mut store, &mut rng(), 3, &[128, 128, 128], 256).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 32, 32, 3])).unwrap();
        let y = enc.forward(&mut g, &store, x, Mode::Train).unwrap();
        assert_eq!(g.shape(y), [1, 8, 8, 256]);
        let bad = g.constant(Tensor::zeros(&[1, 30, 30, 3])).unwrap();
        assert!(enc.forward(&mut g, &store, bad, Mode::Train).is_err());

        // analytic oracle: conv(k,fin,fout) = k²·fin·fout + fout, bn(f) = 2f
        let conv = |k: usize, i: usize, o: usize| k * k * i * o + o;
        let bn = |f: usize| 2 * f;
        let expect = (bn(3) + 2 * conv(3, 3, 128))
            + (bn(128) + 2 * conv(3, 128, 128))
            + (bn(128) + conv(3, 128, 128))
            + conv(1, 128, 256);
        assert_eq!(enc.param_count(), expect);
        assert_eq!(store.trainable_count(), expect);
    }
}
