//! Attentive residual encoder levels, the multi-level hierarchy, the
//! decoder, and the assembled model.
//!
//! Every level reads the shared base-encoder output. Working from the top
//! (coarsest) level down, each level's quantised latent is upsampled ×2,
//! concatenated by channels with the next lower level's encoder output and
//! merged by a 1×1 convolution; that merged tensor is what the lower level
//! quantises. The bottom level's quantised latent feeds the decoder.

use rand::Rng;

use crate::attention::{PixelAttention, DEFAULT_MAX_PIXELS};
use crate::blocks::{residual_stack, run_stack, BaseEncoder, BlockConfig, IdResBlock, ResBlock};
use crate::error::{ensure, Result};
use crate::graph::{Graph, Var};
use crate::layers::{Conv2d, Mode};
use crate::params::ParamStore;
use crate::quantizer::{quantize_node, sample_rows, straight_through, vq_losses, DEFAULT_BETA};
use crate::tensor::{Scalar, Tensor};

/// Architecture of one encoder level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelSpec {
    /// 1 is the finest level; names of the level's parameters derive from it.
    pub id: usize,
    /// One residual block per entry; stride-2 blocks come first.
    pub filters: Vec<usize>,
    /// Resolution reduction relative to the base-encoder output (power of two).
    pub downsample: usize,
    pub latent_dim: usize,
    pub attention: bool,
}

impl LevelSpec {
    /// The reference ladder: level `id` reduces the base output by `2^id`
    /// with `(128,128)`, `(128,128,128)` and `(128,128,128,128)` blocks.
    pub fn reference(id: usize, latent_dim: usize, attention: bool) -> Self {
        Self {
            id,
            filters: vec![128; id + 1],
            downsample: 1 << id,
            latent_dim,
            attention,
        }
    }

    pub fn strided_steps(&self) -> Result<usize> {
        ensure!(
            self.downsample.is_power_of_two(),
            "level {} downsample {} is not a power of two",
            self.id,
            self.downsample
        );
        Ok(self.downsample.trailing_zeros() as usize)
    }

    fn prefix(&self) -> String {
        format!("aren{}", self.id)
    }

    pub fn codebook_name(&self) -> String {
        format!("vq{}.embeddings", self.id)
    }
}

/// Residual blocks → self pixel attention → 1×1 convolution to `c` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ArenLevel {
    pub spec: LevelSpec,
    pub blocks: Vec<ResBlock>,
    pub attention: Option<PixelAttention>,
    pub head: Conv2d,
}

impl ArenLevel {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        spec: LevelSpec,
        in_channels: usize,
    ) -> Result<Self> {
        ensure!(!spec.filters.is_empty(), "level {} has no residual blocks", spec.id);
        let prefix = spec.prefix();
        let blocks = residual_stack(store, rng, &prefix, in_channels, &spec.filters, spec.strided_steps()?)?;
        let mut ch = *spec.filters.last().expect("non-empty");
        let attention = if spec.attention {
            let a = PixelAttention::new(store, rng, &format!("{prefix}.attention"), ch, spec.latent_dim)?;
            ch = spec.latent_dim;
            Some(a)
        } else {
            None
        };
        let head = Conv2d::new(store, rng, format!("{prefix}.head"), ch, spec.latent_dim, 1, 1)?;
        Ok(Self {
            spec,
            blocks,
            attention,
            head,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let (_, h, w, _) = g.value(x).dims4()?;
        ensure!(
            h % self.spec.downsample == 0 && w % self.spec.downsample == 0,
            "level {} cannot reduce {h}x{w} by {}",
            self.spec.id,
            self.spec.downsample
        );
        let mut y = run_stack(&self.blocks, g, store, x, mode)?;
        if let Some(att) = &self.attention {
            y = att.forward(g, store, y, y)?;
        }
        self.head.forward(g, store, y)
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(ResBlock::param_count).sum::<usize>()
            + self.attention.as_ref().map_or(0, PixelAttention::param_count)
            + self.head.param_count()
    }
}

/// A level together with its fusion convolution (absent on the top level)
/// and its codebook.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchyLevel {
    pub aren: ArenLevel,
    pub merge: Option<Conv2d>,
    pub codebook: String,
    pub codebook_size: usize,
}

impl HierarchyLevel {
    pub fn param_count(&self) -> usize {
        self.aren.param_count()
            + self.merge.as_ref().map_or(0, Conv2d::param_count)
            + self.codebook_size * self.aren.spec.latent_dim
    }
}

/// How latents pass through the bottleneck.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bottleneck {
    /// Nearest-codebook quantisation with straight-through gradients.
    Quantize,
    /// Latents pass unquantised; for verifying the differentiable remainder.
    Bypass,
}

/// Per-level results of one encoding pass; index 0 is the bottom level.
#[derive(Debug, Clone)]
pub struct HierarchyOutput {
    /// Pre-quantisation latents (merged tensors below the top level).
    pub latents: Vec<Var>,
    /// Codebook assignments per level (empty when bypassed).
    pub indices: Vec<Vec<usize>>,
    /// Straight-through quantised latents.
    pub quantized: Vec<Var>,
    /// `(codebook, commitment)` loss per level.
    pub vq_losses: Vec<(Var, Var)>,
}

impl HierarchyOutput {
    pub fn bottom(&self) -> Var {
        self.quantized[0]
    }
}

/// Ordered encoder levels, bottom (finest) first.
#[derive(Debug, Clone, PartialEq)]
pub struct Hierarchy {
    pub levels: Vec<HierarchyLevel>,
    pub latent_dim: usize,
    pub beta: f64,
}

impl Hierarchy {
    /// A one-level hierarchy.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        spec: LevelSpec,
        codebook_size: usize,
    ) -> Result<Self> {
        let latent_dim = spec.latent_dim;
        let level = Self::make_level(store, rng, spec, codebook_size, false)?;
        Ok(Self {
            levels: vec![level],
            latent_dim,
            beta: DEFAULT_BETA,
        })
    }

    fn make_level<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        spec: LevelSpec,
        codebook_size: usize,
        with_merge: bool,
    ) -> Result<HierarchyLevel> {
        ensure!(codebook_size >= 1, "codebook needs at least one entry");
        let c = spec.latent_dim;
        let codebook = spec.codebook_name();
        let merge = if with_merge {
            Some(Conv2d::new(store, rng, format!("merge{}", spec.id), 2 * c, c, 1, 1)?)
        } else {
            None
        };
        let aren = ArenLevel::new(store, rng, spec, c)?;
        store.insert(
            codebook.clone(),
            Tensor::from_fn(&[codebook_size, c], |_| T::lit(rng.random_range(-1.0..1.0))),
            true,
        )?;
        Ok(HierarchyLevel {
            aren,
            merge,
            codebook,
            codebook_size,
        })
    }

    /// Insert a new bottom level at twice the resolution of the current
    /// bottom. The old bottom's quantised output is upsampled and fused into it.
    pub fn add_lower_level<T: Scalar, R: Rng + ?Sized>(
        &mut self,
        store: &mut ParamStore<T>,
        rng: &mut R,
        spec: LevelSpec,
        codebook_size: usize,
    ) -> Result<()> {
        let bottom = &self.levels[0].aren.spec;
        ensure!(
            spec.downsample * 2 == bottom.downsample,
            "new level must sit at twice the resolution of the bottom level (downsample {} vs {})",
            spec.downsample,
            bottom.downsample
        );
        ensure!(
            spec.latent_dim == self.latent_dim,
            "latent width {} differs from the hierarchy's {}",
            spec.latent_dim,
            self.latent_dim
        );
        ensure!(
            self.levels.iter().all(|l| l.aren.spec.id != spec.id),
            "level id {} already present",
            spec.id
        );
        let level = Self::make_level(store, rng, spec, codebook_size, true)?;
        self.levels.insert(0, level);
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn bottom_downsample(&self) -> usize {
        self.levels[0].aren.spec.downsample
    }

    pub fn param_count(&self) -> usize {
        self.levels.iter().map(HierarchyLevel::param_count).sum()
    }

    /// Encode the shared base output `base` through every level.
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        base: Var,
        mode: Mode,
        bottleneck: Bottleneck,
    ) -> Result<HierarchyOutput> {
        let n = self.levels.len();
        let mut latents = vec![None; n];
        let mut quantized = vec![None; n];
        let mut indices = vec![Vec::new(); n];
        let mut losses = vec![None; n];
        let mut upper: Option<(Var, usize)> = None;
        for k in (0..n).rev() {
            let level = &self.levels[k];
            let a = level.aren.forward(g, store, base, mode)?;
            let z = match (upper, &level.merge) {
                (None, _) => a,
                (Some((q, up_ds)), Some(merge)) => {
                    let factor = up_ds / level.aren.spec.downsample;
                    let r = g.resize_nearest(q, factor)?;
                    let cat = g.concat_channels(a, r)?;
                    merge.forward(g, store, cat)?
                }
                (Some(_), None) => unreachable!("only the top level lacks a merge"),
            };
            let q = match bottleneck {
                Bottleneck::Quantize => {
                    let table = g.param(store, &level.codebook)?;
                    let (idx, q) = quantize_node(g, z, table)?;
                    losses[k] = Some(vq_losses(g, z, q, self.beta)?);
                    indices[k] = idx;
                    straight_through(g, z, q)?
                }
                Bottleneck::Bypass => z,
            };
            latents[k] = Some(z);
            quantized[k] = Some(q);
            upper = Some((q, level.aren.spec.downsample));
        }
        Ok(HierarchyOutput {
            latents: latents.into_iter().map(|v| v.expect("filled")).collect(),
            quantized: quantized.into_iter().map(|v| v.expect("filled")).collect(),
            indices,
            vq_losses: losses.into_iter().flatten().collect(),
        })
    }
}

/// Mirror of the encoder: 1×1 projection, an identity block at the latent
/// resolution, then ×2 nearest upsampling with an identity block per step;
/// the last step ends in a 3×3 convolution to RGB and a sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub input: Conv2d,
    pub blocks: Vec<IdResBlock>,
    pub output: Conv2d,
}

impl Decoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        latent_dim: usize,
        width: usize,
        upsample_steps: usize,
        out_channels: usize,
    ) -> Result<Self> {
        ensure!(upsample_steps >= 1, "decoder needs at least one upsampling step");
        let input = Conv2d::new(store, rng, "dec.input", latent_dim, width, 1, 1)?;
        let blocks = (0..upsample_steps)
            .map(|i| IdResBlock::new(store, rng, &format!("dec.block{i}"), width, BlockConfig::identity(width)))
            .collect::<Result<Vec<_>>>()?;
        let output = Conv2d::new(store, rng, "dec.output", width, out_channels, 3, 1)?;
        Ok(Self { input, blocks, output })
    }

    pub fn upsample_steps(&self) -> usize {
        self.blocks.len()
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, z: Var, mode: Mode) -> Result<Var> {
        let mut h = self.input.forward(g, store, z)?;
        for (i, block) in self.blocks.iter().enumerate() {
            if i > 0 {
                h = g.resize_nearest(h, 2)?;
            }
            h = block.forward(g, store, h, mode)?;
        }
        h = g.resize_nearest(h, 2)?;
        h = self.output.forward(g, store, h)?;
        g.sigmoid(h)
    }

    pub fn param_count(&self) -> usize {
        self.input.param_count()
            + self.blocks.iter().map(IdResBlock::param_count).sum::<usize>()
            + self.output.param_count()
    }
}

/// Model hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    /// 3 for RGB, 4 when a mask channel accompanies masked inputs.
    pub in_channels: usize,
    pub latent_dim: usize,
    pub codebook_size: usize,
    pub levels: usize,
    pub attention: bool,
    pub base_filters: Vec<usize>,
    /// Residual filter widths per level, finest first.
    pub level_filters: Vec<Vec<usize>>,
    pub decoder_width: usize,
    pub beta: f64,
    pub max_attention_pixels: usize,
}

impl ModelConfig {
    /// Reference architecture at 256×256 with 256-wide latents.
    pub fn reference(levels: usize, attention: bool) -> Self {
        Self {
            image_size: 256,
            in_channels: 3,
            latent_dim: 256,
            codebook_size: 128,
            levels,
            attention,
            base_filters: vec![128; 3],
            level_filters: (1..=3).map(|id| LevelSpec::reference(id, 256, attention).filters).collect(),
            decoder_width: 128,
            beta: DEFAULT_BETA,
            max_attention_pixels: DEFAULT_MAX_PIXELS,
        }
    }

    /// Laptop-scale default: 32×32 images, `c = 64`, `K = 64`.
    pub fn desk(levels: usize, attention: bool) -> Self {
        Self {
            image_size: 32,
            latent_dim: 64,
            codebook_size: 64,
            ..Self::reference(levels, attention)
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!((1..=3).contains(&self.levels), "levels must be 1..=3, got {}", self.levels);
        ensure!(self.codebook_size >= 2, "codebook size must be at least 2");
        ensure!(
            self.in_channels == 3 || self.in_channels == 4,
            "input channels must be 3 or 4"
        );
        ensure!(self.latent_dim >= 1 && self.decoder_width >= 1, "widths must be positive");
        ensure!(
            self.level_filters.len() >= self.levels,
            "filters given for {} levels, need {}",
            self.level_filters.len(),
            self.levels
        );
        ensure!(self.base_filters.len() >= 2, "base encoder needs at least two blocks");
        let top = self.level_spec(self.levels).downsample * 4;
        ensure!(
            self.image_size % top == 0,
            "image size {} must be divisible by {top} for {} levels",
            self.image_size,
            self.levels
        );
        Ok(())
    }

    pub fn level_spec(&self, id: usize) -> LevelSpec {
        LevelSpec {
            id,
            filters: self.level_filters[id - 1].clone(),
            downsample: 1 << id,
            latent_dim: self.latent_dim,
            attention: self.attention,
        }
    }
}

/// Everything one training step needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub base: Var,
    pub hierarchy: HierarchyOutput,
    pub recon: Var,
}

/// Parameter totals per module.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub base: usize,
    pub levels: Vec<(usize, usize)>,
    pub decoder: usize,
}

impl ParamBreakdown {
    pub fn total(&self) -> usize {
        self.base + self.levels.iter().map(|(_, c)| c).sum::<usize>() + self.decoder
    }
}

/// Base encoder → hierarchy → quantisation → decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentiveVqVae {
    pub config: ModelConfig,
    pub base: BaseEncoder,
    pub hierarchy: Hierarchy,
    pub decoder: Decoder,
}

impl AttentiveVqVae {
    /// Build the model and register its parameters into a fresh store.
    pub fn new<T: Scalar, R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let base = BaseEncoder::new(&mut store, rng, config.in_channels, &config.base_filters, config.latent_dim)?;
        let mut hierarchy = Hierarchy::new(&mut store, rng, config.level_spec(config.levels), config.codebook_size)?;
        for id in (1..config.levels).rev() {
            hierarchy.add_lower_level(&mut store, rng, config.level_spec(id), config.codebook_size)?;
        }
        hierarchy.beta = config.beta;
        let steps = (base.downsample * hierarchy.bottom_downsample()).trailing_zeros() as usize;
        let decoder = Decoder::new(&mut store, rng, config.latent_dim, config.decoder_width, steps, 3)?;
        for level in &mut hierarchy.levels {
            if let Some(att) = &mut level.aren.attention {
                att.max_pixels = config.max_attention_pixels;
            }
        }
        Ok((
            Self {
                config,
                base,
                hierarchy,
                decoder,
            },
            store,
        ))
    }

    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        img: Var,
        mode: Mode,
        bottleneck: Bottleneck,
    ) -> Result<(Var, HierarchyOutput)> {
        let (_, h, w, ch) = g.value(img).dims4()?;
        ensure!(
            ch == self.config.in_channels,
            "model expects {} input channels, got {ch}",
            self.config.in_channels
        );
        ensure!(
            h == self.config.image_size && w == self.config.image_size,
            "model expects {0}x{0} images, got {h}x{w}",
            self.config.image_size
        );
        let base = self.base.forward(g, store, img, mode)?;
        let out = self.hierarchy.encode(g, store, base, mode, bottleneck)?;
        Ok((base, out))
    }

    pub fn decode<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, z: Var, mode: Mode) -> Result<Var> {
        self.decoder.forward(g, store, z, mode)
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        img: Var,
        mode: Mode,
        bottleneck: Bottleneck,
    ) -> Result<ForwardOutput> {
        let (base, hierarchy) = self.encode(g, store, img, mode, bottleneck)?;
        let recon = self.decode(g, store, hierarchy.bottom(), mode)?;
        Ok(ForwardOutput { base, hierarchy, recon })
    }

    /// Reconstruct a batch without recording anything needed for training.
    pub fn reconstruct<T: Scalar>(&self, store: &ParamStore<T>, batch: &Tensor<T>) -> Result<(Tensor<T>, Vec<Vec<usize>>)> {
        let mut g = Graph::new();
        let x = g.constant(batch.clone())?;
        let out = self.forward(&mut g, store, x, Mode::Eval, Bottleneck::Quantize)?;
        Ok((g.value(out.recon).clone(), out.hierarchy.indices))
    }

    /// Seed every codebook with latents drawn from `batch`, top level first
    /// so lower levels see quantised upper levels.
    pub fn init_codebooks<T: Scalar, R: Rng + ?Sized>(
        &self,
        store: &mut ParamStore<T>,
        batch: &Tensor<T>,
        rng: &mut R,
    ) -> Result<()> {
        for k in (0..self.hierarchy.depth()).rev() {
            let mut g = Graph::new();
            let x = g.constant(batch.clone())?;
            let (_, out) = self.encode(&mut g, store, x, Mode::Train, Bottleneck::Quantize)?;
            let level = &self.hierarchy.levels[k];
            let rows = sample_rows(g.value(out.latents[k]), level.codebook_size, rng)?;
            store.get_mut(&level.codebook)?.tensor = rows;
        }
        Ok(())
    }

    pub fn param_breakdown(&self) -> ParamBreakdown {
        ParamBreakdown {
            base: self.base.param_count(),
            levels: self
                .hierarchy
                .levels
                .iter()
                .map(|l| (l.aren.spec.id, l.param_count()))
                .collect(),
            decoder: self.decoder.param_count(),
        }
    }
}
