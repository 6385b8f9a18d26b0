//! Residual pixel attention.
//!
//! Both inputs are projected to `c` channels by 1×1 convolutions, every
//! pair of pixels gets a sigmoid affinity `W[i, j] = σ(x_i · y_j)`, and the
//! projected `x` receives the affinity-weighted sum of projected `y`:
//!
//! ```text
//! x' = g1(x), y' = g2(y)
//! out_i = x'_i + Σ_j σ(x'_i · y'_j) y'_j
//! ```
//!
//! The weights are sigmoids, not a softmax, so rows of `W` need not sum to
//! one, and there is no `1/√c` temperature. Passing `y = x` gives
//! self-attention.

use rand::Rng;

use crate::error::{ensure, Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::Conv2d;
use crate::params::ParamStore;
use crate::tensor::Scalar;

/// Largest `h·w` the dense `(h·w)²` affinity matrix may cover by default.
pub const DEFAULT_MAX_PIXELS: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct PixelAttention {
    pub g1: Conv2d,
    pub g2: Conv2d,
    pub channels: usize,
    pub max_pixels: usize,
}

impl PixelAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        fin: usize,
        channels: usize,
    ) -> Result<Self> {
        Ok(Self {
            g1: Conv2d::new(store, rng, format!("{name}.g1"), fin, channels, 1, 1)?,
            g2: Conv2d::new(store, rng, format!("{name}.g2"), fin, channels, 1, 1)?,
            channels,
            max_pixels: DEFAULT_MAX_PIXELS,
        })
    }

    /// `2·(f·c + c)`.
    pub fn param_count(&self) -> usize {
        self.g1.param_count() + self.g2.param_count()
    }

    /// Attend from `x` to `y`; both `(b, h, w, f)`. Output is `(b, h, w, c)`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, y: Var) -> Result<Var> {
        let (b, h, w, _) = g.value(x).dims4()?;
        let (by, hy, wy, _) = g.value(y).dims4()?;
        ensure!(
            (b, h, w) == (by, hy, wy),
            "attention inputs differ spatially: {:?} vs {:?}",
            g.shape(x),
            g.shape(y)
        );
        let pixels = h * w;
        if pixels > self.max_pixels {
            return Err(Error::Resource(format!(
                "attention over {h}x{w} = {pixels} pixels exceeds the budget of {}",
                self.max_pixels
            )));
        }
        let c = self.channels;
        let yp = self.g2.forward(g, store, y)?;
        let xp = self.g1.forward(g, store, x)?;
        let yf = g.reshape(yp, &[b, pixels, c])?;
        let xf = g.reshape(xp, &[b, pixels, c])?;
        let weights = attention_matrix(g, xf, yf)?;
        let mixed = g.bmm(weights, yf, false)?;
        let out = g.add(xf, mixed)?;
        g.reshape(out, &[b, h, w, c])
    }
}

/// `W[b, i, j] = σ(Σ_c xp[b, i, c] · yp[b, j, c])` for flattened
/// projections `(b, h·w, c)`.
pub fn attention_matrix<T: Scalar>(g: &mut Graph<T>, xp: Var, yp: Var) -> Result<Var> {
    let (sx, sy) = (g.shape(xp), g.shape(yp));
    ensure!(
        sx.len() == 3 && sy.len() == 3 && sx[0] == sy[0] && sx[2] == sy[2],
        "attention_matrix expects (b, n, c) operands with equal b and c, got {sx:?} and {sy:?}"
    );
    let logits = g.bmm(xp, yp, true)?;
    g.sigmoid(logits)
}
