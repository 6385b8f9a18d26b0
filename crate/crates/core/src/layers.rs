//! Parameterised layers. A layer only remembers parameter names and
//! hyper-parameters; the tensors live in a [`ParamStore`].

use rand::Rng;

use crate::error::{ensure, Result};
use crate::graph::{BatchStats, Graph, Var};
use crate::kernels::Padding;
use crate::params::{fan_in_uniform, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Batch norm uses batch statistics in `Train` and running statistics in `Eval`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub name: String,
    pub kernel: (usize, usize),
    pub fin: usize,
    pub fout: usize,
    pub stride: (usize, usize),
    pub padding: Padding,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: impl Into<String>,
        fin: usize,
        fout: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        ensure!(
            fin > 0 && fout > 0 && kernel > 0 && stride > 0,
            "conv layer dimensions must be positive"
        );
        let name = name.into();
        let fan_in = kernel * kernel * fin;
        store.insert(
            format!("{name}.w"),
            fan_in_uniform(rng, &[kernel, kernel, fin, fout], fan_in),
            true,
        )?;
        store.insert(format!("{name}.b"), Tensor::zeros(&[fout]), true)?;
        Ok(Self {
            name,
            kernel: (kernel, kernel),
            fin,
            fout,
            stride: (stride, stride),
            padding: Padding::Same,
        })
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, &self.weight_name())?;
        let b = g.param(store, &self.bias_name())?;
        g.conv2d(x, w, Some(b), self.stride, self.padding)
    }

    pub fn param_count(&self) -> usize {
        self.kernel.0 * self.kernel.1 * self.fin * self.fout + self.fout
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: impl Into<String>, channels: usize) -> Result<Self> {
        let name = name.into();
        store.insert(format!("{name}.gamma"), Tensor::full(&[channels], T::one()), true)?;
        store.insert(format!("{name}.beta"), Tensor::zeros(&[channels]), true)?;
        store.insert(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false)?;
        store.insert(format!("{name}.running_var"), Tensor::full(&[channels], T::one()), false)?;
        Ok(Self { name, channels })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let gamma = g.param(store, &format!("{}.gamma", self.name))?;
        let beta = g.param(store, &format!("{}.beta", self.name))?;
        match mode {
            Mode::Train => {
                let (y, stats) = g.batch_norm_train(x, gamma, beta, BN_EPS)?;
                g.record_bn_update(&self.name, stats);
                Ok(y)
            }
            Mode::Eval => {
                let mean = store.tensor(&format!("{}.running_mean", self.name))?;
                let var = store.tensor(&format!("{}.running_var", self.name))?;
                g.batch_norm_eval(x, gamma, beta, mean.data(), var.data(), BN_EPS)
            }
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }
}

/// Fold recorded batch statistics into the running averages:
/// `running = momentum · running + (1 − momentum) · batch`.
pub fn apply_bn_updates<T: Scalar>(store: &mut ParamStore<T>, updates: Vec<(String, BatchStats<T>)>) -> Result<()> {
    let m = T::lit(BN_MOMENTUM);
    let one_m = T::one() - m;
    for (name, stats) in updates {
        for (suffix, batch) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
            let t = &mut store.get_mut(&format!("{name}.{suffix}"))?.tensor;
            ensure!(t.len() == batch.len(), "running statistic size mismatch for {name}");
            for (r, b) in t.data_mut().iter_mut().zip(batch) {
                *r = m * *r + one_m * *b;
            }
        }
    }
    Ok(())
}
