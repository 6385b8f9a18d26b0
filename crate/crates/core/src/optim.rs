use indexmap::IndexMap;

use crate::error::{ensure, Result};
use crate::params::ParamStore;
use crate::tensor::Scalar;

/// Adam with bias correction. Moments are keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    moments: IndexMap<String, Moments<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub first: Vec<T>,
    pub second: Vec<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: IndexMap::new(),
        }
    }

    pub fn moments(&self) -> impl Iterator<Item = (&str, &Moments<T>)> {
        self.moments.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn set_moments(&mut self, name: &str, moments: Moments<T>) {
        self.moments.insert(name.to_owned(), moments);
    }
}

/// One Adam update over every trainable entry of `params`, then clears
/// their gradients. Fails without touching anything if a gradient is missing.
pub fn adam_step<T: Scalar>(params: &mut ParamStore<T>, state: &mut AdamState<T>) -> Result<()> {
    let missing: Vec<&str> = params
        .iter()
        .filter(|(_, p)| p.trainable && p.tensor.grad().is_none())
        .map(|(n, _)| n)
        .collect();
    ensure!(
        missing.is_empty(),
        "adam_step: no gradient for {} parameter(s): {}",
        missing.len(),
        missing.join(", ")
    );
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(state.beta1), T::lit(state.beta2));
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    let lr = T::lit(state.lr);
    let eps = T::lit(state.eps);
    for (name, p) in params.iter_mut() {
        if !p.trainable {
            continue;
        }
        let grad = p.tensor.take_grad().expect("checked above");
        let len = grad.len();
        let m = state
            .moments
            .entry(name.to_owned())
            .or_insert_with(|| Moments {
                first: vec![T::zero(); len],
                second: vec![T::zero(); len],
            });
        ensure!(
            m.first.len() == len && m.second.len() == len,
            "adam moments for {name:?} do not match its shape"
        );
        for (((w, g), m1), m2) in p
            .tensor
            .data_mut()
            .iter_mut()
            .zip(&grad)
            .zip(m.first.iter_mut())
            .zip(m.second.iter_mut())
        {
            *m1 = b1 * *m1 + (T::one() - b1) * *g;
            *m2 = b2 * *m2 + (T::one() - b2) * *g * *g;
            let mhat = *m1 / c1;
            let vhat = *m2 / c2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
