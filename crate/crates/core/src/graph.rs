//! A per-forward-pass tape for reverse-mode differentiation.
//!
//! Every operation appends a node holding its output and whatever it needs
//! for the backward pass. [`Graph::backward`] walks the tape in reverse and
//! returns gradients for the leaves that asked for them.

use crate::error::{ensure, Error, Result};
use crate::kernels::{self, ConvGeometry, Padding};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Detach,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geo: ConvGeometry,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    LeakyRelu {
        x: Var,
        alpha: T,
    },
    Sigmoid {
        x: Var,
    },
    ResizeNearest {
        x: Var,
        factor: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: T,
    },
    Square {
        x: Var,
    },
    Abs {
        x: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Reshape {
        x: Var,
    },
    Bmm {
        a: Var,
        b: Var,
        tb: bool,
    },
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    StraightThrough {
        z: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    BceWithLogits {
        x: Var,
        target: T,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Detach => "detach",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::ResizeNearest { .. } => "resize_nearest",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Square { .. } => "square",
            Op::Abs { .. } => "abs",
            Op::Concat { .. } => "concat",
            Op::Reshape { .. } => "reshape",
            Op::Bmm { .. } => "bmm",
            Op::Gather { .. } => "gather",
            Op::StraightThrough { .. } => "straight_through",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::BceWithLogits { .. } => "bce_with_logits",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Debug)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
    bn_updates: Vec<(String, BatchStats<T>)>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            bn_updates: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "{} produced a non-finite value (node {})",
                op.name(),
                self.nodes.len()
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Operation names in recording order, for structural assertions.
    pub fn op_trace(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient [`Graph::backward`] reports.
    pub fn variable(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Leaf, true)
    }

    /// Bind a stored parameter as a leaf. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some((_, v)) = self.params.iter().find(|(n, _)| n == name) {
            return Ok(*v);
        }
        let p = store.get(name)?;
        let mut t = p.tensor.clone();
        t.clear_grad();
        let v = self.push(t, Op::Leaf, p.trainable)?;
        self.params.push((name.to_owned(), v));
        Ok(v)
    }

    pub fn bound_params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn record_bn_update(&mut self, name: &str, stats: BatchStats<T>) {
        self.bn_updates.push((name.to_owned(), stats));
    }

    pub fn take_bn_updates(&mut self) -> Vec<(String, BatchStats<T>)> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Copy of `x` cut off from the tape.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).clone();
        self.push(t, Op::Detach, false)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Var> {
        let (batch, h, wd, fin) = self.value(x).dims4()?;
        let (kh, kw, kfin, fout) = self.value(w).dims4()?;
        ensure!(
            kfin == fin,
            "conv2d kernel expects {kfin} input channels, input has {fin}"
        );
        if let Some(b) = b {
            ensure!(
                self.shape(b) == [fout],
                "conv2d bias shape {:?} does not match {fout} filters",
                self.shape(b)
            );
        }
        ensure!(
            self.value(x).is_finite(),
            "conv2d input contains non-finite values"
        );
        let geo = ConvGeometry::new((h, wd, fin), (kh, kw), stride, padding).ok_or_else(|| {
            Error::contract(format!(
                "conv2d geometry invalid: input {h}x{wd}, kernel {kh}x{kw}, stride {stride:?}, {padding:?}"
            ))
        })?;
        let out = kernels::conv_forward(
            &geo,
            batch,
            fout,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let t = Tensor::new(&[batch, geo.oh, geo.ow, fout], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(t, Op::Conv2d { x, w, b, geo }, rg)
    }

    fn channel_count(&self, x: Var) -> Result<usize> {
        self.shape(x)
            .last()
            .copied()
            .ok_or_else(|| Error::contract("empty shape"))
    }

    /// Training-mode batch norm: normalises each channel by the statistics
    /// over all other axes. Also returns those statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats<T>)> {
        let f = self.channel_count(x)?;
        ensure!(
            self.shape(gamma) == [f] && self.shape(beta) == [f],
            "batch_norm gamma/beta must have length {f}"
        );
        let xd = self.value(x).data();
        let n = xd.len() / f;
        ensure!(n > 0, "batch_norm over an empty batch");
        let nf = T::lit(n as f64);
        let mut mean = vec![T::zero(); f];
        for px in xd.chunks_exact(f) {
            for (m, v) in mean.iter_mut().zip(px) {
                *m += *v;
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / nf);
        let mut var = vec![T::zero(); f];
        for px in xd.chunks_exact(f) {
            for c in 0..f {
                let d = px[c] - mean[c];
                var[c] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v = *v / nf);
        let inv_std: Vec<T> = var.iter().map(|v| (*v + T::lit(eps)).sqrt().recip()).collect();
        let (y, xhat) = self.bn_apply(x, gamma, beta, &mean, &inv_std);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let out = self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: true,
            },
            rg,
        )?;
        Ok((out, BatchStats { mean, var }))
    }

    /// Inference-mode batch norm with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let f = self.channel_count(x)?;
        ensure!(
            self.shape(gamma) == [f] && self.shape(beta) == [f] && mean.len() == f && var.len() == f,
            "batch_norm parameters must have length {f}"
        );
        let inv_std: Vec<T> = var.iter().map(|v| (*v + T::lit(eps)).sqrt().recip()).collect();
        let (y, xhat) = self.bn_apply(x, gamma, beta, mean, &inv_std);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: false,
            },
            rg,
        )
    }

    fn bn_apply(&self, x: Var, gamma: Var, beta: Var, mean: &[T], inv_std: &[T]) -> (Tensor<T>, Vec<T>) {
        let xv = self.value(x);
        let f = mean.len();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut y = Vec::with_capacity(xv.len());
        for px in xv.data().chunks_exact(f) {
            for c in 0..f {
                let h = (px[c] - mean[c]) * inv_std[c];
                xhat.push(h);
                y.push(g[c] * h + bt[c]);
            }
        }
        (Tensor::new(xv.shape(), y).expect("same shape"), xhat)
    }

    /// `max(x, alpha·x)`; the derivative at exactly zero is `alpha`.
    pub fn leaky_relu(&mut self, x: Var, alpha: f64) -> Result<Var> {
        ensure!((0.0..1.0).contains(&alpha), "leaky slope {alpha} outside [0,1)");
        let a = T::lit(alpha);
        let t = self.value(x).map(|v| if v > T::zero() { v } else { a * v });
        let rg = self.rg(x);
        self.push(t, Op::LeakyRelu { x, alpha: a }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(kernels::sigmoid);
        let rg = self.rg(x);
        self.push(t, Op::Sigmoid { x }, rg)
    }

    /// Nearest-neighbour upsampling of both spatial axes by `factor`.
    pub fn resize_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        ensure!(factor >= 1, "resize factor must be at least 1");
        let (b, h, w, f) = self.value(x).dims4()?;
        let (oh, ow) = (h * factor, w * factor);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(b * oh * ow * f);
        for bi in 0..b {
            for oy in 0..oh {
                let row = &src[(bi * h + oy / factor) * w * f..][..w * f];
                for ox in 0..ow {
                    out.extend_from_slice(&row[(ox / factor) * f..][..f]);
                }
            }
        }
        let t = Tensor::new(&[b, oh, ow, f], out)?;
        let rg = self.rg(x);
        self.push(t, Op::ResizeNearest { x, factor }, rg)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        ensure!(
            self.shape(a) == self.shape(b),
            "{what}: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Add { a, b }, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Sub { a, b }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let t = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Mul { a, b }, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = T::lit(s);
        let t = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(t, Op::Scale { x, s }, rg)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v * v);
        let rg = self.rg(x);
        self.push(t, Op::Square { x }, rg)
    }

    /// `|x|`, with derivative 0 at 0.
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.abs());
        let rg = self.rg(x);
        self.push(t, Op::Abs { x }, rg)
    }

    /// Concatenate two rank-4 tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, ha, wa, fa) = self.value(a).dims4()?;
        let (bb, hb, wb, fb) = self.value(b).dims4()?;
        ensure!(
            (ba, ha, wa) == (bb, hb, wb),
            "concat: leading dims differ {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = Vec::with_capacity(ad.len() + bd.len());
        for (pa, pb) in ad.chunks_exact(fa).zip(bd.chunks_exact(fb)) {
            out.extend_from_slice(pa);
            out.extend_from_slice(pb);
        }
        let t = Tensor::new(&[ba, ha, wa, fa + fb], out)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Concat { a, b }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        self.push(t, Op::Reshape { x }, rg)
    }

    /// Batched matrix product of `a: (B, M, K)` with `b: (B, K, N)`, or with
    /// `b: (B, N, K)` read transposed when `transpose_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        ensure!(
            sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0],
            "bmm expects matching rank-3 operands, got {sa:?} and {sb:?}"
        );
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if transpose_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        ensure!(k == kb, "bmm inner dimensions differ: {sa:?} x {sb:?}");
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &ad[i * m * k..(i + 1) * m * k],
                false,
                &bd[i * k * n..(i + 1) * k * n],
                transpose_b,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let t = Tensor::new(&[batch, m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(
            t,
            Op::Bmm {
                a,
                b,
                tb: transpose_b,
            },
            rg,
        )
    }

    /// Row lookup into a `(K, c)` table; output has `shape` with `c` last.
    pub fn gather_rows(&mut self, table: Var, indices: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        ensure!(ts.len() == 2, "gather table must be rank 2, got {ts:?}");
        let (k, c) = (ts[0], ts[1]);
        ensure!(
            shape.last() == Some(&c) && shape.iter().product::<usize>() == indices.len() * c,
            "gather output shape {shape:?} incompatible with {} rows of width {c}",
            indices.len()
        );
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in &indices {
            ensure!(i < k, "gather index {i} out of range {k}");
            out.extend_from_slice(&td[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(table);
        self.push(t, Op::Gather { table, indices }, rg)
    }

    /// Forward value of `q`, backward identity onto `z`. Nothing reaches `q`.
    pub fn straight_through(&mut self, z: Var, q: Var) -> Result<Var> {
        self.same_shape(z, q, "straight_through")?;
        let t = self.value(q).clone();
        let rg = self.rg(z);
        self.push(t, Op::StraightThrough { z }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        ensure!(!v.is_empty(), "mean of an empty tensor");
        let s: T = v.data().iter().copied().sum::<T>() / T::lit(v.len() as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean { x }, rg)
    }

    /// Mean binary cross-entropy of logits `x` against a constant label.
    pub fn bce_with_logits(&mut self, x: Var, target: f64) -> Result<Var> {
        let t = T::lit(target);
        let v = self.value(x);
        ensure!(!v.is_empty(), "bce of an empty tensor");
        let total: T = v
            .data()
            .iter()
            .map(|&l| l.max(T::zero()) - l * t + kernels::log1p_exp_neg_abs(l))
            .sum();
        let s = total / T::lit(v.len() as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::BceWithLogits { x, target: t }, rg)
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        ensure!(
            self.value(loss).len() == 1,
            "backward needs a scalar loss, got shape {:?}",
            self.shape(loss)
        );
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop(&node.op, i, &gy, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, op: &Op<T>, i: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let y = &self.nodes[i].value;
        match op {
            Op::Leaf | Op::Detach => {}
            Op::Conv2d { x, w, b, geo } => {
                let batch = self.shape(*x)[0];
                let fout = self.shape(*w)[3];
                let mut dx = self.rg(*x).then(|| vec![T::zero(); self.value(*x).len()]);
                let mut dw = self.rg(*w).then(|| vec![T::zero(); self.value(*w).len()]);
                let mut db = b
                    .filter(|b| self.rg(*b))
                    .map(|_| vec![T::zero(); fout]);
                kernels::conv_backward(
                    geo,
                    batch,
                    fout,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gy,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                accumulate_owned(grads, *x, dx);
                accumulate_owned(grads, *w, dw);
                if let Some(b) = b {
                    accumulate_owned(grads, *b, db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let f = inv_std.len();
                let n = xhat.len() / f;
                let mut dgamma = vec![T::zero(); f];
                let mut dbeta = vec![T::zero(); f];
                for (g, h) in gy.chunks_exact(f).zip(xhat.chunks_exact(f)) {
                    for c in 0..f {
                        dgamma[c] += g[c] * h[c];
                        dbeta[c] += g[c];
                    }
                }
                if self.rg(*x) {
                    let gam = self.value(*gamma).data();
                    let mut dx = vec![T::zero(); xhat.len()];
                    if *batch_stats {
                        // dxhat = gy * gamma; dx = inv_std/N * (N dxhat - sum dxhat - xhat * sum(dxhat xhat))
                        let nf = T::lit(n as f64);
                        for (j, (g, h)) in gy.chunks_exact(f).zip(xhat.chunks_exact(f)).enumerate() {
                            for c in 0..f {
                                let sum_d = dbeta[c] * gam[c];
                                let sum_dh = dgamma[c] * gam[c];
                                dx[j * f + c] = inv_std[c] / nf
                                    * (nf * g[c] * gam[c] - sum_d - h[c] * sum_dh);
                            }
                        }
                    } else {
                        for (j, g) in gy.chunks_exact(f).enumerate() {
                            for c in 0..f {
                                dx[j * f + c] = g[c] * gam[c] * inv_std[c];
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if self.rg(*gamma) {
                    accumulate(grads, *gamma, dgamma);
                }
                if self.rg(*beta) {
                    accumulate(grads, *beta, dbeta);
                }
            }
            Op::LeakyRelu { x, alpha } => {
                let xd = self.value(*x).data();
                let d = gy
                    .iter()
                    .zip(xd)
                    .map(|(&g, &v)| if v > T::zero() { g } else { g * *alpha })
                    .collect();
                accumulate(grads, *x, d);
            }
            Op::Sigmoid { x } => {
                let d = gy
                    .iter()
                    .zip(y.data())
                    .map(|(&g, &s)| g * s * (T::one() - s))
                    .collect();
                accumulate(grads, *x, d);
            }
            Op::ResizeNearest { x, factor } => {
                let (b, h, w, f) = self.value(*x).dims4().expect("rank 4");
                let (oh, ow) = (h * factor, w * factor);
                let mut d = vec![T::zero(); b * h * w * f];
                for bi in 0..b {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let src = &gy[((bi * oh + oy) * ow + ox) * f..][..f];
                            let dst = &mut d[((bi * h + oy / factor) * w + ox / factor) * f..][..f];
                            for (a, s) in dst.iter_mut().zip(src) {
                                *a += *s;
                            }
                        }
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::Add { a, b } => {
                if self.rg(*a) {
                    accumulate(grads, *a, gy.to_vec());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, gy.to_vec());
                }
            }
            Op::Sub { a, b } => {
                if self.rg(*a) {
                    accumulate(grads, *a, gy.to_vec());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, gy.iter().map(|&g| -g).collect());
                }
            }
            Op::Mul { a, b } => {
                if self.rg(*a) {
                    let d = gy.iter().zip(self.value(*b).data()).map(|(&g, &v)| g * v).collect();
                    accumulate(grads, *a, d);
                }
                if self.rg(*b) {
                    let d = gy.iter().zip(self.value(*a).data()).map(|(&g, &v)| g * v).collect();
                    accumulate(grads, *b, d);
                }
            }
            Op::Scale { x, s } => {
                accumulate(grads, *x, gy.iter().map(|&g| g * *s).collect());
            }
            Op::Square { x } => {
                let two = T::lit(2.0);
                let d = gy
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&g, &v)| g * two * v)
                    .collect();
                accumulate(grads, *x, d);
            }
            Op::Abs { x } => {
                let d = gy
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&g, &v)| {
                        if v > T::zero() {
                            g
                        } else if v < T::zero() {
                            -g
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                accumulate(grads, *x, d);
            }
            Op::Concat { a, b } => {
                let fa = *self.shape(*a).last().expect("rank 4");
                let fb = *self.shape(*b).last().expect("rank 4");
                let mut da = Vec::with_capacity(self.value(*a).len());
                let mut db = Vec::with_capacity(self.value(*b).len());
                for px in gy.chunks_exact(fa + fb) {
                    da.extend_from_slice(&px[..fa]);
                    db.extend_from_slice(&px[fa..]);
                }
                if self.rg(*a) {
                    accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    accumulate(grads, *b, db);
                }
            }
            Op::Reshape { x } => accumulate(grads, *x, gy.to_vec()),
            Op::Bmm { a, b, tb } => {
                let sa = self.shape(*a);
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = y.shape()[2];
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                if self.rg(*a) {
                    // dA = dC · op(B)ᵀ
                    let mut da = vec![T::zero(); ad.len()];
                    for i in 0..batch {
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            &gy[i * m * n..(i + 1) * m * n],
                            false,
                            &bd[i * k * n..(i + 1) * k * n],
                            !*tb,
                            T::zero(),
                            &mut da[i * m * k..(i + 1) * m * k],
                        );
                    }
                    accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut dbv = vec![T::zero(); bd.len()];
                    for i in 0..batch {
                        let g = &gy[i * m * n..(i + 1) * m * n];
                        let av = &ad[i * m * k..(i + 1) * m * k];
                        let dst = &mut dbv[i * k * n..(i + 1) * k * n];
                        if *tb {
                            // B stored (N, K): dB = dCᵀ · A
                            T::gemm(n, m, k, T::one(), g, true, av, false, T::zero(), dst);
                        } else {
                            // B stored (K, N): dB = Aᵀ · dC
                            T::gemm(k, m, n, T::one(), av, true, g, false, T::zero(), dst);
                        }
                    }
                    accumulate(grads, *b, dbv);
                }
            }
            Op::Gather { table, indices } => {
                let c = self.shape(*table)[1];
                let mut d = vec![T::zero(); self.value(*table).len()];
                for (j, &row) in indices.iter().enumerate() {
                    for (dst, src) in d[row * c..(row + 1) * c].iter_mut().zip(&gy[j * c..(j + 1) * c]) {
                        *dst += *src;
                    }
                }
                accumulate(grads, *table, d);
            }
            Op::StraightThrough { z } => accumulate(grads, *z, gy.to_vec()),
            Op::Sum { x } => {
                let len = self.value(*x).len();
                accumulate(grads, *x, vec![gy[0]; len]);
            }
            Op::Mean { x } => {
                let len = self.value(*x).len();
                accumulate(grads, *x, vec![gy[0] / T::lit(len as f64); len]);
            }
            Op::BceWithLogits { x, target } => {
                let xd = self.value(*x).data();
                let scale = gy[0] / T::lit(xd.len() as f64);
                let d = xd
                    .iter()
                    .map(|&l| (kernels::sigmoid(l) - *target) * scale)
                    .collect();
                accumulate(grads, *x, d);
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, d: Vec<T>) {
    match &mut grads[v.0] {
        Some(g) => g.iter_mut().zip(&d).for_each(|(a, b)| *a += *b),
        slot @ None => *slot = Some(d),
    }
}

fn accumulate_owned<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, d: Option<Vec<T>>) {
    if let Some(d) = d {
        accumulate(grads, v, d);
    }
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Store gradients of every trainable parameter bound on `graph` into
    /// `store`. Bound parameters the loss does not reach get zeros.
    pub fn write_to(mut self, graph: &Graph<T>, store: &mut ParamStore<T>) -> Result<()> {
        for (name, v) in graph.bound_params() {
            // parameters bound from another store are left to that store
            let Ok(p) = store.get_mut(name) else { continue };
            if !p.trainable {
                continue;
            }
            let g = self.grads[v.0]
                .take()
                .unwrap_or_else(|| vec![T::zero(); p.tensor.len()]);
            p.tensor.set_grad(g)?;
        }
        Ok(())
    }
}
