//! Reverse-mode automatic differentiation over whole tensors.
//!
//! A [`Tape`] records each operation as a node in creation order, so every
//! node's inputs precede it. [`Tape::backward`] walks the nodes in reverse
//! from a scalar loss and returns gradients for every leaf created with
//! [`Tape::param`] or [`Tape::param_ref`]. Nodes that do not depend on a
//! parameter are never visited, which is how frozen sub-networks avoid any
//! backward cost.
//!
//! Rank conventions: conv and pooling take `[C, H, W]` or batched
//! `[N, C, H, W]`; affine takes `[d]` or batched `[N, d]`; flatten keeps the
//! leading axis of a rank-4 input and flattens anything else to 1-D.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::ops::{self, ConvGeometry};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeometry,
        batch: usize,
        /// Unfolded input per sample, kept only when the kernel needs a gradient.
        cols: Option<Vec<T>>,
    },
    Affine {
        input: Var,
        weight: Var,
        bias: Var,
        rows: usize,
    },
    Relu(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Mse {
        pred: Var,
        target: Var,
    },
    SoftmaxXent {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation. Leaves may borrow tensors for the tape's lifetime,
/// so model parameters are not copied on every step.
pub struct Tape<'a, T: Scalar = f32> {
    nodes: Vec<Node<'a, T>>,
    checked: bool,
    kink_tolerance: Option<T>,
    kinks: usize,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            checked: false,
            kink_tolerance: None,
            kinks: 0,
        }
    }

    /// A tape that rejects any non-finite intermediate with [`Error::Numeric`].
    pub fn checked() -> Self {
        Self {
            checked: true,
            ..Self::new()
        }
    }

    /// Counts relu inputs within `tol` of zero and pooling windows whose top
    /// two values are within `tol`; see [`Tape::kinks`].
    pub fn track_kinks(&mut self, tol: T) {
        self.kink_tolerance = Some(tol);
    }

    /// Number of evaluations recorded at or near a point of
    /// non-differentiability since tracking was enabled.
    pub fn kinks(&self) -> usize {
        self.kinks
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn node(&self, v: Var) -> Result<&Node<'a, T>> {
        self.nodes
            .get(v.0)
            .ok_or_else(|| Error::Tape(format!("dangling node {}", v.0)))
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value produced by node {}",
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

    fn leaf_inner(&mut self, value: Cow<'a, Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.leaf_inner(Cow::Owned(value), false)
    }

    pub fn leaf_ref(&mut self, value: &'a Tensor<T>) -> Var {
        self.leaf_inner(Cow::Borrowed(value), false)
    }

    /// A leaf whose gradient [`Tape::backward`] reports.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf_inner(Cow::Owned(value), true)
    }

    pub fn param_ref(&mut self, value: &'a Tensor<T>) -> Var {
        self.leaf_inner(Cow::Borrowed(value), true)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (x, k, b) = (self.node(input)?, self.node(kernel)?, self.node(bias)?);
        let (xs, ks, bs) = (x.value.shape(), k.value.shape(), b.value.shape());
        let (batch, spatial) = match xs.len() {
            3 => (1, xs),
            4 => (xs[0], &xs[1..]),
            r => return Err(Error::dim(format!("conv2d input must be rank 3 or 4, got {r}"))),
        };
        if ks.len() != 4 {
            return Err(Error::dim(format!("conv2d kernel must be rank 4, got {ks:?}")));
        }
        if ks[1] != spatial[0] {
            return Err(Error::dim(format!(
                "conv2d channel mismatch: input has {}, kernel expects {}",
                spatial[0], ks[1]
            )));
        }
        if bs != [ks[0]] {
            return Err(Error::dim(format!("conv2d bias {bs:?} does not match {} outputs", ks[0])));
        }
        let geom = ConvGeometry {
            in_channels: spatial[0],
            height: spatial[1],
            width: spatial[2],
            out_channels: ks[0],
            kernel_h: ks[2],
            kernel_w: ks[3],
            stride,
            padding,
        };
        geom.validate()?;

        let keep_cols = k.requires_grad || b.requires_grad;
        let (patch, positions) = (geom.patch_len(), geom.positions());
        let mut out = vec![T::zero(); batch * geom.output_len()];
        let mut cols = keep_cols.then(|| vec![T::zero(); batch * patch * positions]);
        let mut scratch = vec![T::zero(); if keep_cols { 0 } else { patch * positions }];
        for n in 0..batch {
            let xn = &x.value.data()[n * geom.input_len()..(n + 1) * geom.input_len()];
            let col = match cols.as_mut() {
                Some(c) => &mut c[n * patch * positions..(n + 1) * patch * positions],
                None => &mut scratch[..],
            };
            ops::im2col(xn, &geom, col);
            ops::conv2d_from_cols(
                col,
                k.value.data(),
                b.value.data(),
                &geom,
                &mut out[n * geom.output_len()..(n + 1) * geom.output_len()],
            );
        }
        let shape = if xs.len() == 3 {
            vec![geom.out_channels, geom.out_h(), geom.out_w()]
        } else {
            vec![batch, geom.out_channels, geom.out_h(), geom.out_w()]
        };
        let requires_grad = self.needs(&[input, kernel, bias]);
        let value = Tensor::new(shape, out)?;
        self.push(
            Cow::Owned(value),
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                batch,
                cols,
            },
            requires_grad,
        )
    }

    pub fn affine(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.node(input)?, self.node(weight)?, self.node(bias)?);
        let (xs, ws) = (x.value.shape(), w.value.shape());
        if ws.len() != 2 {
            return Err(Error::dim(format!("affine weight must be rank 2, got {ws:?}")));
        }
        let (d_out, d_in) = (ws[0], ws[1]);
        let rows = match xs {
            [d] if *d == d_in => 1,
            [n, d] if *d == d_in => *n,
            _ => {
                return Err(Error::dim(format!(
                    "affine input {xs:?} does not match weight {ws:?}"
                )))
            }
        };
        if b.value.shape() != [d_out] {
            return Err(Error::dim(format!(
                "affine bias {:?} does not match {d_out} outputs",
                b.value.shape()
            )));
        }
        let mut out = vec![T::zero(); rows * d_out];
        ops::affine_forward(
            x.value.data(),
            w.value.data(),
            b.value.data(),
            rows,
            d_in,
            d_out,
            &mut out,
        );
        let shape = if xs.len() == 1 { vec![d_out] } else { vec![rows, d_out] };
        let requires_grad = self.needs(&[input, weight, bias]);
        let value = Tensor::new(shape, out)?;
        self.push(
            Cow::Owned(value),
            Op::Affine {
                input,
                weight,
                bias,
                rows,
            },
            requires_grad,
        )
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = self.node(input)?;
        let mut out = vec![T::zero(); x.value.len()];
        ops::relu(x.value.data(), &mut out);
        let kinks = self
            .kink_tolerance
            .map_or(0, |tol| x.value.data().iter().filter(|v| v.abs() <= tol).count());
        let shape = x.value.shape().to_vec();
        let requires_grad = x.requires_grad;
        self.kinks += kinks;
        self.push(Cow::Owned(Tensor::new(shape, out)?), Op::Relu(input), requires_grad)
    }

    pub fn maxpool2x2(&mut self, input: Var) -> Result<Var> {
        let x = self.node(input)?;
        let xs = x.value.shape();
        let (lead, c, h, w) = match *xs {
            [c, h, w] => (None, c, h, w),
            [n, c, h, w] => (Some(n), c, h, w),
            _ => {
                return Err(Error::dim(format!(
                    "unsupported rank {} for pooling",
                    xs.len()
                )))
            }
        };
        if h < 2 || w < 2 {
            return Err(Error::dim(format!("pooling needs at least 2x2 input, got {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let batch = lead.unwrap_or(1);
        let mut out = vec![T::zero(); batch * c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        for n in 0..batch {
            let xn = &x.value.data()[n * c * h * w..(n + 1) * c * h * w];
            let o = n * c * oh * ow..(n + 1) * c * oh * ow;
            ops::maxpool2x2(xn, c, h, w, &mut out[o.clone()], &mut argmax[o.clone()]);
            for a in &mut argmax[o] {
                *a += n * c * h * w;
            }
        }
        let mut kinks = 0;
        if let Some(tol) = self.kink_tolerance {
            let data = x.value.data();
            for (o, &best) in argmax.iter().enumerate() {
                let (n, rest) = (o / (c * oh * ow), o % (c * oh * ow));
                let (ci, oy, ox) = (rest / (oh * ow), rest % (oh * ow) / ow, rest % ow);
                let base = n * c * h * w + ci * h * w;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if idx != best && (data[best] - data[idx]).abs() <= tol {
                        kinks += 1;
                    }
                }
            }
        }
        let shape = match lead {
            Some(n) => vec![n, c, oh, ow],
            None => vec![c, oh, ow],
        };
        let requires_grad = x.requires_grad;
        self.kinks += kinks;
        self.push(
            Cow::Owned(Tensor::new(shape, out)?),
            Op::MaxPool { input, argmax },
            requires_grad,
        )
    }

    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let shape = match self.node(input)?.value.shape() {
            [n, rest @ ..] if rest.len() == 3 => vec![*n, rest.iter().product()],
            s => vec![s.iter().product()],
        };
        self.reshape(input, shape)
    }

    /// Same data, new shape with an equal element count.
    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let x = self.node(input)?;
        let requires_grad = x.requires_grad;
        let value = Tensor::new(shape, x.value.data().to_vec())?;
        self.push(Cow::Owned(value), Op::Reshape(input), requires_grad)
    }

    /// Mean squared error over every element (batch and feature axes alike).
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.node(pred)?, self.node(target)?);
        if p.value.shape() != t.value.shape() {
            return Err(Error::dim(format!(
                "mse shapes differ: {:?} vs {:?}",
                p.value.shape(),
                t.value.shape()
            )));
        }
        let loss = ops::mse(p.value.data(), t.value.data());
        let requires_grad = self.needs(&[pred, target]);
        self.push(
            Cow::Owned(Tensor::scalar(loss)),
            Op::Mse { pred, target },
            requires_grad,
        )
    }

    /// Mean over rows of `-log softmax(logits)[target]`. `logits` is `[C]`
    /// with one target or `[N, C]` with `N` targets.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let l = self.node(logits)?;
        let (rows, classes) = match *l.value.shape() {
            [c] => (1, c),
            [n, c] => (n, c),
            ref s => return Err(Error::dim(format!("softmax_xent logits must be rank 1 or 2, got {s:?}"))),
        };
        if targets.len() != rows {
            return Err(Error::dim(format!(
                "softmax_xent has {rows} rows but {} targets",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::dim(format!("target class {bad} out of range for {classes} classes")));
        }
        let mut probs = vec![T::zero(); rows * classes];
        let loss = ops::softmax_xent(l.value.data(), classes, targets, &mut probs);
        let requires_grad = l.requires_grad;
        self.push(
            Cow::Owned(Tensor::scalar(loss)),
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            requires_grad,
        )
    }

    /// Back-propagates from the scalar `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let terminal = self.node(loss)?;
        if terminal.value.len() != 1 {
            return Err(Error::Tape(format!(
                "backward needs a scalar terminal, node {} has shape {:?}",
                loss.0,
                terminal.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !terminal.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(terminal.value.shape().to_vec(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !(node.requires_grad && matches!(node.op, Op::Leaf)) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node<'a, T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                batch,
                cols,
            } => {
                let kval = self.value(*kernel);
                let (patch, positions) = (geom.patch_len(), geom.positions());
                if rg(*kernel) || rg(*bias) {
                    let cols = cols
                        .as_ref()
                        .ok_or_else(|| Error::Tape("conv2d patches were not saved".into()))?;
                    let mut dk = vec![T::zero(); kval.len()];
                    let mut db = vec![T::zero(); geom.out_channels];
                    for n in 0..*batch {
                        ops::conv2d_backward_params(
                            &cols[n * patch * positions..(n + 1) * patch * positions],
                            &g.data()[n * geom.output_len()..(n + 1) * geom.output_len()],
                            geom,
                            &mut dk,
                            &mut db,
                        );
                    }
                    self.accumulate(grads, *kernel, Tensor::new(kval.shape().to_vec(), dk)?);
                    self.accumulate(grads, *bias, Tensor::new(vec![geom.out_channels], db)?);
                }
                if rg(*input) {
                    let xval = self.value(*input);
                    let mut dx = vec![T::zero(); xval.len()];
                    let mut dcol = vec![T::zero(); patch * positions];
                    for n in 0..*batch {
                        ops::conv2d_backward_cols(
                            kval.data(),
                            &g.data()[n * geom.output_len()..(n + 1) * geom.output_len()],
                            geom,
                            &mut dcol,
                        );
                        ops::col2im(
                            &dcol,
                            geom,
                            &mut dx[n * geom.input_len()..(n + 1) * geom.input_len()],
                        );
                    }
                    self.accumulate(grads, *input, Tensor::new(xval.shape().to_vec(), dx)?);
                }
            }
            Op::Affine {
                input,
                weight,
                bias,
                rows,
            } => {
                let w = self.value(*weight);
                let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
                if rg(*weight) || rg(*bias) {
                    let mut dw = vec![T::zero(); w.len()];
                    let mut db = vec![T::zero(); d_out];
                    ops::affine_backward_params(
                        g.data(),
                        self.value(*input).data(),
                        *rows,
                        d_in,
                        d_out,
                        &mut dw,
                        &mut db,
                    );
                    self.accumulate(grads, *weight, Tensor::new(w.shape().to_vec(), dw)?);
                    self.accumulate(grads, *bias, Tensor::new(vec![d_out], db)?);
                }
                if rg(*input) {
                    let x = self.value(*input);
                    let mut dx = vec![T::zero(); x.len()];
                    ops::affine_backward_input(g.data(), w.data(), *rows, d_in, d_out, &mut dx);
                    self.accumulate(grads, *input, Tensor::new(x.shape().to_vec(), dx)?);
                }
            }
            Op::Relu(input) => {
                let x = self.value(*input);
                let mut dx = vec![T::zero(); x.len()];
                ops::relu_backward(x.data(), g.data(), &mut dx);
                self.accumulate(grads, *input, Tensor::new(x.shape().to_vec(), dx)?);
            }
            Op::MaxPool { input, argmax } => {
                let x = self.value(*input);
                let mut dx = vec![T::zero(); x.len()];
                for (&src, &d) in argmax.iter().zip(g.data()) {
                    dx[src] += d;
                }
                self.accumulate(grads, *input, Tensor::new(x.shape().to_vec(), dx)?);
            }
            Op::Reshape(input) => {
                let shape = self.value(*input).shape().to_vec();
                self.accumulate(grads, *input, Tensor::new(shape, g.data().to_vec())?);
            }
            Op::Mse { pred, target } => {
                let (p, t) = (self.value(*pred), self.value(*target));
                let upstream = g.item()?;
                let scale = T::of(2.0) / T::of(p.len() as f64) * upstream;
                let diff: Vec<T> = p
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(&a, &b)| (a - b) * scale)
                    .collect();
                if rg(*target) {
                    let neg = diff.iter().map(|&d| -d).collect();
                    self.accumulate(grads, *target, Tensor::new(t.shape().to_vec(), neg)?);
                }
                self.accumulate(grads, *pred, Tensor::new(p.shape().to_vec(), diff)?);
            }
            Op::SoftmaxXent {
                logits,
                targets,
                probs,
            } => {
                let l = self.value(*logits);
                let classes = l.shape()[l.rank() - 1];
                let scale = g.item()? / T::of(targets.len() as f64);
                let mut dl = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    dl[r * classes + t] -= T::one();
                }
                for v in &mut dl {
                    *v *= scale;
                }
                self.accumulate(grads, *logits, Tensor::new(l.shape().to_vec(), dl)?);
            }
        }
        Ok(())
    }
}

/// Gradients of a scalar loss with respect to the parameter leaves of a tape.
#[derive(Debug)]
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
