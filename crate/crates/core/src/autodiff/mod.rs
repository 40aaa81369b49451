//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every forward operation as a node in creation order,
//! which is also a valid topological order. [`Graph::backward`] walks the
//! tape once in reverse; leaf gradients stay readable afterwards.

pub mod conv;
pub mod gradcheck;
pub mod loss;
pub mod norm;
mod pool;

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::{gemm_view, MatRef, Scalar};
use crate::tensor::Tensor;

pub use conv::{output_extent, output_extents, ConvGeometry, PoolGeometry};
pub use gradcheck::{grad_check, grad_check_at, GradCheckReport};
pub use loss::{softmax, Reduction};
pub use norm::{BatchNormConfig, Mode, RunningStats};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv3d {
        x: usize,
        w: usize,
        geom: ConvGeometry,
    },
    MaxPool3d {
        x: usize,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        ctx: norm::NormContext<T>,
    },
    Relu {
        x: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    Concat {
        a: usize,
        b: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Sum {
        x: usize,
    },
    Reshape {
        x: usize,
    },
    CrossEntropy {
        logits: usize,
        ctx: loss::CrossEntropyContext<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv3d { .. } => "conv3d",
            Op::MaxPool3d { .. } => "maxpool3d",
            Op::GlobalAvgPool { .. } => "avgpool3d",
            Op::BatchNorm { .. } => "batchnorm3d",
            Op::Relu { .. } => "relu",
            Op::Linear { .. } => "linear",
            Op::Concat { .. } => "concat",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Sum { .. } => "sum",
            Op::Reshape { .. } => "reshape",
            Op::CrossEntropy { .. } => "weighted_cross_entropy",
        }
    }
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation with reverse-mode gradients.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert an existing tensor without copying it.
    pub fn leaf(&mut self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A learnable leaf.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(Arc::new(value), true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(Arc::new(value), false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` loss with respect to `v`, if `v` is a
    /// leaf that was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv3d(&mut self, x: Var, w: Var, geom: &ConvGeometry) -> Result<Var> {
        let out = conv::conv3d_forward(self.value(x), self.value(w), geom)?;
        self.push(
            out,
            Op::Conv3d {
                x: x.0,
                w: w.0,
                geom: *geom,
            },
            &[x.0, w.0],
        )
    }

    pub fn maxpool3d(&mut self, x: Var, geom: &PoolGeometry) -> Result<Var> {
        let (out, argmax) = pool::maxpool3d_forward(self.value(x), geom)?;
        self.push(out, Op::MaxPool3d { x: x.0, argmax }, &[x.0])
    }

    /// Average pool whose kernel must span the full remaining extents.
    pub fn avgpool3d(&mut self, x: Var, kernel: [usize; 3]) -> Result<Var> {
        let [_, _, t, h, w] = self.value(x).dims5("avgpool3d")?;
        if kernel != [t, h, w] {
            return Err(Error::InvalidGeometry(format!(
                "average-pool kernel {kernel:?} must equal input extents {:?}",
                [t, h, w]
            )));
        }
        self.global_avgpool3d(x)
    }

    pub fn global_avgpool3d(&mut self, x: Var) -> Result<Var> {
        let out = pool::global_avgpool_forward(self.value(x))?;
        self.push(out, Op::GlobalAvgPool { x: x.0 }, &[x.0])
    }

    /// Batch norm over `(N, T, H, W)` per channel. In training mode the
    /// running statistics are updated in place.
    pub fn batchnorm3d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &mut RunningStats<T>,
        cfg: BatchNormConfig,
        mode: Mode,
    ) -> Result<Var> {
        let (out, ctx) = norm::batchnorm_forward(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running,
            cfg,
            mode,
        )?;
        self.push(
            out,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                ctx,
            },
            &[x.0, gamma.0, beta.0],
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu { x: x.0 }, &[x.0])
    }

    /// `x W^T + b` for `x: (N, F_in)`, `W: (F_out, F_in)`, `b: (F_out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (n, f_in, f_out) = match (xv.shape(), wv.shape(), bv.shape()) {
            ([n, fi], [fo, fi2], [fo2]) if fi == fi2 && fo == fo2 => (*n, *fi, *fo),
            (xs, ws, bs) => {
                return Err(Error::shape(
                    "linear",
                    format!("x {xs:?}, weight {ws:?}, bias {bs:?}"),
                ))
            }
        };
        let mut out = Vec::with_capacity(n * f_out);
        for _ in 0..n {
            out.extend_from_slice(bv.data());
        }
        gemm_view(
            MatRef::row_major(xv.data(), n, f_in),
            MatRef::row_major(wv.data(), f_out, f_in).t(),
            T::one(),
            &mut out,
            f_out,
        );
        let out = Tensor::new(vec![n, f_out], out)?;
        self.push(
            out,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.0,
            },
            &[x.0, w.0, b.0],
        )
    }

    /// Feature-axis concatenation of `(N, F1)` and `(N, F2)`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, f1, f2) = match (av.shape(), bv.shape()) {
            ([n, f1], [n2, f2]) if n == n2 => (*n, *f1, *f2),
            (s1, s2) => return Err(Error::shape("concat", format!("{s1:?} and {s2:?}"))),
        };
        let mut out = Vec::with_capacity(n * (f1 + f2));
        for i in 0..n {
            out.extend_from_slice(&av.data()[i * f1..(i + 1) * f1]);
            out.extend_from_slice(&bv.data()[i * f2..(i + 1) * f2]);
        }
        let out = Tensor::new(vec![n, f1 + f2], out)?;
        self.push(out, Op::Concat { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("add", a, b, |x, y| x + y)?;
        self.push(out, Op::Add { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("mul", a, b, |x, y| x * y)?;
        self.push(out, Op::Mul { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    fn zip(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum { x: x.0 }, &[x.0])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(out, Op::Reshape { x: x.0 }, &[x.0])
    }

    /// Class-weighted cross entropy on `(N, classes)` logits.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
        reduction: Reduction,
    ) -> Result<Var> {
        let (out, ctx) =
            loss::cross_entropy_forward(self.value(logits), targets, weights, reduction)?;
        self.push(
            out,
            Op::CrossEntropy {
                logits: logits.0,
                ctx,
            },
            &[logits.0],
        )
    }

    /// Populate gradients of the scalar `loss` for every reachable leaf
    /// that requires one. A graph can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let loss_shape = self.value(loss).shape().to_vec();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(loss_shape, T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let needs = |j: usize| self.nodes[j].requires_grad;
            let val = |j: usize| self.nodes[j].value.as_ref();
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Conv3d { x, w, geom } => {
                    let (dx, dw) =
                        conv::conv3d_backward(&g, val(*x), val(*w), geom, needs(*x), needs(*w))?;
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *x, dx);
                    }
                    if let Some(dw) = dw {
                        accumulate(&mut grads, *w, dw);
                    }
                }
                Op::MaxPool3d { x, argmax } => {
                    let dx = pool::maxpool3d_backward(&g, val(*x).shape(), argmax);
                    accumulate(&mut grads, *x, dx);
                }
                Op::GlobalAvgPool { x } => {
                    let dx = pool::global_avgpool_backward(&g, val(*x).shape());
                    accumulate(&mut grads, *x, dx);
                }
                Op::BatchNorm { x, gamma, beta, ctx } => {
                    let (dx, dgamma, dbeta) =
                        norm::batchnorm_backward(&g, val(*x), val(*gamma), ctx)?;
                    if needs(*x) {
                        accumulate(&mut grads, *x, dx);
                    }
                    if needs(*gamma) {
                        accumulate(&mut grads, *gamma, dgamma);
                    }
                    if needs(*beta) {
                        accumulate(&mut grads, *beta, dbeta);
                    }
                }
                Op::Relu { x } => {
                    let xv = val(*x);
                    let data = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), data)?);
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (val(*x), val(*w));
                    let (n, f_in) = (xv.shape()[0], xv.shape()[1]);
                    let f_out = wv.shape()[0];
                    let gm = MatRef::row_major(g.data(), n, f_out);
                    if needs(*x) {
                        let mut dx = vec![T::zero(); n * f_in];
                        gemm_view(gm, MatRef::row_major(wv.data(), f_out, f_in), T::zero(), &mut dx, f_in);
                        accumulate(&mut grads, *x, Tensor::new(vec![n, f_in], dx)?);
                    }
                    if needs(*w) {
                        let mut dw = vec![T::zero(); f_out * f_in];
                        gemm_view(gm.t(), MatRef::row_major(xv.data(), n, f_in), T::zero(), &mut dw, f_in);
                        accumulate(&mut grads, *w, Tensor::new(vec![f_out, f_in], dw)?);
                    }
                    if needs(*b) {
                        let mut db = vec![T::zero(); f_out];
                        for row in g.data().chunks(f_out) {
                            db.iter_mut().zip(row).for_each(|(d, &v)| *d = *d + v);
                        }
                        accumulate(&mut grads, *b, Tensor::new(vec![f_out], db)?);
                    }
                }
                Op::Concat { a, b } => {
                    let (n, f1) = (val(*a).shape()[0], val(*a).shape()[1]);
                    let f2 = val(*b).shape()[1];
                    let mut da = Vec::with_capacity(n * f1);
                    let mut db = Vec::with_capacity(n * f2);
                    for row in g.data().chunks(f1 + f2) {
                        da.extend_from_slice(&row[..f1]);
                        db.extend_from_slice(&row[f1..]);
                    }
                    accumulate(&mut grads, *a, Tensor::new(vec![n, f1], da)?);
                    accumulate(&mut grads, *b, Tensor::new(vec![n, f2], db)?);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Mul { a, b } => {
                    let (av, bv) = (val(*a), val(*b));
                    if needs(*a) {
                        let d = g.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                        accumulate(&mut grads, *a, Tensor::new(av.shape().to_vec(), d)?);
                    }
                    if needs(*b) {
                        let d = g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                        accumulate(&mut grads, *b, Tensor::new(bv.shape().to_vec(), d)?);
                    }
                }
                Op::Sum { x } => {
                    let shape = val(*x).shape().to_vec();
                    accumulate(&mut grads, *x, Tensor::full(shape, g.item()));
                }
                Op::Reshape { x } => {
                    let shape = val(*x).shape().to_vec();
                    accumulate(&mut grads, *x, g.reshape(shape)?);
                }
                Op::CrossEntropy { logits, ctx } => {
                    let dl = loss::cross_entropy_backward(g.item(), val(*logits).shape(), ctx);
                    accumulate(&mut grads, *logits, dl);
                }
            }
        }
        // Only leaf gradients survive the sweep.
        self.grads = grads;
        Ok(())
    }

    /// Hash of every ReLU sign pattern and max-pool winner in the tape.
    ///
    /// Two evaluations with equal signatures are on the same linear piece of
    /// the network, so a finite difference between them is not straddling a
    /// kink.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => {
                    for v in self.nodes[*x].value.data() {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool3d { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], idx: usize, g: Tensor<T>) {
    match &mut grads[idx] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
