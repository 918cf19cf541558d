//! A minimal reverse-mode automatic differentiation engine over `ndarray`.
//!
//! The engine is a flat tape: every operation appends a node holding its
//! value and enough cached state to compute the backward step. Gradients
//! are accumulated into nodes that need them during [`Tape::backward`];
//! parameter leaves keep their gradients for the optimizer to read.
//!
//! Only the operations this model family needs are implemented, each paired
//! with a finite-difference test.

mod elem;
mod kernels;

pub use elem::Elem;
pub use kernels::{conv_out_dim, convt_out_dim};

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix1, Ix2, Ix4, IxDyn};

/// Handle to a tensor on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tx(usize);

enum Op<E: Elem> {
    Leaf,
    Add(Tx, Tx),
    Sub(Tx, Tx),
    Mul(Tx, Tx),
    Neg(Tx),
    Exp(Tx),
    Tanh(Tx),
    Abs(Tx),
    Square(Tx),
    Relu(Tx),
    LeakyRelu(Tx, E),
    Scale(Tx, E),
    AddScalar(Tx, E),
    /// `c - x`
    RsubScalar(Tx, E),
    MeanAll(Tx),
    SumAll(Tx),
    Conv2d {
        x: Tx,
        w: Tx,
        b: Option<Tx>,
        stride: usize,
        pad: usize,
    },
    ConvT2d {
        x: Tx,
        w: Tx,
        b: Option<Tx>,
        stride: usize,
        pad: usize,
    },
    AvgPool2(Tx),
    GlobalAvgPool(Tx),
    Linear {
        x: Tx,
        w: Tx,
        b: Option<Tx>,
    },
    InstanceNorm {
        x: Tx,
        inv_std: Array2<E>,
    },
    LayerNorm {
        x: Tx,
        gain: Tx,
        shift: Tx,
        x_hat: Array4<E>,
        inv_std: Array1<E>,
    },
    /// `x[b,c,h,w] + y[b,c]`
    AddChannelMap(Tx, Tx),
    /// Concatenate two `[B, *]` matrices along axis 1.
    ConcatCols(Tx, Tx),
}

struct Node<E: Elem> {
    value: ArrayD<E>,
    grad: Option<ArrayD<E>>,
    needs_grad: bool,
    op: Op<E>,
}

/// Reverse-mode tape. Build the graph with the op methods, call
/// [`Tape::backward`] on a scalar, then read leaf gradients with
/// [`Tape::grad`].
pub struct Tape<E: Elem> {
    nodes: Vec<Node<E>>,
}

impl<E: Elem> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<E>, needs_grad: bool, op: Op<E>) -> Tx {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        Tx(self.nodes.len() - 1)
    }

    fn needs(&self, t: Tx) -> bool {
        self.nodes[t.0].needs_grad
    }

    /// Trainable leaf: gradients are retained after backward.
    pub fn param(&mut self, value: ArrayD<E>) -> Tx {
        self.push(value, true, Op::Leaf)
    }

    /// Non-trainable leaf (inputs, targets, noise).
    pub fn constant(&mut self, value: ArrayD<E>) -> Tx {
        self.push(value, false, Op::Leaf)
    }

    pub fn scalar(&mut self, v: E) -> Tx {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn value(&self, t: Tx) -> &ArrayD<E> {
        &self.nodes[t.0].value
    }

    pub fn shape(&self, t: Tx) -> &[usize] {
        self.nodes[t.0].value.shape()
    }

    /// Scalar value of a rank-0 (or single-element) tensor.
    pub fn scalar_value(&self, t: Tx) -> E {
        let v = &self.nodes[t.0].value;
        debug_assert_eq!(v.len(), 1, "scalar_value on non-scalar");
        *v.iter().next().expect("non-empty")
    }

    pub fn grad(&self, t: Tx) -> Option<&ArrayD<E>> {
        self.nodes[t.0].grad.as_ref()
    }

    /// Copy of the value as a fresh constant leaf: stops gradient flow.
    pub fn detach(&mut self, t: Tx) -> Tx {
        let v = self.nodes[t.0].value.clone();
        self.constant(v)
    }

    // ---- elementwise ----

    fn binary_same_shape(&mut self, a: Tx, b: Tx, op: fn(Tx, Tx) -> Op<E>, f: fn(E, E) -> E) -> Tx {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let mut out = va.clone();
        out.zip_mut_with(vb, |x, &y| *x = f(*x, y));
        let needs = self.needs(a) || self.needs(b);
        self.push(out, needs, op(a, b))
    }

    pub fn add(&mut self, a: Tx, b: Tx) -> Tx {
        self.binary_same_shape(a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Tx, b: Tx) -> Tx {
        self.binary_same_shape(a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Tx, b: Tx) -> Tx {
        self.binary_same_shape(a, b, Op::Mul, |x, y| x * y)
    }

    fn unary(&mut self, a: Tx, op: Op<E>, f: impl Fn(E) -> E) -> Tx {
        let out = self.nodes[a.0].value.mapv(f);
        let needs = self.needs(a);
        self.push(out, needs, op)
    }

    pub fn neg(&mut self, a: Tx) -> Tx {
        self.unary(a, Op::Neg(a), |v| -v)
    }

    pub fn exp(&mut self, a: Tx) -> Tx {
        self.unary(a, Op::Exp(a), |v| v.exp())
    }

    pub fn tanh(&mut self, a: Tx) -> Tx {
        self.unary(a, Op::Tanh(a), |v| v.tanh())
    }

    pub fn abs(&mut self, a: Tx) -> Tx {
        self.unary(a, Op::Abs(a), |v| v.abs())
    }

    pub fn square(&mut self, a: Tx) -> Tx {
        self.unary(a, Op::Square(a), |v| v * v)
    }

    pub fn relu(&mut self, a: Tx) -> Tx {
        self.unary(a, Op::Relu(a), |v| if v > E::zero() { v } else { E::zero() })
    }

    pub fn leaky_relu(&mut self, a: Tx, slope: E) -> Tx {
        self.unary(a, Op::LeakyRelu(a, slope), |v| {
            if v > E::zero() {
                v
            } else {
                v * slope
            }
        })
    }

    pub fn scale(&mut self, a: Tx, c: E) -> Tx {
        self.unary(a, Op::Scale(a, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, a: Tx, c: E) -> Tx {
        self.unary(a, Op::AddScalar(a, c), |v| v + c)
    }

    /// `c - x`, elementwise.
    pub fn rsub_scalar(&mut self, a: Tx, c: E) -> Tx {
        self.unary(a, Op::RsubScalar(a, c), |v| c - v)
    }

    // ---- reductions ----

    pub fn mean_all(&mut self, a: Tx) -> Tx {
        let v = &self.nodes[a.0].value;
        let n = E::from_usize(v.len());
        let m = v.sum() / n;
        let needs = self.needs(a);
        self.push(ArrayD::from_elem(IxDyn(&[]), m), needs, Op::MeanAll(a))
    }

    pub fn sum_all(&mut self, a: Tx) -> Tx {
        let v = &self.nodes[a.0].value;
        let s = v.sum();
        let needs = self.needs(a);
        self.push(ArrayD::from_elem(IxDyn(&[]), s), needs, Op::SumAll(a))
    }

    /// Mean of several scalar tensors (e.g. per-scale losses).
    pub fn scalar_mean(&mut self, items: &[Tx]) -> Tx {
        assert!(!items.is_empty());
        let mut acc = items[0];
        for &t in &items[1..] {
            acc = self.add(acc, t);
        }
        self.scale(acc, E::from_f64(1.0 / items.len() as f64))
    }

    // ---- neural net ops ----

    fn v4(&self, t: Tx) -> ndarray::ArrayView4<'_, E> {
        self.nodes[t.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("expected rank-4 tensor")
    }

    fn v2(&self, t: Tx) -> ndarray::ArrayView2<'_, E> {
        self.nodes[t.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("expected rank-2 tensor")
    }

    fn v1(&self, t: Tx) -> ndarray::ArrayView1<'_, E> {
        self.nodes[t.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("expected rank-1 tensor")
    }

    pub fn conv2d(&mut self, x: Tx, w: Tx, b: Option<Tx>, stride: usize, pad: usize) -> Tx {
        let out = kernels::conv2d_fwd(
            &self.v4(x),
            &self.v4(w),
            b.map(|b| self.v1(b)).as_ref(),
            stride,
            pad,
        );
        let needs = self.needs(x) || self.needs(w) || b.map(|b| self.needs(b)).unwrap_or(false);
        self.push(out.into_dyn(), needs, Op::Conv2d { x, w, b, stride, pad })
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Tx,
        w: Tx,
        b: Option<Tx>,
        stride: usize,
        pad: usize,
    ) -> Tx {
        let out = kernels::convt2d_fwd(
            &self.v4(x),
            &self.v4(w),
            b.map(|b| self.v1(b)).as_ref(),
            stride,
            pad,
        );
        let needs = self.needs(x) || self.needs(w) || b.map(|b| self.needs(b)).unwrap_or(false);
        self.push(out.into_dyn(), needs, Op::ConvT2d { x, w, b, stride, pad })
    }

    pub fn avg_pool2(&mut self, x: Tx) -> Tx {
        let out = kernels::avgpool2_fwd(&self.v4(x));
        let needs = self.needs(x);
        self.push(out.into_dyn(), needs, Op::AvgPool2(x))
    }

    /// `[B,C,H,W] -> [B,C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Tx) -> Tx {
        let v = self.v4(x);
        let (_, _, h, w) = v.dim();
        let n = E::from_usize(h * w);
        let out = v.sum_axis(Axis(3)).sum_axis(Axis(2)).mapv(|s| s / n);
        let needs = self.needs(x);
        self.push(out.into_dyn(), needs, Op::GlobalAvgPool(x))
    }

    /// `x: [B,I]`, `w: [O,I]`, `b: [O]` -> `[B,O]`.
    pub fn linear(&mut self, x: Tx, w: Tx, b: Option<Tx>) -> Tx {
        let xv = self.v2(x);
        let wv = self.v2(w);
        let mut out = xv.dot(&wv.t());
        if let Some(b) = b {
            let bv = self.v1(b);
            for mut row in out.axis_iter_mut(Axis(0)) {
                row.zip_mut_with(&bv, |a, &v| *a = *a + v);
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.map(|b| self.needs(b)).unwrap_or(false);
        self.push(out.into_dyn(), needs, Op::Linear { x, w, b })
    }

    pub fn instance_norm(&mut self, x: Tx, eps: E) -> Tx {
        let (out, inv_std) = kernels::instance_norm_fwd(&self.v4(x), eps);
        let needs = self.needs(x);
        self.push(out.into_dyn(), needs, Op::InstanceNorm { x, inv_std })
    }

    pub fn layer_norm(&mut self, x: Tx, gain: Tx, shift: Tx, eps: E) -> Tx {
        let (out, x_hat, inv_std) =
            kernels::layer_norm_fwd(&self.v4(x), &self.v1(gain), &self.v1(shift), eps);
        let needs = self.needs(x) || self.needs(gain) || self.needs(shift);
        self.push(
            out.into_dyn(),
            needs,
            Op::LayerNorm {
                x,
                gain,
                shift,
                x_hat,
                inv_std,
            },
        )
    }

    /// Broadcast-add a per-(batch, channel) map over spatial positions.
    pub fn add_channel_map(&mut self, x: Tx, y: Tx) -> Tx {
        let xv = self.v4(x);
        let yv = self.v2(y);
        let (b, c, _, _) = xv.dim();
        assert_eq!(yv.dim(), (b, c), "channel map shape mismatch");
        let mut out = xv.to_owned();
        for bi in 0..b {
            for ci in 0..c {
                let add = yv[[bi, ci]];
                out.index_axis_mut(Axis(0), bi)
                    .index_axis_mut(Axis(0), ci)
                    .mapv_inplace(|v| v + add);
            }
        }
        let needs = self.needs(x) || self.needs(y);
        self.push(out.into_dyn(), needs, Op::AddChannelMap(x, y))
    }

    /// Concatenate `[B,a]` and `[B,b]` into `[B,a+b]`.
    pub fn concat_cols(&mut self, a: Tx, b: Tx) -> Tx {
        let av = self.v2(a);
        let bv = self.v2(b);
        assert_eq!(av.dim().0, bv.dim().0, "batch mismatch in concat");
        let out = ndarray::concatenate(Axis(1), &[av, bv]).expect("concat");
        let needs = self.needs(a) || self.needs(b);
        self.push(out.into_dyn(), needs, Op::ConcatCols(a, b))
    }

    // ---- backward ----

    fn accumulate(&mut self, t: Tx, delta: ArrayD<E>) {
        if !self.nodes[t.0].needs_grad {
            return;
        }
        match &mut self.nodes[t.0].grad {
            Some(g) => g.zip_mut_with(&delta, |a, &b| *a = *a + b),
            slot @ None => *slot = Some(delta),
        }
    }

    /// Run the backward pass from a scalar loss. Gradients of earlier
    /// backward calls on disjoint subgraphs are preserved; leaves touched
    /// by this pass accumulate into their existing gradients.
    pub fn backward(&mut self, loss: Tx) {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward expects a scalar loss"
        );
        let shape = self.nodes[loss.0].value.raw_dim();
        self.accumulate(loss, ArrayD::ones(shape));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            let deltas = backward_step(self, i, &op, &g);
            self.nodes[i].op = op;
            for (t, d) in deltas {
                self.accumulate(t, d);
            }
        }
    }

    /// Clear all gradients (e.g. between backward passes over shared nodes).
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }
}

/// Compute parent gradient contributions for one node.
fn backward_step<E: Elem>(
    tape: &Tape<E>,
    node: usize,
    op: &Op<E>,
    g: &ArrayD<E>,
) -> Vec<(Tx, ArrayD<E>)> {
    let val = |t: Tx| &tape.nodes[t.0].value;
    let own = &tape.nodes[node].value;
    let needs = |t: Tx| tape.nodes[t.0].needs_grad;
    let mut out: Vec<(Tx, ArrayD<E>)> = Vec::new();
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if needs(*a) {
                out.push((*a, g.clone()));
            }
            if needs(*b) {
                out.push((*b, g.clone()));
            }
        }
        Op::Sub(a, b) => {
            if needs(*a) {
                out.push((*a, g.clone()));
            }
            if needs(*b) {
                out.push((*b, g.mapv(|v| -v)));
            }
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                let mut d = g.clone();
                d.zip_mut_with(val(*b), |x, &y| *x = *x * y);
                out.push((*a, d));
            }
            if needs(*b) {
                let mut d = g.clone();
                d.zip_mut_with(val(*a), |x, &y| *x = *x * y);
                out.push((*b, d));
            }
        }
        Op::Neg(a) => out.push((*a, g.mapv(|v| -v))),
        Op::Exp(a) => {
            let mut d = g.clone();
            d.zip_mut_with(own, |x, &y| *x = *x * y);
            out.push((*a, d));
        }
        Op::Tanh(a) => {
            let mut d = g.clone();
            d.zip_mut_with(own, |x, &y| *x = *x * (E::one() - y * y));
            out.push((*a, d));
        }
        Op::Abs(a) => {
            let mut d = g.clone();
            d.zip_mut_with(val(*a), |x, &y| {
                *x = if y > E::zero() {
                    *x
                } else if y < E::zero() {
                    -*x
                } else {
                    E::zero()
                }
            });
            out.push((*a, d));
        }
        Op::Square(a) => {
            let two = E::from_f64(2.0);
            let mut d = g.clone();
            d.zip_mut_with(val(*a), |x, &y| *x = *x * two * y);
            out.push((*a, d));
        }
        Op::Relu(a) => {
            let mut d = g.clone();
            d.zip_mut_with(val(*a), |x, &y| {
                if y <= E::zero() {
                    *x = E::zero()
                }
            });
            out.push((*a, d));
        }
        Op::LeakyRelu(a, slope) => {
            let slope = *slope;
            let mut d = g.clone();
            d.zip_mut_with(val(*a), |x, &y| {
                if y <= E::zero() {
                    *x = *x * slope
                }
            });
            out.push((*a, d));
        }
        Op::Scale(a, c) => out.push((*a, g.mapv(|v| v * *c))),
        Op::AddScalar(a, _) => out.push((*a, g.clone())),
        Op::RsubScalar(a, _) => out.push((*a, g.mapv(|v| -v))),
        Op::MeanAll(a) => {
            let n = E::from_usize(val(*a).len());
            let gv = *g.iter().next().expect("scalar") / n;
            out.push((*a, ArrayD::from_elem(val(*a).raw_dim(), gv)));
        }
        Op::SumAll(a) => {
            let gv = *g.iter().next().expect("scalar");
            out.push((*a, ArrayD::from_elem(val(*a).raw_dim(), gv)));
        }
        Op::Conv2d { x, w, b, stride, pad } => {
            let gv = g.view().into_dimensionality::<Ix4>().expect("rank 4");
            let (gx, gw, gb) =
                kernels::conv2d_bwd(&tape.v4(*x), &tape.v4(*w), &gv, *stride, *pad, needs(*x));
            if let Some(gx) = gx {
                out.push((*x, gx.into_dyn()));
            }
            if needs(*w) {
                out.push((*w, gw.into_dyn()));
            }
            if let Some(b) = b {
                if needs(*b) {
                    out.push((*b, gb.into_dyn()));
                }
            }
        }
        Op::ConvT2d { x, w, b, stride, pad } => {
            let gv = g.view().into_dimensionality::<Ix4>().expect("rank 4");
            let (gx, gw, gb) =
                kernels::convt2d_bwd(&tape.v4(*x), &tape.v4(*w), &gv, *stride, *pad, needs(*x));
            if let Some(gx) = gx {
                out.push((*x, gx.into_dyn()));
            }
            if needs(*w) {
                out.push((*w, gw.into_dyn()));
            }
            if let Some(b) = b {
                if needs(*b) {
                    out.push((*b, gb.into_dyn()));
                }
            }
        }
        Op::AvgPool2(x) => {
            let gv = g.view().into_dimensionality::<Ix4>().expect("rank 4");
            let (_, _, h, w) = tape.v4(*x).dim();
            out.push((*x, kernels::avgpool2_bwd(&gv, h, w).into_dyn()));
        }
        Op::GlobalAvgPool(x) => {
            let xv = tape.v4(*x);
            let (b, c, h, w) = xv.dim();
            let n = E::from_usize(h * w);
            let gv = g.view().into_dimensionality::<Ix2>().expect("rank 2");
            let mut d = Array4::<E>::zeros((b, c, h, w));
            for bi in 0..b {
                for ci in 0..c {
                    let v = gv[[bi, ci]] / n;
                    d.index_axis_mut(Axis(0), bi)
                        .index_axis_mut(Axis(0), ci)
                        .fill(v);
                }
            }
            out.push((*x, d.into_dyn()));
        }
        Op::Linear { x, w, b } => {
            let gv = g.view().into_dimensionality::<Ix2>().expect("rank 2");
            if needs(*x) {
                let d = gv.dot(&tape.v2(*w));
                out.push((*x, d.into_dyn()));
            }
            if needs(*w) {
                let d = gv.t().dot(&tape.v2(*x));
                out.push((*w, d.into_dyn()));
            }
            if let Some(b) = b {
                if needs(*b) {
                    out.push((*b, gv.sum_axis(Axis(0)).into_dyn()));
                }
            }
        }
        Op::InstanceNorm { x, inv_std } => {
            let gv = g.view().into_dimensionality::<Ix4>().expect("rank 4");
            let y = own.view().into_dimensionality::<Ix4>().expect("rank 4");
            let d = kernels::instance_norm_bwd(&y, &inv_std.view(), &gv);
            out.push((*x, d.into_dyn()));
        }
        Op::LayerNorm {
            x,
            gain,
            shift,
            x_hat,
            inv_std,
        } => {
            let gv = g.view().into_dimensionality::<Ix4>().expect("rank 4");
            let (gx, ggain, gshift) = kernels::layer_norm_bwd(
                &x_hat.view(),
                &inv_std.view(),
                &tape.v1(*gain),
                &gv,
            );
            if needs(*x) {
                out.push((*x, gx.into_dyn()));
            }
            if needs(*gain) {
                out.push((*gain, ggain.into_dyn()));
            }
            if needs(*shift) {
                out.push((*shift, gshift.into_dyn()));
            }
        }
        Op::AddChannelMap(x, y) => {
            if needs(*x) {
                out.push((*x, g.clone()));
            }
            if needs(*y) {
                let gv = g.view().into_dimensionality::<Ix4>().expect("rank 4");
                let d = gv.sum_axis(Axis(3)).sum_axis(Axis(2));
                out.push((*y, d.into_dyn()));
            }
        }
        Op::ConcatCols(a, b) => {
            let gv = g.view().into_dimensionality::<Ix2>().expect("rank 2");
            let na = tape.v2(*a).dim().1;
            if needs(*a) {
                out.push((*a, gv.slice(ndarray::s![.., ..na]).to_owned().into_dyn()));
            }
            if needs(*b) {
                out.push((*b, gv.slice(ndarray::s![.., na..]).to_owned().into_dyn()));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests;
