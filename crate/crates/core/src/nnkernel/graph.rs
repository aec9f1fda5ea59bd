//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] records one forward pass as a flat tape of nodes; ids are
//! topologically ordered by construction. `backward` walks the tape in
//! reverse and accumulates parameter gradients into the [`ParamStore`].
//! The tape is rebuilt every training step.

use rayon::prelude::*;

use super::error::{KernelError, Result};
use super::linalg::{self, ConvGeom};
use super::params::{ParamId, ParamStore};
use super::real::Real;
use super::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Batch items are processed in this many fixed chunks so that partial-sum
/// reduction order (and therefore rounding) is independent of thread count.
const BATCH_CHUNKS: usize = 8;

#[derive(Debug, Clone)]
enum Op<T> {
    Constant,
    Param(ParamId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Abs(NodeId),
    Neg(NodeId),
    Square(NodeId),
    Clamp { x: NodeId, lo: T, hi: T },
    Scale { x: NodeId, c: T },
    AddScalar { x: NodeId },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    RowMul { x: NodeId, v: NodeId },
    RowAdd { x: NodeId, v: NodeId },
    Sum(NodeId),
    Mean(NodeId),
    MeanAxis0(NodeId),
    Reshape(NodeId),
    NarrowCols { x: NodeId, start: usize, len: usize },
    Dense { x: NodeId, w: NodeId, b: NodeId },
    Conv2d { x: NodeId, k: NodeId, b: NodeId, stride: usize },
    ConvT2d { x: NodeId, k: NodeId, b: NodeId, stride: usize },
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
}

/// One recorded forward pass.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn ensure_finite<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(KernelError::NonFinite { op })
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Value of a shape-[1] node as f64.
    pub fn scalar_value(&self, id: NodeId) -> Result<f64> {
        Ok(self.nodes[id.0].value.item()?.as_f64())
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &'static str, op: Op<T>, value: Tensor<T>) -> Result<NodeId> {
        ensure_finite(name, &value)?;
        Ok(self.push(op, value))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.push_checked("constant", Op::Constant, value)
    }

    /// Records a leaf node for a trainable parameter.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<NodeId> {
        let value = store.value(id).clone();
        self.push_checked("param", Op::Param(id), value)
    }

    fn unary(
        &mut self,
        name: &'static str,
        x: NodeId,
        f: impl Fn(T) -> T,
        op: Op<T>,
    ) -> Result<NodeId> {
        let mut out = self.nodes[x.0].value.clone();
        out.data_mut().iter_mut().for_each(|v| *v = f(*v));
        self.push_checked(name, op, out)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("relu", x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        // 1/(1+e^-x) for x >= 0, e^x/(1+e^x) otherwise; avoids exp overflow.
        self.unary(
            "sigmoid",
            x,
            |v| {
                if v >= T::zero() {
                    T::one() / (T::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (T::one() + e)
                }
            },
            Op::Sigmoid(x),
        )
    }

    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId> {
        // log(1+e^x) = max(x,0) + log1p(e^-|x|)
        self.unary(
            "softplus",
            x,
            |v| v.max(T::zero()) + (-v.abs()).exp().ln_1p(),
            Op::Softplus(x),
        )
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("exp", x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("log", x, |v| v.ln(), Op::Log(x))
    }

    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("abs", x, |v| v.abs(), Op::Abs(x))
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("neg", x, |v| -v, Op::Neg(x))
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("square", x, |v| v * v, Op::Square(x))
    }

    pub fn clamp(&mut self, x: NodeId, lo: T, hi: T) -> Result<NodeId> {
        self.unary("clamp", x, |v| v.max(lo).min(hi), Op::Clamp { x, lo, hi })
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> Result<NodeId> {
        self.unary("scale", x, |v| v * c, Op::Scale { x, c })
    }

    pub fn add_scalar(&mut self, x: NodeId, c: T) -> Result<NodeId> {
        self.unary("add_scalar", x, |v| v + c, Op::AddScalar { x })
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(KernelError::Shape {
                op: name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = ta.clone();
        out.data_mut()
            .iter_mut()
            .zip(tb.data())
            .for_each(|(v, &w)| *v = f(*v, w));
        self.push_checked(name, op, out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_shapes(&self, name: &'static str, x: NodeId, v: NodeId) -> Result<(usize, usize)> {
        let (tx, tv) = (&self.nodes[x.0].value, &self.nodes[v.0].value);
        match (tx.shape(), tv.shape()) {
            ([b, n], [m]) if n == m => Ok((*b, *n)),
            _ => Err(KernelError::Shape {
                op: name,
                lhs: tx.shape().to_vec(),
                rhs: tv.shape().to_vec(),
            }),
        }
    }

    /// `out[b, n] = x[b, n] * v[n]` for `x: [B, N]`, `v: [N]`.
    pub fn row_mul(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let (batch, n) = self.row_shapes("row_mul", x, v)?;
        let mut out = self.nodes[x.0].value.clone();
        let vd = self.nodes[v.0].value.data().to_vec();
        for b in 0..batch {
            let row = &mut out.data_mut()[b * n..(b + 1) * n];
            row.iter_mut().zip(&vd).for_each(|(o, &s)| *o = *o * s);
        }
        self.push_checked("row_mul", Op::RowMul { x, v }, out)
    }

    /// `out[b, n] = x[b, n] + v[n]` for `x: [B, N]`, `v: [N]`.
    pub fn row_add(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let (batch, n) = self.row_shapes("row_add", x, v)?;
        let mut out = self.nodes[x.0].value.clone();
        let vd = self.nodes[v.0].value.data().to_vec();
        for b in 0..batch {
            let row = &mut out.data_mut()[b * n..(b + 1) * n];
            row.iter_mut().zip(&vd).for_each(|(o, &s)| *o += s);
        }
        self.push_checked("row_add", Op::RowAdd { x, v }, out)
    }

    /// Sum of all elements (f64 accumulation), as a shape-[1] tensor.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.nodes[x.0].value.sum_f64();
        self.push_checked("sum", Op::Sum(x), Tensor::scalar(T::c(s)))
    }

    /// Mean of all elements (f64 accumulation), as a shape-[1] tensor.
    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.nodes[x.0].value.len();
        if n == 0 {
            return Err(KernelError::InvalidArgument("mean of empty tensor".into()));
        }
        let s = self.nodes[x.0].value.sum_f64() / n as f64;
        self.push_checked("mean", Op::Mean(x), Tensor::scalar(T::c(s)))
    }

    /// Column means of a `[B, N]` tensor, yielding `[N]` (f64 accumulation).
    pub fn mean_axis0(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = &self.nodes[x.0].value;
        let &[batch, n] = tx.shape() else {
            return Err(KernelError::Shape {
                op: "mean_axis0",
                lhs: tx.shape().to_vec(),
                rhs: vec![],
            });
        };
        let mut acc = vec![0.0f64; n];
        for b in 0..batch {
            for (a, v) in acc.iter_mut().zip(&tx.data()[b * n..(b + 1) * n]) {
                *a += v.as_f64();
            }
        }
        let out = Tensor::from_vec(
            &[n],
            acc.iter().map(|&v| T::c(v / batch as f64)).collect(),
        )?;
        self.push_checked("mean_axis0", Op::MeanAxis0(x), out)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.nodes[x.0].value.reshaped(shape)?;
        Ok(self.push(Op::Reshape(x), out))
    }

    /// Column slice `x[:, start..start+len]` of a `[B, N]` tensor.
    pub fn narrow_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let tx = &self.nodes[x.0].value;
        let &[batch, n] = tx.shape() else {
            return Err(KernelError::Shape {
                op: "narrow_cols",
                lhs: tx.shape().to_vec(),
                rhs: vec![],
            });
        };
        if start + len > n {
            return Err(KernelError::InvalidArgument(format!(
                "narrow_cols {start}..{} out of bounds for width {n}",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(batch * len);
        for b in 0..batch {
            data.extend_from_slice(&tx.data()[b * n + start..b * n + start + len]);
        }
        let out = Tensor::from_vec(&[batch, len], data)?;
        Ok(self.push(Op::NarrowCols { x, start, len }, out))
    }

    /// Affine layer `y = x W + b` for `x: [B, I]`, `W: [I, O]`, `b: [O]`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (tx, tw, tb) = (
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        let (&[batch, i], &[wi, o], &[bo]) = (tx.shape(), tw.shape(), tb.shape()) else {
            return Err(KernelError::Shape {
                op: "dense",
                lhs: tx.shape().to_vec(),
                rhs: tw.shape().to_vec(),
            });
        };
        if i != wi || o != bo {
            return Err(KernelError::Shape {
                op: "dense",
                lhs: tx.shape().to_vec(),
                rhs: tw.shape().to_vec(),
            });
        }
        let mut out = Tensor::zeros(&[batch, o]);
        let chunk = batch.div_ceil(BATCH_CHUNKS).max(1);
        let (xd, wd, bd) = (tx.data(), tw.data(), tb.data());
        out.data_mut()
            .par_chunks_mut(chunk * o)
            .zip(xd.par_chunks(chunk * i))
            .for_each(|(yc, xc)| {
                let rows = xc.len() / i;
                linalg::matmul(rows, i, o, xc, wd, yc, false);
                for r in 0..rows {
                    yc[r * o..(r + 1) * o]
                        .iter_mut()
                        .zip(bd)
                        .for_each(|(y, &bv)| *y += bv);
                }
            });
        self.push_checked("dense", Op::Dense { x, w, b }, out)
    }

    /// Strided "same"-padded convolution; `x: [B, Cin, H, W]`,
    /// `k: [Cout, Cin, kh, kw]`, `b: [Cout]`, output spatial dims
    /// `ceil(H/stride) x ceil(W/stride)`.
    pub fn conv2d(&mut self, x: NodeId, k: NodeId, b: NodeId, stride: usize) -> Result<NodeId> {
        if stride < 1 {
            return Err(KernelError::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let (tx, tk, tb) = (
            &self.nodes[x.0].value,
            &self.nodes[k.0].value,
            &self.nodes[b.0].value,
        );
        let (&[batch, cin, h, w], &[cout, kcin, kh, kw], &[bo]) =
            (tx.shape(), tk.shape(), tb.shape())
        else {
            return Err(KernelError::Shape {
                op: "conv2d",
                lhs: tx.shape().to_vec(),
                rhs: tk.shape().to_vec(),
            });
        };
        if cin != kcin || cout != bo {
            return Err(KernelError::Shape {
                op: "conv2d",
                lhs: tx.shape().to_vec(),
                rhs: tk.shape().to_vec(),
            });
        }
        let g = ConvGeom::same(h, w, kh, kw, stride);
        let (ohw, ckk) = (g.out_h * g.out_w, cin * kh * kw);
        let mut out = Tensor::zeros(&[batch, cout, g.out_h, g.out_w]);
        let chunk = batch.div_ceil(BATCH_CHUNKS).max(1);
        let (xd, kd, bd) = (tx.data(), tk.data(), tb.data());
        let in_chw = cin * h * w;
        out.data_mut()
            .par_chunks_mut(chunk * cout * ohw)
            .zip(xd.par_chunks(chunk * in_chw))
            .for_each(|(yc, xc)| {
                let mut cols = vec![T::zero(); ckk * ohw];
                for (yb, xb) in yc.chunks_mut(cout * ohw).zip(xc.chunks(in_chw)) {
                    linalg::im2col(xb, cin, &g, &mut cols);
                    linalg::matmul(cout, ckk, ohw, kd, &cols, yb, false);
                    for c in 0..cout {
                        let bv = bd[c];
                        yb[c * ohw..(c + 1) * ohw].iter_mut().for_each(|v| *v += bv);
                    }
                }
            });
        self.push_checked("conv2d", Op::Conv2d { x, k, b, stride }, out)
    }

    /// Transposed convolution, the shape inverse of [`Graph::conv2d`]:
    /// `x: [B, Cin, h, w]`, `k: [Cin, Cout, kh, kw]`, output spatial dims
    /// `h*stride x w*stride`.
    pub fn conv2d_transpose(
        &mut self,
        x: NodeId,
        k: NodeId,
        b: NodeId,
        stride: usize,
    ) -> Result<NodeId> {
        if stride < 1 {
            return Err(KernelError::InvalidArgument(
                "conv2d_transpose stride must be >= 1".into(),
            ));
        }
        let (tx, tk, tb) = (
            &self.nodes[x.0].value,
            &self.nodes[k.0].value,
            &self.nodes[b.0].value,
        );
        let (&[batch, cin, h, w], &[kcin, cout, kh, kw], &[bo]) =
            (tx.shape(), tk.shape(), tb.shape())
        else {
            return Err(KernelError::Shape {
                op: "conv2d_transpose",
                lhs: tx.shape().to_vec(),
                rhs: tk.shape().to_vec(),
            });
        };
        if cin != kcin || cout != bo {
            return Err(KernelError::Shape {
                op: "conv2d_transpose",
                lhs: tx.shape().to_vec(),
                rhs: tk.shape().to_vec(),
            });
        }
        let (oh, ow) = (h * stride, w * stride);
        let g = ConvGeom::same(oh, ow, kh, kw, stride);
        debug_assert_eq!((g.out_h, g.out_w), (h, w));
        let (hw, ckk) = (h * w, cout * kh * kw);
        let mut out = Tensor::zeros(&[batch, cout, oh, ow]);
        let chunk = batch.div_ceil(BATCH_CHUNKS).max(1);
        let (xd, kd, bd) = (tx.data(), tk.data(), tb.data());
        let (in_chw, out_chw) = (cin * hw, cout * oh * ow);
        out.data_mut()
            .par_chunks_mut(chunk * out_chw)
            .zip(xd.par_chunks(chunk * in_chw))
            .for_each(|(yc, xc)| {
                let mut cols = vec![T::zero(); ckk * hw];
                for (yb, xb) in yc.chunks_mut(out_chw).zip(xc.chunks(in_chw)) {
                    // cols = K^T x_b with K as [Cin, Cout*kh*kw]
                    linalg::matmul_at(ckk, cin, hw, kd, xb, &mut cols, false);
                    linalg::col2im(&cols, cout, &g, yb);
                    for c in 0..cout {
                        let bv = bd[c];
                        yb[c * oh * ow..(c + 1) * oh * ow]
                            .iter_mut()
                            .for_each(|v| *v += bv);
                    }
                }
            });
        self.push_checked(
            "conv2d_transpose",
            Op::ConvT2d { x, k, b, stride },
            out,
        )
    }

    /// Reverse pass from a scalar loss node; accumulates `dloss/dparam` into
    /// every reachable parameter of `store`.
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore<T>) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(KernelError::State(
                "backward called without a recorded graph".into(),
            ));
        }
        if loss.0 >= self.nodes.len() {
            return Err(KernelError::State(format!(
                "backward target {} not in graph of {} nodes",
                loss.0,
                self.nodes.len()
            )));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(KernelError::State(format!(
                "backward target must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }

        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for id in (0..=loss.0).rev() {
            let Some(gy) = grads[id].take() else { continue };
            ensure_finite("backward", &gy)?;
            match &self.nodes[id].op {
                Op::Constant => {}
                Op::Param(pid) => store.accumulate_grad(*pid, &gy)?,
                Op::Relu(x) => {
                    let mut g = gy;
                    g.data_mut()
                        .iter_mut()
                        .zip(self.nodes[x.0].value.data())
                        .for_each(|(gv, &xv)| {
                            if xv <= T::zero() {
                                *gv = T::zero();
                            }
                        });
                    acc(&mut grads, *x, g)?;
                }
                Op::Sigmoid(x) => {
                    let mut g = gy;
                    g.data_mut()
                        .iter_mut()
                        .zip(self.nodes[id].value.data())
                        .for_each(|(gv, &s)| *gv = *gv * s * (T::one() - s));
                    acc(&mut grads, *x, g)?;
                }
                Op::Softplus(x) => {
                    let mut g = gy;
                    g.data_mut()
                        .iter_mut()
                        .zip(self.nodes[x.0].value.data())
                        .for_each(|(gv, &xv)| {
                            let s = if xv >= T::zero() {
                                T::one() / (T::one() + (-xv).exp())
                            } else {
                                let e = xv.exp();
                                e / (T::one() + e)
                            };
                            *gv = *gv * s;
                        });
                    acc(&mut grads, *x, g)?;
                }
                Op::Exp(x) => {
                    let mut g = gy;
                    g.data_mut()
                        .iter_mut()
                        .zip(self.nodes[id].value.data())
                        .for_each(|(gv, &e)| *gv = *gv * e);
                    acc(&mut grads, *x, g)?;
                }
                Op::Log(x) => {
                    let mut g = gy;
                    g.data_mut()
                        .iter_mut()
                        .zip(self.nodes[x.0].value.data())
                        .for_each(|(gv, &xv)| *gv = *gv / xv);
                    acc(&mut grads, *x, g)?;
                }
                Op::Abs(x) => {
                    // subgradient at 0 chosen as 0
                    let mut g = gy;
                    g.data_mut()
                        .iter_mut()
                        .zip(self.nodes[x.0].value.data())
                        .for_each(|(gv, &xv)| {
                            *gv = if xv > T::zero() {
                                *gv
                            } else if xv < T::zero() {
                                -*gv
                            } else {
                                T::zero()
                            }
                        });
                    acc(&mut grads, *x, g)?;
                }
                Op::Neg(x) => {
                    let mut g = gy;
                    g.data_mut().iter_mut().for_each(|v| *v = -*v);
                    acc(&mut grads, *x, g)?;
                }
                Op::Square(x) => {
                    let mut g = gy;
                    let two = T::c(2.0);
                    g.data_mut()
                        .iter_mut()
                        .zip(self.nodes[x.0].value.data())
                        .for_each(|(gv, &xv)| *gv = *gv * two * xv);
                    acc(&mut grads, *x, g)?;
                }
                Op::Clamp { x, lo, hi } => {
                    let (lo, hi) = (*lo, *hi);
                    let mut g = gy;
                    g.data_mut()
                        .iter_mut()
                        .zip(self.nodes[x.0].value.data())
                        .for_each(|(gv, &xv)| {
                            if xv <= lo || xv >= hi {
                                *gv = T::zero();
                            }
                        });
                    acc(&mut grads, *x, g)?;
                }
                Op::Scale { x, c } => {
                    let c = *c;
                    let mut g = gy;
                    g.data_mut().iter_mut().for_each(|v| *v = *v * c);
                    acc(&mut grads, *x, g)?;
                }
                Op::AddScalar { x } => acc(&mut grads, *x, gy)?,
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    acc(&mut grads, a, gy.clone())?;
                    acc(&mut grads, b, gy)?;
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    acc(&mut grads, a, gy.clone())?;
                    let mut g = gy;
                    g.data_mut().iter_mut().for_each(|v| *v = -*v);
                    acc(&mut grads, b, g)?;
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let mut ga = gy.clone();
                    ga.data_mut()
                        .iter_mut()
                        .zip(self.nodes[b.0].value.data())
                        .for_each(|(gv, &bv)| *gv = *gv * bv);
                    acc(&mut grads, a, ga)?;
                    let mut gb = gy;
                    gb.data_mut()
                        .iter_mut()
                        .zip(self.nodes[a.0].value.data())
                        .for_each(|(gv, &av)| *gv = *gv * av);
                    acc(&mut grads, b, gb)?;
                }
                Op::RowMul { x, v } => {
                    let (x, v) = (*x, *v);
                    let &[batch, n] = self.nodes[x.0].value.shape() else {
                        unreachable!()
                    };
                    let vd = self.nodes[v.0].value.data();
                    let xd = self.nodes[x.0].value.data();
                    let mut gx = gy.clone();
                    for bi in 0..batch {
                        gx.data_mut()[bi * n..(bi + 1) * n]
                            .iter_mut()
                            .zip(vd)
                            .for_each(|(gv, &sv)| *gv = *gv * sv);
                    }
                    acc(&mut grads, x, gx)?;
                    let mut gv = Tensor::zeros(&[n]);
                    for bi in 0..batch {
                        for j in 0..n {
                            gv.data_mut()[j] += gy.data()[bi * n + j] * xd[bi * n + j];
                        }
                    }
                    acc(&mut grads, v, gv)?;
                }
                Op::RowAdd { x, v } => {
                    let (x, v) = (*x, *v);
                    let &[batch, n] = self.nodes[x.0].value.shape() else {
                        unreachable!()
                    };
                    let mut gv = Tensor::zeros(&[n]);
                    for bi in 0..batch {
                        for j in 0..n {
                            gv.data_mut()[j] += gy.data()[bi * n + j];
                        }
                    }
                    acc(&mut grads, x, gy)?;
                    acc(&mut grads, v, gv)?;
                }
                Op::Sum(x) => {
                    let g = Tensor::filled(self.nodes[x.0].value.shape(), gy.data()[0]);
                    acc(&mut grads, *x, g)?;
                }
                Op::Mean(x) => {
                    let n = T::c(self.nodes[x.0].value.len() as f64);
                    let g = Tensor::filled(self.nodes[x.0].value.shape(), gy.data()[0] / n);
                    acc(&mut grads, *x, g)?;
                }
                Op::MeanAxis0(x) => {
                    let &[batch, n] = self.nodes[x.0].value.shape() else {
                        unreachable!()
                    };
                    let inv_b = T::one() / T::c(batch as f64);
                    let mut g = Tensor::zeros(&[batch, n]);
                    for bi in 0..batch {
                        g.data_mut()[bi * n..(bi + 1) * n]
                            .iter_mut()
                            .zip(gy.data())
                            .for_each(|(gv, &dv)| *gv = dv * inv_b);
                    }
                    acc(&mut grads, *x, g)?;
                }
                Op::Reshape(x) => {
                    let g = gy.reshaped(self.nodes[x.0].value.shape())?;
                    acc(&mut grads, *x, g)?;
                }
                Op::NarrowCols { x, start, len } => {
                    let (start, len) = (*start, *len);
                    let &[batch, n] = self.nodes[x.0].value.shape() else {
                        unreachable!()
                    };
                    let mut g = Tensor::zeros(&[batch, n]);
                    for bi in 0..batch {
                        g.data_mut()[bi * n + start..bi * n + start + len]
                            .copy_from_slice(&gy.data()[bi * len..(bi + 1) * len]);
                    }
                    acc(&mut grads, *x, g)?;
                }
                Op::Dense { x, w, b } => {
                    let (x, w, b) = (*x, *w, *b);
                    let (gx, gw, gb) = self.dense_backward(x, w, &gy);
                    acc(&mut grads, x, gx)?;
                    acc(&mut grads, w, gw)?;
                    acc(&mut grads, b, gb)?;
                }
                Op::Conv2d { x, k, b, stride } => {
                    let (x, k, b, stride) = (*x, *k, *b, *stride);
                    let (gx, gk, gb) = self.conv2d_backward(x, k, stride, &gy);
                    acc(&mut grads, x, gx)?;
                    acc(&mut grads, k, gk)?;
                    acc(&mut grads, b, gb)?;
                }
                Op::ConvT2d { x, k, b, stride } => {
                    let (x, k, b, stride) = (*x, *k, *b, *stride);
                    let (gx, gk, gb) = self.convt2d_backward(x, k, stride, &gy);
                    acc(&mut grads, x, gx)?;
                    acc(&mut grads, k, gk)?;
                    acc(&mut grads, b, gb)?;
                }
            }
        }
        Ok(())
    }

    fn dense_backward(
        &self,
        x: NodeId,
        w: NodeId,
        gy: &Tensor<T>,
    ) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let tx = &self.nodes[x.0].value;
        let tw = &self.nodes[w.0].value;
        let (&[batch, i], &[_, o]) = (tx.shape(), tw.shape()) else {
            unreachable!()
        };
        let chunk = batch.div_ceil(BATCH_CHUNKS).max(1);

        let mut gx = Tensor::zeros(&[batch, i]);
        gx.data_mut()
            .par_chunks_mut(chunk * i)
            .zip(gy.data().par_chunks(chunk * o))
            .for_each(|(gxc, gyc)| {
                let rows = gxc.len() / i;
                linalg::matmul_bt(rows, o, i, gyc, tw.data(), gxc, false);
            });

        // dW and db are reduced over fixed batch chunks in index order so the
        // result does not depend on thread scheduling.
        let partials: Vec<(Vec<T>, Vec<T>)> = tx
            .data()
            .par_chunks(chunk * i)
            .zip(gy.data().par_chunks(chunk * o))
            .map(|(xc, gyc)| {
                let rows = xc.len() / i;
                let mut gw = vec![T::zero(); i * o];
                linalg::matmul_at(i, rows, o, xc, gyc, &mut gw, false);
                let mut gb = vec![T::zero(); o];
                for r in 0..rows {
                    gb.iter_mut()
                        .zip(&gyc[r * o..(r + 1) * o])
                        .for_each(|(acc, &v)| *acc += v);
                }
                (gw, gb)
            })
            .collect();
        let mut gw = Tensor::zeros(&[i, o]);
        let mut gb = Tensor::zeros(&[o]);
        for (pw, pb) in partials {
            gw.data_mut().iter_mut().zip(&pw).for_each(|(a, &v)| *a += v);
            gb.data_mut().iter_mut().zip(&pb).for_each(|(a, &v)| *a += v);
        }
        (gx, gw, gb)
    }

    fn conv2d_backward(
        &self,
        x: NodeId,
        k: NodeId,
        stride: usize,
        gy: &Tensor<T>,
    ) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let tx = &self.nodes[x.0].value;
        let tk = &self.nodes[k.0].value;
        let (&[batch, cin, h, w], &[cout, _, kh, kw]) = (tx.shape(), tk.shape()) else {
            unreachable!()
        };
        let g = ConvGeom::same(h, w, kh, kw, stride);
        let (ohw, ckk, in_chw) = (g.out_h * g.out_w, cin * kh * kw, cin * h * w);
        let chunk = batch.div_ceil(BATCH_CHUNKS).max(1);

        let mut gx = Tensor::zeros(&[batch, cin, h, w]);
        let partials: Vec<(Vec<T>, Vec<T>)> = gx
            .data_mut()
            .par_chunks_mut(chunk * in_chw)
            .zip(tx.data().par_chunks(chunk * in_chw))
            .zip(gy.data().par_chunks(chunk * cout * ohw))
            .map(|((gxc, xc), gyc)| {
                let mut gk = vec![T::zero(); cout * ckk];
                let mut gb = vec![T::zero(); cout];
                let mut cols = vec![T::zero(); ckk * ohw];
                for ((gxb, xb), gyb) in gxc
                    .chunks_mut(in_chw)
                    .zip(xc.chunks(in_chw))
                    .zip(gyc.chunks(cout * ohw))
                {
                    // dK += dy . cols^T  (recompute cols; cheaper than caching)
                    linalg::im2col(xb, cin, &g, &mut cols);
                    linalg::matmul_bt(cout, ohw, ckk, gyb, &cols, &mut gk, true);
                    // dx = col2im(K^T . dy)
                    linalg::matmul_at(ckk, cout, ohw, tk.data(), gyb, &mut cols, false);
                    linalg::col2im(&cols, cin, &g, gxb);
                    for c in 0..cout {
                        let s: T = gyb[c * ohw..(c + 1) * ohw].iter().copied().sum();
                        gb[c] += s;
                    }
                }
                (gk, gb)
            })
            .collect();
        let mut gk = Tensor::zeros(&[cout, cin, kh, kw]);
        let mut gb = Tensor::zeros(&[cout]);
        for (pk, pb) in partials {
            gk.data_mut().iter_mut().zip(&pk).for_each(|(a, &v)| *a += v);
            gb.data_mut().iter_mut().zip(&pb).for_each(|(a, &v)| *a += v);
        }
        (gx, gk, gb)
    }

    fn convt2d_backward(
        &self,
        x: NodeId,
        k: NodeId,
        stride: usize,
        gy: &Tensor<T>,
    ) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let tx = &self.nodes[x.0].value;
        let tk = &self.nodes[k.0].value;
        let (&[batch, cin, h, w], &[_, cout, kh, kw]) = (tx.shape(), tk.shape()) else {
            unreachable!()
        };
        let (oh, ow) = (h * stride, w * stride);
        let g = ConvGeom::same(oh, ow, kh, kw, stride);
        let (hw, ckk) = (h * w, cout * kh * kw);
        let (in_chw, out_chw) = (cin * hw, cout * oh * ow);
        let chunk = batch.div_ceil(BATCH_CHUNKS).max(1);

        let mut gx = Tensor::zeros(&[batch, cin, h, w]);
        let partials: Vec<(Vec<T>, Vec<T>)> = gx
            .data_mut()
            .par_chunks_mut(chunk * in_chw)
            .zip(tx.data().par_chunks(chunk * in_chw))
            .zip(gy.data().par_chunks(chunk * out_chw))
            .map(|((gxc, xc), gyc)| {
                let mut gk = vec![T::zero(); cin * ckk];
                let mut gb = vec![T::zero(); cout];
                let mut cols = vec![T::zero(); ckk * hw];
                for ((gxb, xb), gyb) in gxc
                    .chunks_mut(in_chw)
                    .zip(xc.chunks(in_chw))
                    .zip(gyc.chunks(out_chw))
                {
                    linalg::im2col(gyb, cout, &g, &mut cols);
                    // dx = K . im2col(dy)
                    linalg::matmul(cin, ckk, hw, tk.data(), &cols, gxb, false);
                    // dK += x . im2col(dy)^T
                    linalg::matmul_bt(cin, hw, ckk, xb, &cols, &mut gk, true);
                    for c in 0..cout {
                        let s: T = gyb[c * oh * ow..(c + 1) * oh * ow].iter().copied().sum();
                        gb[c] += s;
                    }
                }
                (gk, gb)
            })
            .collect();
        let mut gk = Tensor::zeros(&[cin, cout, kh, kw]);
        let mut gb = Tensor::zeros(&[cout]);
        for (pk, pb) in partials {
            gk.data_mut().iter_mut().zip(&pk).for_each(|(a, &v)| *a += v);
            gb.data_mut().iter_mut().zip(&pb).for_each(|(a, &v)| *a += v);
        }
        (gx, gk, gb)
    }
}

fn acc<T: Real>(grads: &mut [Option<Tensor<T>>], id: NodeId, delta: Tensor<T>) -> Result<()> {
    match &mut grads[id.0] {
        Some(g) => g.add_assign(&delta),
        slot @ None => {
            *slot = Some(delta);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f32>) -> Tensor<f32> {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn relu_clips_negatives() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], vec![-1.0, 0.0, 2.0])).unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn dense_identity() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], vec![1.0, 2.0])).unwrap();
        let w = g.constant(t(&[2, 2], vec![1.0, 0.0, 0.0, 1.0])).unwrap();
        let b = g.constant(t(&[2], vec![0.0, 0.0])).unwrap();
        let y = g.dense(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn conv_shape_contract() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 1, 32, 32])).unwrap();
        let k = g.constant(Tensor::filled(&[8, 1, 4, 4], 0.1f32)).unwrap();
        let b = g.constant(Tensor::zeros(&[8])).unwrap();
        let y = g.conv2d(x, k, b, 2).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 8, 16, 16]);
    }

    #[test]
    fn conv_transpose_inverts_conv_shape() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(&[2, 8, 2, 2], 0.5f32)).unwrap();
        let k = g.constant(Tensor::filled(&[8, 4, 4, 4], 0.1f32)).unwrap();
        let b = g.constant(Tensor::zeros(&[4])).unwrap();
        let up = g.conv2d_transpose(x, k, b, 2).unwrap();
        assert_eq!(g.value(up).shape(), &[2, 4, 4, 4]);
        let k2 = g.constant(Tensor::filled(&[8, 4, 4, 4], 0.1f32)).unwrap();
        let b2 = g.constant(Tensor::zeros(&[8])).unwrap();
        let down = g.conv2d(up, k2, b2, 2).unwrap();
        assert_eq!(g.value(down).shape(), g.value(x).shape());
    }

    #[test]
    fn linear_backward_matches_outer_structure() {
        // loss = sum(x W); dloss/dW[i][j] = x[i] summed over batch rows.
        let mut g = Graph::new();
        let mut store = ParamStore::new();
        let wid = store
            .add("w", t(&[2, 2], vec![0.3, -0.2, 0.7, 0.5]))
            .unwrap();
        let x = g.constant(t(&[1, 2], vec![2.0, -3.0])).unwrap();
        let w = g.param(&store, wid).unwrap();
        let b = g.constant(Tensor::zeros(&[2])).unwrap();
        let y = g.dense(x, w, b).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(wid).data(), &[2.0, 2.0, -3.0, -3.0]);
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut g = Graph::new();
        let mut store = ParamStore::new();
        let used = store.add("used", t(&[1], vec![3.0])).unwrap();
        let unused = store.add("unused", t(&[1], vec![5.0])).unwrap();
        let p = g.param(&store, used).unwrap();
        let loss = g.sum(p).unwrap();
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(used).data(), &[1.0]);
        assert_eq!(store.grad(unused).data(), &[0.0]);
    }

    #[test]
    fn backward_without_graph_is_state_error() {
        let g = Graph::<f32>::new();
        let mut store = ParamStore::new();
        let err = g.backward(NodeId(0), &mut store).unwrap_err();
        assert!(matches!(err, KernelError::State(_)));
    }

    #[test]
    fn non_finite_surfaces_with_op_name() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1], vec![-1.0])).unwrap();
        let err = g.log(x).unwrap_err();
        match err {
            KernelError::NonFinite { op } => assert_eq!(op, "log"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_lists_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::<f32>::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::<f32>::zeros(&[3, 2])).unwrap();
        let err = g.add(a, b).unwrap_err();
        match err {
            KernelError::Shape { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![3, 2]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn abs_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let mut store = ParamStore::new();
        let pid = store.add("x", t(&[3], vec![-2.0, 0.0, 2.0])).unwrap();
        let x = g.param(&store, pid).unwrap();
        let y = g.abs(x).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(pid).data(), &[-1.0, 0.0, 1.0]);
    }
}
