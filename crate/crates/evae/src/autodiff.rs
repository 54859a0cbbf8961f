//! Tape-based reverse-mode autodiff.
//!
//! Every operation appends a node and evaluates eagerly. Backward rules are
//! themselves expressed through the same op constructors, so gradients are
//! ordinary tape nodes and can be differentiated again — which is how the
//! discriminator's gradient penalty gets its parameter gradients.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Scalar, Tensor};

pub type NodeId = usize;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Recip(NodeId),
    Sqrt(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    LeakyRelu {
        x: NodeId,
        slope: f64,
    },
    // gradient of LeakyRelu: linear in `g`, mask taken from `x`
    LeakyReluGrad {
        g: NodeId,
        x: NodeId,
        slope: f64,
    },
    SumAll(NodeId),
    ReduceSum {
        x: NodeId,
    },
    Broadcast {
        x: NodeId,
    },
    Reshape {
        x: NodeId,
    },
    Permute {
        x: NodeId,
        perm: Vec<usize>,
    },
    Concat {
        parts: Vec<NodeId>,
        axis: usize,
    },
    Slice {
        x: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    // y = x * scale + shift with per-channel (and optionally per-sample)
    // factors shaped (1|N, C, 1, 1)
    ChannelAffine {
        x: NodeId,
        scale: NodeId,
        shift: Option<NodeId>,
    },
    ConvInputGrad {
        g: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
    },
    ConvWeightGrad {
        x: NodeId,
        g: NodeId,
        stride: usize,
        pad: usize,
    },
    UpsampleNearest {
        x: NodeId,
        factor: usize,
    },
    BilinearResize {
        x: NodeId,
    },
    BilinearAdjoint {
        g: NodeId,
    },
    SumPool {
        x: NodeId,
        factor: usize,
    },
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    Softmax {
        x: NodeId,
        axis: usize,
    },
    // fused per-group normalization (mean 0, variance 1 per group)
    GroupNormalize {
        x: NodeId,
        groups: usize,
    },
    // per-group inverse std, shaped (N*groups, 1); backward companion
    GroupInvStd {
        x: NodeId,
        groups: usize,
    },
    Silu(NodeId),
}

type SmallParents = Vec<NodeId>;

fn collect_parents(op: &Op, out: &mut SmallParents) {
    match op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul { a, b } => {
            out.push(*a);
            out.push(*b);
        }
        Op::Neg(a)
        | Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Recip(a)
        | Op::Sqrt(a)
        | Op::Exp(a)
        | Op::Ln(a)
        | Op::Sigmoid(a)
        | Op::Softplus(a)
        | Op::Silu(a)
        | Op::SumAll(a) => out.push(*a),
        Op::LeakyRelu { x, .. }
        | Op::ReduceSum { x }
        | Op::Broadcast { x }
        | Op::Reshape { x }
        | Op::Permute { x, .. }
        | Op::Slice { x, .. }
        | Op::UpsampleNearest { x, .. }
        | Op::SumPool { x, .. }
        | Op::BilinearResize { x }
        | Op::Softmax { x, .. }
        | Op::GroupNormalize { x, .. }
        | Op::GroupInvStd { x, .. } => out.push(*x),
        Op::LeakyReluGrad { g, x, .. } => {
            out.push(*g);
            out.push(*x);
        }
        Op::BilinearAdjoint { g } => out.push(*g),
        Op::Concat { parts, .. } => out.extend_from_slice(parts),
        Op::Conv2d { x, w, bias, .. } => {
            out.push(*x);
            out.push(*w);
            if let Some(b) = bias {
                out.push(*b);
            }
        }
        Op::ConvInputGrad { g: x, w, .. } => {
            out.push(*x);
            out.push(*w);
        }
        Op::ChannelAffine { x, scale, shift } => {
            out.push(*x);
            out.push(*scale);
            if let Some(b) = shift {
                out.push(*b);
            }
        }
        Op::ConvWeightGrad { x, g, .. } => {
            out.push(*x);
            out.push(*g);
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
}

/// Computation tape; freed wholesale between training steps.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> NodeId {
        #[cfg(feature = "profile-ops")]
        profile::record(&op, value.len());
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// New leaf carrying the value of `id`; gradients stop here.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.nodes[id].value.clone();
        self.leaf(v)
    }

    fn binary_elementwise(
        &mut self,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T + Sync,
        op: Op,
    ) -> NodeId {
        let v = self.nodes[a]
            .value
            .zip_map(&self.nodes[b].value, f)
            .unwrap_or_else(|_| {
                panic!(
                    "elementwise op on mismatched shapes {:?} vs {:?}",
                    self.shape(a),
                    self.shape(b)
                )
            });
        self.push(v, op)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_elementwise(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_elementwise(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_elementwise(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(|x| -x);
        self.push(v, Op::Neg(a))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let cv = T::of_f64(c);
        let v = self.nodes[a].value.map(|x| x * cv);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let cv = T::of_f64(c);
        let v = self.nodes[a].value.map(|x| x + cv);
        self.push(v, Op::AddScalar(a))
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(|x| x.recip());
        self.push(v, Op::Recip(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(|x| x.sqrt());
        self.push(v, Op::Sqrt(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(|x| x.exp());
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(|x| x.ln());
        self.push(v, Op::Ln(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(stable_sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(stable_softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let s = T::of_f64(slope);
        let v = self.nodes[a]
            .value
            .map(|x| if x > T::zero() { x } else { x * s });
        self.push(v, Op::LeakyRelu { x: a, slope })
    }

    fn leaky_relu_grad(&mut self, g: NodeId, x: NodeId, slope: f64) -> NodeId {
        let s = T::of_f64(slope);
        let v = self.nodes[g]
            .value
            .zip_map(&self.nodes[x].value, |gv, xv| {
                if xv > T::zero() {
                    gv
                } else {
                    gv * s
                }
            })
            .expect("leaky_relu_grad shape mismatch");
        self.push(v, Op::LeakyReluGrad { g, x, slope })
    }

    /// `x * sigmoid(x)` as one fused node.
    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(|x| x * stable_sigmoid(x));
        self.push(v, Op::Silu(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.mul(a, a)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let r = self.recip(b);
        self.mul(a, r)
    }

    /// Full reduction to a rank-1 scalar tensor `[1]`.
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.nodes[a].value.sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a].value.len();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum over `axes`, keeping reduced dims as size 1.
    pub fn reduce_sum(&mut self, a: NodeId, axes: &[usize]) -> NodeId {
        let v = reduce_sum_value(&self.nodes[a].value, axes);
        self.push(v, Op::ReduceSum { x: a })
    }

    /// Broadcast from a scalar `[1]` or a same-rank shape with size-1 dims.
    pub fn broadcast(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = broadcast_value(&self.nodes[a].value, shape);
        self.push(v, Op::Broadcast { x: a })
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = self.nodes[a]
            .value
            .reshape(shape)
            .expect("reshape size mismatch");
        self.push(v, Op::Reshape { x: a })
    }

    pub fn permute(&mut self, a: NodeId, perm: &[usize]) -> NodeId {
        let v = kernels::permute(&self.nodes[a].value, perm);
        self.push(
            v,
            Op::Permute {
                x: a,
                perm: perm.to_vec(),
            },
        )
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> NodeId {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| &self.nodes[p].value).collect();
        let v = concat_value(&tensors, axis);
        self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> NodeId {
        let v = slice_value(&self.nodes[a].value, axis, start, len);
        self.push(
            v,
            Op::Slice {
                x: a,
                axis,
                start,
                len,
            },
        )
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> NodeId {
        self.conv2d_bias(x, w, None, stride, pad)
    }

    pub fn conv2d_bias(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let b = bias.map(|b| &self.nodes[b].value);
        let v =
            kernels::conv2d_with_bias(&self.nodes[x].value, &self.nodes[w].value, b, stride, pad);
        self.push(
            v,
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                pad,
            },
        )
    }

    /// Per-channel affine `x * scale + shift`; `scale`/`shift` are
    /// `(1|N, C, 1, 1)`.
    pub fn channel_affine(&mut self, x: NodeId, scale: NodeId, shift: Option<NodeId>) -> NodeId {
        let v = kernels::channel_affine(
            &self.nodes[x].value,
            &self.nodes[scale].value,
            shift.map(|b| &self.nodes[b].value),
        );
        self.push(v, Op::ChannelAffine { x, scale, shift })
    }

    fn conv2d_input_grad(
        &mut self,
        g: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
        in_hw: (usize, usize),
    ) -> NodeId {
        let v = kernels::conv2d_input_grad(
            &self.nodes[g].value,
            &self.nodes[w].value,
            stride,
            pad,
            in_hw,
        );
        self.push(v, Op::ConvInputGrad { g, w, stride, pad })
    }

    fn conv2d_weight_grad(
        &mut self,
        x: NodeId,
        g: NodeId,
        stride: usize,
        pad: usize,
        k_hw: (usize, usize),
    ) -> NodeId {
        let v = kernels::conv2d_weight_grad(
            &self.nodes[x].value,
            &self.nodes[g].value,
            stride,
            pad,
            k_hw,
        );
        self.push(v, Op::ConvWeightGrad { x, g, stride, pad })
    }

    pub fn upsample_nearest(&mut self, x: NodeId, factor: usize) -> NodeId {
        let v = kernels::upsample_nearest(&self.nodes[x].value, factor);
        self.push(v, Op::UpsampleNearest { x, factor })
    }

    pub fn sum_pool(&mut self, x: NodeId, factor: usize) -> NodeId {
        let v = kernels::sum_pool(&self.nodes[x].value, factor);
        self.push(v, Op::SumPool { x, factor })
    }

    pub fn bilinear_resize(&mut self, x: NodeId, oh: usize, ow: usize) -> NodeId {
        let v = kernels::bilinear_resize(&self.nodes[x].value, oh, ow);
        self.push(v, Op::BilinearResize { x })
    }

    fn bilinear_adjoint(&mut self, g: NodeId, ih: usize, iw: usize) -> NodeId {
        let v = kernels::bilinear_resize_adjoint(&self.nodes[g].value, ih, iw);
        self.push(v, Op::BilinearAdjoint { g })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = kernels::matmul(&self.nodes[a].value, &self.nodes[b].value);
        self.push(v, Op::Matmul { a, b })
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> NodeId {
        let v = softmax_value(&self.nodes[x].value, axis);
        self.push(v, Op::Softmax { x, axis })
    }

    /// Fused per-group normalization of a rank-4 tensor.
    pub fn group_normalize(&mut self, x: NodeId, groups: usize) -> NodeId {
        let v = group_normalize_value(&self.nodes[x].value, groups);
        self.push(v, Op::GroupNormalize { x, groups })
    }

    fn group_inv_std(&mut self, x: NodeId, groups: usize) -> NodeId {
        let v = group_inv_std_value(&self.nodes[x].value, groups);
        self.push(v, Op::GroupInvStd { x, groups })
    }

    /// Reverse-mode gradients of scalar `y` w.r.t. each node in `wrt`.
    ///
    /// The returned gradients are tape nodes, so they can be combined into
    /// new losses and differentiated again. Nodes `y` does not depend on get
    /// `None`.
    pub fn grad(&mut self, y: NodeId, wrt: &[NodeId]) -> Result<Vec<Option<NodeId>>> {
        if self.nodes[y].value.len() != 1 {
            return Err(Error::invalid_argument(format!(
                "grad needs a scalar output, got shape {:?}",
                self.shape(y)
            )));
        }
        // propagate only into nodes that can reach a requested leaf; this
        // keeps e.g. the discriminator backward from descending into the
        // generator subgraph
        let mut needed = vec![false; y + 1];
        for &w in wrt {
            if w <= y {
                needed[w] = true;
            }
        }
        for id in 0..=y {
            if !needed[id] {
                let mut ps = SmallParents::default();
                collect_parents(&self.nodes[id].op, &mut ps);
                needed[id] = ps.iter().any(|&p| needed[p]);
            }
        }
        if !needed[y] {
            return Ok(wrt.iter().map(|_| None).collect());
        }
        let mut adj: Vec<Option<NodeId>> = vec![None; y + 1];
        adj[y] = Some(self.leaf(Tensor::ones(&[1])));
        for id in (0..=y).rev() {
            let Some(g) = adj[id] else { continue };
            let op = self.nodes[id].op.clone();
            let nd = |p: NodeId| needed[p];
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    if nd(a) {
                        self.accum(&mut adj, a, g);
                    }
                    if nd(b) {
                        self.accum(&mut adj, b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if nd(a) {
                        self.accum(&mut adj, a, g);
                    }
                    if nd(b) {
                        let n = self.neg(g);
                        self.accum(&mut adj, b, n);
                    }
                }
                Op::Mul(a, b) => {
                    if nd(a) {
                        let ga = self.mul(g, b);
                        self.accum(&mut adj, a, ga);
                    }
                    if nd(b) {
                        let gb = self.mul(g, a);
                        self.accum(&mut adj, b, gb);
                    }
                }
                Op::Neg(a) => {
                    let n = self.neg(g);
                    self.accum(&mut adj, a, n);
                }
                Op::Scale(a, c) => {
                    let s = self.scale(g, c);
                    self.accum(&mut adj, a, s);
                }
                Op::AddScalar(a) => self.accum(&mut adj, a, g),
                Op::Recip(a) => {
                    // d(1/a) = -y^2 dg
                    let y2 = self.mul(id, id);
                    let m = self.mul(g, y2);
                    let n = self.neg(m);
                    self.accum(&mut adj, a, n);
                }
                Op::Sqrt(a) => {
                    // d sqrt = g / (2 y)
                    let r = self.recip(id);
                    let h = self.scale(r, 0.5);
                    let m = self.mul(g, h);
                    self.accum(&mut adj, a, m);
                }
                Op::Exp(a) => {
                    let m = self.mul(g, id);
                    self.accum(&mut adj, a, m);
                }
                Op::Ln(a) => {
                    let r = self.recip(a);
                    let m = self.mul(g, r);
                    self.accum(&mut adj, a, m);
                }
                Op::Sigmoid(a) => {
                    // y (1 - y) g
                    let ny = self.neg(id);
                    let om = self.add_scalar(ny, 1.0);
                    let yy = self.mul(id, om);
                    let m = self.mul(g, yy);
                    self.accum(&mut adj, a, m);
                }
                Op::Softplus(a) => {
                    let s = self.sigmoid(a);
                    let m = self.mul(g, s);
                    self.accum(&mut adj, a, m);
                }
                Op::LeakyRelu { x, slope } => {
                    let m = self.leaky_relu_grad(g, x, slope);
                    self.accum(&mut adj, x, m);
                }
                Op::LeakyReluGrad { g: g0, x, slope } => {
                    // linear in g0 with the same mask; d/dx is zero a.e.
                    if nd(g0) {
                        let m = self.leaky_relu_grad(g, x, slope);
                        self.accum(&mut adj, g0, m);
                    }
                }
                Op::SumAll(a) => {
                    let shape = self.shape(a).to_vec();
                    let b = self.broadcast(g, &shape);
                    self.accum(&mut adj, a, b);
                }
                Op::ReduceSum { x } => {
                    let shape = self.shape(x).to_vec();
                    let b = self.broadcast(g, &shape);
                    self.accum(&mut adj, x, b);
                }
                Op::Broadcast { x } => {
                    let src_shape = self.shape(x).to_vec();
                    let contrib = if src_shape == [1] {
                        self.sum_all(g)
                    } else {
                        let axes: Vec<usize> = src_shape
                            .iter()
                            .enumerate()
                            .filter(|(i, &d)| d == 1 && self.shape(g)[*i] != 1)
                            .map(|(i, _)| i)
                            .collect();
                        if axes.is_empty() {
                            g
                        } else {
                            self.reduce_sum(g, &axes)
                        }
                    };
                    self.accum(&mut adj, x, contrib);
                }
                Op::Reshape { x } => {
                    let shape = self.shape(x).to_vec();
                    let r = self.reshape(g, &shape);
                    self.accum(&mut adj, x, r);
                }
                Op::Permute { x, perm } => {
                    let mut inv = vec![0usize; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let r = self.permute(g, &inv);
                    self.accum(&mut adj, x, r);
                }
                Op::Concat { parts, axis } => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.shape(p)[axis];
                        if nd(p) {
                            let s = self.slice(g, axis, offset, len);
                            self.accum(&mut adj, p, s);
                        }
                        offset += len;
                    }
                }
                Op::Slice {
                    x,
                    axis,
                    start,
                    len,
                } => {
                    // embed the slice gradient into zeros via concat
                    let xshape = self.shape(x).to_vec();
                    let total = xshape[axis];
                    let mut parts = Vec::new();
                    if start > 0 {
                        let mut s = xshape.clone();
                        s[axis] = start;
                        parts.push(self.leaf(Tensor::zeros(&s)));
                    }
                    parts.push(g);
                    if start + len < total {
                        let mut s = xshape.clone();
                        s[axis] = total - start - len;
                        parts.push(self.leaf(Tensor::zeros(&s)));
                    }
                    let e = if parts.len() == 1 {
                        g
                    } else {
                        self.concat(&parts, axis)
                    };
                    self.accum(&mut adj, x, e);
                }
                Op::Conv2d {
                    x,
                    w,
                    bias,
                    stride,
                    pad,
                } => {
                    if let Some(bid) = bias {
                        if nd(bid) {
                            let gb = self.reduce_sum(g, &[0, 2, 3]);
                            self.accum(&mut adj, bid, gb);
                        }
                    }
                    if nd(x) {
                        let in_hw = {
                            let s = self.shape(x);
                            (s[2], s[3])
                        };
                        let gx = self.conv2d_input_grad(g, w, stride, pad, in_hw);
                        self.accum(&mut adj, x, gx);
                    }
                    if nd(w) {
                        let k_hw = {
                            let s = self.shape(w);
                            (s[2], s[3])
                        };
                        let gw = self.conv2d_weight_grad(x, g, stride, pad, k_hw);
                        self.accum(&mut adj, w, gw);
                    }
                }
                Op::ConvInputGrad {
                    g: g0,
                    w,
                    stride,
                    pad,
                } => {
                    if nd(g0) {
                        let gg = self.conv2d(g, w, stride, pad);
                        self.accum(&mut adj, g0, gg);
                    }
                    if nd(w) {
                        let k_hw = {
                            let s = self.shape(w);
                            (s[2], s[3])
                        };
                        let gw = self.conv2d_weight_grad(g, g0, stride, pad, k_hw);
                        self.accum(&mut adj, w, gw);
                    }
                }
                Op::ConvWeightGrad {
                    x,
                    g: g0,
                    stride,
                    pad,
                } => {
                    if nd(x) {
                        let in_hw = {
                            let s = self.shape(x);
                            (s[2], s[3])
                        };
                        let gx = self.conv2d_input_grad(g0, g, stride, pad, in_hw);
                        self.accum(&mut adj, x, gx);
                    }
                    if nd(g0) {
                        let gg = self.conv2d(x, g, stride, pad);
                        self.accum(&mut adj, g0, gg);
                    }
                }
                Op::UpsampleNearest { x, factor } => {
                    let p = self.sum_pool(g, factor);
                    self.accum(&mut adj, x, p);
                }
                Op::SumPool { x, factor } => {
                    let u = self.upsample_nearest(g, factor);
                    self.accum(&mut adj, x, u);
                }
                Op::BilinearResize { x } => {
                    let s = self.shape(x);
                    let (ih, iw) = (s[2], s[3]);
                    let a = self.bilinear_adjoint(g, ih, iw);
                    self.accum(&mut adj, x, a);
                }
                Op::BilinearAdjoint { g: g0 } => {
                    let s = self.shape(g0);
                    let (oh, ow) = (s[2], s[3]);
                    let r = self.bilinear_resize(g, oh, ow);
                    self.accum(&mut adj, g0, r);
                }
                Op::Matmul { a, b } => {
                    if nd(a) {
                        let bt = self.permute(b, &[0, 2, 1]);
                        let ga = self.matmul(g, bt);
                        self.accum(&mut adj, a, ga);
                    }
                    if nd(b) {
                        let at = self.permute(a, &[0, 2, 1]);
                        let gb = self.matmul(at, g);
                        self.accum(&mut adj, b, gb);
                    }
                }
                Op::Softmax { x, axis } => {
                    // gx = y * (g - sum(g*y, axis))
                    let gy = self.mul(g, id);
                    let s = self.reduce_sum(gy, &[axis]);
                    let shape = self.shape(g).to_vec();
                    let sb = self.broadcast(s, &shape);
                    let d = self.sub(g, sb);
                    let gx = self.mul(id, d);
                    self.accum(&mut adj, x, gx);
                }
                Op::ChannelAffine { x, scale, shift } => {
                    if nd(x) {
                        let dx = self.channel_affine(g, scale, None);
                        self.accum(&mut adj, x, dx);
                    }
                    let sshape = self.shape(scale).to_vec();
                    let axes: Vec<usize> = if sshape[0] == 1 {
                        vec![0, 2, 3]
                    } else {
                        vec![2, 3]
                    };
                    if nd(scale) {
                        let gx = self.mul(g, x);
                        let ds = self.reduce_sum(gx, &axes);
                        self.accum(&mut adj, scale, ds);
                    }
                    if let Some(bid) = shift {
                        if nd(bid) {
                            let db = self.reduce_sum(g, &axes);
                            self.accum(&mut adj, bid, db);
                        }
                    }
                }
                Op::Silu(a) => {
                    // d silu = s + x s (1 - s) with s = sigmoid(x)
                    let sg = self.sigmoid(a);
                    let sx = self.mul(sg, a);
                    let s2 = self.mul(sg, sg);
                    let s2x = self.mul(s2, a);
                    let inner = self.sub(sx, s2x);
                    let d = self.add(sg, inner);
                    let gx = self.mul(g, d);
                    self.accum(&mut adj, a, gx);
                }
                Op::GroupNormalize { x, groups } => {
                    // dx = s * (g - mean(g) - yh * mean(g * yh)), means per group
                    let xshape = self.shape(x).to_vec();
                    let (n, c, h, w) = (xshape[0], xshape[1], xshape[2], xshape[3]);
                    let rows = n * groups;
                    let m = (c / groups) * h * w;
                    let g2 = self.reshape(g, &[rows, m]);
                    let yh = self.reshape(id, &[rows, m]);
                    let sum_g = self.reduce_sum(g2, &[1]);
                    let mg = self.scale(sum_g, 1.0 / m as f64);
                    let gy = self.mul(g2, yh);
                    let sum_gy = self.reduce_sum(gy, &[1]);
                    let mgy = self.scale(sum_gy, 1.0 / m as f64);
                    let mg_b = self.broadcast(mg, &[rows, m]);
                    let mgy_b = self.broadcast(mgy, &[rows, m]);
                    let t1 = self.sub(g2, mg_b);
                    let t2 = self.mul(yh, mgy_b);
                    let d = self.sub(t1, t2);
                    let inv = self.group_inv_std(x, groups);
                    let inv_b = self.broadcast(inv, &[rows, m]);
                    let dx = self.mul(d, inv_b);
                    let back = self.reshape(dx, &xshape);
                    self.accum(&mut adj, x, back);
                }
                Op::GroupInvStd { x, groups } => {
                    // ds/dx = -s^2 yh / m
                    let xshape = self.shape(x).to_vec();
                    let (n, c, h, w) = (xshape[0], xshape[1], xshape[2], xshape[3]);
                    let rows = n * groups;
                    let m = (c / groups) * h * w;
                    let s2 = self.mul(id, id);
                    let us2 = self.mul(g, s2);
                    let coef = self.scale(us2, -1.0 / m as f64);
                    let yh_full = self.group_normalize(x, groups);
                    let yh = self.reshape(yh_full, &[rows, m]);
                    let coef_b = self.broadcast(coef, &[rows, m]);
                    let dx = self.mul(coef_b, yh);
                    let back = self.reshape(dx, &xshape);
                    self.accum(&mut adj, x, back);
                }
            }
        }
        Ok(wrt.iter().map(|&w| adj.get(w).copied().flatten()).collect())
    }

    fn accum(&mut self, adj: &mut [Option<NodeId>], parent: NodeId, contrib: NodeId) {
        adj[parent] = Some(match adj[parent] {
            None => contrib,
            Some(existing) => self.add(existing, contrib),
        });
    }

    /// First-order gradients as plain tensors, without materializing
    /// gradient nodes. Same rules and accumulation order as [`Tape::grad`],
    /// but adjoint buffers are freed as soon as they are consumed, which is
    /// what the training loop wants. Use [`Tape::grad`] when the gradient
    /// itself must stay differentiable (the R1 penalty).
    pub fn grad_values(&self, y: NodeId, wrt: &[NodeId]) -> Result<Vec<Option<Tensor<T>>>> {
        if self.nodes[y].value.len() != 1 {
            return Err(Error::invalid_argument(format!(
                "grad needs a scalar output, got shape {:?}",
                self.shape(y)
            )));
        }
        let mut needed = vec![false; y + 1];
        for &w in wrt {
            if w <= y {
                needed[w] = true;
            }
        }
        for id in 0..=y {
            if !needed[id] {
                let mut ps = SmallParents::default();
                collect_parents(&self.nodes[id].op, &mut ps);
                needed[id] = ps.iter().any(|&p| needed[p]);
            }
        }
        if !needed[y] {
            return Ok(wrt.iter().map(|_| None).collect());
        }
        let keep: std::collections::HashSet<NodeId> = wrt.iter().copied().collect();
        let mut adj: Vec<Option<Tensor<T>>> = vec![None; y + 1];
        adj[y] = Some(Tensor::ones(&[1]));
        for id in (0..=y).rev() {
            let g = if keep.contains(&id) {
                match &adj[id] {
                    Some(t) => t.clone(),
                    None => continue,
                }
            } else {
                match adj[id].take() {
                    Some(t) => t,
                    None => continue,
                }
            };
            let nd = |p: NodeId| needed[p];
            let val = |p: NodeId| &self.nodes[p].value;
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    if nd(a) && nd(b) {
                        acc_val(&mut adj, a, g.clone());
                        acc_val(&mut adj, b, g);
                    } else if nd(a) {
                        acc_val(&mut adj, a, g);
                    } else if nd(b) {
                        acc_val(&mut adj, b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if nd(*b) {
                        acc_val(&mut adj, *b, g.map(|v| -v));
                    }
                    if nd(*a) {
                        acc_val(&mut adj, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if nd(*a) {
                        acc_val(&mut adj, *a, g.zip_map(val(*b), |x, y| x * y)?);
                    }
                    if nd(*b) {
                        acc_val(&mut adj, *b, g.zip_map(val(*a), |x, y| x * y)?);
                    }
                }
                Op::Neg(a) => acc_val(&mut adj, *a, g.map(|v| -v)),
                Op::Scale(a, c) => {
                    let cv = T::of_f64(*c);
                    acc_val(&mut adj, *a, g.map(|v| v * cv));
                }
                Op::AddScalar(a) => acc_val(&mut adj, *a, g),
                Op::Recip(a) => {
                    let y_v = &self.nodes[id].value;
                    acc_val(&mut adj, *a, g.zip_map(y_v, |gv, yv| -gv * yv * yv)?);
                }
                Op::Sqrt(a) => {
                    let y_v = &self.nodes[id].value;
                    let half = T::of_f64(0.5);
                    acc_val(&mut adj, *a, g.zip_map(y_v, |gv, yv| gv * half / yv)?);
                }
                Op::Exp(a) => {
                    let y_v = &self.nodes[id].value;
                    acc_val(&mut adj, *a, g.zip_map(y_v, |gv, yv| gv * yv)?);
                }
                Op::Ln(a) => {
                    acc_val(&mut adj, *a, g.zip_map(val(*a), |gv, xv| gv / xv)?);
                }
                Op::Sigmoid(a) => {
                    let y_v = &self.nodes[id].value;
                    acc_val(&mut adj, *a, g.zip_map(y_v, |gv, s| gv * s * (T::one() - s))?);
                }
                Op::Softplus(a) => {
                    acc_val(&mut adj, *a, g.zip_map(val(*a), |gv, xv| gv * stable_sigmoid(xv))?);
                }
                Op::Silu(a) => {
                    acc_val(
                        &mut adj,
                        *a,
                        g.zip_map(val(*a), |gv, xv| {
                            let s = stable_sigmoid(xv);
                            gv * (s + xv * s * (T::one() - s))
                        })?,
                    );
                }
                Op::LeakyRelu { x, slope } => {
                    let sl = T::of_f64(*slope);
                    acc_val(
                        &mut adj,
                        *x,
                        g.zip_map(val(*x), |gv, xv| if xv > T::zero() { gv } else { gv * sl })?,
                    );
                }
                Op::LeakyReluGrad { g: g0, x, slope } => {
                    if nd(*g0) {
                        let sl = T::of_f64(*slope);
                        acc_val(
                            &mut adj,
                            *g0,
                            g.zip_map(val(*x), |gv, xv| if xv > T::zero() { gv } else { gv * sl })?,
                        );
                    }
                }
                Op::SumAll(a) => {
                    acc_val(&mut adj, *a, Tensor::full(val(*a).shape(), g.item()));
                }
                Op::ReduceSum { x } => {
                    acc_val(&mut adj, *x, broadcast_value(&g, val(*x).shape()));
                }
                Op::Broadcast { x } => {
                    let src_shape = val(*x).shape().to_vec();
                    let contrib = if src_shape == [1] {
                        Tensor::scalar(g.sum())
                    } else {
                        let axes: Vec<usize> = src_shape
                            .iter()
                            .enumerate()
                            .filter(|(i, &d)| d == 1 && g.shape()[*i] != 1)
                            .map(|(i, _)| i)
                            .collect();
                        if axes.is_empty() {
                            g
                        } else {
                            reduce_sum_value(&g, &axes)
                        }
                    };
                    acc_val(&mut adj, *x, contrib);
                }
                Op::Reshape { x } => {
                    let shape = val(*x).shape().to_vec();
                    acc_val(&mut adj, *x, Tensor::new(shape, g.into_data())?);
                }
                Op::Permute { x, perm } => {
                    let mut inv = vec![0usize; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    acc_val(&mut adj, *x, kernels::permute(&g, &inv));
                }
                Op::Concat { parts, axis } => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.shape(p)[*axis];
                        if nd(p) {
                            acc_val(&mut adj, p, slice_value(&g, *axis, offset, len));
                        }
                        offset += len;
                    }
                }
                Op::Slice { x, axis, start, len } => {
                    // direct embed into a zero buffer
                    let xshape = val(*x).shape();
                    let mut out = Tensor::zeros(xshape);
                    let outer: usize = xshape[..*axis].iter().product();
                    let inner: usize = xshape[*axis + 1..].iter().product();
                    let total = xshape[*axis];
                    for o in 0..outer {
                        let src_base = o * len * inner;
                        let dst_base = (o * total + start) * inner;
                        out.data_mut()[dst_base..dst_base + len * inner]
                            .copy_from_slice(&g.data()[src_base..src_base + len * inner]);
                    }
                    acc_val(&mut adj, *x, out);
                }
                Op::Conv2d { x, w, bias, stride, pad } => {
                    if let Some(bid) = bias {
                        if nd(*bid) {
                            acc_val(&mut adj, *bid, reduce_sum_value(&g, &[0, 2, 3]));
                        }
                    }
                    if nd(*x) {
                        let s = val(*x).shape();
                        let in_hw = (s[2], s[3]);
                        acc_val(
                            &mut adj,
                            *x,
                            kernels::conv2d_input_grad(&g, val(*w), *stride, *pad, in_hw),
                        );
                    }
                    if nd(*w) {
                        let s = val(*w).shape();
                        let k_hw = (s[2], s[3]);
                        acc_val(
                            &mut adj,
                            *w,
                            kernels::conv2d_weight_grad(val(*x), &g, *stride, *pad, k_hw),
                        );
                    }
                }
                Op::ConvInputGrad { g: g0, w, stride, pad } => {
                    if nd(*g0) {
                        acc_val(&mut adj, *g0, kernels::conv2d(&g, val(*w), *stride, *pad));
                    }
                    if nd(*w) {
                        let s = val(*w).shape();
                        let k_hw = (s[2], s[3]);
                        acc_val(
                            &mut adj,
                            *w,
                            kernels::conv2d_weight_grad(&g, val(*g0), *stride, *pad, k_hw),
                        );
                    }
                }
                Op::ConvWeightGrad { x, g: g0, stride, pad } => {
                    if nd(*x) {
                        let s = val(*x).shape();
                        let in_hw = (s[2], s[3]);
                        acc_val(
                            &mut adj,
                            *x,
                            kernels::conv2d_input_grad(val(*g0), &g, *stride, *pad, in_hw),
                        );
                    }
                    if nd(*g0) {
                        acc_val(&mut adj, *g0, kernels::conv2d(val(*x), &g, *stride, *pad));
                    }
                }
                Op::ChannelAffine { x, scale, shift } => {
                    if nd(*x) {
                        acc_val(&mut adj, *x, kernels::channel_affine(&g, val(*scale), None));
                    }
                    let sshape = val(*scale).shape();
                    let axes: Vec<usize> = if sshape[0] == 1 { vec![0, 2, 3] } else { vec![2, 3] };
                    if nd(*scale) {
                        let gx = g.zip_map(val(*x), |a, b| a * b)?;
                        acc_val(&mut adj, *scale, reduce_sum_value(&gx, &axes));
                    }
                    if let Some(bid) = shift {
                        if nd(*bid) {
                            acc_val(&mut adj, *bid, reduce_sum_value(&g, &axes));
                        }
                    }
                }
                Op::UpsampleNearest { x, factor } => {
                    acc_val(&mut adj, *x, kernels::sum_pool(&g, *factor));
                }
                Op::SumPool { x, factor } => {
                    acc_val(&mut adj, *x, kernels::upsample_nearest(&g, *factor));
                }
                Op::BilinearResize { x } => {
                    let s = val(*x).shape();
                    acc_val(&mut adj, *x, kernels::bilinear_resize_adjoint(&g, s[2], s[3]));
                }
                Op::BilinearAdjoint { g: g0 } => {
                    let s = val(*g0).shape();
                    acc_val(&mut adj, *g0, kernels::bilinear_resize(&g, s[2], s[3]));
                }
                Op::Matmul { a, b } => {
                    if nd(*a) {
                        let bt = kernels::permute(val(*b), &[0, 2, 1]);
                        acc_val(&mut adj, *a, kernels::matmul(&g, &bt));
                    }
                    if nd(*b) {
                        let at = kernels::permute(val(*a), &[0, 2, 1]);
                        acc_val(&mut adj, *b, kernels::matmul(&at, &g));
                    }
                }
                Op::Softmax { x, axis } => {
                    let s = &self.nodes[id].value;
                    let gy = g.zip_map(s, |a, b| a * b)?;
                    let sums = reduce_sum_value(&gy, &[*axis]);
                    let sums_b = broadcast_value(&sums, g.shape());
                    let mut gx = g;
                    for i in 0..gx.len() {
                        let v = (gx.data()[i] - sums_b.data()[i]) * s.data()[i];
                        gx.data_mut()[i] = v;
                    }
                    acc_val(&mut adj, *x, gx);
                }
                Op::GroupNormalize { x, groups } => {
                    let xshape = val(*x).shape().to_vec();
                    let rows = xshape[0] * groups;
                    let m = val(*x).len() / rows;
                    let yh = &self.nodes[id].value;
                    let inv = group_inv_std_value(val(*x), *groups);
                    let inv_m = T::of_f64(1.0 / m as f64);
                    let mut gx = Tensor::zeros(&xshape);
                    for r in 0..rows {
                        let gs = &g.data()[r * m..(r + 1) * m];
                        let ys = &yh.data()[r * m..(r + 1) * m];
                        let mut mg = T::zero();
                        let mut mgy = T::zero();
                        for (gv, yv) in gs.iter().zip(ys) {
                            mg += *gv;
                            mgy += *gv * *yv;
                        }
                        mg *= inv_m;
                        mgy *= inv_m;
                        let s = inv.data()[r];
                        let out = &mut gx.data_mut()[r * m..(r + 1) * m];
                        for ((o, gv), yv) in out.iter_mut().zip(gs).zip(ys) {
                            *o = (*gv - mg - *yv * mgy) * s;
                        }
                    }
                    acc_val(&mut adj, *x, gx);
                }
                Op::GroupInvStd { x, groups } => {
                    let xshape = val(*x).shape().to_vec();
                    let rows = xshape[0] * groups;
                    let m = val(*x).len() / rows;
                    let s = &self.nodes[id].value;
                    let yh = group_normalize_value(val(*x), *groups);
                    let inv_m = T::of_f64(-1.0 / m as f64);
                    let mut gx = Tensor::zeros(&xshape);
                    for r in 0..rows {
                        let coef = g.data()[r] * s.data()[r] * s.data()[r] * inv_m;
                        let ys = &yh.data()[r * m..(r + 1) * m];
                        let out = &mut gx.data_mut()[r * m..(r + 1) * m];
                        for (o, yv) in out.iter_mut().zip(ys) {
                            *o = coef * *yv;
                        }
                    }
                    acc_val(&mut adj, *x, gx);
                }
            }
        }
        Ok(wrt
            .iter()
            .map(|&w| if w <= y { adj[w].take() } else { None })
            .collect())
    }
}

fn acc_val<T: Scalar>(adj: &mut [Option<Tensor<T>>], parent: NodeId, contrib: Tensor<T>) {
    match &mut adj[parent] {
        None => adj[parent] = Some(contrib),
        Some(existing) => {
            for (e, &c) in existing.data_mut().iter_mut().zip(contrib.data()) {
                *e += c;
            }
        }
    }
}

fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        (T::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn stable_softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(feature = "profile-ops")]
pub mod profile {
    use super::Op;
    use std::sync::Mutex;
    use std::time::Instant;

    static STATE: Mutex<Option<(Instant, Vec<(String, f64, u64, u64)>)>> = Mutex::new(None);

    pub(super) fn record(op: &Op, len: usize) {
        let name = format!("{:?}", op)
            .split(|c: char| c == '(' || c == ' ' || c == '{')
            .next()
            .unwrap()
            .to_string();
        let mut guard = STATE.lock().unwrap();
        let now = Instant::now();
        let (last, tally) = guard.get_or_insert_with(|| (now, Vec::new()));
        let dt = now.duration_since(*last).as_secs_f64();
        *last = now;
        match tally.iter_mut().find(|(n, ..)| *n == name) {
            Some(e) => {
                e.1 += dt;
                e.2 += 1;
                e.3 += len as u64;
            }
            None => tally.push((name, dt, 1, len as u64)),
        }
    }

    pub fn reset() {
        *STATE.lock().unwrap() = None;
    }

    pub fn report() -> String {
        let guard = STATE.lock().unwrap();
        let mut out = String::new();
        if let Some((_, tally)) = guard.as_ref() {
            let mut rows = tally.clone();
            rows.sort_by(|a, b| b.1.total_cmp(&a.1));
            for (name, secs, count, elems) in rows {
                out.push_str(&format!(
                    "{name:18} {:8.1} ms  {count:6} nodes  {:9.1}k elems
",
                    secs * 1e3,
                    elems as f64 / 1e3
                ));
            }
        }
        out
    }
}

pub(crate) const GROUP_NORM_EPS: f64 = 1e-6;

fn group_shape(shape: &[usize], groups: usize) -> (usize, usize) {
    assert_eq!(shape.len(), 4, "group norm expects rank-4 input");
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    assert!(
        c % groups == 0,
        "channels {c} not divisible by {groups} groups"
    );
    (n * groups, (c / groups) * h * w)
}

fn group_normalize_value<T: Scalar>(x: &Tensor<T>, groups: usize) -> Tensor<T> {
    let (rows, m) = group_shape(x.shape(), groups);
    let mut out = Tensor::zeros(x.shape());
    let src = x.data();
    let eps = T::of_f64(GROUP_NORM_EPS);
    let inv_m = T::of_f64(1.0 / m as f64);
    out.data_mut()
        .chunks_mut(m)
        .zip(src.chunks(m))
        .take(rows)
        .for_each(|(o, row)| {
            let mut mean = T::zero();
            for &v in row {
                mean += v;
            }
            mean *= inv_m;
            let mut var = T::zero();
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var *= inv_m;
            let inv_std = (var + eps).sqrt().recip();
            for (ov, &v) in o.iter_mut().zip(row) {
                *ov = (v - mean) * inv_std;
            }
        });
    out
}

fn group_inv_std_value<T: Scalar>(x: &Tensor<T>, groups: usize) -> Tensor<T> {
    let (rows, m) = group_shape(x.shape(), groups);
    let mut out = Tensor::zeros(&[rows, 1]);
    let eps = T::of_f64(GROUP_NORM_EPS);
    let inv_m = T::of_f64(1.0 / m as f64);
    for (o, row) in out.data_mut().iter_mut().zip(x.data().chunks(m)) {
        let mut mean = T::zero();
        for &v in row {
            mean += v;
        }
        mean *= inv_m;
        let mut var = T::zero();
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        var *= inv_m;
        *o = (var + eps).sqrt().recip();
    }
    out
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn reduce_sum_value<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let shape = x.shape();
    let mut out_shape = shape.to_vec();
    for &a in axes {
        out_shape[a] = 1;
    }
    // fast path: reduce over the trailing axis only (row sums)
    if axes.len() == 1 && axes[0] == shape.len() - 1 {
        let m = shape[shape.len() - 1];
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let mut out = Tensor::zeros(&out_shape);
        for (o, row) in out.data_mut().iter_mut().zip(x.data().chunks(m)) {
            let mut acc = T::zero();
            for &v in row {
                acc += v;
            }
            *o = acc;
        }
        let _ = rows;
        return out;
    }
    // fast path: per-(sample, channel) plane sums
    if shape.len() == 4 && axes == [2, 3] {
        let plane = shape[2] * shape[3];
        let mut out = Tensor::zeros(&out_shape);
        for (o, chunk) in out.data_mut().iter_mut().zip(x.data().chunks(plane)) {
            let mut acc = T::zero();
            for &v in chunk {
                acc += v;
            }
            *o = acc;
        }
        return out;
    }
    // fast path: per-channel reduction of NCHW (conv bias gradients)
    if shape.len() == 4 && axes == [0, 2, 3] {
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let plane = h * w;
        let mut out = Tensor::zeros(&out_shape);
        let src = x.data();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                let mut acc = T::zero();
                for &v in &src[base..base + plane] {
                    acc += v;
                }
                out.data_mut()[ci] += acc;
            }
        }
        return out;
    }
    let out_strides = strides_of(&out_shape);
    let mut out = Tensor::zeros(&out_shape);
    let dst = out.data_mut();
    let mut coords = vec![0usize; shape.len()];
    for &v in x.data() {
        let mut oi = 0;
        for (d, &c) in coords.iter().enumerate() {
            if out_shape[d] != 1 {
                oi += c * out_strides[d];
            }
        }
        dst[oi] += v;
        for d in (0..shape.len()).rev() {
            coords[d] += 1;
            if coords[d] < shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    out
}

fn broadcast_value<T: Scalar>(x: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if x.shape() == [1] {
        return Tensor::full(shape, x.data()[0]);
    }
    assert_eq!(
        x.shape().len(),
        shape.len(),
        "broadcast rank mismatch: {:?} -> {:?}",
        x.shape(),
        shape
    );
    for (d, (&s, &t)) in x.shape().iter().zip(shape).enumerate() {
        assert!(s == t || s == 1, "broadcast dim {d}: {s} -> {t}");
    }
    // fast path: only trailing axes expand (row/plane fills)
    let rank = shape.len();
    let mut split = rank;
    while split > 0 && x.shape()[split - 1] == 1 {
        split -= 1;
    }
    if x.shape()[..split] == shape[..split] {
        let rows: usize = shape[..split].iter().product();
        let m: usize = shape[split..].iter().product();
        let mut out = Tensor::zeros(shape);
        let src = x.data();
        for (chunk, &v) in out.data_mut().chunks_mut(m).zip(src).take(rows) {
            chunk.fill(v);
        }
        return out;
    }
    // fast path: (1, C, 1, 1) -> (N, C, H, W) channel fill
    if rank == 4
        && x.shape()[0] == 1
        && x.shape()[1] == shape[1]
        && x.shape()[2] == 1
        && x.shape()[3] == 1
    {
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let plane = h * w;
        let mut out = Tensor::zeros(shape);
        let src = x.data();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                out.data_mut()[base..base + plane].fill(src[ci]);
            }
        }
        return out;
    }
    let src_strides = strides_of(x.shape());
    let mut out = Tensor::zeros(shape);
    let src = x.data();
    let dst = out.data_mut();
    let mut coords = vec![0usize; shape.len()];
    for o in dst.iter_mut() {
        let mut si = 0;
        for (d, &c) in coords.iter().enumerate() {
            if x.shape()[d] != 1 {
                si += c * src_strides[d];
            }
        }
        *o = src[si];
        for d in (0..shape.len()).rev() {
            coords[d] += 1;
            if coords[d] < shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    out
}

fn concat_value<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Tensor<T> {
    assert!(!parts.is_empty());
    let rank = parts[0].shape().len();
    let mut out_shape = parts[0].shape().to_vec();
    out_shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
    for p in parts {
        assert_eq!(p.shape().len(), rank);
        for d in 0..rank {
            if d != axis {
                assert_eq!(p.shape()[d], out_shape[d], "concat non-axis dims differ");
            }
        }
    }
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let mut out = Tensor::zeros(&out_shape);
    let dst = out.data_mut();
    let total_axis = out_shape[axis];
    let mut offset = 0;
    for p in parts {
        let a = p.shape()[axis];
        let src = p.data();
        for o in 0..outer {
            let src_base = o * a * inner;
            let dst_base = (o * total_axis + offset) * inner;
            dst[dst_base..dst_base + a * inner]
                .copy_from_slice(&src[src_base..src_base + a * inner]);
        }
        offset += a;
    }
    out
}

fn slice_value<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Tensor<T> {
    let shape = x.shape();
    assert!(start + len <= shape[axis], "slice out of bounds");
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = Tensor::zeros(&out_shape);
    let dst = out.data_mut();
    let src = x.data();
    for o in 0..outer {
        let src_base = (o * shape[axis] + start) * inner;
        let dst_base = o * len * inner;
        dst[dst_base..dst_base + len * inner]
            .copy_from_slice(&src[src_base..src_base + len * inner]);
    }
    out
}

fn softmax_value<T: Scalar>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let shape = x.shape();
    let outer: usize = shape[..axis].iter().product();
    let alen = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = Tensor::zeros(shape);
    let src = x.data();
    let dst = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * alen + a) * inner + i;
            let mut m = src[idx(0)];
            for a in 1..alen {
                m = m.max(src[idx(a)]);
            }
            let mut z = T::zero();
            for a in 0..alen {
                let e = (src[idx(a)] - m).exp();
                dst[idx(a)] = e;
                z += e;
            }
            let r = z.recip();
            for a in 0..alen {
                dst[idx(a)] *= r;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite difference of `f` w.r.t. one leaf entry.
    fn fd_grad(f: &dyn Fn(&Tensor<f64>) -> f64, x: &Tensor<f64>, idx: usize, h: f64) -> f64 {
        let mut xp = x.clone();
        xp.data_mut()[idx] += h;
        let mut xm = x.clone();
        xm.data_mut()[idx] -= h;
        (f(&xp) - f(&xm)) / (2.0 * h)
    }

    fn check_grads(
        f: impl Fn(&mut Tape<f64>, NodeId) -> NodeId,
        shape: &[usize],
        seed: u64,
        tol: f64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Tensor<f64> = Tensor::randn(shape, &mut rng);
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone());
        let y = f(&mut tape, xid);
        let g = tape.grad(y, &[xid]).unwrap()[0].expect("grad exists");
        let gv = tape.value(g).clone();
        let eval = |t: &Tensor<f64>| -> f64 {
            let mut tp = Tape::new();
            let id = tp.leaf(t.clone());
            let out = f(&mut tp, id);
            tp.value(out).item()
        };
        for idx in 0..x.len() {
            let fd = fd_grad(&eval, &x, idx, 1e-6);
            let ad = gv.data()[idx];
            let denom = ad.abs().max(fd.abs()).max(1.0);
            assert!((ad - fd).abs() / denom < tol, "idx {idx}: ad={ad} fd={fd}");
        }
    }

    #[test]
    fn elementwise_grads_match_finite_differences() {
        check_grads(
            |t, x| {
                let s = t.sigmoid(x);
                let e = t.exp(x);
                let m = t.mul(s, e);
                let sp = t.softplus(m);
                t.sum_all(sp)
            },
            &[2, 3],
            11,
            1e-6,
        );
        check_grads(
            |t, x| {
                let sq = t.square(x);
                let c = t.add_scalar(sq, 1.0);
                let r = t.sqrt(c);
                let l = t.ln(r);
                let lr = t.leaky_relu(l, 0.2);
                t.sum_all(lr)
            },
            &[5],
            12,
            1e-6,
        );
    }

    #[test]
    fn conv_and_shape_op_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let w: Tensor<f64> = Tensor::randn(&[2, 3, 3, 3], &mut rng);
        check_grads(
            move |t, x| {
                let wid = t.leaf(w.clone());
                let y = t.conv2d(x, wid, 2, 1);
                let u = t.upsample_nearest(y, 2);
                let sq = t.square(u);
                t.sum_all(sq)
            },
            &[1, 3, 6, 6],
            14,
            1e-5,
        );
        check_grads(
            |t, x| {
                let parts = [t.slice(x, 1, 0, 2), t.slice(x, 1, 2, 2)];
                let c = t.concat(&[parts[1], parts[0]], 1);
                let r = t.reshape(c, &[1, 4, 4]);
                let p = t.permute(r, &[0, 2, 1]);
                let sm = t.softmax(p, 2);
                let sq = t.square(sm);
                t.sum_all(sq)
            },
            &[1, 4, 2, 2],
            15,
            1e-5,
        );
    }

    #[test]
    fn matmul_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let b: Tensor<f64> = Tensor::randn(&[2, 3, 4], &mut rng);
        check_grads(
            move |t, x| {
                let bid = t.leaf(b.clone());
                let y = t.matmul(x, bid);
                let sq = t.square(y);
                t.sum_all(sq)
            },
            &[2, 2, 3],
            17,
            1e-5,
        );
    }

    #[test]
    fn second_order_grad_of_grad_norm_matches_finite_differences() {
        // phi(w) = ||d/dx f(x; w)||^2 for f = sum(conv(x, w)^3); checks that
        // differentiating a gradient built with create-graph semantics agrees
        // with finite differences over w.
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let x: Tensor<f64> = Tensor::randn(&[1, 2, 4, 4], &mut rng);
        let w: Tensor<f64> = Tensor::randn(&[2, 2, 3, 3], &mut rng);

        let phi = |wv: &Tensor<f64>| -> (f64, Option<Tensor<f64>>) {
            let mut t = Tape::new();
            let xid = t.leaf(x.clone());
            let wid = t.leaf(wv.clone());
            let y = t.conv2d(xid, wid, 1, 1);
            let y2 = t.mul(y, y);
            let y3 = t.mul(y2, y);
            let s = t.sum_all(y3);
            let gx = t.grad(s, &[xid]).unwrap()[0].unwrap();
            let gx2 = t.square(gx);
            let norm = t.sum_all(gx2);
            let gw = t.grad(norm, &[wid]).unwrap()[0].map(|id| t.value(id).clone());
            (t.value(norm).item(), gw)
        };

        let (_, gw) = phi(&w);
        let gw = gw.expect("second-order grad exists");
        for idx in [0usize, 5, 11, 17, 23, 35] {
            let h = 1e-5;
            let mut wp = w.clone();
            wp.data_mut()[idx] += h;
            let mut wm = w.clone();
            wm.data_mut()[idx] -= h;
            let fd = (phi(&wp).0 - phi(&wm).0) / (2.0 * h);
            let ad = gw.data()[idx];
            let denom = ad.abs().max(fd.abs()).max(1.0);
            assert!((ad - fd).abs() / denom < 1e-5, "idx {idx}: ad={ad} fd={fd}");
        }
    }

    #[test]
    fn grad_values_matches_node_grad() {
        // a graph touching most op kinds, differentiated both ways
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x: Tensor<f64> = Tensor::randn(&[2, 4, 6, 6], &mut rng);
        let w: Tensor<f64> = Tensor::randn(&[4, 4, 3, 3], &mut rng);
        let sc: Tensor<f64> = Tensor::randn(&[1, 4, 1, 1], &mut rng);
        let sh: Tensor<f64> = Tensor::randn(&[1, 4, 1, 1], &mut rng);
        let mut tape = Tape::new();
        let xid = tape.leaf(x);
        let wid = tape.leaf(w);
        let scid = tape.leaf(sc);
        let shid = tape.leaf(sh);
        let bid = tape.leaf(Tensor::randn(&[1, 4, 1, 1], &mut rng));
        let c = tape.conv2d_bias(xid, wid, Some(bid), 1, 1);
        let n = tape.group_normalize(c, 2);
        let aff = tape.channel_affine(n, scid, Some(shid));
        let act = tape.silu(aff);
        let lr = tape.leaky_relu(act, 0.2);
        let up = tape.upsample_nearest(lr, 2);
        let down = tape.sum_pool(up, 2);
        let soft = tape.softmax(down, 1);
        let both = tape.concat(&[soft, down], 1);
        let part = tape.slice(both, 1, 2, 4);
        let flat = tape.reshape(part, &[2, 4, 36]);
        let pt = tape.permute(flat, &[0, 2, 1]);
        let mm = tape.matmul(flat, pt);
        let sp = tape.softplus(mm);
        let sig = tape.sigmoid(sp);
        let sq = tape.square(sig);
        let loss = tape.mean_all(sq);
        let wrt = [xid, wid, scid, shid, bid];
        let node_grads = tape.grad(loss, &wrt).unwrap();
        let value_grads = tape.grad_values(loss, &wrt).unwrap();
        for (i, (ng, vg)) in node_grads.iter().zip(&value_grads).enumerate() {
            let nv = tape.value(ng.expect("node grad")).clone();
            let vv = vg.as_ref().expect("value grad");
            let diff = nv
                .zip_map(vv, |a, b| (a - b).abs())
                .unwrap()
                .max_abs();
            let scale = nv.max_abs().max(1e-12);
            assert!(diff / scale < 1e-12, "wrt {i}: diff {diff}");
        }
    }

    #[test]
    fn grad_values_supports_second_order_graphs() {
        // differentiate a gradient-norm node (built by grad) with grad_values
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x: Tensor<f64> = Tensor::randn(&[1, 2, 4, 4], &mut rng);
        let w: Tensor<f64> = Tensor::randn(&[2, 2, 3, 3], &mut rng);
        let mut tape = Tape::new();
        let xid = tape.leaf(x);
        let wid = tape.leaf(w);
        let y = tape.conv2d(xid, wid, 1, 1);
        let y3 = {
            let y2 = tape.mul(y, y);
            tape.mul(y2, y)
        };
        let s = tape.sum_all(y3);
        let gx = tape.grad(s, &[xid]).unwrap()[0].unwrap();
        let gx2 = tape.square(gx);
        let norm = tape.sum_all(gx2);
        let via_nodes = tape.grad(norm, &[wid]).unwrap()[0].map(|id| tape.value(id).clone()).unwrap();
        let via_values = tape.grad_values(norm, &[wid]).unwrap()[0].clone().unwrap();
        let diff = via_nodes
            .zip_map(&via_values, |a, b| (a - b).abs())
            .unwrap()
            .max_abs();
        assert!(diff / via_nodes.max_abs().max(1e-12) < 1e-12, "diff {diff}");
    }

    #[test]
    fn grad_returns_none_for_unrelated_leaf() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(Tensor::scalar(1.0));
        let b = t.leaf(Tensor::scalar(2.0));
        let y = t.mul(a, a);
        let g = t.grad(y, &[a, b]).unwrap();
        assert!(g[0].is_some());
        assert!(g[1].is_none());
    }

    #[test]
    fn grad_requires_scalar_output() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(Tensor::zeros(&[2, 2]));
        assert!(t.grad(a, &[a]).is_err());
    }
}
