//! Network building blocks on top of the autodiff tape.
//!
//! Layers are lightweight descriptors; parameters live in a [`ParamStore`]
//! keyed by dotted names and are pushed onto the tape as leaves for each
//! forward pass. `BTreeMap` keeps every iteration order deterministic.

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use std::collections::BTreeMap;

/// Named parameter tree for one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        assert!(
            self.entries.insert(name.clone(), value).is_none(),
            "duplicate parameter {name}"
        );
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<T> {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|t| t.len()).sum()
    }

    /// Checks two stores describe the same tree (names and shapes).
    pub fn same_tree(&self, other: &Self) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::invalid_argument("parameter trees differ in size"));
        }
        for (a, b) in self.entries.iter().zip(other.entries.iter()) {
            if a.0 != b.0 || a.1.shape() != b.1.shape() {
                return Err(Error::invalid_argument(format!(
                    "parameter trees differ at {} vs {}",
                    a.0, b.0
                )));
            }
        }
        Ok(())
    }

    pub fn to_f64(&self) -> ParamStore<f64> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.to_f64()))
                .collect(),
        }
    }

    pub fn cast_from(src: &ParamStore<f64>) -> Self {
        Self {
            entries: src
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::from_f64(v)))
                .collect(),
        }
    }
}

/// One network's parameters bound to tape leaves for a forward pass.
pub struct Bound {
    ids: BTreeMap<String, NodeId>,
}

impl Bound {
    pub fn new<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>) -> Self {
        let ids = store
            .iter()
            .map(|(name, value)| (name.clone(), tape.leaf(value.clone())))
            .collect();
        Self { ids }
    }

    pub fn id(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    /// `(name, node)` pairs in deterministic name order.
    pub fn entries(&self) -> Vec<(String, NodeId)> {
        self.ids.iter().map(|(k, &v)| (k.clone(), v)).collect()
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        self.ids.values().copied().collect()
    }
}

/// Fan-in scaled normal init; `gain` of zero gives an all-zero tensor.
pub fn fan_in_init<T: Scalar, R: Rng>(
    shape: &[usize],
    fan_in: usize,
    gain: f64,
    rng: &mut R,
) -> Tensor<T> {
    if gain == 0.0 {
        return Tensor::zeros(shape);
    }
    let std = gain / (fan_in as f64).sqrt();
    let raw: Tensor<T> = Tensor::randn(shape, rng);
    raw.map(|v| v * T::of_f64(std))
}

/// Largest group count (<= 8) dividing `channels`.
pub fn group_count(channels: usize) -> usize {
    if channels % 8 == 0 {
        8
    } else if channels % 4 == 0 {
        4
    } else if channels % 2 == 0 {
        2
    } else {
        1
    }
}

/// 2-D convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        name: impl Into<String>,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Self {
            name: name.into(),
            cin,
            cout,
            k,
            stride,
            pad,
        }
    }

    /// 1x1 convolution, the crate's linear layer.
    pub fn linear(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        Self::new(name, cin, cout, 1, 1, 0)
    }

    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R, gain: f64) {
        let fan_in = self.cin * self.k * self.k;
        store.insert(
            format!("{}.w", self.name),
            fan_in_init(&[self.cout, self.cin, self.k, self.k], fan_in, gain, rng),
        );
        store.insert(
            format!("{}.b", self.name),
            Tensor::zeros(&[1, self.cout, 1, 1]),
        );
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: NodeId) -> NodeId {
        let w = p.id(&format!("{}.w", self.name));
        let b = p.id(&format!("{}.b", self.name));
        tape.conv2d_bias(x, w, Some(b), self.stride, self.pad)
    }

    pub fn param_count(&self) -> usize {
        self.cout * self.cin * self.k * self.k + self.cout
    }
}

/// Group normalization with learned per-channel affine.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub name: String,
    pub channels: usize,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            channels,
            groups: group_count(channels),
        }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>) {
        store.insert(
            format!("{}.g", self.name),
            Tensor::ones(&[1, self.channels, 1, 1]),
        );
        store.insert(
            format!("{}.b", self.name),
            Tensor::zeros(&[1, self.channels, 1, 1]),
        );
    }

    /// Normalizes over each (sample, group) slice, then applies the affine.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: NodeId) -> NodeId {
        let normed = self.normalize(tape, x);
        let g = p.id(&format!("{}.g", self.name));
        let b = p.id(&format!("{}.b", self.name));
        tape.channel_affine(normed, g, Some(b))
    }

    fn normalize<T: Scalar>(&self, tape: &mut Tape<T>, x: NodeId) -> NodeId {
        let c = tape.shape(x)[1];
        assert_eq!(c, self.channels, "group norm channel mismatch");
        tape.group_normalize(x, self.groups)
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }
}

/// Sinusoidal features of per-sample scalars, shaped `(B, dim, 1, 1)`.
///
/// Times are multiplied by 1000 first, mapping the continuous `[0,1]` range
/// onto the usual discrete-step embedding scale.
pub fn sinusoidal_embedding<T: Scalar>(ts: &[f64], dim: usize) -> Tensor<T> {
    assert!(dim >= 2 && dim % 2 == 0, "embedding dim must be even");
    let half = dim / 2;
    let max_period: f64 = 10_000.0;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let scaled = t * 1000.0;
        for i in 0..half {
            let freq = (-(max_period.ln()) * i as f64 / half as f64).exp();
            data.push(T::of_f64((scaled * freq).cos()));
        }
        for i in 0..half {
            let freq = (-(max_period.ln()) * i as f64 / half as f64).exp();
            data.push(T::of_f64((scaled * freq).sin()));
        }
    }
    Tensor::new(vec![ts.len(), dim, 1, 1], data).expect("embedding shape")
}

/// Two-layer MLP over an embedding vector `(B, din, 1, 1)`.
#[derive(Clone, Debug)]
pub struct EmbedMlp {
    pub l1: Conv2d,
    pub l2: Conv2d,
}

impl EmbedMlp {
    pub fn new(name: &str, din: usize, dout: usize) -> Self {
        Self {
            l1: Conv2d::linear(format!("{name}.l1"), din, dout),
            l2: Conv2d::linear(format!("{name}.l2"), dout, dout),
        }
    }

    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.l1.init(store, rng, 1.0);
        self.l2.init(store, rng, 1.0);
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: NodeId) -> NodeId {
        let h = self.l1.forward(tape, p, x);
        let h = tape.silu(h);
        self.l2.forward(tape, p, h)
    }

    pub fn param_count(&self) -> usize {
        self.l1.param_count() + self.l2.param_count()
    }
}

/// Residual block with time conditioning.
///
/// `scale_shift = true` is the ADM form (normalization modulated by the
/// embedding); `false` is the older additive form used by the DDPM baseline.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub gn1: GroupNorm,
    pub conv1: Conv2d,
    pub emb_proj: Conv2d,
    pub gn2: GroupNorm,
    pub conv2: Conv2d,
    pub skip: Option<Conv2d>,
    pub scale_shift: bool,
}

impl ResBlock {
    pub fn new(name: &str, cin: usize, cout: usize, emb_dim: usize, scale_shift: bool) -> Self {
        let emb_out = if scale_shift { 2 * cout } else { cout };
        Self {
            gn1: GroupNorm::new(format!("{name}.gn1"), cin),
            conv1: Conv2d::new(format!("{name}.conv1"), cin, cout, 3, 1, 1),
            emb_proj: Conv2d::linear(format!("{name}.emb"), emb_dim, emb_out),
            gn2: GroupNorm::new(format!("{name}.gn2"), cout),
            conv2: Conv2d::new(format!("{name}.conv2"), cout, cout, 3, 1, 1),
            skip: (cin != cout).then(|| Conv2d::linear(format!("{name}.skip"), cin, cout)),
            scale_shift,
        }
    }

    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.gn1.init(store);
        self.conv1.init(store, rng, 1.0);
        self.emb_proj.init(store, rng, 1.0);
        self.gn2.init(store);
        self.conv2.init(store, rng, 1.0);
        if let Some(s) = &self.skip {
            s.init(store, rng, 1.0);
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: NodeId,
        emb: NodeId,
    ) -> NodeId {
        self.forward_mod(tape, p, x, emb, None)
    }

    /// Forward pass with an optional extra spatial modulation map
    /// `(B, 2*cout, H, W)` applied after the normalization, used for
    /// latent conditioning in AdaGN mode.
    pub fn forward_mod<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: NodeId,
        emb: NodeId,
        extra_mod: Option<NodeId>,
    ) -> NodeId {
        let cout = self.conv1.cout;
        let h = self.gn1.forward(tape, p, x);
        let h = tape.silu(h);
        let h = self.conv1.forward(tape, p, h);
        let emb_act = tape.silu(emb);
        let eo = self.emb_proj.forward(tape, p, emb_act);
        let mut h = if self.scale_shift {
            let scale = tape.slice(eo, 1, 0, cout);
            let shift = tape.slice(eo, 1, cout, cout);
            let hn = self.gn2.forward(tape, p, h);
            let s1 = tape.add_scalar(scale, 1.0);
            tape.channel_affine(hn, s1, Some(shift))
        } else {
            let shape = tape.shape(h).to_vec();
            let eb = tape.broadcast(eo, &shape);
            let h = tape.add(h, eb);
            self.gn2.forward(tape, p, h)
        };
        if let Some(m) = extra_mod {
            let scale = tape.slice(m, 1, 0, cout);
            let shift = tape.slice(m, 1, cout, cout);
            let s1 = tape.add_scalar(scale, 1.0);
            let mshape = tape.shape(m);
            if mshape[2] == 1 && mshape[3] == 1 {
                h = tape.channel_affine(h, s1, Some(shift));
            } else {
                // spatial modulation map (latent conditioning in AdaGN mode)
                let hs = tape.mul(h, s1);
                h = tape.add(hs, shift);
            }
        }
        let h = tape.silu(h);
        let h = self.conv2.forward(tape, p, h);
        let s = match &self.skip {
            Some(conv) => conv.forward(tape, p, x),
            None => x,
        };
        tape.add(s, h)
    }

    pub fn param_count(&self) -> usize {
        self.gn1.param_count()
            + self.conv1.param_count()
            + self.emb_proj.param_count()
            + self.gn2.param_count()
            + self.conv2.param_count()
            + self.skip.as_ref().map_or(0, |s| s.param_count())
    }
}

/// Single-head self-attention over spatial positions.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub gn: GroupNorm,
    pub qkv: Conv2d,
    pub proj: Conv2d,
    pub channels: usize,
}

impl AttentionBlock {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gn: GroupNorm::new(format!("{name}.gn"), channels),
            qkv: Conv2d::linear(format!("{name}.qkv"), channels, 3 * channels),
            proj: Conv2d::linear(format!("{name}.proj"), channels, channels),
            channels,
        }
    }

    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.gn.init(store);
        self.qkv.init(store, rng, 1.0);
        self.proj.init(store, rng, 1.0);
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: NodeId) -> NodeId {
        let [n, c, h, w] = *tape.shape(x) else {
            panic!("attention expects rank-4 input");
        };
        let hw = h * w;
        let normed = self.gn.forward(tape, p, x);
        let qkv = self.qkv.forward(tape, p, normed);
        let q = tape.slice(qkv, 1, 0, c);
        let k = tape.slice(qkv, 1, c, c);
        let v = tape.slice(qkv, 1, 2 * c, c);
        let q = tape.reshape(q, &[n, c, hw]);
        let k = tape.reshape(k, &[n, c, hw]);
        let v = tape.reshape(v, &[n, c, hw]);
        let qt = tape.permute(q, &[0, 2, 1]);
        let scores = tape.matmul(qt, k);
        let scores = tape.scale(scores, 1.0 / (c as f64).sqrt());
        let attn = tape.softmax(scores, 2);
        let vt = tape.permute(v, &[0, 2, 1]);
        let out = tape.matmul(attn, vt);
        let out = tape.permute(out, &[0, 2, 1]);
        let out = tape.reshape(out, &[n, c, h, w]);
        let out = self.proj.forward(tape, p, out);
        tape.add(x, out)
    }

    pub fn param_count(&self) -> usize {
        self.gn.param_count() + self.qkv.param_count() + self.proj.param_count()
    }
}
