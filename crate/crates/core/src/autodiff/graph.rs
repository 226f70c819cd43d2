use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, ConvGeom};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::splitmix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    Abs,
    Square,
    /// Gradient taken as 0 at 0.
    Sqrt,
    /// `sqrt(x^2 + eps^2)`.
    Charbonnier { eps: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

/// Operation kinds and their attributes.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Input { name: String, requires_grad: bool },
    Param { name: String },
    /// Inputs: image, kernel `[cout, cin, kh, kw]`, optional bias `[cout, 1, 1, 1]`.
    Conv2d { stride: (usize, usize), padding: (usize, usize) },
    Add,
    Mul,
    Scale(f64),
    ConcatChannels,
    LeakyRelu(f64),
    /// Batch normalization. Inputs: image, gamma `[1, c, 1, 1]`, beta `[1, c, 1, 1]`.
    ChannelNorm {
        running_mean: String,
        running_var: String,
        momentum: f64,
        eps: f64,
    },
    /// Zeroes whole channels with probability `rate` in training mode.
    SpatialDropout { rate: f64 },
    /// Bilinear 2× resize with half-pixel centers.
    Upsample2x,
    /// Inputs: image `[n, c, h, w]`, flow `[n, 2, h, w]`; samples the image at
    /// `p - flow(p)`, zero outside.
    Warp,
    /// Mean of all elements, shape `[1, 1, 1, 1]`.
    ReduceMean,
    /// Sum (or mean) over channels, shape `[n, 1, h, w]`.
    ReduceChannels { mean: bool },
    /// `x[i + 1] - x[i]` along an axis (extent shrinks by one).
    ForwardDiff { axis: Axis },
    Elementwise(Unary),
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Input { .. } => "input",
            OpKind::Param { .. } => "param",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale(_) => "scale",
            OpKind::ConcatChannels => "concat_channels",
            OpKind::LeakyRelu(_) => "leaky_relu",
            OpKind::ChannelNorm { .. } => "channel_norm",
            OpKind::SpatialDropout { .. } => "spatial_dropout",
            OpKind::Upsample2x => "upsample2x",
            OpKind::Warp => "bilinear_warp",
            OpKind::ReduceMean => "reduce_mean",
            OpKind::ReduceChannels { .. } => "reduce_channels",
            OpKind::ForwardDiff { .. } => "forward_diff",
            OpKind::Elementwise(_) => "elementwise",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpNode {
    pub kind: OpKind,
    pub inputs: Vec<NodeId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// Seeds dropout masks; each dropout node derives its own stream.
    pub seed: u64,
}

impl ForwardOptions {
    pub fn train(seed: u64) -> Self {
        Self {
            mode: Mode::Train,
            seed,
        }
    }

    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
enum Cache<T> {
    None,
    Norm { xhat: Tensor<T>, inv_std: Vec<T> },
    Dropout { scale: Vec<T> },
}

/// Gradients of trainable parameters, keyed by name.
#[derive(Debug, Clone, Default)]
pub struct Gradients<T> {
    pub params: HashMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum State {
    Built,
    Forwarded,
}

/// Define-then-run computation graph. Nodes may only reference earlier
/// nodes, so creation order is a topological order.
#[derive(Debug, Clone)]
pub struct Graph<T> {
    nodes: Vec<OpNode>,
    values: Vec<Option<Tensor<T>>>,
    grads: Vec<Option<Tensor<T>>>,
    cache: Vec<Cache<T>>,
    state: State,
    mode: Mode,
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
            values: Vec::new(),
            grads: Vec::new(),
            cache: Vec::new(),
            state: State::Built,
            mode: Mode::Eval,
        }
    }

    pub fn push(&mut self, kind: OpKind, inputs: Vec<NodeId>) -> NodeId {
        debug_assert!(inputs.iter().all(|i| i.0 < self.nodes.len()));
        self.nodes.push(OpNode { kind, inputs });
        self.values.push(None);
        self.grads.push(None);
        self.cache.push(Cache::None);
        self.state = State::Built;
        NodeId(self.nodes.len() - 1)
    }

    pub fn nodes(&self) -> &[OpNode] {
        &self.nodes
    }

    pub fn input(&mut self, name: impl Into<String>, requires_grad: bool) -> NodeId {
        self.push(
            OpKind::Input {
                name: name.into(),
                requires_grad,
            },
            vec![],
        )
    }

    pub fn param(&mut self, name: impl Into<String>) -> NodeId {
        self.push(OpKind::Param { name: name.into() }, vec![])
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> NodeId {
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        self.push(OpKind::Conv2d { stride, padding }, inputs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(OpKind::Add, vec![a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(OpKind::Mul, vec![a, b])
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        self.push(OpKind::Scale(factor), vec![x])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn concat_channels(&mut self, xs: &[NodeId]) -> NodeId {
        self.push(OpKind::ConcatChannels, xs.to_vec())
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        self.push(OpKind::LeakyRelu(slope), vec![x])
    }

    pub fn channel_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: impl Into<String>,
        running_var: impl Into<String>,
        momentum: f64,
        eps: f64,
    ) -> NodeId {
        self.push(
            OpKind::ChannelNorm {
                running_mean: running_mean.into(),
                running_var: running_var.into(),
                momentum,
                eps,
            },
            vec![x, gamma, beta],
        )
    }

    pub fn spatial_dropout(&mut self, x: NodeId, rate: f64) -> NodeId {
        self.push(OpKind::SpatialDropout { rate }, vec![x])
    }

    pub fn upsample2x(&mut self, x: NodeId) -> NodeId {
        self.push(OpKind::Upsample2x, vec![x])
    }

    pub fn warp(&mut self, image: NodeId, flow: NodeId) -> NodeId {
        self.push(OpKind::Warp, vec![image, flow])
    }

    pub fn reduce_mean(&mut self, x: NodeId) -> NodeId {
        self.push(OpKind::ReduceMean, vec![x])
    }

    pub fn reduce_channels(&mut self, x: NodeId, mean: bool) -> NodeId {
        self.push(OpKind::ReduceChannels { mean }, vec![x])
    }

    pub fn forward_diff(&mut self, x: NodeId, axis: Axis) -> NodeId {
        self.push(OpKind::ForwardDiff { axis }, vec![x])
    }

    pub fn unary(&mut self, x: NodeId, op: Unary) -> NodeId {
        self.push(OpKind::Elementwise(op), vec![x])
    }

    pub fn value(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.values.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of the last backward output with respect to node `id`.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    fn err(&self, node: usize, msg: impl Into<String>) -> Error {
        Error::Graph {
            node,
            kind: self.nodes[node].kind.name(),
            msg: msg.into(),
        }
    }

    fn val(&self, id: NodeId) -> &Tensor<T> {
        self.values[id.0].as_ref().expect("inputs evaluated before use")
    }

    /// Evaluates every node. `feeds` must cover all `Input` nodes.
    pub fn forward(
        &mut self,
        store: &mut ParamStore<T>,
        feeds: &[(NodeId, Tensor<T>)],
        opts: ForwardOptions,
    ) -> Result<()> {
        self.state = State::Built;
        self.mode = opts.mode;
        let mut fed: HashMap<usize, &Tensor<T>> = HashMap::new();
        for (id, t) in feeds {
            if !matches!(self.nodes.get(id.0).map(|n| &n.kind), Some(OpKind::Input { .. })) {
                return Err(Error::Graph {
                    node: id.0,
                    kind: "input",
                    msg: "fed node is not an input".into(),
                });
            }
            fed.insert(id.0, t);
        }
        for i in 0..self.nodes.len() {
            let (value, cache) = self.eval_node(i, store, &fed, opts)?;
            self.values[i] = Some(value);
            self.cache[i] = cache;
            self.grads[i] = None;
        }
        self.state = State::Forwarded;
        Ok(())
    }

    fn same_shape(&self, i: usize, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
        if a.shape() != b.shape() {
            return Err(self.err(i, format!("shape mismatch {:?} vs {:?}", a.shape(), b.shape())));
        }
        Ok(())
    }

    fn eval_node(
        &self,
        i: usize,
        store: &mut ParamStore<T>,
        fed: &HashMap<usize, &Tensor<T>>,
        opts: ForwardOptions,
    ) -> Result<(Tensor<T>, Cache<T>)> {
        let node = &self.nodes[i];
        let ins: Vec<&Tensor<T>> = node.inputs.iter().map(|&id| self.val(id)).collect();
        let plain = |t: Tensor<T>| Ok((t, Cache::None));
        match &node.kind {
            OpKind::Input { name, .. } => match fed.get(&i) {
                Some(t) => plain((*t).clone()),
                None => Err(self.err(i, format!("input {name} was not fed"))),
            },
            OpKind::Param { name } => match store.get(name) {
                Some(t) => plain(t.clone()),
                None => Err(self.err(i, format!("unknown parameter {name}"))),
            },
            OpKind::Conv2d { stride, padding } => {
                let g = ConvGeom::new(ins[0].shape(), ins[1].shape(), *stride, *padding)
                    .map_err(|m| self.err(i, m))?;
                if let Some(b) = ins.get(2) {
                    if b.len() != g.cout {
                        return Err(self.err(i, format!("bias has {} values for {} outputs", b.len(), g.cout)));
                    }
                }
                plain(kernels::conv2d_forward(ins[0], ins[1], ins.get(2).copied(), &g))
            }
            OpKind::Add => {
                self.same_shape(i, ins[0], ins[1])?;
                plain(ins[0].zip_map(ins[1], |a, b| a + b))
            }
            OpKind::Mul => {
                self.same_shape(i, ins[0], ins[1])?;
                plain(ins[0].zip_map(ins[1], |a, b| a * b))
            }
            OpKind::Scale(f) => {
                let f = T::of(*f);
                plain(ins[0].map(|v| v * f))
            }
            OpKind::ConcatChannels => {
                let [n, _, h, w] = ins[0].shape();
                if ins.iter().any(|t| {
                    let s = t.shape();
                    s[0] != n || s[2] != h || s[3] != w
                }) {
                    return Err(self.err(i, "concat inputs differ in batch or spatial extent"));
                }
                let c: usize = ins.iter().map(|t| t.shape()[1]).sum();
                let mut data = Vec::with_capacity(n * c * h * w);
                for b in 0..n {
                    for t in &ins {
                        data.extend_from_slice(t.item(b));
                    }
                }
                plain(Tensor::new([n, c, h, w], data)?)
            }
            OpKind::LeakyRelu(s) => {
                let s = T::of(*s);
                plain(ins[0].map(|v| if v > T::zero() { v } else { v * s }))
            }
            OpKind::ChannelNorm {
                running_mean,
                running_var,
                momentum,
                eps,
            } => self.eval_norm(i, &ins, store, running_mean, running_var, *momentum, *eps, opts.mode),
            OpKind::SpatialDropout { rate } => {
                if !(0.0..1.0).contains(rate) {
                    return Err(self.err(i, format!("dropout rate {rate} outside [0, 1)")));
                }
                if opts.mode == Mode::Eval || *rate == 0.0 {
                    return plain(ins[0].clone());
                }
                let [n, c, h, w] = ins[0].shape();
                let mut rng = ChaCha8Rng::seed_from_u64(splitmix(opts.seed ^ splitmix(i as u64)));
                let keep = T::of(1.0 / (1.0 - rate));
                let scale: Vec<T> = (0..n * c)
                    .map(|_| if rng.random::<f64>() < *rate { T::zero() } else { keep })
                    .collect();
                let hw = h * w;
                let data = ins[0]
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(k, &v)| v * scale[k / hw])
                    .collect();
                Ok((Tensor::new(ins[0].shape(), data)?, Cache::Dropout { scale }))
            }
            OpKind::Upsample2x => plain(kernels::upsample2x_forward(ins[0])),
            OpKind::Warp => {
                let [n, _, h, w] = ins[0].shape();
                if ins[1].shape() != [n, 2, h, w] {
                    return Err(self.err(
                        i,
                        format!("flow shape {:?} does not match image {:?}", ins[1].shape(), ins[0].shape()),
                    ));
                }
                if h < 2 || w < 2 {
                    return Err(self.err(i, "warp needs at least 2x2 images"));
                }
                plain(kernels::warp_forward(ins[0], ins[1]))
            }
            OpKind::ReduceMean => plain(Tensor::scalar(ins[0].sum() / T::of(ins[0].len()))),
            OpKind::ReduceChannels { mean } => {
                let [n, c, h, w] = ins[0].shape();
                let hw = h * w;
                let div = if *mean { T::of(c) } else { T::one() };
                let mut data = vec![T::zero(); n * hw];
                for b in 0..n {
                    let item = ins[0].item(b);
                    for ci in 0..c {
                        for (o, &v) in data[b * hw..(b + 1) * hw].iter_mut().zip(&item[ci * hw..(ci + 1) * hw]) {
                            *o += v;
                        }
                    }
                }
                if *mean {
                    data.iter_mut().for_each(|v| *v /= div);
                }
                plain(Tensor::new([n, 1, h, w], data)?)
            }
            OpKind::ForwardDiff { axis } => {
                let [n, c, h, w] = ins[0].shape();
                let x = ins[0].data();
                match axis {
                    Axis::X => {
                        if w < 2 {
                            return Err(self.err(i, "x difference needs width >= 2"));
                        }
                        let mut data = Vec::with_capacity(n * c * h * (w - 1));
                        for row in x.chunks(w) {
                            data.extend(row.windows(2).map(|p| p[1] - p[0]));
                        }
                        plain(Tensor::new([n, c, h, w - 1], data)?)
                    }
                    Axis::Y => {
                        if h < 2 {
                            return Err(self.err(i, "y difference needs height >= 2"));
                        }
                        let mut data = Vec::with_capacity(n * c * (h - 1) * w);
                        for plane in x.chunks(h * w) {
                            for y in 0..h - 1 {
                                data.extend((0..w).map(|xx| plane[(y + 1) * w + xx] - plane[y * w + xx]));
                            }
                        }
                        plain(Tensor::new([n, c, h - 1, w], data)?)
                    }
                }
            }
            OpKind::Elementwise(op) => plain(match op {
                Unary::Abs => ins[0].map(|v| v.abs()),
                Unary::Square => ins[0].map(|v| v * v),
                Unary::Sqrt => ins[0].map(|v| v.max(T::zero()).sqrt()),
                Unary::Charbonnier { eps } => {
                    let e2 = T::of(eps * eps);
                    ins[0].map(|v| (v * v + e2).sqrt())
                }
            }),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn eval_norm(
        &self,
        i: usize,
        ins: &[&Tensor<T>],
        store: &mut ParamStore<T>,
        running_mean: &str,
        running_var: &str,
        momentum: f64,
        eps: f64,
        mode: Mode,
    ) -> Result<(Tensor<T>, Cache<T>)> {
        let [n, c, h, w] = ins[0].shape();
        if ins[1].len() != c || ins[2].len() != c {
            return Err(self.err(i, format!("gamma/beta must have {c} values")));
        }
        let (rm, rv) = match (store.get(running_mean), store.get(running_var)) {
            (Some(m), Some(v)) if m.len() == c && v.len() == c => (m.data().to_vec(), v.data().to_vec()),
            _ => return Err(self.err(i, format!("running statistics {running_mean}/{running_var} missing or mis-sized"))),
        };
        let eps = T::of(eps);
        let (mean, var): (Vec<T>, Vec<T>) = match mode {
            Mode::Eval => (rm, rv),
            Mode::Train => {
                let stats = kernels::channel_stats(ins[0]);
                let count = n * h * w;
                let m = T::of(momentum);
                let unbias = if count > 1 { T::of(count) / T::of(count - 1) } else { T::one() };
                let new_m: Vec<T> = rm.iter().zip(&stats).map(|(&r, s)| (T::one() - m) * r + m * s.0).collect();
                let new_v: Vec<T> = rv
                    .iter()
                    .zip(&stats)
                    .map(|(&r, s)| (T::one() - m) * r + m * s.1 * unbias)
                    .collect();
                store.get_mut(running_mean).expect("checked").data_mut().copy_from_slice(&new_m);
                store.get_mut(running_var).expect("checked").data_mut().copy_from_slice(&new_v);
                stats.into_iter().unzip()
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xhat = kernels::per_channel(ins[0], |ci, v| (v - mean[ci]) * inv_std[ci]);
        let (gamma, beta) = (ins[1].data(), ins[2].data());
        let y = kernels::per_channel(&xhat, |ci, v| v * gamma[ci] + beta[ci]);
        Ok((y, Cache::Norm { xhat, inv_std }))
    }

    /// Back-propagates `output_grad` from `output`, accumulating along every
    /// path. Returns gradients for all parameters that influence `output`;
    /// input gradients are available through [`Graph::grad`].
    pub fn backward(&mut self, output: NodeId, output_grad: Tensor<T>) -> Result<Gradients<T>> {
        if self.state != State::Forwarded {
            return Err(Error::State("backward called before forward".into()));
        }
        let out_shape = self.val(output).shape();
        if output_grad.shape() != out_shape {
            return Err(self.err(
                output.0,
                format!("output gradient shape {:?} differs from value {:?}", output_grad.shape(), out_shape),
            ));
        }
        let n = self.nodes.len();
        let mut needs = vec![false; n];
        for i in 0..n {
            needs[i] = match &self.nodes[i].kind {
                OpKind::Input { requires_grad, .. } => *requires_grad,
                OpKind::Param { .. } => true,
                _ => self.nodes[i].inputs.iter().any(|d| needs[d.0]),
            };
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; n];
        grads[output.0] = Some(output_grad);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if needs[i] {
                let contributions = self.backward_node(i, &g, &needs);
                for (id, c) in contributions {
                    match &mut grads[id.0] {
                        Some(acc) => acc.add_assign(&c),
                        slot => *slot = Some(c),
                    }
                }
            }
            grads[i] = Some(g);
        }
        let mut out = Gradients::default();
        for (i, g) in grads.iter().enumerate() {
            if let (OpKind::Param { name }, Some(g)) = (&self.nodes[i].kind, g) {
                match out.params.get_mut(name) {
                    Some(acc) => acc.add_assign(g),
                    None => {
                        out.params.insert(name.clone(), g.clone());
                    }
                }
            }
        }
        self.grads = grads;
        Ok(out)
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, needs: &[bool]) -> Vec<(NodeId, Tensor<T>)> {
        let node = &self.nodes[i];
        let ins = &node.inputs;
        let want = |k: usize| needs[ins[k].0];
        let mut out = Vec::new();
        match &node.kind {
            OpKind::Input { .. } | OpKind::Param { .. } => {}
            OpKind::Conv2d { stride, padding } => {
                let x = self.val(ins[0]);
                let k = self.val(ins[1]);
                let geom = ConvGeom::new(x.shape(), k.shape(), *stride, *padding).expect("validated in forward");
                let (dx, dk, db) = kernels::conv2d_backward(x, k, g, &geom, want(0));
                if let Some(dx) = dx {
                    out.push((ins[0], dx));
                }
                out.push((ins[1], dk));
                if ins.len() > 2 {
                    let shape = self.val(ins[2]).shape();
                    out.push((ins[2], Tensor::new(shape, db.into_data()).expect("bias shape")));
                }
            }
            OpKind::Add => {
                out.push((ins[0], g.clone()));
                out.push((ins[1], g.clone()));
            }
            OpKind::Mul => {
                let (a, b) = (self.val(ins[0]), self.val(ins[1]));
                if want(0) {
                    out.push((ins[0], g.zip_map(b, |d, v| d * v)));
                }
                if want(1) {
                    out.push((ins[1], g.zip_map(a, |d, v| d * v)));
                }
            }
            OpKind::Scale(f) => {
                let f = T::of(*f);
                out.push((ins[0], g.map(|d| d * f)));
            }
            OpKind::ConcatChannels => {
                let [n, _, h, w] = g.shape();
                let hw = h * w;
                let mut offset = 0;
                for &id in ins {
                    let c = self.val(id).shape()[1];
                    let ctot = g.shape()[1];
                    let mut data = Vec::with_capacity(n * c * hw);
                    for b in 0..n {
                        let start = (b * ctot + offset) * hw;
                        data.extend_from_slice(&g.data()[start..start + c * hw]);
                    }
                    offset += c;
                    if needs[id.0] {
                        out.push((id, Tensor::new([n, c, h, w], data).expect("concat part")));
                    }
                }
            }
            OpKind::LeakyRelu(s) => {
                let s = T::of(*s);
                let x = self.val(ins[0]);
                out.push((ins[0], g.zip_map(x, |d, v| if v > T::zero() { d } else { d * s })));
            }
            OpKind::ChannelNorm { .. } => {
                let Cache::Norm { xhat, inv_std } = &self.cache[i] else {
                    unreachable!("norm cache set in forward")
                };
                let gamma = self.val(ins[1]).data();
                let shape = g.shape();
                let count = T::of(shape[0] * shape[2] * shape[3]);
                let sum_dy = kernels::channel_sums(shape, |k| g.data()[k]);
                let sum_dy_xhat = kernels::channel_sums(shape, |k| g.data()[k] * xhat.data()[k]);
                if want(0) {
                    let c = shape[1];
                    let hw = shape[2] * shape[3];
                    let dx: Vec<T> = match self.mode {
                        Mode::Train => g
                            .data()
                            .iter()
                            .zip(xhat.data())
                            .enumerate()
                            .map(|(k, (&dy, &xh))| {
                                let ci = (k / hw) % c;
                                gamma[ci] * inv_std[ci] / count * (count * dy - sum_dy[ci] - xh * sum_dy_xhat[ci])
                            })
                            .collect(),
                        Mode::Eval => g
                            .data()
                            .iter()
                            .enumerate()
                            .map(|(k, &dy)| {
                                let ci = (k / hw) % c;
                                dy * gamma[ci] * inv_std[ci]
                            })
                            .collect(),
                    };
                    out.push((ins[0], Tensor::new(shape, dx).expect("norm dx")));
                }
                let gshape = self.val(ins[1]).shape();
                out.push((ins[1], Tensor::new(gshape, sum_dy_xhat).expect("gamma grad")));
                let bshape = self.val(ins[2]).shape();
                out.push((ins[2], Tensor::new(bshape, sum_dy).expect("beta grad")));
            }
            OpKind::SpatialDropout { .. } => match &self.cache[i] {
                Cache::Dropout { scale } => {
                    let [_, _, h, w] = g.shape();
                    let hw = h * w;
                    let data = g.data().iter().enumerate().map(|(k, &d)| d * scale[k / hw]).collect();
                    out.push((ins[0], Tensor::new(g.shape(), data).expect("dropout grad")));
                }
                _ => out.push((ins[0], g.clone())),
            },
            OpKind::Upsample2x => {
                let shape = self.val(ins[0]).shape();
                out.push((ins[0], kernels::upsample2x_backward(g, shape)));
            }
            OpKind::Warp => {
                let (di, df) = kernels::warp_backward(self.val(ins[0]), self.val(ins[1]), g);
                if want(0) {
                    out.push((ins[0], di));
                }
                if want(1) {
                    out.push((ins[1], df));
                }
            }
            OpKind::ReduceMean => {
                let x = self.val(ins[0]);
                let d = g.data()[0] / T::of(x.len());
                out.push((ins[0], Tensor::filled(x.shape(), d)));
            }
            OpKind::ReduceChannels { mean } => {
                let shape = self.val(ins[0]).shape();
                let [n, c, h, w] = shape;
                let hw = h * w;
                let div = if *mean { T::of(c) } else { T::one() };
                let mut data = Vec::with_capacity(n * c * hw);
                for b in 0..n {
                    let gi = g.item(b);
                    for _ in 0..c {
                        data.extend(gi.iter().map(|&d| d / div));
                    }
                }
                out.push((ins[0], Tensor::new(shape, data).expect("reduce grad")));
            }
            OpKind::ForwardDiff { axis } => {
                let shape = self.val(ins[0]).shape();
                let [_, _, h, w] = shape;
                let mut dx = Tensor::zeros(shape);
                let d = dx.data_mut();
                match axis {
                    Axis::X => {
                        for (row, grow) in d.chunks_mut(w).zip(g.data().chunks(w - 1)) {
                            for (x, &v) in grow.iter().enumerate() {
                                row[x + 1] += v;
                                row[x] -= v;
                            }
                        }
                    }
                    Axis::Y => {
                        for (plane, gplane) in d.chunks_mut(h * w).zip(g.data().chunks((h - 1) * w)) {
                            for (k, &v) in gplane.iter().enumerate() {
                                plane[k + w] += v;
                                plane[k] -= v;
                            }
                        }
                    }
                }
                out.push((ins[0], dx));
            }
            OpKind::Elementwise(op) => {
                let x = self.val(ins[0]);
                let dx = match op {
                    Unary::Abs => g.zip_map(x, |d, v| {
                        if v > T::zero() {
                            d
                        } else if v < T::zero() {
                            -d
                        } else {
                            T::zero()
                        }
                    }),
                    Unary::Square => g.zip_map(x, |d, v| d * (v + v)),
                    Unary::Sqrt => g.zip_map(x, |d, v| {
                        if v > T::zero() {
                            d / (T::of(2.0) * v.sqrt())
                        } else {
                            T::zero()
                        }
                    }),
                    Unary::Charbonnier { eps } => {
                        let e2 = T::of(eps * eps);
                        g.zip_map(x, |d, v| d * v / (v * v + e2).sqrt())
                    }
                };
                out.push((ins[0], dx));
            }
        }
        out
    }
}
