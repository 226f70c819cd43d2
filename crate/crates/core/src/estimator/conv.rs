//! Encoder-decoder stage network built from factorized residual blocks.
//!
//! Layout: three stride-2 3×3 downsampling blocks, a stack of residual
//! blocks made of 3×1/1×3 convolution pairs at the bottleneck, and a
//! mirrored decoder of bilinear upsampling, 3×3 convolution and skip
//! additions, closed by a 3×3 convolution to the output channels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{Builder, ConvSpec};
use crate::autodiff::{ForwardOptions, Graph, NodeId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::field::{DepthMap, FlowField, Grid, Planes};
use crate::scalar::Scalar;
use crate::census::{census_channels, census_transform};
use crate::warp::backward_warp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Network {
    /// Census pair plus lateral prior in, lateral residual out.
    Lateral,
    /// Depth pair plus depth prior in, depth residual out.
    Depth,
}

impl Network {
    pub fn in_channels(self) -> usize {
        match self {
            Network::Lateral => 18,
            Network::Depth => 3,
        }
    }

    pub fn out_channels(self) -> usize {
        match self {
            Network::Lateral => 2,
            Network::Depth => 1,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Network::Lateral => "f",
            Network::Depth => "d",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvConfig {
    /// Channel widths of the three encoder levels.
    pub widths: [usize; 3],
    /// Residual blocks at the bottleneck.
    pub blocks: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
    /// Depth inputs are divided by this and depth outputs multiplied by it.
    pub depth_scale: f64,
}

impl Default for ConvConfig {
    fn default() -> Self {
        Self {
            widths: [16, 32, 64],
            blocks: 5,
            dropout: 0.3,
            leaky_slope: 0.1,
            depth_scale: 64.0,
        }
    }
}

impl ConvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) {
            return Err(Error::config("channel widths must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        if !(self.depth_scale.is_finite() && self.depth_scale > 0.0) {
            return Err(Error::config("depth_scale must be > 0"));
        }
        Ok(())
    }
}

struct Net<'a, 'b, T> {
    b: Builder<'a, T, ChaCha8Rng>,
    prefix: &'b str,
    cfg: ConvConfig,
}

impl<T: Scalar> Net<'_, '_, T> {
    fn name(&self, s: &str) -> String {
        format!("{}.{s}", self.prefix)
    }

    fn conv(&mut self, name: &str, x: NodeId, spec: ConvSpec) -> Result<NodeId> {
        let n = self.name(name);
        self.b.conv(&n, x, spec)
    }

    fn norm_act(&mut self, name: &str, x: NodeId, c: usize) -> Result<NodeId> {
        let n = self.name(name);
        let y = self.b.norm(&n, x, c)?;
        Ok(self.b.graph.leaky_relu(y, self.cfg.leaky_slope))
    }

    fn down(&mut self, name: &str, x: NodeId, cin: usize, cout: usize) -> Result<NodeId> {
        let spec = ConvSpec {
            cin,
            cout,
            kernel: (3, 3),
            stride: (2, 2),
            padding: (1, 1),
        };
        let y = self.conv(&format!("{name}.conv"), x, spec)?;
        self.norm_act(&format!("{name}.norm"), y, cout)
    }

    fn residual(&mut self, name: &str, x: NodeId, c: usize) -> Result<NodeId> {
        let slope = self.cfg.leaky_slope;
        let mut y = x;
        for half in 0..2 {
            y = self.conv(&format!("{name}.c{half}v"), y, ConvSpec::same(c, c, (3, 1)))?;
            y = self.b.graph.leaky_relu(y, slope);
            y = self.conv(&format!("{name}.c{half}h"), y, ConvSpec::same(c, c, (1, 3)))?;
            let n = self.name(&format!("{name}.n{half}"));
            y = self.b.norm(&n, y, c)?;
            if half == 0 {
                y = self.b.graph.leaky_relu(y, slope);
            }
        }
        if self.cfg.dropout > 0.0 {
            y = self.b.graph.spatial_dropout(y, self.cfg.dropout);
        }
        let sum = self.b.graph.add(y, x);
        Ok(self.b.graph.leaky_relu(sum, slope))
    }

    fn up(&mut self, name: &str, x: NodeId, cin: usize, cout: usize) -> Result<NodeId> {
        let u = self.b.graph.upsample2x(x);
        let y = self.conv(&format!("{name}.conv"), u, ConvSpec::same(cin, cout, (3, 3)))?;
        self.norm_act(&format!("{name}.norm"), y, cout)
    }
}

/// Appends a stage network to `graph`, registering its parameters in
/// `store` under `prefix`. Returns the output node.
pub fn build_network<T: Scalar>(
    graph: &mut Graph<T>,
    store: &mut ParamStore<T>,
    input: NodeId,
    network: Network,
    cfg: &ConvConfig,
    prefix: &str,
    seed: u64,
) -> Result<NodeId> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [w1, w2, w3] = cfg.widths;
    let mut net = Net {
        b: Builder {
            graph,
            store,
            rng: &mut rng,
            zero_init: false,
        },
        prefix,
        cfg: *cfg,
    };
    let x = match network {
        Network::Lateral => input,
        Network::Depth => net.b.graph.scale(input, 1.0 / cfg.depth_scale),
    };
    let e1 = net.down("enc1", x, network.in_channels(), w1)?;
    let e2 = net.down("enc2", e1, w1, w2)?;
    let mut y = net.down("enc3", e2, w2, w3)?;
    for k in 0..cfg.blocks {
        y = net.residual(&format!("block{k}"), y, w3)?;
    }
    let d3 = net.up("dec3", y, w3, w2)?;
    let d3 = net.b.graph.add(d3, e2);
    let d2 = net.up("dec2", d3, w2, w1)?;
    let d2 = net.b.graph.add(d2, e1);
    let d1 = net.up("dec1", d2, w1, w1)?;
    // zero-initialized head: an untrained stage starts from the prior
    net.b.zero_init = true;
    let out = net.conv("head", d1, ConvSpec::same(w1, network.out_channels(), (3, 3)))?;
    Ok(match network {
        Network::Lateral => out,
        Network::Depth => net.b.graph.scale(out, cfg.depth_scale),
    })
}

/// One trained or trainable convolutional stage.
#[derive(Debug, Clone)]
pub struct ConvStage<T> {
    pub network: Network,
    pub config: ConvConfig,
    pub prefix: String,
    pub store: ParamStore<T>,
    graph: Graph<T>,
    input: NodeId,
    output: NodeId,
}

impl<T: Scalar> ConvStage<T> {
    pub fn new(network: Network, config: ConvConfig, level: usize, seed: u64) -> Result<Self> {
        let prefix = format!("{}{level}", network.tag());
        let mut graph = Graph::new();
        let mut store = ParamStore::new();
        let input = graph.input("input", false);
        let output = build_network(&mut graph, &mut store, input, network, &config, &prefix, seed)?;
        Ok(Self {
            network,
            config,
            prefix,
            store,
            graph,
            input,
            output,
        })
    }

    /// Appends this stage's architecture to another graph. Parameter names
    /// match [`ConvStage::store`].
    pub fn append_to(&self, graph: &mut Graph<T>, input: NodeId) -> Result<NodeId> {
        let mut scratch = ParamStore::new();
        build_network(graph, &mut scratch, input, self.network, &self.config, &self.prefix, 0)
    }

    /// Evaluation-mode forward pass on a batch `[n, in_channels, h, w]`.
    pub fn forward(&self, input: Tensor<T>) -> Result<Tensor<T>> {
        let [_, _, h, w] = input.shape();
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Graph {
                node: self.input.index(),
                kind: "input",
                msg: format!("{w}x{h} is not divisible by 8"),
            });
        }
        let mut g = self.graph.clone();
        let mut store = self.store.clone();
        g.forward(&mut store, &[(self.input, input)], ForwardOptions::eval())?;
        Ok(g.value(self.output).expect("forward populated all nodes").clone())
    }

    /// Lateral residual between unwarped depth levels `a` and `b`.
    pub fn estimate_lateral(&self, a: &DepthMap<T>, b: &DepthMap<T>, prior: &FlowField<T>) -> Result<FlowField<T>> {
        let (w, h) = (b.width(), b.height());
        let (ca, cb) = aligned_census(a, b, prior)?;
        let t = lateral_input(&[(&ca, &cb, prior)])?;
        let out = self.forward(t)?;
        FlowField::new(w, h, 2, out.into_data())
    }

    pub fn estimate_depth(&self, a: &DepthMap<T>, b: &DepthMap<T>, prior: &Grid<T>) -> Result<Grid<T>> {
        let (w, h) = (b.width(), b.height());
        let t = depth_input(&[(a, b, prior)])?;
        let out = self.forward(t)?;
        Grid::new(w, h, out.into_data())
    }
}

/// Census channels of `a` warped by `prior` and of `b`.
pub fn aligned_census<T: Scalar>(a: &DepthMap<T>, b: &DepthMap<T>, prior: &FlowField<T>) -> Result<(Planes<T>, Planes<T>)> {
    let aligned = backward_warp(a, prior)?.warped;
    Ok((
        census_channels(&census_transform(&aligned)?),
        census_channels(&census_transform(b)?),
    ))
}

/// Stacks `(aligned a census, b census, prior)` triples into `[n, 18, h, w]`.
pub fn lateral_input<T: Scalar>(items: &[(&Planes<T>, &Planes<T>, &FlowField<T>)]) -> Result<Tensor<T>> {
    let (a0, _, _) = items.first().ok_or_else(|| Error::domain("empty batch"))?;
    let (w, h) = (a0.width(), a0.height());
    let mut data = Vec::with_capacity(items.len() * 18 * w * h);
    for (a, b, prior) in items {
        if a.channels() != 8 || b.channels() != 8 || prior.channels() != 2 {
            return Err(Error::domain("lateral stage expects 8 + 8 + 2 channels"));
        }
        if a.width() != w || a.height() != h || b.width() != w || b.height() != h || !prior.same_grid(w, h) {
            return Err(Error::domain("lateral stage inputs differ in size"));
        }
        data.extend_from_slice(a.data());
        data.extend_from_slice(b.data());
        data.extend_from_slice(prior.data());
    }
    Tensor::new([items.len(), 18, h, w], data)
}

/// Stacks `(a, b, prior)` depth triples into `[n, 3, h, w]`; invalid depth
/// samples enter as 0.
pub fn depth_input<T: Scalar>(items: &[(&DepthMap<T>, &DepthMap<T>, &Grid<T>)]) -> Result<Tensor<T>> {
    let (a0, _, _) = items.first().ok_or_else(|| Error::domain("empty batch"))?;
    let (w, h) = (a0.width(), a0.height());
    let mut data = Vec::with_capacity(items.len() * 3 * w * h);
    let masked = |z: &DepthMap<T>| -> Vec<T> {
        z.values()
            .iter()
            .zip(z.valid())
            .map(|(&v, &ok)| if ok { v } else { T::zero() })
            .collect()
    };
    for (a, b, prior) in items {
        if a.width() != w || a.height() != h || b.width() != w || b.height() != h {
            return Err(Error::domain("depth stage inputs differ in size"));
        }
        if prior.width() != w || prior.height() != h {
            return Err(Error::domain("depth prior differs in size"));
        }
        data.extend(masked(a));
        data.extend(masked(b));
        data.extend_from_slice(prior.data());
    }
    Tensor::new([items.len(), 3, h, w], data)
}
