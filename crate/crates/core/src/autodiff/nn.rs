//! Layer builders that register parameters in a [`ParamStore`] and append
//! the matching nodes to a [`Graph`].

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::graph::{Graph, NodeId};
use super::params::{ParamKind, ParamStore};
use super::tensor::Tensor;
use crate::error::Result;
use crate::scalar::Scalar;

pub const NORM_MOMENTUM: f64 = 0.1;
pub const NORM_EPS: f64 = 1e-5;

/// Convolution spec: output channels, kernel extents, stride, padding.
#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvSpec {
    /// Stride 1 with "same" padding for odd kernels.
    pub fn same(cin: usize, cout: usize, kernel: (usize, usize)) -> Self {
        Self {
            cin,
            cout,
            kernel,
            stride: (1, 1),
            padding: (kernel.0 / 2, kernel.1 / 2),
        }
    }
}

/// Builder bundling a graph, its parameter store and an init RNG.
pub struct Builder<'a, T, R> {
    pub graph: &'a mut Graph<T>,
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
    /// When true, new parameters are initialized to zero.
    pub zero_init: bool,
}

impl<T: Scalar, R: Rng> Builder<'_, T, R> {
    fn param(&mut self, name: &str, kind: ParamKind, value: Tensor<T>) -> Result<NodeId> {
        self.store.insert(name, kind, value)?;
        Ok(self.graph.param(name))
    }

    /// Convolution with bias. Weights use He-uniform initialization.
    pub fn conv(&mut self, name: &str, x: NodeId, spec: ConvSpec) -> Result<NodeId> {
        let (kh, kw) = spec.kernel;
        let shape = [spec.cout, spec.cin, kh, kw];
        let fan_in = (spec.cin * kh * kw) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let n = spec.cout * spec.cin * kh * kw;
        let data: Vec<T> = if self.zero_init {
            vec![T::zero(); n]
        } else {
            (0..n).map(|_| T::of(dist.sample(self.rng))).collect()
        };
        let k = self.param(&format!("{name}.weight"), ParamKind::Trainable, Tensor::new(shape, data)?)?;
        let b = self.param(
            &format!("{name}.bias"),
            ParamKind::Trainable,
            Tensor::zeros([spec.cout, 1, 1, 1]),
        )?;
        Ok(self.graph.conv2d(x, k, Some(b), spec.stride, spec.padding))
    }

    /// Batch normalization over `channels` with learned affine parameters.
    pub fn norm(&mut self, name: &str, x: NodeId, channels: usize) -> Result<NodeId> {
        let gamma = self.param(
            &format!("{name}.gamma"),
            ParamKind::Trainable,
            Tensor::filled([1, channels, 1, 1], T::one()),
        )?;
        let beta = self.param(&format!("{name}.beta"), ParamKind::Trainable, Tensor::zeros([1, channels, 1, 1]))?;
        let rm = format!("{name}.running_mean");
        let rv = format!("{name}.running_var");
        self.store.insert(&rm, ParamKind::Buffer, Tensor::zeros([1, channels, 1, 1]))?;
        self.store
            .insert(&rv, ParamKind::Buffer, Tensor::filled([1, channels, 1, 1], T::one()))?;
        Ok(self.graph.channel_norm(x, gamma, beta, rm, rv, NORM_MOMENTUM, NORM_EPS))
    }
}
