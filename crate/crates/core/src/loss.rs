//! Semi-supervised stage objective: endpoint error, reconstruction and
//! edge-aware smoothness.
//!
//! Every term exists twice. The plain functions evaluate fields directly and
//! serve reporting and tests; the `*_node` builders append the same
//! computation to an autodiff graph for training. Masked means in the graph
//! are expressed through a weight tensor from [`mask_weights`], so a single
//! `reduce_mean` yields the average of per-item masked means.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Graph, NodeId, Tensor, Unary};
use crate::error::{Error, Result};
use crate::field::{DepthMap, FlowField, Grid, Planes};
use crate::scalar::Scalar;

pub const DEFAULT_CHARBONNIER_EPS: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Endpoint-error weight; 0 selects unsupervised training.
    pub alpha: f64,
    /// Reconstruction weight.
    pub beta: f64,
    /// Smoothness weight at stage 1; scaled by `2^(1 - s)` at stage `s`.
    pub gamma: f64,
    pub charbonnier_eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.5,
            gamma: 0.5,
            charbonnier_eps: DEFAULT_CHARBONNIER_EPS,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("loss weight {name} must be >= 0, got {v}")));
            }
        }
        if !(self.charbonnier_eps.is_finite() && self.charbonnier_eps > 0.0) {
            return Err(Error::config("charbonnier_eps must be > 0"));
        }
        Ok(())
    }

    pub fn is_unsupervised(&self) -> bool {
        self.alpha == 0.0
    }

    /// Smoothness multiplier at stage `s` (0 = coarsest).
    pub fn smoothness_factor(&self, s: usize) -> f64 {
        self.gamma * 2f64.powi(1 - s as i32)
    }
}

/// Values of the three terms at one stage.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents<T> {
    pub epe: T,
    pub reconstruction: T,
    pub smoothness: T,
}

/// `alpha * epe + beta * reconstruction + gamma / 2^(s-1) * smoothness`.
pub fn stage_loss<T: Scalar>(s: usize, c: &LossComponents<T>, w: &LossWeights) -> Result<T> {
    w.validate()?;
    Ok(T::of(w.alpha) * c.epe + T::of(w.beta) * c.reconstruction + T::of(w.smoothness_factor(s)) * c.smoothness)
}

fn masked_mean<T: Scalar>(values: impl Iterator<Item = T>, mask: &[bool]) -> Result<T> {
    let (mut sum, mut count) = (T::zero(), 0usize);
    for (v, &m) in values.zip(mask) {
        if m {
            sum += v;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Evaluation("no valid pixels".into()));
    }
    Ok(sum / T::of(count))
}

fn check_mask(mask: &[bool], n: usize) -> Result<()> {
    if mask.len() != n {
        return Err(Error::domain(format!("mask has {} entries, expected {n}", mask.len())));
    }
    Ok(())
}

fn charbonnier<T: Scalar>(d: T, eps: T) -> T {
    (d * d + eps * eps).sqrt()
}

/// Mean Euclidean norm of `pred - gt` over `valid` pixels.
pub fn epe_loss<T: Scalar>(pred: &FlowField<T>, gt: &FlowField<T>, valid: &[bool]) -> Result<T> {
    if !pred.same_grid(gt.width(), gt.height()) || pred.channels() != gt.channels() {
        return Err(Error::domain("prediction and ground truth differ in shape"));
    }
    let n = pred.width() * pred.height();
    check_mask(valid, n)?;
    let norms = (0..n).map(|i| {
        (0..pred.channels())
            .map(|c| {
                let d = pred.channel(c)[i] - gt.channel(c)[i];
                d * d
            })
            .sum::<T>()
            .sqrt()
    });
    masked_mean(norms, valid)
}

/// Charbonnier penalty of the per-pixel mean absolute channel difference.
pub fn reconstruction_loss<T: Scalar>(warped: &Planes<T>, target: &Planes<T>, valid: &[bool], eps: f64) -> Result<T> {
    if warped.width() != target.width()
        || warped.height() != target.height()
        || warped.channels() != target.channels()
    {
        return Err(Error::domain("warped and target planes differ in shape"));
    }
    let n = warped.width() * warped.height();
    check_mask(valid, n)?;
    let (eps, c) = (T::of(eps), T::of(warped.channels()));
    let penalties = (0..n).map(|i| {
        let d = (0..warped.channels())
            .map(|k| (warped.plane(k)[i] - target.plane(k)[i]).abs())
            .sum::<T>()
            / c;
        charbonnier(d, eps)
    });
    masked_mean(penalties, valid)
}

/// Charbonnier penalty of `z_hat + dz - z_next` where `valid` and both maps
/// are valid.
pub fn depth_reconstruction_loss<T: Scalar>(
    z_hat: &DepthMap<T>,
    dz: &Grid<T>,
    z_next: &DepthMap<T>,
    valid: &[bool],
    eps: f64,
) -> Result<T> {
    let (w, h) = (z_next.width(), z_next.height());
    if z_hat.width() != w || z_hat.height() != h || dz.width() != w || dz.height() != h {
        return Err(Error::domain("depth reconstruction inputs differ in size"));
    }
    check_mask(valid, w * h)?;
    let eps = T::of(eps);
    let mask: Vec<bool> = (0..w * h)
        .map(|i| valid[i] && z_hat.valid()[i] && z_next.valid()[i])
        .collect();
    let penalties = (0..w * h).map(|i| charbonnier(z_hat.values()[i] + dz.data()[i] - z_next.values()[i], eps));
    masked_mean(penalties, &mask)
}

/// Edge weights `exp(-|dz|)` for horizontal and vertical neighbor pairs,
/// zero where either neighbor is invalid. Returns `(wx, wy)` with extents
/// `(w - 1) x h` and `w x (h - 1)`.
pub fn edge_weights<T: Scalar>(z: &DepthMap<T>) -> (Vec<T>, Vec<T>) {
    let (w, h) = (z.width(), z.height());
    let (v, ok) = (z.values(), z.valid());
    let weight = |i: usize, j: usize| {
        if ok[i] && ok[j] {
            (-(v[j] - v[i]).abs()).exp()
        } else {
            T::zero()
        }
    };
    let mut wx = Vec::with_capacity((w - 1) * h);
    for y in 0..h {
        for x in 0..w - 1 {
            wx.push(weight(y * w + x, y * w + x + 1));
        }
    }
    let mut wy = Vec::with_capacity(w * (h - 1));
    for y in 0..h - 1 {
        for x in 0..w {
            wy.push(weight(y * w + x, (y + 1) * w + x));
        }
    }
    (wx, wy)
}

/// Sum over channels of the edge-weighted mean absolute forward difference
/// in x plus the same in y. `z_next` supplies the edge weights.
pub fn smoothness_loss<T: Scalar>(flow: &FlowField<T>, z_next: &DepthMap<T>) -> Result<T> {
    let (w, h) = (flow.width(), flow.height());
    if w < 2 || h < 2 {
        return Err(Error::domain("smoothness needs at least 2x2"));
    }
    if z_next.width() != w || z_next.height() != h {
        return Err(Error::domain("flow and edge map differ in size"));
    }
    let (wx, wy) = edge_weights(z_next);
    let mut total = T::zero();
    for c in 0..flow.channels() {
        let f = flow.channel(c);
        let mut sx = T::zero();
        for y in 0..h {
            for x in 0..w - 1 {
                sx += (f[y * w + x + 1] - f[y * w + x]).abs() * wx[y * (w - 1) + x];
            }
        }
        let mut sy = T::zero();
        for y in 0..h - 1 {
            for x in 0..w {
                sy += (f[(y + 1) * w + x] - f[y * w + x]).abs() * wy[y * w + x];
            }
        }
        total += sx / T::of((w - 1) * h) + sy / T::of(w * (h - 1));
    }
    Ok(total)
}

/// Batched weight tensor `[n, 1, h, w]`: each item's mask scaled by
/// `h * w / valid_count`. Items without valid pixels get zero weight.
pub fn mask_weights<T: Scalar>(masks: &[&[bool]], w: usize, h: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(masks.len() * w * h);
    for m in masks {
        check_mask(m, w * h)?;
        let count = m.iter().filter(|&&b| b).count();
        let scale = if count == 0 { T::zero() } else { T::of(w * h) / T::of(count) };
        data.extend(m.iter().map(|&b| if b { scale } else { T::zero() }));
    }
    Tensor::new([masks.len(), 1, h, w], data)
}

/// Batched edge weights for [`smoothness_node`], replicated over `channels`.
pub fn edge_weight_tensors<T: Scalar>(maps: &[&DepthMap<T>], channels: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let first = maps.first().ok_or_else(|| Error::domain("empty batch"))?;
    let (w, h) = (first.width(), first.height());
    if w < 2 || h < 2 {
        return Err(Error::domain("smoothness needs at least 2x2"));
    }
    let (mut dx, mut dy) = (Vec::new(), Vec::new());
    for z in maps {
        if z.width() != w || z.height() != h {
            return Err(Error::domain("batch maps differ in size"));
        }
        let (wx, wy) = edge_weights(z);
        for _ in 0..channels {
            dx.extend_from_slice(&wx);
            dy.extend_from_slice(&wy);
        }
    }
    Ok((
        Tensor::new([maps.len(), channels, h, w - 1], dx)?,
        Tensor::new([maps.len(), channels, h - 1, w], dy)?,
    ))
}

fn weighted_mean(g: &mut Graph<impl Scalar>, per_pixel: NodeId, weights: NodeId) -> NodeId {
    let masked = g.mul(per_pixel, weights);
    g.reduce_mean(masked)
}

/// Graph form of [`epe_loss`]; `weights` comes from [`mask_weights`].
pub fn epe_node<T: Scalar>(g: &mut Graph<T>, pred: NodeId, gt: NodeId, weights: NodeId) -> NodeId {
    let d = g.sub(pred, gt);
    let sq = g.unary(d, Unary::Square);
    let s = g.reduce_channels(sq, false);
    let norm = g.unary(s, Unary::Sqrt);
    weighted_mean(g, norm, weights)
}

/// Graph form of [`reconstruction_loss`] where the warped planes are
/// `source` resampled by `flow`.
pub fn reconstruction_node<T: Scalar>(
    g: &mut Graph<T>,
    source: NodeId,
    flow: NodeId,
    target: NodeId,
    weights: NodeId,
    eps: f64,
) -> NodeId {
    let warped = g.warp(source, flow);
    let d = g.sub(warped, target);
    let a = g.unary(d, Unary::Abs);
    let m = g.reduce_channels(a, true);
    let p = g.unary(m, Unary::Charbonnier { eps });
    weighted_mean(g, p, weights)
}

/// Graph form of [`depth_reconstruction_loss`]; all inputs `[n, 1, h, w]`.
pub fn depth_reconstruction_node<T: Scalar>(
    g: &mut Graph<T>,
    z_hat: NodeId,
    dz: NodeId,
    z_next: NodeId,
    weights: NodeId,
    eps: f64,
) -> NodeId {
    let pred = g.add(z_hat, dz);
    let d = g.sub(pred, z_next);
    let p = g.unary(d, Unary::Charbonnier { eps });
    weighted_mean(g, p, weights)
}

/// Graph form of [`smoothness_loss`]; `wx`, `wy` come from
/// [`edge_weight_tensors`] with the flow's channel count.
pub fn smoothness_node<T: Scalar>(g: &mut Graph<T>, flow: NodeId, wx: NodeId, wy: NodeId, channels: usize) -> NodeId {
    let mut terms = Vec::with_capacity(2);
    for (axis, weights) in [(Axis::X, wx), (Axis::Y, wy)] {
        let d = g.forward_diff(flow, axis);
        let a = g.unary(d, Unary::Abs);
        let m = weighted_mean(g, a, weights);
        terms.push(g.scale(m, channels as f64));
    }
    g.add(terms[0], terms[1])
}

/// Graph form of [`stage_loss`]. Terms whose weight is zero may be `None`.
pub fn stage_loss_node<T: Scalar>(
    g: &mut Graph<T>,
    s: usize,
    epe: Option<NodeId>,
    reconstruction: Option<NodeId>,
    smoothness: Option<NodeId>,
    w: &LossWeights,
) -> Result<NodeId> {
    w.validate()?;
    let mut acc: Option<NodeId> = None;
    for (node, factor) in [
        (epe, w.alpha),
        (reconstruction, w.beta),
        (smoothness, w.smoothness_factor(s)),
    ] {
        let Some(node) = node else {
            if factor != 0.0 {
                return Err(Error::config("loss term with non-zero weight is missing"));
            }
            continue;
        };
        let term = g.scale(node, factor);
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term),
        });
    }
    acc.ok_or_else(|| Error::config("all loss weights are zero"))
}
