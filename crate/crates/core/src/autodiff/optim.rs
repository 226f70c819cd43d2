//! Adam with bias correction. Optimizer state persists as `OFOS`:
//! `OFOS` | u32 step | u32 count | per tensor: u32 name length, name,
//! 4×u32 shape, f32 first moment, f32 second moment.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::params::{ByteReader, ParamKind, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const OPTIMIZER_MAGIC: &[u8; 4] = b"OFOS";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: usize,
    moments: HashMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Applies one update to every trainable tensor that has a gradient.
    /// Fails without touching parameters if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        let next = self.step + 1;
        for (name, g) in &grads.params {
            if let Some(bad) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::Training {
                    step: next,
                    msg: format!("non-finite gradient in {name} at element {bad}"),
                });
            }
        }
        self.step = next;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::one() - b1.powi(next as i32);
        let bc2_sqrt = (T::one() - b2.powi(next as i32)).sqrt();
        let step_size = T::of(c.lr) / bc1;
        let eps = T::of(c.eps);
        let names: Vec<String> = store
            .iter()
            .filter(|(_, k, _)| *k == ParamKind::Trainable)
            .map(|(n, _, _)| n.to_string())
            .collect();
        for name in names {
            let Some(g) = grads.get(&name) else { continue };
            let p = store.get_mut(&name).expect("listed above");
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())));
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                *pv -= step_size * *mv / (vv.sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }

    /// Serializes state in the order of `store` for stable files.
    pub fn encode(&self, store: &ParamStore<T>) -> Vec<u8> {
        let mut out = OPTIMIZER_MAGIC.to_vec();
        out.extend_from_slice(&(self.step as u32).to_le_bytes());
        let names: Vec<&str> = store.names().filter(|n| self.moments.contains_key(*n)).collect();
        out.extend_from_slice(&(names.len() as u32).to_le_bytes());
        for name in names {
            let (m, v) = &self.moments[name];
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            for d in m.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for x in m.data().iter().chain(v.data()) {
                out.extend_from_slice(&x.to_f32_lossy().to_le_bytes());
            }
        }
        out
    }

    pub fn decode(config: AdamConfig, bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != OPTIMIZER_MAGIC {
            return Err(Error::format("bad optimizer state magic"));
        }
        let mut r = ByteReader { bytes, pos: 4 };
        let step = r.u32()?;
        let count = r.u32()?;
        let mut moments = HashMap::new();
        for _ in 0..count {
            let name = r.name()?;
            let shape = r.shape()?;
            let n: usize = shape.iter().product();
            let m = Tensor::new(shape, r.f32s(n)?).map_err(|e| Error::format(e.to_string()))?;
            let v = Tensor::new(shape, r.f32s(n)?).map_err(|e| Error::format(e.to_string()))?;
            moments.insert(name, (m, v));
        }
        r.finish()?;
        Ok(Self { config, step, moments })
    }

    pub fn save_file(&self, store: &ParamStore<T>, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode(store)).map_err(|e| Error::io(path, e))
    }

    pub fn load_file(config: AdamConfig, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(config, &bytes)
    }
}
