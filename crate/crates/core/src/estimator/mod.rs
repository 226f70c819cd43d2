//! Stage estimators and the coarse-to-fine lateral/depth pipeline.
//!
//! Each lateral stage receives the unwarped source and target depth levels
//! and the upsampled accumulated flow, and returns a residual on top of that
//! flow. Stages match census channels of the source warped by the flow
//! against those of the target; warping always starts from the original
//! level, so priors compose additively. Depth stages work on raw depth
//! values with a scalar prior.

pub mod classical;
pub mod conv;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{DepthMap, FlowField, Grid, Volume};
use crate::loss::LossWeights;
use crate::projection::argmax_projection;
use crate::pyramid::{build_pyramid, compose_depth_residual, compose_residual, upsample_flow2x, upsample_grid2x};
use crate::scalar::Scalar;
use crate::warp::{backward_warp, compose_25d};

pub use classical::{classical_stage_estimate, depth_residual, lucas_kanade, ClassicalParams, LkResult};
pub use conv::{aligned_census, build_network, depth_input, lateral_input, ConvConfig, ConvStage, Network};

pub const DEFAULT_LEVELS: usize = 4;

/// One per-scale estimator. Classical and convolutional stages share this
/// interface and the same pipeline driver.
#[derive(Debug, Clone)]
pub enum StageEstimator<T> {
    Classical(ClassicalParams),
    Convolutional(Box<ConvStage<T>>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    Classical,
    Convolutional,
}

impl<T: Scalar> StageEstimator<T> {
    pub fn kind(&self) -> StageKind {
        match self {
            StageEstimator::Classical(_) => StageKind::Classical,
            StageEstimator::Convolutional(_) => StageKind::Convolutional,
        }
    }

    /// Lateral residual on top of `prior` between unwarped levels `a`, `b`.
    pub fn estimate_lateral(&self, a: &DepthMap<T>, b: &DepthMap<T>, prior: &FlowField<T>) -> Result<FlowField<T>> {
        match self {
            StageEstimator::Classical(p) => Ok(classical_stage_estimate(a, b, prior, p)?.residual),
            StageEstimator::Convolutional(c) => c.estimate_lateral(a, b, prior),
        }
    }

    /// Depth residual for a warped source `a` against target `b`.
    pub fn estimate_depth(&self, a: &DepthMap<T>, b: &DepthMap<T>, prior: &Grid<T>) -> Result<Grid<T>> {
        match self {
            StageEstimator::Classical(p) => depth_residual(a, b, prior, p.depth_radius),
            StageEstimator::Convolutional(c) => c.estimate_depth(a, b, prior),
        }
    }
}

/// Lateral network F and depth network D, `levels` stages each, coarsest
/// first.
#[derive(Debug, Clone)]
pub struct PipelineModel<T> {
    pub lateral: Vec<StageEstimator<T>>,
    pub depth: Vec<StageEstimator<T>>,
    pub weights: LossWeights,
    pub seed: u64,
}

impl<T: Scalar> PipelineModel<T> {
    pub fn classical(levels: usize, params: ClassicalParams) -> Result<Self> {
        params.validate()?;
        let model = Self {
            lateral: vec![StageEstimator::Classical(params); levels],
            depth: vec![StageEstimator::Classical(params); levels],
            weights: LossWeights::default(),
            seed: 0,
        };
        model.validate()?;
        Ok(model)
    }

    /// Freshly initialized convolutional stages for both networks.
    pub fn convolutional(levels: usize, config: ConvConfig, seed: u64) -> Result<Self> {
        let mut lateral = Vec::with_capacity(levels);
        let mut depth = Vec::with_capacity(levels);
        for s in 0..levels {
            let ls = seed.wrapping_mul(1000).wrapping_add(2 * s as u64);
            lateral.push(StageEstimator::Convolutional(Box::new(ConvStage::new(
                Network::Lateral,
                config,
                s,
                ls,
            )?)));
            depth.push(StageEstimator::Convolutional(Box::new(ConvStage::new(
                Network::Depth,
                config,
                s,
                ls + 1,
            )?)));
        }
        let model = Self {
            lateral,
            depth,
            weights: LossWeights::default(),
            seed,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn levels(&self) -> usize {
        self.lateral.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lateral.is_empty() {
            return Err(Error::config("pipeline needs at least one stage"));
        }
        if self.lateral.len() != self.depth.len() {
            return Err(Error::config("lateral and depth networks differ in stage count"));
        }
        for net in [&self.lateral, &self.depth] {
            if net.iter().any(|s| s.kind() != net[0].kind()) {
                return Err(Error::config("stages of one network must share a kind"));
            }
        }
        self.weights.validate()
    }
}

/// Output of [`run_lateral`]: the full-resolution flow and the per-level
/// residuals that were folded into it.
#[derive(Debug, Clone, PartialEq)]
pub struct LateralTrace<T> {
    pub flow: FlowField<T>,
    pub residuals: Vec<FlowField<T>>,
}

/// Folds per-level residuals with [`compose_residual`], coarsest first.
pub fn fold_residuals<T: Scalar>(residuals: &[FlowField<T>]) -> Result<FlowField<T>> {
    let (first, rest) = residuals
        .split_first()
        .ok_or_else(|| Error::domain("no residuals to fold"))?;
    rest.iter().try_fold(first.clone(), |acc, r| compose_residual(r, &acc))
}

fn check_pair<T: Scalar>(a: &DepthMap<T>, b: &DepthMap<T>) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::domain(format!(
            "depth maps differ in size: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

/// Shifts a map so its smallest valid value is 0. Census compares pixels of
/// one map only, so lateral estimation is unchanged by this; for integer
/// depth maps it makes the output exactly independent of depth offsets.
pub(crate) fn to_zero_floor<T: Scalar>(z: &DepthMap<T>) -> DepthMap<T> {
    let floor = z
        .values()
        .iter()
        .zip(z.valid())
        .filter(|(_, &ok)| ok)
        .map(|(&v, _)| v)
        .fold(None, |m: Option<T>, v| Some(m.map_or(v, |m| m.min(v))));
    match floor {
        Some(f) => z.offset(-f),
        None => z.clone(),
    }
}

/// Coarse-to-fine lateral flow from `z_t` to `z_next`.
pub fn run_lateral<T: Scalar>(model: &PipelineModel<T>, z_t: &DepthMap<T>, z_next: &DepthMap<T>) -> Result<LateralTrace<T>> {
    check_pair(z_t, z_next)?;
    let levels = model.levels();
    let src = build_pyramid(&to_zero_floor(z_t), levels)?;
    let dst = build_pyramid(&to_zero_floor(z_next), levels)?;
    let mut flow: Option<FlowField<T>> = None;
    let mut residuals = Vec::with_capacity(levels);
    for (s, stage) in model.lateral.iter().enumerate() {
        let (a, b) = (src.level(s), dst.level(s));
        let prior = match &flow {
            Some(f) => upsample_flow2x(f),
            None => FlowField::zeros(a.width(), a.height(), 2)?,
        };
        let r = stage.estimate_lateral(a, b, &prior)?;
        flow = Some(match &flow {
            Some(f) => compose_residual(&r, f)?,
            None => r.clone(),
        });
        residuals.push(r);
    }
    Ok(LateralTrace {
        flow: flow.expect("at least one stage"),
        residuals,
    })
}

/// Coarse-to-fine depth flow between the laterally warped source and the
/// target.
pub fn run_depth<T: Scalar>(model: &PipelineModel<T>, z_warped: &DepthMap<T>, z_next: &DepthMap<T>) -> Result<Grid<T>> {
    check_pair(z_warped, z_next)?;
    let levels = model.levels();
    let src = build_pyramid(z_warped, levels)?;
    let dst = build_pyramid(z_next, levels)?;
    let mut dz: Option<Grid<T>> = None;
    for (s, stage) in model.depth.iter().enumerate() {
        let (a, b) = (src.level(s), dst.level(s));
        let prior = match &dz {
            Some(g) => upsample_grid2x(g),
            None => Grid::filled(a.width(), a.height(), T::zero())?,
        };
        let r = stage.estimate_depth(a, b, &prior)?;
        dz = Some(match &dz {
            Some(g) => compose_depth_residual(&r, g)?,
            None => r,
        });
    }
    Ok(dz.expect("at least one stage"))
}

/// A frame pair given either as raw volumes or as depth maps.
#[derive(Debug, Clone, Copy)]
pub enum FramePair<'a, T> {
    Volumes {
        first: &'a Volume<T>,
        second: &'a Volume<T>,
        min_intensity: T,
    },
    DepthMaps {
        first: &'a DepthMap<T>,
        second: &'a DepthMap<T>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput<T> {
    /// `(Δx, Δy, Δz)` on the grid of the second frame.
    pub flow: FlowField<T>,
    /// First frame warped by the lateral flow.
    pub warped: DepthMap<T>,
    /// Pixels where both the warped first frame and the second frame are valid.
    pub valid: Vec<bool>,
}

pub fn run_pipeline<T: Scalar>(model: &PipelineModel<T>, pair: FramePair<'_, T>) -> Result<PipelineOutput<T>> {
    let (z_t, z_next) = match pair {
        FramePair::Volumes {
            first,
            second,
            min_intensity,
        } => (
            argmax_projection(first, min_intensity)?,
            argmax_projection(second, min_intensity)?,
        ),
        FramePair::DepthMaps { first, second } => (first.clone(), second.clone()),
    };
    let lateral = run_lateral(model, &z_t, &z_next)?.flow;
    let warped = backward_warp(&z_t, &lateral)?.warped;
    let dz = run_depth(model, &warped, &z_next)?;
    let valid = warped
        .valid()
        .iter()
        .zip(z_next.valid())
        .map(|(&a, &b)| a && b)
        .collect();
    Ok(PipelineOutput {
        flow: compose_25d(&lateral, &dz)?,
        warped,
        valid,
    })
}

pub const MODEL_MANIFEST: &str = "model.toml";

/// Structured description of a saved model. Convolutional stage parameters
/// live in one checkpoint per stage next to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub levels: usize,
    pub kind: StageKind,
    pub seed: u64,
    pub unsupervised: bool,
    pub weights: LossWeights,
    pub classical: Option<ClassicalParams>,
    pub conv: Option<ConvConfig>,
    #[serde(default)]
    pub checkpoints: Vec<String>,
}

fn stage_file(network: Network, s: usize) -> String {
    format!("{}{s}.ofck", network.tag())
}

impl<T: Scalar> PipelineModel<T> {
    pub fn manifest(&self) -> ModelManifest {
        let kind = self.lateral[0].kind();
        let mut m = ModelManifest {
            levels: self.levels(),
            kind,
            seed: self.seed,
            unsupervised: self.weights.is_unsupervised(),
            weights: self.weights,
            classical: None,
            conv: None,
            checkpoints: Vec::new(),
        };
        for stage in self.lateral.iter().chain(&self.depth) {
            match stage {
                StageEstimator::Classical(p) => m.classical = Some(*p),
                StageEstimator::Convolutional(c) => {
                    m.conv = Some(c.config);
                    m.checkpoints.push(stage_file(c.network, level_of(&c.prefix)));
                }
            }
        }
        m
    }

    /// Writes the manifest and any stage checkpoints into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for stage in self.lateral.iter().chain(&self.depth) {
            if let StageEstimator::Convolutional(c) = stage {
                c.store.save_file(dir.join(stage_file(c.network, level_of(&c.prefix))))?;
            }
        }
        let text = toml::to_string(&self.manifest()).map_err(|e| Error::format(e.to_string()))?;
        let path = dir.join(MODEL_MANIFEST);
        fs::write(&path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MODEL_MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: ModelManifest = toml::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        let mut model = match m.kind {
            StageKind::Classical => {
                let p = m.classical.ok_or_else(|| Error::format("classical model without parameters"))?;
                Self::classical(m.levels, p)?
            }
            StageKind::Convolutional => {
                let c = m.conv.ok_or_else(|| Error::format("convolutional model without config"))?;
                let mut model = Self::convolutional(m.levels, c, m.seed)?;
                for stage in model.lateral.iter_mut().chain(model.depth.iter_mut()) {
                    if let StageEstimator::Convolutional(c) = stage {
                        c.store.load_file(dir.join(stage_file(c.network, level_of(&c.prefix))))?;
                    }
                }
                model
            }
        };
        model.weights = m.weights;
        model.seed = m.seed;
        model.validate()?;
        Ok(model)
    }
}

fn level_of(prefix: &str) -> usize {
    prefix[1..].parse().expect("stage prefixes are a tag plus a level")
}
