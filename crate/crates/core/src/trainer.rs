//! Stage-wise training of convolutional pipelines and dataset evaluation.
//!
//! Training walks a fixed schedule: lateral stages coarsest to finest, then
//! depth stages coarsest to finest. Only the active stage is optimized;
//! coarser stages are frozen and supply its prior. Each stage keeps the
//! parameters with the lowest validation loss. The whole training state
//! persists between epochs, so an interrupted run resumes exactly.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, ForwardOptions, Graph, NodeId, ParamStore, Tensor};
use crate::census::{census_channels, census_transform};
use crate::dataset::{load_pair, DatasetManifest, PairRecord, Split, SyntheticPair};
use crate::error::{Error, Result};
use crate::estimator::{
    aligned_census, depth_input, lateral_input, run_lateral, run_pipeline, to_zero_floor, ConvStage, FramePair,
    Network, PipelineModel, StageEstimator,
};
use crate::field::{read_flow, DepthMap, FlowField, Grid};
use crate::loss::{
    depth_reconstruction_node, edge_weight_tensors, epe_node, mask_weights, reconstruction_node, smoothness_node,
    stage_loss_node, LossWeights,
};
use crate::pyramid::{build_pyramid, compose_depth_residual, compose_residual, flow_pyramid, upsample_flow2x, upsample_grid2x};
use crate::scalar::Scalar;
use crate::stream_seed;
use crate::warp::backward_warp;

pub const DEFAULT_VOXEL_PITCH_UM: f64 = 6.0;
pub const METRICS_COLUMNS: [&str; 6] = [
    "split",
    "mean_epe_vox",
    "std_epe_vox",
    "median_epe_vox",
    "mean_epe_um",
    "ms_per_pair",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs without validation improvement before a stage stops.
    pub patience: usize,
    pub weights: LossWeights,
    pub seed: u64,
    /// Optimizer step cap per stage.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 8,
            lr: 1e-4,
            patience: 20,
            weights: LossWeights::default(),
            seed: 0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("lr must be > 0"));
        }
        if self.max_steps == Some(0) {
            return Err(Error::config("max_steps must be >= 1 when set"));
        }
        self.weights.validate()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// Tracks the best validation loss and counts epochs since it was seen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            stale: 0,
        }
    }

    /// Records one epoch; returns true on a strict improvement.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        match self.best {
            Some((_, b)) if loss >= b => {
                self.stale += 1;
                false
            }
            _ => {
                self.best = Some((epoch, loss));
                self.stale = 0;
                true
            }
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    /// `(epoch, loss)` of the best epoch so far.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub network: Network,
    pub stage: usize,
    /// 1-based within the stage.
    pub epoch: usize,
    /// Optimizer steps taken in the stage so far.
    pub steps: usize,
    pub train_loss: f64,
    pub train_epe: f64,
    pub val_loss: f64,
    pub val_epe: f64,
}

/// Loaded training and validation pairs.
#[derive(Debug, Clone)]
pub struct TrainData<T> {
    pub train: Vec<SyntheticPair<T>>,
    pub val: Vec<SyntheticPair<T>>,
}

impl<T: Scalar> TrainData<T> {
    /// Reads the train and val splits of a dataset directory.
    pub fn load(dir: impl AsRef<Path>, manifest: &DatasetManifest) -> Result<Self> {
        let dir = dir.as_ref();
        let read = |split| -> Result<Vec<SyntheticPair<T>>> {
            manifest.split(split).map(|r| load_pair(dir, r)).collect()
        };
        Ok(Self {
            train: read(Split::Train)?,
            val: read(Split::Val)?,
        })
    }

    /// Validates on the training pairs themselves.
    pub fn overfit(pairs: Vec<SyntheticPair<T>>) -> Self {
        Self {
            val: pairs.clone(),
            train: pairs,
        }
    }
}

/// Per-item network inputs and loss targets at one stage, each `[1, ..]`.
#[derive(Debug, Clone)]
struct Item<T> {
    input: Tensor<T>,
    prior: Tensor<T>,
    gt: Tensor<T>,
    gt_weights: Tensor<T>,
    source: Tensor<T>,
    target: Tensor<T>,
    rec_weights: Tensor<T>,
    wx: Tensor<T>,
    wy: Tensor<T>,
}

fn tensor<T: Scalar>(c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Tensor<T>> {
    Tensor::new([1, c, h, w], data)
}

fn batch<T: Scalar>(items: &[&Item<T>], field: impl Fn(&Item<T>) -> &Tensor<T>) -> Tensor<T> {
    let [_, c, h, w] = field(items[0]).shape();
    let mut data = Vec::with_capacity(items.len() * c * h * w);
    for it in items {
        data.extend_from_slice(field(it).data());
    }
    Tensor::new([items.len(), c, h, w], data).expect("items share a shape")
}

fn masked_values<T: Scalar>(z: &DepthMap<T>) -> Vec<T> {
    z.values()
        .iter()
        .zip(z.valid())
        .map(|(&v, &ok)| if ok { v } else { T::zero() })
        .collect()
}

fn and(a: &[bool], b: &[bool]) -> Vec<bool> {
    a.iter().zip(b).map(|(&x, &y)| x && y).collect()
}

fn lateral_item<T: Scalar>(model: &PipelineModel<T>, s: usize, pair: &SyntheticPair<T>) -> Result<Item<T>> {
    let levels = model.levels();
    let src = build_pyramid(&to_zero_floor(&pair.first), levels)?;
    let dst = build_pyramid(&to_zero_floor(&pair.second), levels)?;
    let mut flow: Option<FlowField<T>> = None;
    for (k, stage) in model.lateral[..s].iter().enumerate() {
        let prior = match &flow {
            Some(f) => upsample_flow2x(f),
            None => FlowField::zeros(src.level(k).width(), src.level(k).height(), 2)?,
        };
        let r = stage.estimate_lateral(src.level(k), dst.level(k), &prior)?;
        flow = Some(match &flow {
            Some(f) => compose_residual(&r, f)?,
            None => r,
        });
    }
    let (a, b) = (src.level(s), dst.level(s));
    let (w, h) = (a.width(), a.height());
    let prior = match &flow {
        Some(f) => upsample_flow2x(f),
        None => FlowField::zeros(w, h, 2)?,
    };
    let (ca, cb) = aligned_census(a, b, &prior)?;
    let aligned = census_transform(&backward_warp(a, &prior)?.warped)?;
    let target = census_transform(b)?;
    let source = census_channels::<T>(&census_transform(a)?);
    let gt = flow_pyramid(&pair.flow, levels)?.swap_remove(s).lateral();
    let gt_mask = b.valid();
    let rec_mask = and(aligned.valid(), target.valid());
    let (wx, wy) = edge_weight_tensors(&[b], 2)?;
    Ok(Item {
        input: lateral_input(&[(&ca, &cb, &prior)])?,
        prior: tensor(2, h, w, prior.data().to_vec())?,
        gt: tensor(2, h, w, gt.data().to_vec())?,
        gt_weights: mask_weights(&[gt_mask], w, h)?,
        source: tensor(8, h, w, source.data().to_vec())?,
        target: tensor(8, h, w, cb.data().to_vec())?,
        rec_weights: mask_weights(&[&rec_mask], w, h)?,
        wx,
        wy,
    })
}

fn depth_item<T: Scalar>(model: &PipelineModel<T>, s: usize, pair: &SyntheticPair<T>) -> Result<Item<T>> {
    let levels = model.levels();
    let lateral = run_lateral(model, &pair.first, &pair.second)?.flow;
    let warped = backward_warp(&pair.first, &lateral)?.warped;
    let src = build_pyramid(&warped, levels)?;
    let dst = build_pyramid(&pair.second, levels)?;
    let mut dz: Option<Grid<T>> = None;
    for (k, stage) in model.depth[..s].iter().enumerate() {
        let prior = match &dz {
            Some(g) => upsample_grid2x(g),
            None => Grid::filled(src.level(k).width(), src.level(k).height(), T::zero())?,
        };
        let r = stage.estimate_depth(src.level(k), dst.level(k), &prior)?;
        dz = Some(match &dz {
            Some(g) => compose_depth_residual(&r, g)?,
            None => r,
        });
    }
    let (a, b) = (src.level(s), dst.level(s));
    let (w, h) = (a.width(), a.height());
    let prior = match &dz {
        Some(g) => upsample_grid2x(g),
        None => Grid::filled(w, h, T::zero())?,
    };
    let gt = flow_pyramid(&pair.flow, levels)?
        .swap_remove(s)
        .depth_channel()
        .ok_or_else(|| Error::domain("ground truth needs a depth channel"))?;
    let mask = and(a.valid(), b.valid());
    let weights = mask_weights(&[&mask], w, h)?;
    let (wx, wy) = edge_weight_tensors(&[b], 1)?;
    Ok(Item {
        input: depth_input(&[(a, b, &prior)])?,
        prior: tensor(1, h, w, prior.data().to_vec())?,
        gt: tensor(1, h, w, gt.into_data())?,
        gt_weights: weights.clone(),
        source: tensor(1, h, w, masked_values(a))?,
        target: tensor(1, h, w, masked_values(b))?,
        rec_weights: weights,
        wx,
        wy,
    })
}

fn prepare<T: Scalar>(
    model: &PipelineModel<T>,
    network: Network,
    s: usize,
    pairs: &[SyntheticPair<T>],
) -> Result<Vec<Item<T>>> {
    pairs
        .par_iter()
        .map(|p| match network {
            Network::Lateral => lateral_item(model, s, p),
            Network::Depth => depth_item(model, s, p),
        })
        .collect()
}

/// Training graph for one batch size.
#[derive(Debug, Clone)]
struct StageGraph<T> {
    graph: Graph<T>,
    inputs: [NodeId; 9],
    loss: NodeId,
    epe: NodeId,
}

fn stage_graph<T: Scalar>(conv: &ConvStage<T>, s: usize, weights: &LossWeights) -> Result<StageGraph<T>> {
    let mut g = Graph::new();
    let names = ["input", "prior", "gt", "gt_weights", "source", "target", "rec_weights", "wx", "wy"];
    let inputs = names.map(|n| g.input(n, false));
    let [input, prior, gt, gt_w, source, target, rec_w, wx, wy] = inputs;
    let residual = conv.append_to(&mut g, input)?;
    let flow = g.add(prior, residual);
    let epe = epe_node(&mut g, flow, gt, gt_w);
    let eps = weights.charbonnier_eps;
    let rec = match conv.network {
        Network::Lateral => reconstruction_node(&mut g, source, flow, target, rec_w, eps),
        Network::Depth => depth_reconstruction_node(&mut g, source, flow, target, rec_w, eps),
    };
    let smooth = smoothness_node(&mut g, flow, wx, wy, conv.network.out_channels());
    let pick = |node, factor: f64| (factor != 0.0).then_some(node);
    let loss = stage_loss_node(
        &mut g,
        s,
        pick(epe, weights.alpha),
        pick(rec, weights.beta),
        pick(smooth, weights.smoothness_factor(s)),
        weights,
    )?;
    Ok(StageGraph {
        graph: g,
        inputs,
        loss,
        epe,
    })
}

impl<T: Scalar> StageGraph<T> {
    fn feeds(&self, items: &[&Item<T>]) -> Vec<(NodeId, Tensor<T>)> {
        let fields: [fn(&Item<T>) -> &Tensor<T>; 9] = [
            |i| &i.input,
            |i| &i.prior,
            |i| &i.gt,
            |i| &i.gt_weights,
            |i| &i.source,
            |i| &i.target,
            |i| &i.rec_weights,
            |i| &i.wx,
            |i| &i.wy,
        ];
        self.inputs.iter().zip(fields).map(|(&id, f)| (id, batch(items, f))).collect()
    }

    fn scalar(&self, id: NodeId) -> f64 {
        self.graph.value(id).expect("forward ran").data()[0].to_f64().unwrap_or(f64::NAN)
    }
}

fn conv_stage<T>(model: &PipelineModel<T>, network: Network, s: usize) -> Result<&ConvStage<T>> {
    let net = match network {
        Network::Lateral => &model.lateral,
        Network::Depth => &model.depth,
    };
    match net.get(s) {
        Some(StageEstimator::Convolutional(c)) => Ok(c),
        Some(StageEstimator::Classical(_)) => Err(Error::config("classical stages have no trainable parameters")),
        None => Err(Error::config(format!("stage {s} does not exist"))),
    }
}

fn conv_stage_mut<T>(model: &mut PipelineModel<T>, network: Network, s: usize) -> &mut ConvStage<T> {
    let net = match network {
        Network::Lateral => &mut model.lateral,
        Network::Depth => &mut model.depth,
    };
    match &mut net[s] {
        StageEstimator::Convolutional(c) => c,
        StageEstimator::Classical(_) => unreachable!("checked by conv_stage"),
    }
}

/// Mean loss and EPE of a stage over prepared items in evaluation mode.
fn evaluate_items<T: Scalar>(
    graphs: &mut HashMap<usize, StageGraph<T>>,
    conv: &ConvStage<T>,
    s: usize,
    items: &[Item<T>],
    cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    let (mut loss, mut epe) = (0.0, 0.0);
    for chunk in items.chunks(cfg.batch_size) {
        let refs: Vec<&Item<T>> = chunk.iter().collect();
        let sg = cached_graph(graphs, conv, s, chunk.len(), &cfg.weights)?;
        let feeds = sg.feeds(&refs);
        let mut store = conv.store.clone();
        sg.graph.forward(&mut store, &feeds, ForwardOptions::eval())?;
        loss += sg.scalar(sg.loss) * chunk.len() as f64;
        epe += sg.scalar(sg.epe) * chunk.len() as f64;
    }
    Ok((loss / items.len() as f64, epe / items.len() as f64))
}

fn cached_graph<'a, T: Scalar>(
    graphs: &'a mut HashMap<usize, StageGraph<T>>,
    conv: &ConvStage<T>,
    s: usize,
    n: usize,
    weights: &LossWeights,
) -> Result<&'a mut StageGraph<T>> {
    if let std::collections::hash_map::Entry::Vacant(e) = graphs.entry(n) {
        e.insert(stage_graph(conv, s, weights)?);
    }
    Ok(graphs.get_mut(&n).expect("inserted above"))
}

/// Stage-level loss and EPE of the current model on `pairs`.
pub fn stage_metrics<T: Scalar>(
    model: &PipelineModel<T>,
    network: Network,
    s: usize,
    pairs: &[SyntheticPair<T>],
    cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::config("no pairs to evaluate"));
    }
    let conv = conv_stage(model, network, s)?;
    let items = prepare(model, network, s, pairs)?;
    evaluate_items(&mut HashMap::new(), conv, s, &items, cfg)
}

const STATE_FILE: &str = "trainer.toml";
const MODEL_DIR: &str = "model";
const BEST_FILE: &str = "best.ofck";
const OPTIMIZER_FILE: &str = "optimizer.ofos";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SavedState {
    config: TrainConfig,
    phase: usize,
    epoch: usize,
    steps: usize,
    stopper: EarlyStopping,
    has_best: bool,
    history: Vec<EpochRecord>,
}

/// Resumable training state.
#[derive(Debug)]
pub struct Trainer<T> {
    pub model: PipelineModel<T>,
    pub config: TrainConfig,
    pub history: Vec<EpochRecord>,
    phase: usize,
    epoch: usize,
    steps: usize,
    optimizer: Adam<T>,
    stopper: EarlyStopping,
    best: Option<ParamStore<T>>,
    graphs: HashMap<usize, StageGraph<T>>,
    prepared: Option<(usize, Vec<Item<T>>, Vec<Item<T>>)>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(mut model: PipelineModel<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        model.validate()?;
        conv_stage(&model, Network::Lateral, 0)?;
        model.weights = config.weights;
        Ok(Self {
            model,
            history: Vec::new(),
            phase: 0,
            epoch: 0,
            steps: 0,
            optimizer: Adam::new(config.adam()),
            stopper: EarlyStopping::new(config.patience),
            best: None,
            graphs: HashMap::new(),
            prepared: None,
            config,
        })
    }

    fn schedule(&self, phase: usize) -> Option<(Network, usize)> {
        let levels = self.model.levels();
        match phase {
            p if p < levels => Some((Network::Lateral, p)),
            p if p < 2 * levels => Some((Network::Depth, p - levels)),
            _ => None,
        }
    }

    /// Stage currently being trained, or `None` once training is complete.
    pub fn current(&self) -> Option<(Network, usize)> {
        self.schedule(self.phase)
    }

    pub fn is_finished(&self) -> bool {
        self.current().is_none()
    }

    /// Restricts training to the stage at `(network, s)` and returns once
    /// it has finished.
    pub fn train_stage(&mut self, network: Network, s: usize, data: &TrainData<T>) -> Result<Vec<EpochRecord>> {
        let target = match network {
            Network::Lateral => s,
            Network::Depth => self.model.levels() + s,
        };
        conv_stage(&self.model, network, s)?;
        if self.phase > target {
            return Err(Error::State(format!("stage {s} of {network:?} already trained")));
        }
        if self.phase < target {
            self.enter_phase(target);
        }
        let start = self.history.len();
        while self.phase == target {
            self.run_epoch(data)?;
        }
        Ok(self.history[start..].to_vec())
    }

    fn enter_phase(&mut self, phase: usize) {
        self.phase = phase;
        self.epoch = 0;
        self.steps = 0;
        self.optimizer = Adam::new(self.config.adam());
        self.stopper = EarlyStopping::new(self.config.patience);
        self.best = None;
        self.graphs.clear();
        self.prepared = None;
    }

    /// Runs one epoch of the current stage. Returns `false` once every
    /// stage is done.
    pub fn run_epoch(&mut self, data: &TrainData<T>) -> Result<bool> {
        let Some((network, s)) = self.current() else {
            return Ok(false);
        };
        if data.train.is_empty() || data.val.is_empty() {
            return Err(Error::config("training needs non-empty train and val splits"));
        }
        if self.prepared.as_ref().map(|p| p.0) != Some(self.phase) {
            let train = prepare(&self.model, network, s, &data.train)?;
            let val = prepare(&self.model, network, s, &data.val)?;
            self.prepared = Some((self.phase, train, val));
        }
        let (_, train, val) = self.prepared.as_ref().expect("prepared above");
        let cfg = self.config;
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[cfg.seed, self.phase as u64, self.epoch as u64]));
        order.shuffle(&mut rng);

        let conv = conv_stage_mut(&mut self.model, network, s);
        let (mut loss_sum, mut epe_sum, mut seen) = (0.0, 0.0, 0usize);
        for (k, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if cfg.max_steps.is_some_and(|m| self.steps >= m) {
                break;
            }
            let refs: Vec<&Item<T>> = chunk.iter().map(|&i| &train[i]).collect();
            let sg = cached_graph(&mut self.graphs, conv, s, chunk.len(), &cfg.weights)?;
            let feeds = sg.feeds(&refs);
            let opts = ForwardOptions::train(stream_seed(&[cfg.seed, self.phase as u64, self.epoch as u64, k as u64, 1]));
            sg.graph.forward(&mut conv.store, &feeds, opts)?;
            let loss = sg.scalar(sg.loss);
            if !loss.is_finite() {
                return Err(Error::Training {
                    step: self.steps,
                    msg: format!("non-finite loss {loss} in {network:?} stage {s}, epoch {}", self.epoch + 1),
                });
            }
            let grads = sg.graph.backward(sg.loss, Tensor::scalar(T::one()))?;
            self.optimizer.step(&mut conv.store, &grads).map_err(|e| Error::Training {
                step: self.steps,
                msg: format!("{network:?} stage {s}, epoch {}: {e}", self.epoch + 1),
            })?;
            self.steps += 1;
            loss_sum += loss * chunk.len() as f64;
            epe_sum += sg.scalar(sg.epe) * chunk.len() as f64;
            seen += chunk.len();
        }
        let (val_loss, val_epe) = evaluate_items(&mut self.graphs, conv, s, val, &cfg)?;
        if !val_loss.is_finite() {
            return Err(Error::Training {
                step: self.steps,
                msg: format!("non-finite validation loss in {network:?} stage {s}"),
            });
        }
        self.epoch += 1;
        if self.stopper.observe(self.epoch, val_loss) {
            self.best = Some(conv.store.clone());
        }
        let seen = seen.max(1) as f64;
        self.history.push(EpochRecord {
            network,
            stage: s,
            epoch: self.epoch,
            steps: self.steps,
            train_loss: loss_sum / seen,
            train_epe: epe_sum / seen,
            val_loss,
            val_epe,
        });
        log::info!(
            "{network:?} stage {s} epoch {}: train loss {:.5}, val loss {val_loss:.5}, val EPE {val_epe:.4}",
            self.epoch,
            loss_sum / seen
        );
        let out_of_steps = cfg.max_steps.is_some_and(|m| self.steps >= m);
        if self.stopper.should_stop() || self.epoch >= cfg.epochs || out_of_steps {
            if let Some(best) = self.best.take() {
                conv.store = best;
            }
            self.enter_phase(self.phase + 1);
        }
        Ok(!self.is_finished())
    }

    /// Trains every remaining stage. When `state_dir` is given the state is
    /// saved there after each epoch.
    pub fn run(&mut self, data: &TrainData<T>, state_dir: Option<&Path>) -> Result<()> {
        while self.run_epoch(data)? {
            if let Some(dir) = state_dir {
                self.save(dir)?;
            }
        }
        if let Some(dir) = state_dir {
            self.save(dir)?;
        }
        Ok(())
    }

    /// Writes the model, optimizer moments, best parameters so far and
    /// bookkeeping into `dir`. Parameters are stored as f32.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.model.save(dir.join(MODEL_DIR))?;
        if let Some((network, s)) = self.current() {
            let store = &conv_stage(&self.model, network, s)?.store;
            self.optimizer.save_file(store, dir.join(OPTIMIZER_FILE))?;
        }
        if let Some(best) = &self.best {
            best.save_file(dir.join(BEST_FILE))?;
        }
        let state = SavedState {
            config: self.config,
            phase: self.phase,
            epoch: self.epoch,
            steps: self.steps,
            stopper: self.stopper,
            has_best: self.best.is_some(),
            history: self.history.clone(),
        };
        let text = toml::to_string(&state).map_err(|e| Error::format(e.to_string()))?;
        let path = dir.join(STATE_FILE);
        fs::write(&path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(STATE_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let state: SavedState = toml::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        let model = PipelineModel::load(dir.join(MODEL_DIR))?;
        let mut t = Self::new(model, state.config)?;
        t.phase = state.phase;
        t.epoch = state.epoch;
        t.steps = state.steps;
        t.stopper = state.stopper;
        t.history = state.history;
        if let Some((network, s)) = t.current() {
            t.optimizer = Adam::load_file(t.config.adam(), dir.join(OPTIMIZER_FILE))?;
            if state.has_best {
                let mut best = conv_stage(&t.model, network, s)?.store.clone();
                best.load_file(dir.join(BEST_FILE))?;
                t.best = Some(best);
            }
        }
        Ok(t)
    }
}

/// Trains all stages of `model` and returns it with the history.
pub fn train_pipeline<T: Scalar>(
    model: PipelineModel<T>,
    data: &TrainData<T>,
    cfg: &TrainConfig,
) -> Result<(PipelineModel<T>, Vec<EpochRecord>)> {
    let mut t = Trainer::new(model, *cfg)?;
    t.run(data, None)?;
    Ok((t.model, t.history))
}

/// Anything that produces a 3-channel flow for a dataset pair.
pub trait FlowPredictor<T: Scalar>: Sync {
    fn predict(&self, record: &PairRecord, pair: &SyntheticPair<T>) -> Result<FlowField<T>>;
}

impl<T: Scalar> FlowPredictor<T> for PipelineModel<T> {
    fn predict(&self, _: &PairRecord, pair: &SyntheticPair<T>) -> Result<FlowField<T>> {
        let out = run_pipeline(
            self,
            FramePair::DepthMaps {
                first: &pair.first,
                second: &pair.second,
            },
        )?;
        Ok(out.flow)
    }
}

/// Flows read from a directory, named like the ground-truth files of the
/// manifest.
#[derive(Debug, Clone)]
pub struct PrecomputedFlows {
    pub dir: PathBuf,
}

impl<T: Scalar> FlowPredictor<T> for PrecomputedFlows {
    fn predict(&self, record: &PairRecord, _: &SyntheticPair<T>) -> Result<FlowField<T>> {
        let f: FlowField<f32> = read_flow(self.dir.join(&record.flow))?;
        Ok(f.cast())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub voxel_pitch_um: f64,
    /// Border pixels excluded from every pair's EPE.
    pub margin: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            voxel_pitch_um: DEFAULT_VOXEL_PITCH_UM,
            margin: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub id: usize,
    pub epe_vox: f64,
    pub ms: f64,
}

/// Summary statistics over per-pair EPEs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: Split,
    pub mean_epe_vox: f64,
    pub std_epe_vox: f64,
    pub median_epe_vox: f64,
    pub mean_epe_um: f64,
    pub ms_per_pair: f64,
    #[serde(skip)]
    pub pairs: Vec<PairMetrics>,
}

impl MetricsReport {
    /// Population statistics of `pairs`.
    pub fn from_pairs(split: Split, pairs: Vec<PairMetrics>, voxel_pitch_um: f64) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Evaluation(format!("split {} is empty", split.name())));
        }
        let n = pairs.len() as f64;
        let mean = pairs.iter().map(|p| p.epe_vox).sum::<f64>() / n;
        let std = (pairs.iter().map(|p| (p.epe_vox - mean).powi(2)).sum::<f64>() / n).sqrt();
        let mut sorted: Vec<f64> = pairs.iter().map(|p| p.epe_vox).collect();
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        let median = if sorted.len() % 2 == 1 {
            sorted[mid]
        } else {
            (sorted[mid - 1] + sorted[mid]) / 2.0
        };
        Ok(Self {
            split,
            mean_epe_vox: mean,
            std_epe_vox: std,
            median_epe_vox: median,
            mean_epe_um: mean * voxel_pitch_um,
            ms_per_pair: pairs.iter().map(|p| p.ms).sum::<f64>() / n,
            pairs,
        })
    }

    /// CSV with a header row; one row per report.
    pub fn to_csv(reports: &[MetricsReport]) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in reports {
            w.serialize(r).map_err(|e| Error::format(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::format(e.to_string()))
    }
}

impl std::fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<5} EPE {:.3} ± {:.3} ({:.3}) voxel = {:.1} µm, {:.1} ms/pair over {} pairs",
            self.split.name(),
            self.mean_epe_vox,
            self.std_epe_vox,
            self.median_epe_vox,
            self.mean_epe_um,
            self.ms_per_pair,
            self.pairs.len()
        )
    }
}

/// Mean 3D endpoint error over pixels valid in `mask`.
pub fn pair_epe<T: Scalar>(pred: &FlowField<T>, gt: &FlowField<T>, mask: &[bool]) -> Result<f64> {
    if !pred.same_grid(gt.width(), gt.height()) || pred.channels() != gt.channels() {
        return Err(Error::domain("prediction and ground truth differ in shape"));
    }
    let n = gt.width() * gt.height();
    let (mut sum, mut count) = (0.0, 0usize);
    for i in (0..n).filter(|&i| mask[i]) {
        let sq: f64 = (0..gt.channels())
            .map(|c| (pred.channel(c)[i] - gt.channel(c)[i]).to_f64().unwrap_or(f64::NAN).powi(2))
            .sum();
        sum += sq.sqrt();
        count += 1;
    }
    if count == 0 {
        return Err(Error::Evaluation("no valid pixels".into()));
    }
    Ok(sum / count as f64)
}

/// Evaluates `predictor` on one split of a dataset directory.
pub fn evaluate_dataset<T: Scalar, P: FlowPredictor<T>>(
    predictor: &P,
    dir: impl AsRef<Path>,
    manifest: &DatasetManifest,
    split: Split,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    let dir = dir.as_ref();
    let records: Vec<&PairRecord> = manifest.split(split).collect();
    let pairs = records
        .par_iter()
        .map(|r| -> Result<PairMetrics> {
            let pair: SyntheticPair<T> = load_pair(dir, r).map_err(|e| match e {
                Error::Io { path, source } => Error::Io {
                    path: PathBuf::from(format!("pair {}: {}", r.id, path.display())),
                    source,
                },
                other => other,
            })?;
            let t = Instant::now();
            let pred = predictor.predict(r, &pair)?;
            let ms = t.elapsed().as_secs_f64() * 1e3;
            let (w, h) = (pair.second.width(), pair.second.height());
            let interior = crate::field::interior_mask(w, h, cfg.margin);
            let mask = and(pair.second.valid(), &interior);
            Ok(PairMetrics {
                id: r.id,
                epe_vox: pair_epe(&pred, &pair.flow, &mask)?,
                ms,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_pairs(split, pairs, cfg.voxel_pitch_um)
}
