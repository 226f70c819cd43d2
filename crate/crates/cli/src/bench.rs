//! Wall-clock timing of the full pipeline on a generated pair.

use std::time::Instant;

use octflow::dataset::{generate_base_map, synthesize_pair, AffineParams, BaseMapParams};
use octflow::estimator::{run_pipeline, FramePair, PipelineModel};
use octflow::{Error, FlowFieldF32, Result};
use serde::Serialize;

use crate::config::BenchConfig;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub width: usize,
    pub height: usize,
    pub levels: usize,
    pub runs: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
    pub budget_ms: f64,
    /// Runs slower than the budget.
    pub over_budget: usize,
    /// Every timed run produced the same flow.
    pub deterministic: bool,
    #[serde(skip)]
    pub times_ms: Vec<f64>,
    #[serde(skip)]
    pub flow: FlowFieldF32,
}

impl BenchReport {
    pub fn within_budget(&self) -> bool {
        self.mean_ms < self.budget_ms
    }
}

impl std::fmt::Display for BenchReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}x{} S={} over {} runs: mean {:.2} ms, p50 {:.2}, p95 {:.2}, max {:.2}; budget {:.1} ms, {} over; {}",
            self.width,
            self.height,
            self.levels,
            self.runs,
            self.mean_ms,
            self.p50_ms,
            self.p95_ms,
            self.max_ms,
            self.budget_ms,
            self.over_budget,
            if self.deterministic { "deterministic" } else { "NON-DETERMINISTIC" }
        )
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * (sorted.len() - 1) as f64).round() as usize;
    sorted[rank]
}

/// Times `model` on a pair moved by a fixed small rigid motion.
pub fn bench(model: &PipelineModel<f32>, cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.runs == 0 {
        return Err(Error::Config("bench needs at least one run".into()));
    }
    let base = generate_base_map::<f32>(cfg.width, cfg.height, cfg.seed, &BaseMapParams::default())?;
    let motion = AffineParams {
        tx: 3.5,
        ty: -2.25,
        tz: 4.0,
        omega: 0.02,
    };
    let pair = synthesize_pair(&base, &motion, 0.0, cfg.seed)?;
    let frames = FramePair::DepthMaps {
        first: &pair.first,
        second: &pair.second,
    };
    for _ in 0..cfg.warmup {
        run_pipeline(model, frames)?;
    }
    let reference = run_pipeline(model, frames)?.flow;
    let mut times = Vec::with_capacity(cfg.runs);
    let mut deterministic = true;
    for _ in 0..cfg.runs {
        let t = Instant::now();
        let out = run_pipeline(model, frames)?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
        deterministic &= out.flow == reference;
    }
    let mut sorted = times.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(BenchReport {
        width: cfg.width,
        height: cfg.height,
        levels: model.levels(),
        runs: cfg.runs,
        mean_ms: times.iter().sum::<f64>() / times.len() as f64,
        p50_ms: percentile(&sorted, 0.5),
        p95_ms: percentile(&sorted, 0.95),
        max_ms: *sorted.last().expect("runs >= 1"),
        budget_ms: cfg.budget_ms,
        over_budget: times.iter().filter(|&&t| t > cfg.budget_ms).count(),
        deterministic,
        times_ms: times,
        flow: reference,
    })
}
