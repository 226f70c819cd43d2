//! Finite-difference gradient oracle. Uses only forward evaluation, so it is
//! independent of the backward rules it checks.
#![allow(dead_code)]

use octflow::autodiff::{ForwardOptions, Graph, NodeId, ParamKind, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Scalar objective `mean(output * projection)` appended to `graph`.
pub fn project(graph: &mut Graph<f64>, out: NodeId) -> (NodeId, NodeId) {
    let r = graph.input("projection", false);
    let prod = graph.mul(out, r);
    (graph.reduce_mean(prod), r)
}

/// Worst norm-wise relative error between analytic and central-difference
/// gradients over every grad-requiring input and every trainable parameter.
pub fn max_relative_error(
    graph: &mut Graph<f64>,
    store: &mut ParamStore<f64>,
    out: NodeId,
    feeds: Vec<(NodeId, Tensor<f64>)>,
    opts: ForwardOptions,
    rng: &mut ChaCha8Rng,
) -> f64 {
    graph.forward(store, &feeds, opts).unwrap();
    let shape = graph.value(out).unwrap().shape();
    let projection = random_tensor(rng, shape, -1.0, 1.0);
    let (loss, r) = project(graph, out);
    let mut feeds = feeds;
    feeds.push((r, projection));

    let eval = |g: &mut Graph<f64>, s: &mut ParamStore<f64>, f: &[(NodeId, Tensor<f64>)]| {
        let mut s2 = s.clone();
        g.forward(&mut s2, f, opts).unwrap();
        g.value(loss).unwrap().data()[0]
    };

    let snapshot = store.clone();
    graph.forward(store, &feeds, opts).unwrap();
    let grads = graph.backward(loss, Tensor::scalar(1.0)).unwrap();
    *store = snapshot;

    let mut worst: f64 = 0.0;
    let input_ids: Vec<(usize, NodeId)> = feeds
        .iter()
        .enumerate()
        .filter(|(_, (id, _))| {
            matches!(&graph.nodes()[id.index()].kind, octflow::autodiff::OpKind::Input { requires_grad: true, .. })
        })
        .map(|(k, (id, _))| (k, *id))
        .collect();
    // forward resets gradients, so read them all before probing
    let analytic_inputs: Vec<Tensor<f64>> = input_ids
        .iter()
        .map(|&(k, id)| graph.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(feeds[k].1.shape())))
        .collect();
    for ((k, _), analytic) in input_ids.into_iter().zip(analytic_inputs) {
        let mut numeric = vec![0.0; analytic.len()];
        for (e, slot) in numeric.iter_mut().enumerate() {
            let mut f = feeds.clone();
            f[k].1.data_mut()[e] += STEP;
            let up = eval(graph, store, &f);
            f[k].1.data_mut()[e] -= 2.0 * STEP;
            let down = eval(graph, store, &f);
            *slot = (up - down) / (2.0 * STEP);
        }
        worst = worst.max(rel(analytic.data(), &numeric));
    }
    let names: Vec<String> = store
        .iter()
        .filter(|(_, k, _)| *k == ParamKind::Trainable)
        .map(|(n, _, _)| n.to_string())
        .collect();
    for name in names {
        let len = store.get(&name).unwrap().len();
        let analytic = grads.get(&name).cloned().unwrap_or_else(|| Tensor::zeros(store.get(&name).unwrap().shape()));
        let mut numeric = vec![0.0; len];
        for (e, slot) in numeric.iter_mut().enumerate() {
            let mut s = store.clone();
            s.get_mut(&name).unwrap().data_mut()[e] += STEP;
            let up = eval(graph, &mut s, &feeds);
            s.get_mut(&name).unwrap().data_mut()[e] -= 2.0 * STEP;
            let down = eval(graph, &mut s, &feeds);
            *slot = (up - down) / (2.0 * STEP);
        }
        worst = worst.max(rel(analytic.data(), &numeric));
    }
    worst
}

pub fn rel(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom < 1e-12 {
        diff
    } else {
        diff / denom
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
