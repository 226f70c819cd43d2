mod common;

use common::{max_relative_error, random_tensor, rng};
use octflow::autodiff::{ForwardOptions, Graph, ParamStore, Tensor};
use octflow::field::{DepthMap, FlowField, Grid, Planes};
use octflow::loss::{self, LossComponents, LossWeights};
use proptest::prelude::*;
use rand::Rng;

const TOL: f64 = 1e-3;

fn random_mask(r: &mut impl Rng, n: usize) -> Vec<bool> {
    let mut m: Vec<bool> = (0..n).map(|_| r.random_bool(0.8)).collect();
    m[0] = true;
    m
}

fn random_map(r: &mut impl Rng, w: usize, h: usize) -> DepthMap<f64> {
    let values = (0..w * h).map(|_| r.random_range(0.0..3.0)).collect();
    let valid = (0..w * h).map(|_| r.random_bool(0.9)).collect();
    DepthMap::new(w, h, values, valid).unwrap()
}

fn value(g: &Graph<f64>, id: octflow::autodiff::NodeId) -> f64 {
    g.value(id).unwrap().data()[0]
}

#[test]
fn gradcheck_epe() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let mut g = Graph::new();
        let pred = g.input("pred", true);
        let gt = g.input("gt", false);
        let wts = g.input("weights", false);
        let out = loss::epe_node(&mut g, pred, gt, wts);
        let masks = [random_mask(&mut r, 16), random_mask(&mut r, 16)];
        let refs: Vec<&[bool]> = masks.iter().map(|m| m.as_slice()).collect();
        let feeds = vec![
            (pred, random_tensor(&mut r, [2, 2, 4, 4], -2.0, 2.0)),
            (gt, random_tensor(&mut r, [2, 2, 4, 4], -2.0, 2.0)),
            (wts, loss::mask_weights(&refs, 4, 4).unwrap()),
        ];
        let e = max_relative_error(&mut g, &mut ParamStore::new(), out, feeds, ForwardOptions::eval(), &mut r);
        assert!(e < TOL, "seed {seed}: {e:e}");
    }
}

#[test]
fn gradcheck_census_reconstruction() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let mut g = Graph::new();
        let src = g.input("src", true);
        let flow = g.input("flow", true);
        let target = g.input("target", false);
        let wts = g.input("weights", false);
        let out = loss::reconstruction_node(&mut g, src, flow, target, wts, 1e-3);
        let mask = random_mask(&mut r, 16);
        let feeds = vec![
            (src, random_tensor(&mut r, [1, 8, 4, 4], 0.0, 1.0)),
            (flow, random_tensor(&mut r, [1, 2, 4, 4], -0.9, 0.9)),
            (target, random_tensor(&mut r, [1, 8, 4, 4], 0.0, 1.0)),
            (wts, loss::mask_weights(&[&mask], 4, 4).unwrap()),
        ];
        let e = max_relative_error(&mut g, &mut ParamStore::new(), out, feeds, ForwardOptions::eval(), &mut r);
        assert!(e < TOL, "seed {seed}: {e:e}");
    }
}

#[test]
fn gradcheck_depth_reconstruction() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let mut g = Graph::new();
        let zh = g.input("z_hat", true);
        let dz = g.input("dz", true);
        let zn = g.input("z_next", false);
        let wts = g.input("weights", false);
        let out = loss::depth_reconstruction_node(&mut g, zh, dz, zn, wts, 1e-3);
        let mask = random_mask(&mut r, 16);
        let feeds = vec![
            (zh, random_tensor(&mut r, [1, 1, 4, 4], -2.0, 2.0)),
            (dz, random_tensor(&mut r, [1, 1, 4, 4], -2.0, 2.0)),
            (zn, random_tensor(&mut r, [1, 1, 4, 4], -2.0, 2.0)),
            (wts, loss::mask_weights(&[&mask], 4, 4).unwrap()),
        ];
        let e = max_relative_error(&mut g, &mut ParamStore::new(), out, feeds, ForwardOptions::eval(), &mut r);
        assert!(e < TOL, "seed {seed}: {e:e}");
    }
}

#[test]
fn gradcheck_smoothness() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let mut g = Graph::new();
        let flow = g.input("flow", true);
        let wx = g.input("wx", false);
        let wy = g.input("wy", false);
        let out = loss::smoothness_node(&mut g, flow, wx, wy, 2);
        let z = random_map(&mut r, 4, 4);
        let (tx, ty) = loss::edge_weight_tensors(&[&z], 2).unwrap();
        let feeds = vec![(flow, random_tensor(&mut r, [1, 2, 4, 4], -2.0, 2.0)), (wx, tx), (wy, ty)];
        let e = max_relative_error(&mut g, &mut ParamStore::new(), out, feeds, ForwardOptions::eval(), &mut r);
        assert!(e < TOL, "seed {seed}: {e:e}");
    }
}

fn tensor_of_flow(f: &FlowField<f64>) -> Tensor<f64> {
    Tensor::new([1, f.channels(), f.height(), f.width()], f.data().to_vec()).unwrap()
}

#[test]
fn graph_terms_match_plain_functions() {
    let mut r = rng(42);
    let (w, h) = (6, 5);
    let pred = FlowField::new(w, h, 2, (0..2 * w * h).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap();
    let gt = FlowField::new(w, h, 2, (0..2 * w * h).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap();
    let z = random_map(&mut r, w, h);
    let mask = random_mask(&mut r, w * h);
    let src = Planes::new(w, h, 8, (0..8 * w * h).map(|_| r.random_range(0.0..1.0)).collect()).unwrap();
    let target = Planes::new(w, h, 8, (0..8 * w * h).map(|_| r.random_range(0.0..1.0)).collect()).unwrap();

    let mut g = Graph::new();
    let (p, t, m) = (g.input("pred", false), g.input("gt", false), g.input("mask", false));
    let (s, tg) = (g.input("src", false), g.input("target", false));
    let (wx, wy) = (g.input("wx", false), g.input("wy", false));
    let epe = loss::epe_node(&mut g, p, t, m);
    let rec = loss::reconstruction_node(&mut g, s, p, tg, m, 1e-3);
    let sm = loss::smoothness_node(&mut g, p, wx, wy, 2);
    let weights = LossWeights::default();
    let total = loss::stage_loss_node(&mut g, 2, Some(epe), Some(rec), Some(sm), &weights).unwrap();
    let (tx, ty) = loss::edge_weight_tensors(&[&z], 2).unwrap();
    g.forward(
        &mut ParamStore::new(),
        &[
            (p, tensor_of_flow(&pred)),
            (t, tensor_of_flow(&gt)),
            (m, loss::mask_weights(&[&mask], w, h).unwrap()),
            (s, Tensor::new([1, 8, h, w], src.data().to_vec()).unwrap()),
            (tg, Tensor::new([1, 8, h, w], target.data().to_vec()).unwrap()),
            (wx, tx),
            (wy, ty),
        ],
        ForwardOptions::eval(),
    )
    .unwrap();

    let plain_epe = loss::epe_loss(&pred, &gt, &mask).unwrap();
    let (warped, _) = octflow::warp::warp_planes(&src, &pred).unwrap();
    let plain_rec = loss::reconstruction_loss(&warped, &target, &mask, 1e-3).unwrap();
    let plain_sm = loss::smoothness_loss(&pred, &z).unwrap();
    assert!((value(&g, epe) - plain_epe).abs() < 1e-12);
    assert!((value(&g, rec) - plain_rec).abs() < 1e-12);
    assert!((value(&g, sm) - plain_sm).abs() < 1e-12);
    let c = LossComponents {
        epe: plain_epe,
        reconstruction: plain_rec,
        smoothness: plain_sm,
    };
    assert!((value(&g, total) - loss::stage_loss(2, &c, &weights).unwrap()).abs() < 1e-12);
}

#[test]
fn unsupervised_graph_needs_no_ground_truth() {
    let w = LossWeights {
        alpha: 0.0,
        ..Default::default()
    };
    let mut g = Graph::<f64>::new();
    let a = g.input("a", false);
    let b = g.input("b", false);
    let out = loss::stage_loss_node(&mut g, 0, None, Some(a), Some(b), &w).unwrap();
    g.forward(
        &mut ParamStore::new(),
        &[(a, Tensor::scalar(4.0)), (b, Tensor::scalar(1.0))],
        ForwardOptions::eval(),
    )
    .unwrap();
    assert_eq!(value(&g, out), 0.5 * 4.0 + 1.0);
    assert!(loss::stage_loss_node(&mut g, 0, None, Some(a), Some(b), &LossWeights::default()).is_err());
}

#[test]
fn depth_reconstruction_matches_graph() {
    let mut r = rng(8);
    let zh = random_map(&mut r, 4, 3);
    let zn = random_map(&mut r, 4, 3);
    let dz = Grid::from_fn(4, 3, |x, y| (x as f64 - y as f64) * 0.3).unwrap();
    let mask: Vec<bool> = (0..12).map(|i| zh.valid()[i] && zn.valid()[i]).collect();
    let plain = loss::depth_reconstruction_loss(&zh, &dz, &zn, &[true; 12], 1e-3).unwrap();
    let mut g = Graph::new();
    let (a, d, b, m) = (g.input("a", false), g.input("d", false), g.input("b", false), g.input("m", false));
    let out = loss::depth_reconstruction_node(&mut g, a, d, b, m, 1e-3);
    let t = |v: &[f64]| Tensor::new([1, 1, 3, 4], v.to_vec()).unwrap();
    g.forward(
        &mut ParamStore::new(),
        &[
            (a, t(zh.values())),
            (d, t(dz.data())),
            (b, t(zn.values())),
            (m, loss::mask_weights(&[&mask], 4, 3).unwrap()),
        ],
        ForwardOptions::eval(),
    )
    .unwrap();
    assert!((value(&g, out) - plain).abs() < 1e-12);
}

fn field(data: Vec<f64>) -> FlowField<f64> {
    FlowField::new(4, 4, 2, data).unwrap()
}

proptest! {
    #[test]
    fn epe_is_a_pseudometric(
        a in prop::collection::vec(-5.0f64..5.0, 32),
        b in prop::collection::vec(-5.0f64..5.0, 32),
        c in prop::collection::vec(-5.0f64..5.0, 32),
        mask in prop::collection::vec(any::<bool>(), 16),
    ) {
        prop_assume!(mask.iter().any(|&m| m));
        let (a, b, c) = (field(a), field(b), field(c));
        let d = |x: &FlowField<f64>, y: &FlowField<f64>| loss::epe_loss(x, y, &mask).unwrap();
        prop_assert_eq!(d(&a, &a), 0.0);
        prop_assert!((d(&a, &b) - d(&b, &a)).abs() < 1e-12);
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-12);
    }

    #[test]
    fn smoothness_is_positively_homogeneous(
        a in prop::collection::vec(-5.0f64..5.0, 32),
        k in 0.0f64..10.0,
    ) {
        let z = DepthMap::from_fn(4, 4, |x, y| (x * y) as f64 * 0.1).unwrap();
        let f = field(a);
        let scaled = f.zip_map(&f, |v, _| v * k).unwrap();
        let base = loss::smoothness_loss(&f, &z).unwrap();
        prop_assert!((loss::smoothness_loss(&scaled, &z).unwrap() - k * base).abs() < 1e-9 * (1.0 + k * base));
    }
}
