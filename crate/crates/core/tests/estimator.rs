use octflow::dataset::{generate_base_map, synthesize_pair, AffineParams, BaseMapParams};
use octflow::estimator::*;
use octflow::field::{interior_mask, DepthMap, FlowField, Grid, Volume};
use octflow::projection::argmax_projection;

const MARGIN: usize = 8;

fn base(side: usize, seed: u64) -> DepthMap<f64> {
    generate_base_map(side, side, seed, &BaseMapParams::default()).unwrap()
}

/// Mean lateral endpoint error on interior pixels valid in `valid`.
fn interior_epe(pred: &FlowField<f64>, gt: &FlowField<f64>, valid: &[bool]) -> f64 {
    let (w, h) = (gt.width(), gt.height());
    let interior = interior_mask(w, h, MARGIN);
    let (mut sum, mut n) = (0.0, 0);
    for i in 0..w * h {
        if interior[i] && valid[i] {
            let dx = pred.channel(0)[i] - gt.channel(0)[i];
            let dy = pred.channel(1)[i] - gt.channel(1)[i];
            sum += (dx * dx + dy * dy).sqrt();
            n += 1;
        }
    }
    assert!(n > 0);
    sum / n as f64
}

fn interior_mean(values: &[f64], w: usize, h: usize, valid: &[bool]) -> f64 {
    let interior = interior_mask(w, h, MARGIN);
    let picked: Vec<f64> = (0..w * h).filter(|&i| interior[i] && valid[i]).map(|i| values[i]).collect();
    picked.iter().sum::<f64>() / picked.len() as f64
}

fn shifted_x(a: &DepthMap<f64>, dx: usize) -> DepthMap<f64> {
    let (w, h) = (a.width(), a.height());
    let values = (0..w * h).map(|i| if i % w >= dx { a.values()[i - dx] } else { 0.0 }).collect();
    let valid = (0..w * h).map(|i| i % w >= dx).collect();
    DepthMap::new(w, h, values, valid).unwrap()
}

fn classical(levels: usize) -> PipelineModel<f64> {
    PipelineModel::classical(levels, ClassicalParams::default()).unwrap()
}

#[test]
fn stage_on_identical_inputs_is_zero() {
    let a = base(64, 1);
    let zero = FlowField::zeros(64, 64, 2).unwrap();
    let r = classical_stage_estimate(&a, &a, &zero, &ClassicalParams::default()).unwrap();
    assert!(r.residual.data().iter().all(|&v| v == 0.0));
}

#[test]
fn stage_recovers_integer_shift() {
    let a = base(64, 2);
    let b = shifted_x(&a, 2);
    let zero = FlowField::zeros(64, 64, 2).unwrap();
    let r = classical_stage_estimate(&a, &b, &zero, &ClassicalParams::default()).unwrap();
    let valid = b.valid().to_vec();
    let mx = interior_mean(r.residual.channel(0), 64, 64, &valid);
    let my = interior_mean(r.residual.channel(1), 64, 64, &valid);
    assert!((mx - 2.0).abs() < 0.25 && my.abs() < 0.25, "mean residual ({mx}, {my})");
}

#[test]
fn stage_keeps_a_correct_prior() {
    let a = base(64, 3);
    let b = shifted_x(&a, 2);
    let prior = FlowField::constant(64, 64, &[2.0, 0.0]).unwrap();
    let r = classical_stage_estimate(&a, &b, &prior, &ClassicalParams::default()).unwrap();
    let mean = r.residual.mean_magnitude();
    assert!(mean < 0.1, "mean residual magnitude {mean}");
}

#[test]
fn stage_rejects_mismatched_inputs() {
    let a = base(32, 4);
    let b = base(64, 4);
    let zero = FlowField::zeros(32, 32, 2).unwrap();
    assert!(classical_stage_estimate(&a, &b, &zero, &ClassicalParams::default()).is_err());
    let wrong = FlowField::zeros(16, 16, 2).unwrap();
    assert!(classical_stage_estimate(&a, &a, &wrong, &ClassicalParams::default()).is_err());
}

#[test]
fn lateral_flow_of_identical_pair_is_near_zero() {
    let a = base(128, 5);
    let f = run_lateral(&classical(4), &a, &a).unwrap().flow;
    assert!(f.mean_magnitude() < 0.1);
}

#[test]
fn lateral_flow_recovers_translation() {
    let a = base(128, 6);
    let params = AffineParams {
        tx: 12.0,
        ty: -8.0,
        ..Default::default()
    };
    let pair = synthesize_pair(&a, &params, 0.0, 0).unwrap();
    let f = run_lateral(&classical(4), &pair.first, &pair.second).unwrap().flow;
    let epe = interior_epe(&f, &pair.flow, pair.second.valid());
    assert!(epe <= 1.0, "interior EPE {epe}");
}

#[test]
fn depth_offset_leaves_lateral_flow_near_zero() {
    let a = base(128, 7);
    let b = a.offset(25.0);
    let f = run_lateral(&classical(4), &a, &b).unwrap().flow;
    assert!(f.mean_magnitude() < 0.2);
}

#[test]
fn residual_fold_reproduces_the_flow() {
    let a = base(64, 8);
    let params = AffineParams {
        tx: 3.5,
        ty: 1.25,
        omega: 0.03,
        ..Default::default()
    };
    let pair = synthesize_pair(&a, &params, 0.0, 0).unwrap();
    let trace = run_lateral(&classical(3), &pair.first, &pair.second).unwrap();
    assert_eq!(trace.residuals.len(), 3);
    assert_eq!(fold_residuals(&trace.residuals).unwrap(), trace.flow);
}

#[test]
fn common_depth_offset_gives_identical_lateral_flow() {
    // integer maps, as produced by arg-MIP projection
    let a = base(64, 9).map_values(f64::round);
    let params = AffineParams {
        tx: 2.0,
        ty: -3.0,
        omega: 0.02,
        ..Default::default()
    };
    let b = synthesize_pair(&a, &params, 0.0, 0).unwrap().second.map_values(f64::round);
    let model = classical(3);
    let f = run_lateral(&model, &a, &b).unwrap().flow;
    let g = run_lateral(&model, &a.offset(37.0), &b.offset(37.0)).unwrap().flow;
    assert_eq!(f, g);
}

#[test]
fn depth_stages_on_offsets() {
    let a = base(64, 10);
    let model = classical(3);
    let same = run_depth(&model, &a, &a).unwrap();
    assert!(same.data().iter().all(|&v| v == 0.0));
    let up = run_depth(&model, &a, &a.offset(5.0)).unwrap();
    assert!(up.data().iter().all(|&v| (v - 5.0).abs() < 1e-9));
    assert!(run_depth(&model, &a, &base(32, 10)).is_err());
}

#[test]
fn depth_residual_of_offset_with_prior() {
    let a = base(32, 11);
    let prior = Grid::filled(32, 32, 2.0).unwrap();
    let r = depth_residual(&a, &a.offset(5.0), &prior, 2).unwrap();
    assert!(r.data().iter().all(|&v| (v - 3.0).abs() < 1e-9));
}

#[test]
fn pipeline_recovers_rigid_depth_translation() {
    let params = AffineParams {
        tx: 4.0,
        ty: -2.5,
        tz: 3.2,
        omega: 0.0,
    };
    let model = classical(4);
    let seeds = [20, 21, 22, 23];
    let mut total = 0.0;
    for seed in seeds {
        let pair = synthesize_pair(&base(128, seed), &params, 0.0, 0).unwrap();
        let out = run_pipeline(
            &model,
            FramePair::DepthMaps {
                first: &pair.first,
                second: &pair.second,
            },
        )
        .unwrap();
        let err: Vec<f64> = out.flow.channel(2).iter().map(|&v| (v - 3.2).abs()).collect();
        total += interior_mean(&err, 128, 128, &out.valid);
    }
    let mean = total / seeds.len() as f64;
    assert!(mean < 0.1, "mean |dz - 3.2| {mean}");
}

#[test]
fn pipeline_on_identical_inputs_is_near_zero() {
    let a = base(64, 13);
    let out = run_pipeline(
        &classical(3),
        FramePair::DepthMaps {
            first: &a,
            second: &a,
        },
    )
    .unwrap();
    assert_eq!(out.flow.channels(), 3);
    assert!(out.flow.mean_magnitude() < 0.1);
}

fn surface_volume(z: &DepthMap<f64>, depth: usize) -> Volume<f64> {
    let w = z.width();
    Volume::from_fn(z.width(), z.height(), depth, |x, y, k| {
        let d = z.values()[y * w + x].round() as usize;
        if k == d {
            1.0
        } else {
            0.1
        }
    })
    .unwrap()
}

#[test]
fn volume_and_depth_paths_agree() {
    let a = base(32, 14).map_values(|v| (v / 8.0).round());
    let params = AffineParams {
        tx: 1.0,
        ty: 2.0,
        ..Default::default()
    };
    let b = synthesize_pair(&a, &params, 0.0, 0).unwrap().second.map_values(f64::round);
    let b = DepthMap::from_values(32, 32, b.values().to_vec()).unwrap();
    let (va, vb) = (surface_volume(&a, 64), surface_volume(&b, 64));
    let model = classical(2);
    let from_volumes = run_pipeline(
        &model,
        FramePair::Volumes {
            first: &va,
            second: &vb,
            min_intensity: 0.5,
        },
    )
    .unwrap();
    let (za, zb) = (argmax_projection(&va, 0.5).unwrap(), argmax_projection(&vb, 0.5).unwrap());
    let from_maps = run_pipeline(
        &model,
        FramePair::DepthMaps {
            first: &za,
            second: &zb,
        },
    )
    .unwrap();
    assert_eq!(from_volumes.flow, from_maps.flow);
    assert_eq!(from_volumes.valid, from_maps.valid);
}

fn small_conv() -> ConvConfig {
    ConvConfig {
        widths: [4, 8, 8],
        blocks: 1,
        ..Default::default()
    }
}

#[test]
fn conv_inference_is_deterministic_and_shaped() {
    let model = PipelineModel::<f64>::convolutional(2, small_conv(), 3).unwrap();
    let a = base(32, 15);
    let b = a.offset(1.0);
    let pair = FramePair::DepthMaps {
        first: &a,
        second: &b,
    };
    let x = run_pipeline(&model, pair).unwrap();
    let y = run_pipeline(&model, pair).unwrap();
    assert_eq!(x.flow, y.flow);
    assert_eq!((x.flow.width(), x.flow.height(), x.flow.channels()), (32, 32, 3));
}

#[test]
fn conv_stage_with_zero_parameters_outputs_zero() {
    let mut stage = ConvStage::<f64>::new(Network::Lateral, small_conv(), 0, 1).unwrap();
    let names: Vec<String> = stage.store.names().map(str::to_owned).collect();
    for n in names {
        let t = stage.store.get_mut(&n).unwrap();
        *t = t.map(|_| 0.0);
    }
    let a = base(16, 16);
    let prior = FlowField::constant(16, 16, &[0.5, -0.5]).unwrap();
    let r = stage.estimate_lateral(&a, &a.offset(3.0), &prior).unwrap();
    assert_eq!((r.width(), r.height(), r.channels()), (16, 16, 2));
    assert!(r.data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_stage_rejects_sizes_not_divisible_by_eight() {
    let stage = ConvStage::<f64>::new(Network::Depth, small_conv(), 0, 1).unwrap();
    let a = base(12, 1);
    let prior = Grid::filled(12, 12, 0.0).unwrap();
    assert!(matches!(
        stage.estimate_depth(&a, &a, &prior),
        Err(octflow::Error::Graph { .. })
    ));
}

#[test]
fn input_channel_counts() {
    assert_eq!(Network::Lateral.in_channels(), 18);
    assert_eq!(Network::Lateral.out_channels(), 2);
    assert_eq!(Network::Depth.in_channels(), 3);
    assert_eq!(Network::Depth.out_channels(), 1);
}

#[test]
fn model_roundtrips_through_a_directory() {
    let dir = tempfile::tempdir().unwrap();
    let model = PipelineModel::<f64>::convolutional(2, small_conv(), 9).unwrap();
    model.save(dir.path()).unwrap();
    let loaded = PipelineModel::<f64>::load(dir.path()).unwrap();
    assert_eq!(loaded.manifest(), model.manifest());
    let a = base(32, 17);
    let b = a.offset(2.0);
    let pair = FramePair::DepthMaps {
        first: &a,
        second: &b,
    };
    assert_eq!(
        run_pipeline(&model, pair).unwrap().flow,
        run_pipeline(&loaded, pair).unwrap().flow
    );

    let cdir = tempfile::tempdir().unwrap();
    let c = classical(3);
    c.save(cdir.path()).unwrap();
    let back = PipelineModel::<f64>::load(cdir.path()).unwrap();
    assert_eq!(back.manifest(), c.manifest());
}

#[test]
fn model_validation() {
    assert!(PipelineModel::<f64>::classical(0, ClassicalParams::default()).is_err());
    let bad = ClassicalParams {
        iterations: 0,
        ..Default::default()
    };
    assert!(PipelineModel::<f64>::classical(2, bad).is_err());
    let mut mixed = classical(2);
    mixed.depth.pop();
    assert!(mixed.validate().is_err());
}
