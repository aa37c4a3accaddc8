//! Backprop against central finite differences in f64. Each case returns
//! the worst norm-wise relative error over its seeds.

use rand::Rng;
use tinyalign::heatmap::{gt_heatmap_batch, HeatmapNorm};
use tinyalign::landmarks::LandmarkSet;
use tinyalign::model::{build_stage1, decode_refined, ModelConfig, TrainableModel};
use tinyalign::nn::{Activation, ConvSpec, Graph, InvertedResidualSpec, RoiBox};
use tinyalign::tensor::{ParamSet, Var};
use tinyalign::train::{build_loss, offset_target, TrainConfig};
use tinyalign::Tensor;

use super::*;

fn check_conv(spec: ConvSpec, x_shape: [usize; 4]) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let mut inputs = vec![randn(&x_shape, 1.0, &mut r), randn(&spec.weight_shape(), 0.5, &mut r)];
        if spec.bias {
            inputs.push(randn(&[spec.out_channels], 0.5, &mut r));
        }
        let e = grad_check(&inputs, 40, seed, |t, v| {
            let y = t.conv2d(v[0], v[1], v.get(2).copied(), &spec)?;
            project(t, y, &mut rng(seed + 1000))
        });
        worst = worst.max(e);
    }
    worst
}

pub fn conv_standard() -> f64 {
    check_conv(ConvSpec::new(3, 4, 3), [2, 3, 5, 5])
}

pub fn conv_strided_without_bias() -> f64 {
    check_conv(ConvSpec::new(3, 4, 3).with_stride(2).with_bias(false), [2, 3, 7, 6])
}

pub fn conv_grouped() -> f64 {
    // the second has one group per landmark, as in the refinement head
    check_conv(ConvSpec::new(4, 6, 3).with_groups(2), [1, 4, 5, 5]).max(check_conv(ConvSpec::new(12, 3, 3).with_groups(3), [2, 12, 4, 4]))
}

pub fn conv_depthwise() -> f64 {
    check_conv(ConvSpec::depthwise(4, 3), [2, 4, 5, 5]).max(check_conv(ConvSpec::depthwise(4, 3).with_stride(2), [2, 4, 6, 6]))
}

pub fn conv_pointwise() -> f64 {
    check_conv(ConvSpec::new(5, 3, 1), [2, 5, 4, 4])
}

pub fn batch_norm_relu6() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let x = randn(&[3, 4, 3, 3], 3.0, &mut r);
        let gamma = Tensor::from_fn([4], |_| r.gen_range(0.5..3.0));
        let beta = Tensor::from_fn([4], |_| r.gen_range(-1.0..4.0));
        for act in [Activation::None, Activation::Relu6] {
            let e = grad_check(&[x.clone(), gamma.clone(), beta.clone()], 40, seed, |t, v| {
                let (y, _) = t.batch_norm_act(v[0], v[1], v[2], act)?;
                project(t, y, &mut rng(seed + 1000))
            });
            worst = worst.max(e);
        }
    }
    worst
}

fn block_params(spec: &InvertedResidualSpec, x_shape: [usize; 4], seed: u64) -> ParamSet<f64> {
    let mut r = rng(seed);
    let mut p = ParamSet::new();
    p.insert("x", randn(&x_shape, 1.0, &mut r)).unwrap();
    for (role, conv) in spec.convs() {
        p.insert(format!("b.{role}.weight"), randn(&conv.weight_shape(), 0.5, &mut r))
            .unwrap();
        let c = conv.out_channels;
        p.insert(format!("b.{role}.bn.gamma"), Tensor::from_fn([c], |_| r.gen_range(0.5..2.0)))
            .unwrap();
        p.insert(format!("b.{role}.bn.beta"), randn(&[c], 1.0, &mut r)).unwrap();
    }
    p
}

pub fn inverted_residual_block() -> f64 {
    let cases = [
        (InvertedResidualSpec::new(4, 4, 3, 1), [2, 4, 5, 5]),
        (InvertedResidualSpec::new(4, 6, 2, 2), [2, 4, 6, 6]),
    ];
    let mut worst: f64 = 0.0;
    for (spec, shape) in cases {
        for seed in 0..SEEDS {
            let params = block_params(&spec, shape, seed);
            let names: Vec<String> = params.iter().map(|p| p.name.clone()).collect();
            let names: Vec<&str> = names.iter().map(String::as_str).collect();
            let e = param_grad_check(&params, &names, 20, seed, |p| {
                let mut g = Graph::new(p, true);
                let x = g.param("x").unwrap();
                let y = g.inverted_residual("b", x, &spec).unwrap();
                let loss = project(&mut g.tape, y, &mut rng(seed + 1000)).unwrap();
                (g.tape.value(loss).data()[0], g.param_grads(loss).unwrap())
            });
            worst = worst.max(e);
        }
    }
    worst
}

pub fn roi_align_features() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let feats = randn(&[2, 3, 6, 6], 1.0, &mut r);
        // two crops per sample, some reaching past the border
        let boxes: Vec<RoiBox> = (0..4)
            .map(|_| RoiBox::centered(r.gen_range(0.1..0.9), r.gen_range(0.1..0.9), r.gen_range(0.2..0.6)))
            .collect();
        let e = grad_check(&[feats], 200, seed, |t, v| {
            let y = t.roi_align(v[0], &boxes, 4)?;
            project(t, y, &mut rng(seed + 1000))
        });
        worst = worst.max(e);
    }
    worst
}

pub fn soft_argmax_both_normalizations() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let logits = randn(&[2, 3, 5, 4], 2.0, &mut rng(seed));
        for norm in [HeatmapNorm::Sigmoid, HeatmapNorm::Softmax] {
            for centered in [false, true] {
                let e = grad_check(std::slice::from_ref(&logits), 60, seed, |t, v| {
                    let y = t.soft_argmax(v[0], norm, centered)?;
                    project(t, y, &mut rng(seed + 1000))
                });
                worst = worst.max(e);
            }
        }
    }
    worst
}

pub fn heatmap_loss_logits() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let logits = randn(&[2, 3, 6, 6], 2.0, &mut r);
        let centers: Vec<[f64; 2]> = (0..6).map(|_| [r.gen_range(-0.5..5.5), r.gen_range(-0.5..5.5)]).collect();
        let target: Tensor<f64> = gt_heatmap_batch(&centers, 2, 6, 1.5).unwrap();
        let coords = Tensor::new([2, 3, 2], centers.iter().flatten().copied().collect()).unwrap();
        let e = grad_check(&[logits], 80, seed, |t, v| t.heatmap_loss(v[0], target.clone(), coords.clone()));
        worst = worst.max(e);
    }
    worst
}

pub fn l2_coordinate_loss() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let pred = randn(&[2, 3, 2], 1.0, &mut r);
        let target = randn(&[2, 3, 2], 1.0, &mut r);
        let e = grad_check(&[pred], 12, seed, |t, v| t.l2_coord_loss(v[0], target.clone()));
        worst = worst.max(e);
    }
    worst
}

/// Random training-form parameters with heads large enough that heatmaps
/// are far from flat.
pub fn tiny_model(cfg: &ModelConfig, seed: u64) -> ParamSet<f64> {
    let mut p = TrainableModel::init(cfg.clone(), seed).unwrap().params.cast::<f64>();
    let mut r = rng(seed + 7);
    for name in ["head.weight", "predict.weight"] {
        let shape = p.value(name).unwrap().shape().to_vec();
        p.get_mut(name).unwrap().value = randn(&shape, 0.3, &mut r);
    }
    for q in p.iter_mut().filter(|q| q.name.ends_with(".bn.beta")) {
        q.value = randn(q.value.shape(), 0.5, &mut r);
    }
    p
}

pub fn tiny_batch(cfg: &ModelConfig, seed: u64) -> (Tensor<f64>, Vec<LandmarkSet>) {
    let mut r = rng(seed + 11);
    let s = cfg.input_size;
    let images = Tensor::from_fn([2, 3, s, s], |_| r.gen_range(0.0..1.0));
    let l = cfg.num_landmarks();
    let targets = (0..2)
        .map(|_| LandmarkSet::new((0..l).map(|_| [r.gen_range(0.1..0.9), r.gen_range(0.1..0.9)]).collect()))
        .collect();
    (images, targets)
}

/// The whole objective, differentiated with respect to the refinement
/// branch. These parameters never move the crop boxes.
pub fn full_loss_refinement_parameters() -> f64 {
    let cfg = tiny_config();
    let train = TrainConfig::default();
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let params = tiny_model(&cfg, seed);
        let (images, targets) = tiny_batch(&cfg, seed);
        let names = ["branch0.weight", "branch1.bn.gamma", "branch1.bn.beta", "predict.weight", "predict.bias"];
        let e = param_grad_check(&params, &names, 20, seed, |p| {
            let mut g = Graph::new(p, true);
            let x = g.input(images.clone());
            let lv = build_loss(&mut g, &train, &cfg, x, &targets).unwrap();
            (g.tape.value(lv.total).data()[0], g.param_grads(lv.total).unwrap())
        });
        worst = worst.max(e);
    }
    worst
}

/// Stage-one parameters receive gradient through the shared features as
/// well as through their own heatmaps. Finite differences hold the crop
/// boxes where the unperturbed network put them, matching the constant-box
/// backward pass.
pub fn full_loss_reaches_stage_one_through_shared_features() -> f64 {
    let cfg = tiny_config();
    let train = TrainConfig::default();
    let l = cfg.num_landmarks();
    let units = cfg.conv_units();
    let spec = |name: &str| units.iter().find(|u| u.name == name).unwrap().spec;
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let params = tiny_model(&cfg, seed);
        let (images, targets) = tiny_batch(&cfg, seed);
        let gt: Vec<[f64; 2]> = targets.iter().flat_map(|t| t.points.clone()).collect();

        // reference crop centers
        let centers = {
            let mut g = Graph::new(&params, false);
            let x = g.input(images.clone());
            let lv = build_loss(&mut g, &train, &cfg, x, &targets).unwrap();
            lv.forward.stage2.unwrap().centers
        };
        let fixed_loss = |p: &ParamSet<f64>| -> f64 {
            let mut g = Graph::new(p, false);
            let x = g.input(images.clone());
            let s1 = build_stage1(&mut g, &cfg, x).unwrap();
            let h = cfg.heatmap_size as f64;
            let hm_centers: Vec<[f64; 2]> = gt.iter().map(|p| [p[0] * h - 0.5, p[1] * h - 0.5]).collect();
            let target = gt_heatmap_batch(&hm_centers, 2, cfg.heatmap_size, train.sigma).unwrap();
            let coords = coords_tensor(&hm_centers, l);
            let hm1 = g.tape.heatmap_loss(s1.logits, target, coords).unwrap();

            let b0 = g.conv_unit("branch0", s1.shared, &spec("branch0")).unwrap();
            let feats = g.conv_unit("branch1", b0, &spec("branch1")).unwrap();
            let s = cfg.roi_out_size;
            let side = cfg.roi_box_extent * s as f64 / (s as f64 - 1.0);
            let boxes: Vec<RoiBox> = centers.iter().map(|c| RoiBox::centered(c[0], c[1], side)).collect();
            let crops = g.tape.roi_align(feats, &boxes, s).unwrap();
            let logits = g.conv_unit("predict", crops, &spec("predict")).unwrap();
            let e = cfg.roi_box_extent;
            let off: Vec<[f64; 2]> = gt
                .iter()
                .zip(&centers)
                .map(|(p, c)| [offset_target(p[0], c[0], e, s), offset_target(p[1], c[1], e, s)])
                .collect();
            let target = gt_heatmap_batch(&off, 2, s, train.sigma_offset).unwrap();
            let hm2 = g.tape.heatmap_loss(logits, target, coords_tensor(&off, l)).unwrap();
            let refined = decode_refined(&mut g, &cfg, s1.coarse, logits).unwrap();
            let l2 = g.tape.l2_coord_loss(refined, coords_tensor(&gt, l)).unwrap();
            let v = |var: Var| g.tape.value(var).data()[0];
            (v(hm1) + v(hm2)) / l as f64 + train.lambda * v(l2)
        };
        let names = ["stem.weight", "block0.expand.weight", "block1.dw.weight", "block3.project.bn.gamma"];
        let e = param_grad_check(&params, &names, 15, seed, |p| {
            let mut g = Graph::new(p, true);
            let x = g.input(images.clone());
            let lv = build_loss(&mut g, &train, &cfg, x, &targets).unwrap();
            let analytic_total = g.tape.value(lv.total).data()[0];
            let grads = g.param_grads(lv.total).unwrap();
            // the composition above must be the same objective
            if std::ptr::eq(p, &params) {
                let manual = fixed_loss(p);
                assert!((manual - analytic_total).abs() <= 1e-9 * analytic_total.abs().max(1.0));
            }
            (fixed_loss(p), grads)
        });
        worst = worst.max(e);
    }
    worst
}

fn coords_tensor(points: &[[f64; 2]], l: usize) -> Tensor<f64> {
    Tensor::new([points.len() / l, l, 2], points.iter().flatten().copied().collect()).unwrap()
}

pub const CASES: [(&str, fn() -> f64); 13] = [
    ("conv_standard", conv_standard),
    ("conv_strided_without_bias", conv_strided_without_bias),
    ("conv_grouped", conv_grouped),
    ("conv_depthwise", conv_depthwise),
    ("conv_pointwise", conv_pointwise),
    ("batch_norm_relu6", batch_norm_relu6),
    ("inverted_residual_block", inverted_residual_block),
    ("roi_align_features", roi_align_features),
    ("soft_argmax_both_normalizations", soft_argmax_both_normalizations),
    ("heatmap_loss_logits", heatmap_loss_logits),
    ("l2_coordinate_loss", l2_coordinate_loss),
    ("full_loss_refinement_parameters", full_loss_refinement_parameters),
    ("full_loss_reaches_stage_one_through_shared_features", full_loss_reaches_stage_one_through_shared_features),
];
