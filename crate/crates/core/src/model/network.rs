//! The two-stage network on a tape, and the inference entry points.
//!
//! Coordinates leaving this module are normalized: `0` and `1` are the
//! outer edges of the input image.

use crate::error::{Error, Result};
use crate::landmarks::{LandmarkLayout, LandmarkSet};
use crate::nn::{Graph, RoiBox};
use crate::tensor::{Real, Tensor, Var};

use super::config::ModelConfig;
use super::weights::ModelWeights;

pub struct Stage1Vars {
    /// `[N, L, H, H]`
    pub logits: Var,
    /// Output of the branch block, `[N, C, h, w]`.
    pub shared: Var,
    /// `[N, L, 2]`
    pub coarse: Var,
}

pub struct Stage2Vars {
    /// `[N, L, S, S]`
    pub logits: Var,
    /// Crop centers, `N * L` entries, sample-major.
    pub centers: Vec<[f64; 2]>,
    pub refined: Var,
}

pub struct ForwardVars {
    pub stage1: Stage1Vars,
    pub stage2: Option<Stage2Vars>,
    /// Final coordinates: refined when stage two runs, coarse otherwise.
    pub output: Var,
}

pub fn build_stage1<T: Real>(g: &mut Graph<T>, cfg: &ModelConfig, images: Var) -> Result<Stage1Vars> {
    let shape = g.tape.value(images).shape().to_vec();
    if shape.len() != 4 || shape[1] != cfg.in_channels || shape[2] != cfg.input_size || shape[3] != cfg.input_size {
        return Err(Error::shape(format!(
            "expected [N, {}, {s}, {s}] images, got {shape:?}",
            cfg.in_channels,
            s = cfg.input_size
        )));
    }
    let units = cfg.conv_units();
    let mut x = g.conv_unit("stem", images, &units[0].spec)?;
    let mut shared = x;
    for (i, block) in cfg.block_specs().iter().enumerate() {
        x = g.inverted_residual(&format!("block{i}"), x, block)?;
        if i + 1 == cfg.branch_after {
            shared = x;
        }
    }
    let head = units.iter().find(|u| u.name == "head").expect("head unit");
    let logits = g.conv_unit("head", x, &head.spec)?;
    let h = cfg.heatmap_size as f64;
    let coords = g.tape.soft_argmax(logits, cfg.heatmap_norm, false)?;
    let coarse = g.tape.affine(coords, 1.0 / h, 0.5 / h)?;
    Ok(Stage1Vars { logits, shared, coarse })
}

/// Box centers: coarse points pulled inside so every crop stays in frame.
fn clamp_bounds(cfg: &ModelConfig) -> (f64, f64) {
    let half = cfg.roi_box_extent / 2.0;
    (half, 1.0 - half)
}

/// `refined = clamp(coarse) + offset`, with the offset read from centered
/// crop heatmaps and scaled so the crop edge is half a box away.
pub fn decode_refined<T: Real>(g: &mut Graph<T>, cfg: &ModelConfig, coarse: Var, offset_logits: Var) -> Result<Var> {
    let (lo, hi) = clamp_bounds(cfg);
    let center = g.tape.clamp(coarse, lo, hi)?;
    let centered = g.tape.soft_argmax(offset_logits, cfg.heatmap_norm, true)?;
    let scale = cfg.roi_box_extent / (cfg.roi_out_size as f64 - 1.0);
    let offset = g.tape.affine(centered, scale, 0.0)?;
    g.tape.add(center, offset)
}

pub fn build_stage2<T: Real>(g: &mut Graph<T>, cfg: &ModelConfig, shared: Var, coarse: Var) -> Result<Stage2Vars> {
    let units = cfg.conv_units();
    let spec = |name: &str| units.iter().find(|u| u.name == name).expect("stage-2 unit").spec;
    let b0 = g.conv_unit("branch0", shared, &spec("branch0"))?;
    let feats = g.conv_unit("branch1", b0, &spec("branch1"))?;

    let (lo, hi) = clamp_bounds(cfg);
    let centers: Vec<[f64; 2]> = g
        .tape
        .value(coarse)
        .data()
        .chunks(2)
        .map(|c| [c[0].as_f64().clamp(lo, hi), c[1].as_f64().clamp(lo, hi)])
        .collect();
    // Cell-centered sampling over a box widened by S/(S-1) puts the outer
    // samples exactly on the extent's edges, where decoding places crop
    // pixels 0 and S-1.
    let s = cfg.roi_out_size as f64;
    let side = cfg.roi_box_extent * s / (s - 1.0);
    let boxes: Vec<RoiBox> = centers.iter().map(|c| RoiBox::centered(c[0], c[1], side)).collect();
    let crops = g.tape.roi_align(feats, &boxes, cfg.roi_out_size)?;
    let logits = g.conv_unit("predict", crops, &spec("predict"))?;
    let refined = decode_refined(g, cfg, coarse, logits)?;
    Ok(Stage2Vars {
        logits,
        centers,
        refined,
    })
}

pub fn build_forward<T: Real>(g: &mut Graph<T>, cfg: &ModelConfig, images: Var) -> Result<ForwardVars> {
    let stage1 = build_stage1(g, cfg, images)?;
    let stage2 = if cfg.two_stage {
        Some(build_stage2(g, cfg, stage1.shared, stage1.coarse)?)
    } else {
        None
    };
    let output = stage2.as_ref().map_or(stage1.coarse, |s| s.refined);
    Ok(ForwardVars { stage1, stage2, output })
}

fn to_sets<T: Real>(coords: &Tensor<T>) -> Vec<LandmarkSet> {
    let &[n, l, _] = coords.shape() else { unreachable!("coordinates are [N, L, 2]") };
    (0..n)
        .map(|b| {
            LandmarkSet::new(
                (0..l)
                    .map(|k| {
                        let at = (b * l + k) * 2;
                        [coords.data()[at].as_f64(), coords.data()[at + 1].as_f64()]
                    })
                    .collect(),
            )
        })
        .collect()
}

pub struct Stage1Output {
    /// `[L, H, H]` logits.
    pub heatmaps: Tensor<f32>,
    /// `[1, C, h, w]`
    pub shared_features: Tensor<f32>,
    pub coarse: LandmarkSet,
}

pub struct Stage2Output {
    /// `[L, S, S]` logits.
    pub offset_heatmaps: Tensor<f32>,
    pub refined: LandmarkSet,
}

fn single_image(cfg: &ModelConfig, image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = cfg.input_size;
    match *image.shape() {
        [c, h, w] if c == cfg.in_channels && h == s && w == s => image.clone().reshape([1, c, h, w]),
        [1, c, h, w] if c == cfg.in_channels && h == s && w == s => Ok(image.clone()),
        _ => Err(Error::shape(format!(
            "expected one [{}, {s}, {s}] image, got {:?}",
            cfg.in_channels,
            image.shape()
        ))),
    }
}

impl ModelWeights {
    /// Final landmarks for a `[N, C, S, S]` batch with values in `[0, 1]`.
    pub fn predict_batch(&self, images: &Tensor<f32>) -> Result<Vec<LandmarkSet>> {
        let mut g = Graph::new(&self.params, false);
        let x = g.input(images.clone());
        let out = build_forward(&mut g, &self.config, x)?;
        Ok(to_sets(g.tape.value(out.output)))
    }

    pub fn predict(&self, image: &Tensor<f32>) -> Result<LandmarkSet> {
        let x = single_image(&self.config, image)?;
        Ok(self.predict_batch(&x)?.remove(0))
    }

    pub fn forward_stage1(&self, image: &Tensor<f32>) -> Result<Stage1Output> {
        let x = single_image(&self.config, image)?;
        let mut g = Graph::new(&self.params, false);
        let xv = g.input(x);
        let s1 = build_stage1(&mut g, &self.config, xv)?;
        let logits = g.tape.value(s1.logits);
        let h = self.config.heatmap_size;
        Ok(Stage1Output {
            heatmaps: logits.clone().reshape([self.config.num_landmarks(), h, h])?,
            shared_features: g.tape.value(s1.shared).clone(),
            coarse: to_sets(g.tape.value(s1.coarse)).remove(0),
        })
    }

    pub fn forward_stage2(&self, stage1: &Stage1Output) -> Result<Stage2Output> {
        if !self.config.two_stage {
            return Err(Error::Config("model has no second stage".into()));
        }
        let mut g = Graph::new(&self.params, false);
        let shared = g.input(stage1.shared_features.clone());
        let flat: Vec<f32> = stage1.coarse.points.iter().flat_map(|p| [p[0] as f32, p[1] as f32]).collect();
        let coarse = g.input(Tensor::new([1, stage1.coarse.len(), 2], flat)?);
        let s2 = build_stage2(&mut g, &self.config, shared, coarse)?;
        let s = self.config.roi_out_size;
        Ok(Stage2Output {
            offset_heatmaps: g.tape.value(s2.logits).clone().reshape([self.config.num_landmarks(), s, s])?,
            refined: to_sets(g.tape.value(s2.refined)).remove(0),
        })
    }
}

/// Mirror a `[C, H, W]` image left to right.
pub fn flip_image(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::shape("flip_image expects [C, H, W]"));
    };
    Ok(Tensor::from_fn([c, h, w], |k| {
        let (row, col) = (k / w, k % w);
        image.data()[row * w + (w - 1 - col)]
    }))
}

/// Mirror normalized landmarks and apply the layout's index remap.
pub fn flip_normalized(set: &LandmarkSet, layout: &LandmarkLayout) -> LandmarkSet {
    // The pixel flip x -> W-1-x becomes u -> 1-u, i.e. "width" 2.
    layout.flip(set, 2.0)
}

/// Mean distance (normalized units) between the prediction for `image` and
/// the un-mirrored prediction for its mirror image.
pub fn flip_consistency(weights: &ModelWeights, image: &Tensor<f32>) -> Result<f64> {
    let layout = weights.config.layout.layout();
    let direct = weights.predict(image)?;
    let mirrored = weights.predict(&flip_image(image)?)?;
    let back = flip_normalized(&mirrored, &layout);
    let n = direct.len().max(1) as f64;
    Ok(direct
        .points
        .iter()
        .zip(&back.points)
        .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
        .sum::<f64>()
        / n)
}
