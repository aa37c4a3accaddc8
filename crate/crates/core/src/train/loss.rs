//! The training objective on a tape.

use crate::error::{Error, Result};
use crate::heatmap::gt_heatmap_batch;
use crate::landmarks::LandmarkSet;
use crate::model::{build_forward, ForwardVars, ModelConfig};
use crate::nn::Graph;
use crate::tensor::{Real, Tensor, Var};

use super::config::TrainConfig;

/// Loss nodes of one forward pass. Absent terms are `None`.
pub struct LossVars {
    pub total: Var,
    pub heatmap: Option<Var>,
    pub offset: Option<Var>,
    pub coord: Option<Var>,
    pub forward: ForwardVars,
}

/// Crop-pixel position of a normalized point inside the refinement crop
/// centered at `center`.
pub fn offset_target(gt: f64, center: f64, extent: f64, roi_size: usize) -> f64 {
    let span = roi_size as f64 - 1.0;
    span / 2.0 + (gt - center) / extent * span
}

fn coords_tensor<T: Real>(points: impl Iterator<Item = [f64; 2]>, n: usize, l: usize) -> Result<Tensor<T>> {
    let data: Vec<T> = points.flat_map(|p| [T::of(p[0]), T::of(p[1])]).collect();
    Tensor::new([n, l, 2], data)
}

/// Build the preset's objective for a batch. `targets` are normalized
/// ground-truth landmarks, one set per image.
///
/// Heatmap terms are averaged over landmarks so their scale does not grow
/// with the layout; the coordinate term is a mean over points.
pub fn build_loss<T: Real>(
    g: &mut Graph<T>,
    train: &TrainConfig,
    model: &ModelConfig,
    images: Var,
    targets: &[LandmarkSet],
) -> Result<LossVars> {
    let n = targets.len();
    let l = model.num_landmarks();
    if g.tape.value(images).shape().first() != Some(&n) {
        return Err(Error::shape("one target set per image is required"));
    }
    if let Some(t) = targets.iter().find(|t| t.len() != l) {
        return Err(Error::Data(format!("target has {} landmarks, model expects {l}", t.len())));
    }
    let forward = build_forward(g, model, images)?;
    let gt = || targets.iter().flat_map(|t| t.points.iter().copied());
    let per_landmark = 1.0 / l as f64;

    let mut terms = Vec::new();
    let (mut heatmap, mut offset, mut coord) = (None, None, None);
    if train.preset.heatmap_loss() {
        let h = model.heatmap_size;
        let centers: Vec<[f64; 2]> = gt()
            .map(|p| [p[0] * h as f64 - 0.5, p[1] * h as f64 - 0.5])
            .collect();
        let target = gt_heatmap_batch(&centers, n, h, train.sigma)?;
        let coords = coords_tensor(centers.into_iter(), n, l)?;
        let raw = g.tape.heatmap_loss(forward.stage1.logits, target, coords)?;
        let v = g.tape.affine(raw, per_landmark, 0.0)?;
        heatmap = Some(v);
        terms.push(v);

        if let Some(s2) = &forward.stage2 {
            let s = model.roi_out_size;
            let e = model.roi_box_extent;
            let centers: Vec<[f64; 2]> = gt()
                .zip(&s2.centers)
                .map(|(p, c)| [offset_target(p[0], c[0], e, s), offset_target(p[1], c[1], e, s)])
                .collect();
            let target = gt_heatmap_batch(&centers, n, s, train.sigma_offset)?;
            let coords = coords_tensor(centers.into_iter(), n, l)?;
            let raw = g.tape.heatmap_loss(s2.logits, target, coords)?;
            let v = g.tape.affine(raw, per_landmark, 0.0)?;
            offset = Some(v);
            terms.push(v);
        }
    }
    let lambda = train.effective_lambda();
    if lambda > 0.0 {
        let raw = g.tape.l2_coord_loss(forward.output, coords_tensor(gt(), n, l)?)?;
        let v = g.tape.affine(raw, lambda, 0.0)?;
        coord = Some(v);
        terms.push(v);
    }
    let mut total = *terms
        .first()
        .ok_or_else(|| Error::Config(format!("preset {} with lambda 0 has no loss", train.preset)))?;
    for &t in &terms[1..] {
        total = g.tape.add(total, t)?;
    }
    Ok(LossVars {
        total,
        heatmap,
        offset,
        coord,
        forward,
    })
}
