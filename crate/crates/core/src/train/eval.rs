//! Normalized mean error over a dataset.

use serde::Serialize;

use crate::data::{crop_sample, AnnotatedSample};
use crate::error::{Error, Result};
use crate::heatmap::point_errors;
use crate::imaging::PixelBox;
use crate::landmarks::{LandmarkLayout, LandmarkSet, PointTag};
use crate::model::ModelWeights;
use crate::tensor::Tensor;

/// Errors are percentages of the inter-pupil distance.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub inner: f64,
    pub contour: f64,
    pub overall: f64,
    /// Mean error of each landmark over the dataset.
    pub per_landmark: Vec<f64>,
    pub count: usize,
}

/// Score predictions against ground truth, both in the same pixel frame.
/// Subsets follow the layout's tags.
pub fn evaluate_predictions(preds: &[LandmarkSet], truth: &[LandmarkSet], layout: &LandmarkLayout) -> Result<EvalReport> {
    if truth.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    if preds.len() != truth.len() {
        return Err(Error::Data(format!("{} predictions for {} samples", preds.len(), truth.len())));
    }
    let l = layout.len();
    let mut per_landmark = vec![0.0; l];
    for (p, g) in preds.iter().zip(truth) {
        for (acc, e) in per_landmark.iter_mut().zip(point_errors(p, g, layout)?) {
            *acc += e;
        }
    }
    let n = truth.len() as f64;
    per_landmark.iter_mut().for_each(|v| *v /= n);
    let mean_of = |tag: Option<PointTag>| {
        let idx: Vec<usize> = (0..l).filter(|&i| tag.is_none_or(|t| layout.tags[i] == t)).collect();
        if idx.is_empty() {
            f64::NAN
        } else {
            idx.iter().map(|&i| per_landmark[i]).sum::<f64>() / idx.len() as f64
        }
    };
    Ok(EvalReport {
        inner: mean_of(Some(PointTag::Inner)),
        contour: mean_of(Some(PointTag::Contour)),
        overall: mean_of(None),
        per_landmark,
        count: truth.len(),
    })
}

/// Predict every sample inside its landmark box grown by `margin` and map
/// the result back to image pixels.
pub fn predict_samples(weights: &ModelWeights, samples: &[AnnotatedSample], margin: f64) -> Result<Vec<LandmarkSet>> {
    const CHUNK: usize = 16;
    let size = weights.config.input_size;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(CHUNK) {
        let mut boxes = Vec::with_capacity(chunk.len());
        let mut data = Vec::with_capacity(chunk.len() * 3 * size * size);
        for s in chunk {
            let b = s.face_box(margin)?;
            let (input, _) = crop_sample(s, &b, size)?;
            data.extend_from_slice(input.data());
            boxes.push(b);
        }
        let batch = Tensor::new([chunk.len(), weights.config.in_channels, size, size], data)?;
        for (set, b) in weights.predict_batch(&batch)?.into_iter().zip(&boxes) {
            out.push(set.map(|u| PixelBox::from_normalized(b, u)));
        }
    }
    Ok(out)
}

pub fn evaluate(weights: &ModelWeights, samples: &[AnnotatedSample], margin: f64) -> Result<EvalReport> {
    let layout = weights.config.layout.layout();
    if let Some(s) = samples.iter().find(|s| s.landmarks.len() != layout.len()) {
        return Err(Error::Data(format!(
            "{} has {} landmarks, model layout {} has {}",
            s.source,
            s.landmarks.len(),
            layout.name,
            layout.len()
        )));
    }
    if samples.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    let preds = predict_samples(weights, samples, margin)?;
    let truth: Vec<LandmarkSet> = samples.iter().map(|s| s.landmarks.clone()).collect();
    evaluate_predictions(&preds, &truth, &layout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_dataset, SynthConfig};

    fn truth(n: usize) -> (Vec<LandmarkSet>, LandmarkLayout) {
        let set = synthetic_dataset(n, 5, &SynthConfig::default()).unwrap();
        (set.into_iter().map(|s| s.landmarks).collect(), LandmarkLayout::synthetic65())
    }

    #[test]
    fn perfect_predictor_scores_zero() {
        let (gt, layout) = truth(4);
        let r = evaluate_predictions(&gt, &gt, &layout).unwrap();
        assert_eq!((r.inner, r.contour, r.overall, r.count), (0.0, 0.0, 0.0, 4));
    }

    #[test]
    fn overall_is_count_weighted() {
        let (gt, layout) = truth(3);
        let shifted: Vec<_> = gt.iter().map(|s| s.map(|p| [p[0] + 1.0, p[1] - 2.0])).collect();
        let r = evaluate_predictions(&shifted, &gt, &layout).unwrap();
        let ni = layout.tags.iter().filter(|&&t| t == PointTag::Inner).count() as f64;
        let nc = layout.len() as f64 - ni;
        let combined = (ni * r.inner + nc * r.contour) / (ni + nc);
        assert!((r.overall - combined).abs() < 1e-9);
    }

    #[test]
    fn empty_and_mismatched_inputs() {
        let layout = LandmarkLayout::synthetic65();
        assert!(evaluate_predictions(&[], &[], &layout).is_err());
        let (gt, _) = truth(2);
        assert!(evaluate_predictions(&gt[..1], &gt, &layout).is_err());
    }
}
