//! Annotated samples, ingestion, synthetic faces and augmentation.

pub mod augment;
pub mod manifest;
pub mod pts;
pub mod synth;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imaging::{crop_to_tensor, PixelBox};
use crate::landmarks::{LandmarkSet, PointTag};
use crate::tensor::Tensor;

pub use augment::{augment, AugmentConfig, AugmentParams};
pub use manifest::{load_samples, read_manifest, write_manifest, ManifestRecord};
pub use pts::{parse_pts, write_pts};
pub use synth::{generate_synthetic, synthetic_dataset, SynthConfig, SyntheticFaceParams};

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedSample {
    pub image: RgbImage,
    /// Pixel-center coordinates; points outside the image are kept as is.
    pub landmarks: LandmarkSet,
    pub tags: Vec<PointTag>,
    pub source: String,
}

impl AnnotatedSample {
    pub fn out_of_bounds(&self) -> Vec<bool> {
        let (w, h) = (self.image.width() as f64, self.image.height() as f64);
        self.landmarks
            .points
            .iter()
            .map(|p| !(p[0] >= -0.5 && p[0] <= w - 0.5 && p[1] >= -0.5 && p[1] <= h - 0.5))
            .collect()
    }

    /// Landmark box grown by `margin`, as used for evaluation crops.
    pub fn face_box(&self, margin: f64) -> Result<PixelBox> {
        PixelBox::around_landmarks(&self.landmarks, margin).ok_or_else(|| Error::Data(format!("{}: no landmarks", self.source)))
    }
}

/// Random perturbation of the ground-truth face box during training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxJitter {
    /// Center shift as a fraction of the box side.
    pub shift: f64,
    pub scale: (f64, f64),
}

impl Default for BoxJitter {
    fn default() -> Self {
        BoxJitter {
            shift: 0.05,
            scale: (0.9, 1.1),
        }
    }
}

impl BoxJitter {
    pub fn none() -> Self {
        BoxJitter {
            shift: 0.0,
            scale: (1.0, 1.0),
        }
    }

    pub fn apply(&self, b: &PixelBox, rng: &mut impl Rng) -> PixelBox {
        let side_w = b.width();
        let side_h = b.height();
        let s = if self.scale.1 > self.scale.0 {
            rng.gen_range(self.scale.0..self.scale.1)
        } else {
            self.scale.0
        };
        let mut shift = || {
            if self.shift > 0.0 {
                rng.gen_range(-self.shift..self.shift)
            } else {
                0.0
            }
        };
        let cx = (b.x0 + b.x1) / 2.0 + shift() * side_w;
        let cy = (b.y0 + b.y1) / 2.0 + shift() * side_h;
        let (hw, hh) = (side_w * s / 2.0, side_h * s / 2.0);
        PixelBox::new(cx - hw, cy - hh, cx + hw, cy + hh)
    }
}

/// Resample `b` to a `[3, size, size]` input and express the landmarks in
/// normalized crop coordinates.
pub fn crop_sample(sample: &AnnotatedSample, b: &PixelBox, size: usize) -> Result<(Tensor<f32>, LandmarkSet)> {
    let input = crop_to_tensor(&sample.image, b, size)?;
    Ok((input, sample.landmarks.map(|p| b.to_normalized(p))))
}

/// Deterministic shuffled partition of `data` with sizes proportional to
/// `ratios`. A partition may be empty only when its ratio is zero.
pub fn split<T>(data: Vec<T>, ratios: &[f64], seed: u64) -> Result<Vec<Vec<T>>> {
    if ratios.is_empty() || ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
        return Err(Error::Config(format!("invalid split ratios {ratios:?}")));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios sum to {total}, not 1")));
    }
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut slots: Vec<Option<T>> = data.into_iter().map(Some).collect();
    let mut parts = Vec::with_capacity(ratios.len());
    let mut cum = 0.0;
    let mut start = 0;
    for (k, r) in ratios.iter().enumerate() {
        cum += r;
        let end = if k + 1 == ratios.len() { n } else { ((cum * n as f64).round() as usize).min(n) };
        let end = end.max(start);
        if end == start && *r > 0.0 {
            return Err(Error::Data(format!("split partition {k} is empty ({n} samples, ratio {r})")));
        }
        parts.push(order[start..end].iter().map(|&i| slots[i].take().expect("index used once")).collect());
        start = end;
    }
    Ok(parts)
}
