//! Geometric and photometric augmentation with exact landmark transport.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::imaging::sample_bilinear;
use crate::landmarks::LandmarkLayout;

use super::AnnotatedSample;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub max_rotation_deg: f64,
    pub scale: (f64, f64),
    /// Fraction of the image size.
    pub max_translate: f64,
    pub flip_prob: f64,
    /// Additive, as a fraction of full range.
    pub brightness: f64,
    pub contrast: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            max_rotation_deg: 20.0,
            scale: (0.9, 1.1),
            max_translate: 0.05,
            flip_prob: 0.5,
            brightness: 0.1,
            contrast: (0.8, 1.2),
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            max_rotation_deg: 0.0,
            scale: (1.0, 1.0),
            max_translate: 0.0,
            flip_prob: 0.0,
            brightness: 0.0,
            contrast: (1.0, 1.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub angle_deg: f64,
    pub scale: f64,
    /// Translation as a fraction of width and height.
    pub translate: [f64; 2],
    pub flip: bool,
    pub brightness: f64,
    pub contrast: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            angle_deg: 0.0,
            scale: 1.0,
            translate: [0.0, 0.0],
            flip: false,
            brightness: 0.0,
            contrast: 1.0,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

impl AugmentParams {
    pub fn sample(rng: &mut ChaCha8Rng, cfg: &AugmentConfig) -> Self {
        let r = cfg.max_rotation_deg;
        let t = cfg.max_translate;
        AugmentParams {
            angle_deg: uniform(rng, -r, r),
            scale: uniform(rng, cfg.scale.0, cfg.scale.1),
            translate: [uniform(rng, -t, t), uniform(rng, -t, t)],
            flip: cfg.flip_prob > 0.0 && rng.gen_bool(cfg.flip_prob.min(1.0)),
            brightness: uniform(rng, -cfg.brightness, cfg.brightness),
            contrast: uniform(rng, cfg.contrast.0, cfg.contrast.1),
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == AugmentParams::default()
    }

    /// Where a pixel-center point of a `width x height` image lands.
    pub fn transform_point(&self, p: [f64; 2], width: u32, height: u32) -> [f64; 2] {
        let (w, h) = (width as f64, height as f64);
        let c = [(w - 1.0) / 2.0, (h - 1.0) / 2.0];
        let (s, co) = self.angle_deg.to_radians().sin_cos();
        let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
        let x = c[0] + self.scale * (co * dx - s * dy) + self.translate[0] * w;
        let y = c[1] + self.scale * (s * dx + co * dy) + self.translate[1] * h;
        if self.flip {
            [w - 1.0 - x, y]
        } else {
            [x, y]
        }
    }

    /// Inverse of [`transform_point`](Self::transform_point).
    pub fn inverse_point(&self, q: [f64; 2], width: u32, height: u32) -> [f64; 2] {
        let (w, h) = (width as f64, height as f64);
        let c = [(w - 1.0) / 2.0, (h - 1.0) / 2.0];
        let qx = if self.flip { w - 1.0 - q[0] } else { q[0] };
        let dx = (qx - c[0] - self.translate[0] * w) / self.scale;
        let dy = (q[1] - c[1] - self.translate[1] * h) / self.scale;
        let (s, co) = self.angle_deg.to_radians().sin_cos();
        [c[0] + co * dx + s * dy, c[1] - s * dx + co * dy]
    }
}

/// Apply `params` to image and landmarks; a flip also permutes landmark
/// indices through the layout's remap table.
pub fn apply(sample: &AnnotatedSample, params: &AugmentParams, layout: &LandmarkLayout) -> AnnotatedSample {
    if params.is_identity() {
        return sample.clone();
    }
    let (w, h) = sample.image.dimensions();
    let geometric = params.angle_deg != 0.0 || params.scale != 1.0 || params.translate != [0.0, 0.0] || params.flip;
    let mut image = if geometric {
        RgbImage::from_fn(w, h, |x, y| {
            let p = params.inverse_point([x as f64, y as f64], w, h);
            let v = sample_bilinear(&sample.image, p[0], p[1]);
            Rgb([0, 1, 2].map(|c| v[c].round().clamp(0.0, 255.0) as u8))
        })
    } else {
        sample.image.clone()
    };
    if params.brightness != 0.0 || params.contrast != 1.0 {
        for px in image.pixels_mut() {
            for v in px.0.iter_mut() {
                let f = (*v as f64 - 127.5) * params.contrast + 127.5 + params.brightness * 255.0;
                *v = f.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    let moved = sample.landmarks.map(|p| {
        let q = params.transform_point(p, w, h);
        // undo the mirror here; `flip` below re-applies it with the remap
        if params.flip {
            [w as f64 - 1.0 - q[0], q[1]]
        } else {
            q
        }
    });
    let landmarks = if params.flip { layout.flip(&moved, w as f64) } else { moved };
    let tags = if params.flip {
        let mut t = sample.tags.clone();
        for (i, &j) in layout.flip_remap.iter().enumerate() {
            t[j] = sample.tags[i];
        }
        t
    } else {
        sample.tags.clone()
    };
    AnnotatedSample {
        image,
        landmarks,
        tags,
        source: sample.source.clone(),
    }
}

/// Draw parameters from `seed` and apply them.
pub fn augment(sample: &AnnotatedSample, seed: u64, cfg: &AugmentConfig, layout: &LandmarkLayout) -> AnnotatedSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    apply(sample, &AugmentParams::sample(&mut rng, cfg), layout)
}
