//! Frame geometry and resampling.
//!
//! Landmarks in frame pixels use pixel-center coordinates: pixel `i` is
//! centered at `i`. Boxes use edge coordinates, where pixel `i` spans
//! `[i, i+1)`. A point `x` inside box `b` has normalized crop coordinate
//! `(x + 0.5 - b.x0) / b.width()`.

use image::RgbImage;

use crate::error::{Error, Result};
use crate::landmarks::LandmarkSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl PixelBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        PixelBox { x0, y0, x1, y1 }
    }

    pub fn full(width: u32, height: u32) -> Self {
        PixelBox::new(0.0, 0.0, width as f64, height as f64)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn intersect(&self, other: &PixelBox) -> PixelBox {
        PixelBox::new(
            self.x0.max(other.x0),
            self.y0.max(other.y0),
            self.x1.min(other.x1),
            self.y1.min(other.y1),
        )
    }

    pub fn clamp_to(&self, width: u32, height: u32) -> PixelBox {
        self.intersect(&PixelBox::full(width, height))
    }

    pub fn iou(&self, other: &PixelBox) -> f64 {
        let inter = self.intersect(other).area();
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.x0, self.y0, self.x1, self.y1].iter().all(|v| v.is_finite())
    }

    /// Square box around the landmarks' bounding box, grown on every side by
    /// `margin` times the bounding-box diagonal.
    pub fn around_landmarks(set: &LandmarkSet, margin: f64) -> Option<PixelBox> {
        let [x0, y0, x1, y1] = set.bounds()?;
        // pixel-center coordinates to edge coordinates
        let (x0, y0, x1, y1) = (x0 + 0.5, y0 + 0.5, x1 + 0.5, y1 + 0.5);
        let (w, h) = (x1 - x0, y1 - y0);
        let diag = (w * w + h * h).sqrt();
        let side = w.max(h) + 2.0 * margin * diag;
        let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
        Some(PixelBox::new(cx - side / 2.0, cy - side / 2.0, cx + side / 2.0, cy + side / 2.0))
    }

    /// Frame pixel (center coordinates) to normalized crop coordinates.
    pub fn to_normalized(&self, p: [f64; 2]) -> [f64; 2] {
        [
            (p[0] + 0.5 - self.x0) / self.width(),
            (p[1] + 0.5 - self.y0) / self.height(),
        ]
    }

    pub fn from_normalized(&self, u: [f64; 2]) -> [f64; 2] {
        [
            self.x0 + u[0] * self.width() - 0.5,
            self.y0 + u[1] * self.height() - 0.5,
        ]
    }
}

/// Bilinear sample at pixel-center coordinates, clamping to the border.
pub fn sample_bilinear(img: &RgbImage, x: f64, y: f64) -> [f32; 3] {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let px = x.clamp(0.0, (w - 1) as f64);
    let py = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (px.floor() as usize, py.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = ((px - x0 as f64) as f32, (py - y0 as f64) as f32);
    let raw = img.as_raw();
    let at = |xx: usize, yy: usize, c: usize| raw[(yy * w + xx) * 3 + c] as f32;
    let mut out = [0.0f32; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let top = at(x0, y0, c) * (1.0 - fx) + at(x1, y0, c) * fx;
        let bottom = at(x0, y1, c) * (1.0 - fx) + at(x1, y1, c) * fx;
        *o = top * (1.0 - fy) + bottom * fy;
    }
    out
}

/// Render a `[3, size, size]` tensor in `[0, 1]` by sampling the source at
/// `source(px, py)` for each output pixel center.
pub fn warp_to_tensor(img: &RgbImage, size: usize, source: impl Fn(f64, f64) -> [f64; 2]) -> Tensor<f32> {
    let plane = size * size;
    let mut data = vec![0.0f32; 3 * plane];
    for py in 0..size {
        for px in 0..size {
            let [sx, sy] = source(px as f64, py as f64);
            let rgb = sample_bilinear(img, sx, sy);
            for c in 0..3 {
                data[c * plane + py * size + px] = rgb[c] / 255.0;
            }
        }
    }
    Tensor::new([3, size, size], data).expect("3 * size^2 values")
}

/// Resample the region `b` of the frame to a square tensor.
pub fn crop_to_tensor(img: &RgbImage, b: &PixelBox, size: usize) -> Result<Tensor<f32>> {
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::Data("empty frame".into()));
    }
    if !(b.is_finite() && b.width() > 0.0 && b.height() > 0.0) {
        return Err(Error::Degenerate(format!("crop box {b:?}")));
    }
    let (sx, sy) = (b.width() / size as f64, b.height() / size as f64);
    Ok(warp_to_tensor(img, size, |px, py| {
        [b.x0 + (px + 0.5) * sx - 0.5, b.y0 + (py + 0.5) * sy - 0.5]
    }))
}

pub fn tensor_to_image(t: &Tensor<f32>) -> Result<RgbImage> {
    let &[3, h, w] = t.shape() else {
        return Err(Error::shape(format!("expected [3, H, W], got {:?}", t.shape())));
    };
    let plane = h * w;
    let mut raw = Vec::with_capacity(3 * plane);
    for k in 0..plane {
        for c in 0..3 {
            raw.push((t.data()[c * plane + k] * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer sized to image"))
}

pub fn image_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0f32; 3 * plane];
    for (k, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + k] = px.0[c] as f32 / 255.0;
        }
    }
    Tensor::new([3, h, w], data).expect("3 * w * h values")
}
