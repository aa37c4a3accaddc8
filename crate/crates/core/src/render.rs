//! Landmark-driven makeup: part masks with feathered edges and alpha
//! compositing.
//!
//! Coordinates follow the frame convention of [`crate::imaging`]: pixel
//! `(x, y)` is centered at `(x, y)`.

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::landmarks::{FacePart, LandmarkLayout, LandmarkSet};

/// Catmull-Rom points per polygon edge.
pub const SUBDIVISIONS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProductSpec {
    pub part: FacePart,
    pub color: [u8; 3],
    /// In `[0, 1]`.
    pub opacity: f32,
    /// Width of the outward alpha ramp, frame pixels.
    pub feather_radius: f32,
}

impl ProductSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(Error::Config(format!("opacity {} outside [0, 1]", self.opacity)));
        }
        if !(self.feather_radius >= 0.0 && self.feather_radius.is_finite()) {
            return Err(Error::Config(format!("feather radius {} must be non-negative", self.feather_radius)));
        }
        Ok(())
    }
}

/// Frame-sized alpha map, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PartMask {
    pub width: u32,
    pub height: u32,
    pub alpha: Vec<f32>,
}

impl PartMask {
    pub fn empty(width: u32, height: u32) -> Self {
        PartMask {
            width,
            height,
            alpha: vec![0.0; width as usize * height as usize],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.alpha[y as usize * self.width as usize + x as usize]
    }

    /// Sum of alpha.
    pub fn area(&self) -> f64 {
        self.alpha.iter().map(|&a| a as f64).sum()
    }

    /// Pixels with nonzero alpha.
    pub fn support(&self) -> usize {
        self.alpha.iter().filter(|&&a| a > 0.0).count()
    }
}

/// Closed uniform Catmull-Rom curve through `points`, `subdivisions`
/// samples per edge starting at each control point.
pub fn smooth_loop(points: &[[f64; 2]], subdivisions: usize) -> Vec<[f64; 2]> {
    let n = points.len();
    if n < 3 || subdivisions == 0 {
        return points.to_vec();
    }
    let mut out = Vec::with_capacity(n * subdivisions);
    for i in 0..n {
        let p0 = points[(i + n - 1) % n];
        let p1 = points[i];
        let p2 = points[(i + 1) % n];
        let p3 = points[(i + 2) % n];
        for k in 0..subdivisions {
            let t = k as f64 / subdivisions as f64;
            let (t2, t3) = (t * t, t * t * t);
            let mut q = [0.0; 2];
            for d in 0..2 {
                q[d] = 0.5
                    * (2.0 * p1[d]
                        + (p2[d] - p0[d]) * t
                        + (2.0 * p0[d] - 5.0 * p1[d] + 4.0 * p2[d] - p3[d]) * t2
                        + (3.0 * p1[d] - p0[d] - 3.0 * p2[d] + p3[d]) * t3);
            }
            out.push(q);
        }
    }
    out
}

fn signed_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
        / 2.0
}

/// The smoothed outline of `part`.
pub fn part_polygon(landmarks: &LandmarkSet, layout: &LandmarkLayout, part: FacePart) -> Result<Vec<[f64; 2]>> {
    let indices = layout
        .part_loop(part)
        .ok_or_else(|| Error::Config(format!("layout {} defines no loop for {part:?}", layout.name)))?;
    if landmarks.len() != layout.len() {
        return Err(Error::Data(format!(
            "layout {} has {} points, landmark set has {}",
            layout.name,
            layout.len(),
            landmarks.len()
        )));
    }
    let control: Vec<[f64; 2]> = indices.iter().map(|&i| landmarks.points[i]).collect();
    if control.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("part landmarks"));
    }
    let poly = smooth_loop(&control, SUBDIVISIONS);
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in &poly {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let diag2 = (hi[0] - lo[0]).powi(2) + (hi[1] - lo[1]).powi(2);
    // Collinear loops and figure-eights whose lobes cancel both land here.
    if poly.len() < 3 || signed_area(&poly).abs() <= 1e-6 * diag2.max(1e-12) {
        return Err(Error::Degenerate(format!("{part:?} outline encloses no area")));
    }
    Ok(poly)
}

/// x positions where the closed polygon crosses the horizontal line `y`,
/// using the half-open rule on edge endpoints.
fn crossings(poly: &[[f64; 2]], y: f64, out: &mut Vec<f64>) {
    out.clear();
    let n = poly.len();
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        if (a[1] > y) != (b[1] > y) {
            out.push(a[0] + (y - a[1]) * (b[0] - a[0]) / (b[1] - a[1]));
        }
    }
    out.sort_by(f64::total_cmp);
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (ex, ey) = (a[0] + t * dx - p[0], a[1] + t * dy - p[1]);
    (ex * ex + ey * ey).sqrt()
}

/// Alpha of a polygon on a `width`×`height` frame: 1 inside by the even-odd
/// rule, `1 - d/feather` outside at distance `d` from the outline.
pub fn rasterize(poly: &[[f64; 2]], width: u32, height: u32, feather: f64) -> PartMask {
    let mut mask = PartMask::empty(width, height);
    if poly.len() < 3 || width == 0 || height == 0 {
        return mask;
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in poly {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let span = |l: f64, h: f64, n: u32| -> (u32, u32) {
        let a = (l - feather).floor().max(0.0);
        let b = (h + feather).ceil().min(n as f64 - 1.0);
        if b < a {
            (1, 0)
        } else {
            (a as u32, b as u32)
        }
    };
    let (x0, x1) = span(lo[0], hi[0], width);
    let (y0, y1) = span(lo[1], hi[1], height);
    if x1 < x0 || y1 < y0 {
        return mask;
    }
    let w = width as usize;
    let mut xs = Vec::new();
    for y in y0..=y1 {
        let row = &mut mask.alpha[y as usize * w..(y as usize + 1) * w];
        crossings(poly, y as f64, &mut xs);
        for pair in xs.chunks_exact(2) {
            // pixel x is inside when pair[0] <= x < pair[1]
            let a = pair[0].ceil().max(0.0);
            let b = pair[1].ceil().min(width as f64);
            if a < b {
                row[a as usize..b as usize].fill(1.0);
            }
        }
        if feather > 0.0 {
            for x in x0..=x1 {
                if row[x as usize] == 1.0 {
                    continue;
                }
                let p = [x as f64, y as f64];
                let d = (0..poly.len())
                    .map(|i| segment_distance(p, poly[i], poly[(i + 1) % poly.len()]))
                    .fold(f64::INFINITY, f64::min);
                if d < feather {
                    row[x as usize] = (1.0 - d / feather) as f32;
                }
            }
        }
    }
    mask
}

pub fn build_part_mask(
    landmarks: &LandmarkSet,
    layout: &LandmarkLayout,
    part: FacePart,
    width: u32,
    height: u32,
    feather_radius: f64,
) -> Result<PartMask> {
    if !(feather_radius >= 0.0 && feather_radius.is_finite()) {
        return Err(Error::Config(format!("feather radius {feather_radius} must be non-negative")));
    }
    let poly = part_polygon(landmarks, layout, part)?;
    Ok(rasterize(&poly, width, height, feather_radius))
}

/// Composite products over `frame` in order, each pixel as
/// `(1 - a)·base + a·color` with `a = opacity·alpha`.
pub fn blend(frame: &RgbImage, layers: &[(&PartMask, &ProductSpec)]) -> Result<RgbImage> {
    for (mask, product) in layers {
        if (mask.width, mask.height) != frame.dimensions() {
            return Err(Error::shape(format!(
                "mask is {}x{}, frame is {}x{}",
                mask.width,
                mask.height,
                frame.width(),
                frame.height()
            )));
        }
        product.validate()?;
    }
    let mut out = frame.clone();
    for (i, px) in out.pixels_mut().enumerate() {
        let mut acc = px.0.map(|v| v as f64);
        let mut touched = false;
        for (mask, product) in layers {
            let a = product.opacity as f64 * mask.alpha[i] as f64;
            if a == 0.0 {
                continue;
            }
            touched = true;
            for c in 0..3 {
                acc[c] = (1.0 - a) * acc[c] + a * product.color[c] as f64;
            }
        }
        if touched {
            *px = Rgb(acc.map(|v| v.round().clamp(0.0, 255.0) as u8));
        }
    }
    Ok(out)
}

/// Masks for every product, then [`blend`].
pub fn render(frame: &RgbImage, landmarks: &LandmarkSet, layout: &LandmarkLayout, products: &[ProductSpec]) -> Result<RgbImage> {
    let (w, h) = frame.dimensions();
    let masks = products
        .iter()
        .map(|p| {
            p.validate()?;
            build_part_mask(landmarks, layout, p.part, w, h, p.feather_radius as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    let layers: Vec<_> = masks.iter().zip(products).collect();
    blend(frame, &layers)
}

/// Mark each landmark with a small cross.
pub fn draw_landmarks(img: &mut RgbImage, landmarks: &LandmarkSet, color: [u8; 3]) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    for p in &landmarks.points {
        if !(p[0].is_finite() && p[1].is_finite()) {
            continue;
        }
        let (cx, cy) = (p[0].round() as i64, p[1].round() as i64);
        for (dx, dy) in [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)] {
            let (x, y) = (cx + dx, cy + dy);
            if (0..w).contains(&x) && (0..h).contains(&y) {
                img.put_pixel(x as u32, y as u32, Rgb(color));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(x0: f64, y0: f64, x1: f64, y1: f64) -> Vec<[f64; 2]> {
        vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]]
    }

    #[test]
    fn catmull_rom_passes_through_controls() {
        let ctl = square(1.0, 2.0, 9.0, 7.0);
        let s = smooth_loop(&ctl, SUBDIVISIONS);
        assert_eq!(s.len(), 4 * SUBDIVISIONS);
        for (i, c) in ctl.iter().enumerate() {
            assert_eq!(s[i * SUBDIVISIONS], *c);
        }
    }

    #[test]
    fn hard_square_fills_its_pixels() {
        let m = rasterize(&square(1.5, 1.5, 4.5, 3.5), 8, 6, 0.0);
        let inside: Vec<(u32, u32)> = (0..6)
            .flat_map(|y| (0..8).map(move |x| (x, y)))
            .filter(|&(x, y)| m.get(x, y) == 1.0)
            .collect();
        let want: Vec<(u32, u32)> = (2..4).flat_map(|y| (2..5).map(move |x| (x, y))).collect();
        assert_eq!(inside, want);
        assert_eq!(m.area(), 6.0);
    }

    #[test]
    fn feather_ramps_outward() {
        let m = rasterize(&square(2.5, 2.5, 6.5, 6.5), 12, 12, 2.0);
        assert_eq!(m.get(4, 4), 1.0);
        assert!((m.get(7, 4) - 0.75).abs() < 1e-6);
        assert!((m.get(8, 4) - 0.25).abs() < 1e-6);
        assert_eq!(m.get(9, 4), 0.0);
    }

    #[test]
    fn blend_arithmetic() {
        let frame = RgbImage::new(2, 1);
        let mask = PartMask {
            width: 2,
            height: 1,
            alpha: vec![1.0, 0.0],
        };
        let p = ProductSpec {
            part: FacePart::UpperLip,
            color: [100, 0, 0],
            opacity: 0.5,
            feather_radius: 0.0,
        };
        let out = blend(&frame, &[(&mask, &p)]).unwrap();
        assert_eq!(out.get_pixel(0, 0).0, [50, 0, 0]);
        assert_eq!(out.get_pixel(1, 0).0, [0, 0, 0]);
        let full = ProductSpec { opacity: 1.0, ..p };
        assert_eq!(blend(&frame, &[(&mask, &full)]).unwrap().get_pixel(0, 0).0, [100, 0, 0]);
    }

    #[test]
    fn mismatched_mask_is_rejected() {
        let p = ProductSpec {
            part: FacePart::LeftCheek,
            color: [1, 2, 3],
            opacity: 1.0,
            feather_radius: 0.0,
        };
        assert!(blend(&RgbImage::new(3, 3), &[(&PartMask::empty(2, 3), &p)]).is_err());
        assert!(ProductSpec { opacity: 1.5, ..p }.validate().is_err());
    }
}
