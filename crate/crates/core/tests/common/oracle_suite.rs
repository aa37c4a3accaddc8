//! Fast paths against slow, independently written references. Each check
//! returns its largest absolute deviation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tinyalign::data::{generate_synthetic, SynthConfig, SyntheticFaceParams};
use tinyalign::nn::{conv2d, roi_align_batched, ConvSpec, RoiBox};
use tinyalign::render::{build_part_mask, part_polygon, rasterize};
use tinyalign::{FacePart, LandmarkLayout, Tensor};

use super::*;

/// Bilinear interpolation written as a sum of tent kernels over every cell,
/// with the sample clamped to the span of cell centers.
fn tent_sample(plane: &[f64], h: usize, w: usize, fx: f64, fy: f64) -> f64 {
    let fx = fx.clamp(0.0, (w - 1) as f64);
    let fy = fy.clamp(0.0, (h - 1) as f64);
    let mut v = 0.0;
    for i in 0..h {
        for j in 0..w {
            let k = (1.0 - (fx - j as f64).abs()).max(0.0) * (1.0 - (fy - i as f64).abs()).max(0.0);
            v += k * plane[i * w + j];
        }
    }
    v
}

fn roi_oracle(features: &Tensor<f64>, boxes: &[RoiBox], s: usize) -> Vec<f64> {
    let &[n, c, h, w] = features.shape() else { unreachable!() };
    let per = boxes.len() / n;
    let mut out = Vec::new();
    for b in 0..n {
        for r in &boxes[b * per..(b + 1) * per] {
            let x0 = r.x0.clamp(0.0, 1.0);
            let x1 = r.x1.clamp(0.0, 1.0);
            let y0 = r.y0.clamp(0.0, 1.0);
            let y1 = r.y1.clamp(0.0, 1.0);
            for ch in 0..c {
                let plane = &features.data()[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                for oy in 0..s {
                    let v = y0 + (oy as f64 + 0.5) * (y1 - y0) / s as f64;
                    for ox in 0..s {
                        let u = x0 + (ox as f64 + 0.5) * (x1 - x0) / s as f64;
                        out.push(tent_sample(plane, h, w, u * w as f64 - 0.5, v * h as f64 - 0.5));
                    }
                }
            }
        }
    }
    out
}

/// Largest deviation of RoI align from the oracle over random features and
/// boxes, some reaching past the border.
pub fn roi_align_error() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let (h, w) = (r.gen_range(2..9), r.gen_range(2..9));
        let features = randn(&[2, 3, h, w], 1.0, &mut r);
        let boxes: Vec<RoiBox> = (0..6)
            .map(|_| {
                let (x0, y0) = (r.gen_range(-0.2..0.8), r.gen_range(-0.2..0.8));
                RoiBox::new(x0, y0, x0 + r.gen_range(0.25..0.6), y0 + r.gen_range(0.25..0.6))
            })
            .collect();
        let s = r.gen_range(1..6);
        let fast = roi_align_batched(&features, &boxes, s).unwrap();
        assert_eq!(fast.shape(), [2, 9, s, s]);
        let slow = roi_oracle(&features, &boxes, s);
        for (a, b) in fast.data().iter().zip(&slow) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

fn channel_slice(t: &Tensor<f64>, from: usize, count: usize) -> Tensor<f64> {
    let s = t.shape();
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    let mut data = Vec::with_capacity(n * count * plane);
    for b in 0..n {
        data.extend_from_slice(&t.data()[(b * c + from) * plane..(b * c + from + count) * plane]);
    }
    Tensor::new([n, count, s[2], s[3]], data).unwrap()
}

fn grouped_error(spec: ConvSpec, x_shape: [usize; 4], seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = randn(&x_shape, 1.0, &mut r);
    let w = randn(&spec.weight_shape(), 1.0, &mut r);
    let bias = randn(&[spec.out_channels], 1.0, &mut r);
    let grouped = conv2d(&x, &w, Some(&bias), &spec).unwrap();

    let (ci, co) = (spec.in_per_group(), spec.out_per_group());
    let single = ConvSpec::new(ci, co, spec.kernel)
        .with_stride(spec.stride)
        .with_padding(spec.padding);
    let kk = ci * spec.kernel * spec.kernel;
    let parts: Vec<Tensor<f64>> = (0..spec.groups)
        .map(|g| {
            let wg = Tensor::new(single.weight_shape(), w.data()[g * co * kk..(g + 1) * co * kk].to_vec()).unwrap();
            let bg = Tensor::new([co], bias.data()[g * co..(g + 1) * co].to_vec()).unwrap();
            conv2d(&channel_slice(&x, g * ci, ci), &wg, Some(&bg), &single).unwrap()
        })
        .collect();

    let s = grouped.shape();
    let plane = s[2] * s[3];
    let mut worst: f64 = 0.0;
    for b in 0..s[0] {
        for (g, part) in parts.iter().enumerate() {
            for k in 0..co {
                let got = &grouped.data()[(b * s[1] + g * co + k) * plane..][..plane];
                let want = &part.data()[(b * co + k) * plane..][..plane];
                for (a, e) in got.iter().zip(want) {
                    worst = worst.max((a - e).abs());
                }
            }
        }
    }
    worst
}

/// Grouped convolution against one plain convolution per channel slice.
pub fn group_conv_error() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        worst = worst
            .max(grouped_error(ConvSpec::new(6, 4, 3).with_groups(2), [2, 6, 5, 6], seed))
            .max(grouped_error(ConvSpec::new(6, 9, 3).with_groups(3).with_stride(2), [1, 6, 7, 7], seed))
            .max(grouped_error(ConvSpec::depthwise(5, 3), [2, 5, 4, 4], seed))
            .max(grouped_error(ConvSpec::new(8, 4, 1).with_groups(4), [2, 8, 3, 3], seed));
    }
    worst
}

/// The refinement head: landmark `l` reads only its own crop channels.
pub fn predict_head_error() -> f64 {
    let (l, c, s) = (5, 8, 4);
    (0..SEEDS)
        .map(|seed| grouped_error(ConvSpec::new(l * c, l, 3).with_groups(l), [2, l * c, s, s], seed))
        .fold(0.0, f64::max)
}

/// Crossing-number containment, written from the ray's point of view.
fn inside(poly: &[[f64; 2]], p: [f64; 2]) -> bool {
    let mut odd = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) && p[0] < (b[0] - a[0]) * (p[1] - a[1]) / (b[1] - a[1]) + a[0] {
            odd = !odd;
        }
        j = i;
    }
    odd
}

/// Distance to the outline: the nearest point on each edge is found by
/// minimizing the squared distance along the edge parameter.
fn outline_distance(poly: &[[f64; 2]], p: [f64; 2]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
        let d = [b[0] - a[0], b[1] - a[1]];
        let denom = d[0] * d[0] + d[1] * d[1];
        let t = if denom == 0.0 {
            0.0
        } else {
            (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / denom).clamp(0.0, 1.0)
        };
        best = best.min((p[0] - a[0] - t * d[0]).hypot(p[1] - a[1] - t * d[1]));
    }
    best
}

fn mask_oracle(poly: &[[f64; 2]], w: u32, h: u32, feather: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity((w * h) as usize);
    for y in 0..h {
        for x in 0..w {
            let p = [x as f64, y as f64];
            out.push(if inside(poly, p) {
                1.0
            } else if feather > 0.0 {
                (1.0 - outline_distance(poly, p) / feather).max(0.0)
            } else {
                0.0
            });
        }
    }
    out
}

fn random_star(r: &mut ChaCha8Rng, w: u32, h: u32) -> Vec<[f64; 2]> {
    let n = r.gen_range(3..12);
    let c = [r.gen_range(8.0..w as f64 - 8.0), r.gen_range(8.0..h as f64 - 8.0)];
    let mut angles: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..std::f64::consts::TAU)).collect();
    angles.sort_by(f64::total_cmp);
    angles
        .into_iter()
        .map(|a| {
            let rad = r.gen_range(2.0..12.0);
            [c[0] + rad * a.cos(), c[1] + rad * a.sin()]
        })
        .collect()
}

/// Rasterized polygons against the oracle, per-pixel alpha difference.
pub fn polygon_mask_error() -> f64 {
    let (w, h) = (40, 32);
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let poly = random_star(&mut r, w, h);
        for feather in [0.0, 1.5, 4.0] {
            let mask = rasterize(&poly, w, h, feather);
            let want = mask_oracle(&poly, w, h, feather);
            for (a, e) in mask.alpha.iter().zip(&want) {
                worst = worst.max((*a as f64 - e).abs());
            }
        }
    }
    worst
}

/// Every part mask of a few synthetic faces against the oracle.
pub fn face_mask_error() -> f64 {
    let mut worst: f64 = 0.0;
    let layout = LandmarkLayout::synthetic65();
    let cfg = SynthConfig::default();
    for seed in 0..4 {
        let face = generate_synthetic(&SyntheticFaceParams::sample(seed, &cfg));
        let (w, h) = face.image.dimensions();
        for part in FacePart::ALL {
            let poly = part_polygon(&face.landmarks, &layout, part).unwrap();
            let mask = build_part_mask(&face.landmarks, &layout, part, w, h, 2.0).unwrap();
            let want = mask_oracle(&poly, w, h, 2.0);
            for (a, e) in mask.alpha.iter().zip(&want) {
                worst = worst.max((*a as f64 - e).abs());
            }
        }
    }
    worst
}
