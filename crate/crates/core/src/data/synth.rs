//! Schematic synthetic faces with exact landmarks.
//!
//! Geometry lives in a face frame (x right, y down, roughly unit scale) and
//! is placed on the canvas by a similarity transform. Every pixel is shaded
//! by evaluating signed distances to the face parts at its center, so the
//! landmarks and the rendered shapes come from the same numbers.

use std::f64::consts::PI;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::landmarks::{LandmarkLayout, LandmarkSet, LayoutName};

use super::AnnotatedSample;

/// Ranges the per-seed parameters are drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub canvas: u32,
    /// Canvas pixels per face unit.
    pub scale: (f64, f64),
    pub max_rotation_deg: f64,
    /// Face center offset from the canvas center, as a fraction of the canvas.
    pub max_shift: f64,
    /// Per-pixel Gaussian noise standard deviation, in 0..255 units.
    pub noise: (f64, f64),
    pub layout: LayoutName,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            canvas: 160,
            scale: (40.0, 50.0),
            max_rotation_deg: 15.0,
            max_shift: 0.06,
            noise: (2.0, 8.0),
            layout: LayoutName::Synthetic65,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        match self.layout {
            LayoutName::Synthetic65 => {}
            LayoutName::Generic(n) if n <= 65 => {}
            ref other => {
                return Err(Error::Config(format!("synthetic faces cannot produce layout {other}")));
            }
        }
        if self.canvas < 16 || !(self.scale.0 > 0.0 && self.scale.0 <= self.scale.1) {
            return Err(Error::Config("synthetic canvas or scale range".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub center: [f64; 2],
    pub rx: f64,
    pub ry: f64,
}

/// Everything that determines one synthetic face.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticFaceParams {
    pub seed: u64,
    pub canvas: u32,
    pub head: Ellipse,
    /// Image-left eye first.
    pub eyes: [Ellipse; 2],
    pub iris_radius: f64,
    pub brow_height: f64,
    pub brow_arch: f64,
    pub brow_tilt: f64,
    pub nose_length: f64,
    pub nose_width: f64,
    pub mouth_center: [f64; 2],
    pub mouth_half_width: f64,
    pub upper_lip: f64,
    pub lower_lip: f64,
    pub mouth_open: f64,
    /// Face-to-canvas similarity: canvas = center + scale * R(angle) * face.
    pub center: [f64; 2],
    pub scale: f64,
    pub angle: f64,
    pub skin: [f64; 3],
    pub lip_color: [f64; 3],
    pub iris_color: [f64; 3],
    pub brow_color: [f64; 3],
    pub background: [[f64; 3]; 2],
    pub noise: f64,
    pub layout: LayoutName,
}

fn jitter(rng: &mut ChaCha8Rng, base: f64, rel: f64) -> f64 {
    base * (1.0 + rng.gen_range(-rel..=rel))
}

fn color(rng: &mut ChaCha8Rng, lo: [f64; 3], hi: [f64; 3]) -> [f64; 3] {
    [
        rng.gen_range(lo[0]..=hi[0]),
        rng.gen_range(lo[1]..=hi[1]),
        rng.gen_range(lo[2]..=hi[2]),
    ]
}

impl SyntheticFaceParams {
    pub fn sample(seed: u64, cfg: &SynthConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eye_x = jitter(&mut rng, 0.34, 0.1);
        let eye_y = jitter(&mut rng, -0.12, 0.2);
        let eye_rx = jitter(&mut rng, 0.14, 0.12);
        let eye_ry = jitter(&mut rng, 0.065, 0.2);
        let canvas = cfg.canvas as f64;
        let shift = cfg.max_shift * canvas;
        let skin_tone = rng.gen_range(0.0..=1.0);
        SyntheticFaceParams {
            seed,
            canvas: cfg.canvas,
            head: Ellipse {
                center: [0.0, jitter(&mut rng, 0.08, 0.3)],
                rx: jitter(&mut rng, 0.78, 0.08),
                ry: jitter(&mut rng, 0.98, 0.06),
            },
            eyes: [
                Ellipse {
                    center: [-eye_x, eye_y],
                    rx: eye_rx,
                    ry: eye_ry,
                },
                Ellipse {
                    center: [eye_x, eye_y],
                    rx: eye_rx,
                    ry: eye_ry,
                },
            ],
            iris_radius: eye_ry * rng.gen_range(0.75..=0.95),
            brow_height: jitter(&mut rng, 0.14, 0.2),
            brow_arch: jitter(&mut rng, 0.05, 0.4),
            brow_tilt: rng.gen_range(-0.04..=0.04),
            nose_length: jitter(&mut rng, 0.36, 0.1),
            nose_width: jitter(&mut rng, 0.11, 0.15),
            mouth_center: [0.0, jitter(&mut rng, 0.5, 0.08)],
            mouth_half_width: jitter(&mut rng, 0.21, 0.12),
            upper_lip: jitter(&mut rng, 0.06, 0.25),
            lower_lip: jitter(&mut rng, 0.075, 0.25),
            mouth_open: rng.gen_range(0.0..=0.06),
            center: [
                canvas / 2.0 + rng.gen_range(-shift..=shift),
                canvas / 2.0 - 0.2 * cfg.scale.0 + rng.gen_range(-shift..=shift),
            ],
            scale: rng.gen_range(cfg.scale.0..=cfg.scale.1),
            angle: rng.gen_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg).to_radians(),
            skin: {
                let dark = [95.0, 60.0, 45.0];
                let light = [235.0, 195.0, 170.0];
                let base: Vec<f64> = (0..3).map(|c| dark[c] + skin_tone * (light[c] - dark[c])).collect();
                let j = color(&mut rng, [-12.0; 3], [12.0; 3]);
                [base[0] + j[0], base[1] + j[1], base[2] + j[2]]
            },
            lip_color: color(&mut rng, [120.0, 20.0, 30.0], [210.0, 90.0, 110.0]),
            iris_color: color(&mut rng, [20.0, 20.0, 10.0], [110.0, 90.0, 80.0]),
            brow_color: color(&mut rng, [15.0, 10.0, 5.0], [90.0, 70.0, 50.0]),
            background: [
                color(&mut rng, [0.0; 3], [255.0; 3]),
                color(&mut rng, [0.0; 3], [255.0; 3]),
            ],
            noise: rng.gen_range(cfg.noise.0..=cfg.noise.1),
            layout: cfg.layout.clone(),
        }
    }

    pub fn to_canvas(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.angle.sin_cos();
        [
            self.center[0] + self.scale * (c * p[0] - s * p[1]),
            self.center[1] + self.scale * (s * p[0] + c * p[1]),
        ]
    }

    pub fn to_face(&self, q: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = ((q[0] - self.center[0]) / self.scale, (q[1] - self.center[1]) / self.scale);
        [c * dx + s * dy, -s * dx + c * dy]
    }

    fn brow(&self, side: usize) -> Vec<[f64; 2]> {
        let e = self.eyes[side];
        let sign = if side == 0 { -1.0 } else { 1.0 };
        let y0 = e.center[1] - e.ry - self.brow_height;
        (0..6)
            .map(|k| {
                // outer -> inner
                let t = k as f64 / 5.0;
                let x = e.center[0] + sign * (0.2 - 0.36 * t) * (e.rx / 0.14);
                let y = y0 - self.brow_arch * (PI * (0.15 + 0.75 * t)).sin() + self.brow_tilt * (t - 0.5);
                [x, y]
            })
            .collect()
    }

    fn eye_ring(&self, side: usize) -> Vec<[f64; 2]> {
        let e = self.eyes[side];
        let sign = if side == 0 { 1.0 } else { -1.0 };
        (0..8)
            .map(|k| {
                // outer corner, over the top, inner corner at k = 4, back below
                let phi = PI + k as f64 * PI / 4.0;
                [e.center[0] + sign * e.rx * phi.cos(), e.center[1] + e.ry * phi.sin()]
            })
            .collect()
    }

    fn nose(&self) -> Vec<[f64; 2]> {
        let top = self.eyes[0].center[1] + 0.02;
        let tip_y = top + self.nose_length;
        let w = self.nose_width;
        let mut pts: Vec<[f64; 2]> = (0..4).map(|k| [0.0, top + (tip_y - top) * k as f64 / 4.0]).collect();
        pts.push([0.0, tip_y]);
        for k in 0..5 {
            let x = -w + k as f64 * w / 2.0;
            pts.push([x, tip_y + 0.03 + 0.025 * (1.0 - (x / w).powi(2))]);
        }
        pts.push([-1.25 * w, tip_y - 0.02]);
        pts.push([1.25 * w, tip_y - 0.02]);
        pts
    }

    /// Outer lip ring (12) then inner ring (8), in layout order.
    fn lips(&self) -> (Vec<[f64; 2]>, Vec<[f64; 2]>) {
        let [cx, cy] = self.mouth_center;
        let w = self.mouth_half_width;
        let half_open = self.mouth_open / 2.0;
        let upper = |t: f64| {
            // cupid's bow: two humps with a dip in the middle
            let bump = (PI * t).sin();
            let dip = 0.35 * (-((t - 0.5) / 0.12).powi(2)).exp();
            cy - half_open - self.upper_lip * (bump - dip).max(0.0) * 1.1
        };
        let lower = |t: f64| cy + half_open + self.lower_lip * (PI * t).sin();
        let mut outer = vec![[cx - w, cy]];
        for k in 1..=5 {
            let t = k as f64 / 6.0;
            outer.push([cx - w + 2.0 * w * t, upper(t)]);
        }
        outer.push([cx + w, cy]);
        for k in 1..=5 {
            let t = 1.0 - k as f64 / 6.0;
            outer.push([cx - w + 2.0 * w * t, lower(t)]);
        }
        let wi = 0.78 * w;
        let inner_up = |x: f64| cy - half_open - 0.012 * (1.0 - (x / wi).powi(2));
        let inner_lo = |x: f64| cy + half_open + 0.012 * (1.0 - (x / wi).powi(2));
        let mut inner = vec![[cx - wi, cy]];
        for x in [-0.45 * wi, 0.0, 0.45 * wi] {
            inner.push([cx + x, inner_up(x)]);
        }
        inner.push([cx + wi, cy]);
        for x in [0.45 * wi, 0.0, -0.45 * wi] {
            inner.push([cx + x, inner_lo(x)]);
        }
        (outer, inner)
    }

    fn contour(&self) -> Vec<[f64; 2]> {
        let h = self.head;
        let a = 50f64.to_radians();
        vec![
            [h.center[0], h.center[1] + h.ry],
            [h.center[0] - h.rx * a.sin(), h.center[1] + h.ry * a.cos()],
            [h.center[0] + h.rx * a.sin(), h.center[1] + h.ry * a.cos()],
        ]
    }

    /// All 65 landmarks in face units, synthetic65 order.
    pub fn face_landmarks(&self) -> Vec<[f64; 2]> {
        let mut pts = self.brow(0);
        pts.extend(self.brow(1));
        pts.extend(self.eye_ring(0));
        pts.push(self.eyes[0].center);
        pts.extend(self.eye_ring(1));
        pts.push(self.eyes[1].center);
        pts.extend(self.nose());
        let (outer, inner) = self.lips();
        pts.extend(outer);
        pts.extend(inner);
        pts.extend(self.contour());
        pts
    }

    /// Landmarks in canvas pixel-center coordinates.
    pub fn landmarks(&self) -> LandmarkSet {
        let n = self.layout.num_points();
        LandmarkSet::new(
            self.face_landmarks()
                .into_iter()
                .take(n)
                .map(|p| {
                    let q = self.to_canvas(p);
                    // edge coordinates to pixel-center coordinates
                    [q[0] - 0.5, q[1] - 0.5]
                })
                .collect(),
        )
    }
}

fn ellipse_sdf(p: [f64; 2], e: &Ellipse) -> f64 {
    let dx = (p[0] - e.center[0]) / e.rx;
    let dy = (p[1] - e.center[1]) / e.ry;
    ((dx * dx + dy * dy).sqrt() - 1.0) * e.rx.min(e.ry)
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (vx, vy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * vx + (p[1] - a[1]) * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (dx, dy) = (p[0] - a[0] - t * vx, p[1] - a[1] - t * vy);
    (dx * dx + dy * dy).sqrt()
}

fn polyline_distance(p: [f64; 2], pts: &[[f64; 2]]) -> f64 {
    pts.windows(2)
        .map(|w| segment_distance(p, w[0], w[1]))
        .fold(f64::INFINITY, f64::min)
}

/// Negative inside, even-odd rule.
fn polygon_sdf(p: [f64; 2], poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    let mut inside = false;
    let mut d = f64::INFINITY;
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        d = d.min(segment_distance(p, a, b));
        if (a[1] > p[1]) != (b[1] > p[1]) && p[0] < a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]) {
            inside = !inside;
        }
    }
    if inside {
        -d
    } else {
        d
    }
}

struct Painter {
    rgb: [f64; 3],
    /// Face units per pixel, for anti-aliasing widths.
    px: f64,
}

impl Painter {
    fn over(&mut self, sdf: f64, color: [f64; 3], opacity: f64) {
        let a = (0.5 - sdf / self.px).clamp(0.0, 1.0) * opacity;
        if a > 0.0 {
            for c in 0..3 {
                self.rgb[c] += a * (color[c] - self.rgb[c]);
            }
        }
    }
}

fn shade(c: [f64; 3], k: f64) -> [f64; 3] {
    [c[0] * k, c[1] * k, c[2] * k]
}

/// Render the face described by `params` with its landmarks.
pub fn generate_synthetic(params: &SyntheticFaceParams) -> AnnotatedSample {
    let size = params.canvas;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0x9e37_79b9_7f4a_7c15);
    let noise = Normal::new(0.0, params.noise.max(1e-9)).expect("positive std");
    let px = 1.0 / params.scale;
    let brows = [params.brow(0), params.brow(1)];
    let nose = params.nose();
    let (outer, inner) = params.lips();
    let upper_lip: Vec<[f64; 2]> = outer[..7].iter().chain(inner[..5].iter().rev()).copied().collect();
    let lower_lip: Vec<[f64; 2]> = outer[6..]
        .iter()
        .chain([outer[0], inner[0]].iter())
        .chain(inner[5..].iter().rev())
        .chain([inner[4]].iter())
        .copied()
        .collect();
    let brow_width = 0.035;
    let skin = params.skin;
    let mut img = RgbImage::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let q = [x as f64 + 0.5, y as f64 + 0.5];
            let p = params.to_face(q);
            let t = q[1] / size as f64;
            let bg: Vec<f64> = (0..3)
                .map(|c| params.background[0][c] * (1.0 - t) + params.background[1][c] * t)
                .collect();
            let mut paint = Painter {
                rgb: [bg[0], bg[1], bg[2]],
                px,
            };
            let head_sdf = ellipse_sdf(p, &params.head);
            if head_sdf < 2.0 * px {
                // vertical shading across the face
                let k = 1.05 - 0.15 * ((p[1] - params.head.center[1]) / params.head.ry + 1.0) / 2.0;
                paint.over(head_sdf, shade(skin, k), 1.0);
                for brow in &brows {
                    paint.over(polyline_distance(p, brow) - brow_width, params.brow_color, 1.0);
                }
                for e in &params.eyes {
                    let sdf = ellipse_sdf(p, e);
                    if sdf < 3.0 * px {
                        paint.over(sdf - 0.012, shade(skin, 0.55), 1.0);
                        paint.over(sdf, [238.0, 236.0, 230.0], 1.0);
                        let iris = Ellipse {
                            center: e.center,
                            rx: params.iris_radius,
                            ry: params.iris_radius,
                        };
                        // clip the iris to the eye opening
                        let iris_sdf = ellipse_sdf(p, &iris).max(sdf);
                        paint.over(iris_sdf, params.iris_color, 1.0);
                        let pupil = Ellipse {
                            center: e.center,
                            rx: 0.4 * params.iris_radius,
                            ry: 0.4 * params.iris_radius,
                        };
                        paint.over(ellipse_sdf(p, &pupil).max(sdf), [10.0, 10.0, 12.0], 1.0);
                    }
                }
                let dark = shade(skin, 0.6);
                paint.over(polyline_distance(p, &nose[0..5]) - 0.012, shade(skin, 0.85), 0.8);
                paint.over(polyline_distance(p, &nose[5..10]) - 0.016, dark, 1.0);
                paint.over(segment_distance(p, nose[10], nose[5]) - 0.014, dark, 0.9);
                paint.over(segment_distance(p, nose[11], nose[9]) - 0.014, dark, 0.9);
                paint.over(polygon_sdf(p, &upper_lip), params.lip_color, 1.0);
                paint.over(polygon_sdf(p, &lower_lip), shade(params.lip_color, 1.08), 1.0);
                if params.mouth_open > 0.0 {
                    paint.over(polygon_sdf(p, &inner), [40.0, 12.0, 15.0], 1.0);
                }
                paint.over(polyline_distance(p, &inner[..5]) - 0.006, shade(params.lip_color, 0.5), 1.0);
            }
            let mut out = [0u8; 3];
            for c in 0..3 {
                out[c] = (paint.rgb[c] + noise.sample(&mut rng)).round().clamp(0.0, 255.0) as u8;
            }
            img.put_pixel(x, y, Rgb(out));
        }
    }
    let landmarks = params.landmarks();
    let layout = params.layout.layout();
    AnnotatedSample {
        image: img,
        tags: layout.tags.clone(),
        landmarks,
        source: format!("synthetic:{}", params.seed),
    }
}

/// `count` faces from consecutive seeds starting at `seed`.
pub fn synthetic_dataset(count: usize, seed: u64, cfg: &SynthConfig) -> Result<Vec<AnnotatedSample>> {
    cfg.validate()?;
    Ok((0..count as u64)
        .map(|i| generate_synthetic(&SyntheticFaceParams::sample(seed.wrapping_mul(1_000_003).wrapping_add(i), cfg)))
        .collect())
}

/// The synthetic layout truncated or kept to match `cfg.layout`.
pub fn synthetic_layout(cfg: &SynthConfig) -> LandmarkLayout {
    cfg.layout.layout()
}
