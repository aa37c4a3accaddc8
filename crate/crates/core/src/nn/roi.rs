//! RoI align with one bilinear sample per output cell.
//!
//! Boxes are given in normalized coordinates: `0` is the left/top edge of the
//! first feature cell and `1` the right/bottom edge of the last. Feature cell
//! `i` has its center at normalized `(i + 0.5) / extent`, i.e. continuous
//! feature coordinate `i`. Samples falling past the outermost cell centers
//! reuse the edge cells.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl RoiBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        RoiBox { x0, y0, x1, y1 }
    }

    /// Square box of side `side` centered at `(cx, cy)`.
    pub fn centered(cx: f64, cy: f64, side: f64) -> Self {
        let h = side / 2.0;
        RoiBox::new(cx - h, cy - h, cx + h, cy + h)
    }

    /// Intersection with the unit square.
    pub fn clamped(&self) -> Self {
        RoiBox::new(
            self.x0.clamp(0.0, 1.0),
            self.y0.clamp(0.0, 1.0),
            self.x1.clamp(0.0, 1.0),
            self.y1.clamp(0.0, 1.0),
        )
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    /// Normalized position of the center of output cell `k` along x.
    pub fn sample_x(&self, k: usize, out_size: usize) -> f64 {
        self.x0 + (k as f64 + 0.5) / out_size as f64 * self.width()
    }

    pub fn sample_y(&self, k: usize, out_size: usize) -> f64 {
        self.y0 + (k as f64 + 0.5) / out_size as f64 * self.height()
    }
}

/// Bilinear support of one sample: four flat offsets inside a feature plane
/// and their weights.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap<T> {
    pub idx: [usize; 4],
    pub w: [T; 4],
}

fn axis_support(normalized: f64, extent: usize) -> (usize, usize, f64) {
    let pos = (normalized * extent as f64 - 0.5).clamp(0.0, (extent - 1) as f64);
    let lo = (pos.floor() as usize).min(extent - 1);
    let hi = (lo + 1).min(extent - 1);
    (lo, hi, pos - lo as f64)
}

pub(crate) fn bilinear_tap<T: Real>(x: f64, y: f64, height: usize, width: usize) -> Tap<T> {
    let (x0, x1, wx) = axis_support(x, width);
    let (y0, y1, wy) = axis_support(y, height);
    Tap {
        idx: [y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1],
        w: [
            T::of((1.0 - wy) * (1.0 - wx)),
            T::of((1.0 - wy) * wx),
            T::of(wy * (1.0 - wx)),
            T::of(wy * wx),
        ],
    }
}

/// Precomputed sampling for a batch of boxes over one feature tensor.
#[derive(Clone, Debug)]
pub(crate) struct RoiPlan<T> {
    pub batch: usize,
    pub channels: usize,
    pub plane: usize,
    pub boxes_per_sample: usize,
    pub out_size: usize,
    /// `batch * boxes_per_sample * out_size^2` taps.
    pub taps: Vec<Tap<T>>,
}

impl<T: Real> RoiPlan<T> {
    pub fn new(feature_shape: &[usize], boxes: &[RoiBox], out_size: usize) -> Result<Self> {
        let &[batch, channels, height, width] = feature_shape else {
            return Err(Error::shape(format!("roi_align expects NCHW features, got {feature_shape:?}")));
        };
        if out_size == 0 || height == 0 || width == 0 {
            return Err(Error::shape("roi_align with empty features or output"));
        }
        if batch == 0 || boxes.len() % batch != 0 {
            return Err(Error::shape(format!("{} boxes for batch of {batch}", boxes.len())));
        }
        let mut taps = Vec::with_capacity(boxes.len() * out_size * out_size);
        for roi in boxes {
            let roi = roi.clamped();
            if !(roi.width() > 0.0 && roi.height() > 0.0) {
                return Err(Error::Degenerate(format!("RoI box {roi:?} has zero area")));
            }
            for oy in 0..out_size {
                let y = roi.sample_y(oy, out_size);
                for ox in 0..out_size {
                    taps.push(bilinear_tap(roi.sample_x(ox, out_size), y, height, width));
                }
            }
        }
        Ok(RoiPlan {
            batch,
            channels,
            plane: height * width,
            boxes_per_sample: boxes.len() / batch,
            out_size,
            taps,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [
            self.batch,
            self.boxes_per_sample * self.channels,
            self.out_size,
            self.out_size,
        ]
    }

    /// Output layout: crop of box `l` occupies channels `l*C .. (l+1)*C`.
    pub fn forward(&self, features: &[T]) -> Vec<T> {
        let cells = self.out_size * self.out_size;
        let mut out = Vec::with_capacity(self.batch * self.boxes_per_sample * self.channels * cells);
        for n in 0..self.batch {
            for l in 0..self.boxes_per_sample {
                let taps = &self.taps[(n * self.boxes_per_sample + l) * cells..][..cells];
                for c in 0..self.channels {
                    let plane = &features[(n * self.channels + c) * self.plane..][..self.plane];
                    out.extend(taps.iter().map(|t| {
                        t.w[0] * plane[t.idx[0]]
                            + t.w[1] * plane[t.idx[1]]
                            + t.w[2] * plane[t.idx[2]]
                            + t.w[3] * plane[t.idx[3]]
                    }));
                }
            }
        }
        out
    }

    pub fn backward(&self, dout: &[T]) -> Vec<T> {
        let cells = self.out_size * self.out_size;
        let mut df = vec![T::zero(); self.batch * self.channels * self.plane];
        let mut at = 0;
        for n in 0..self.batch {
            for l in 0..self.boxes_per_sample {
                let taps = &self.taps[(n * self.boxes_per_sample + l) * cells..][..cells];
                for c in 0..self.channels {
                    let plane = &mut df[(n * self.channels + c) * self.plane..][..self.plane];
                    for t in taps {
                        let g = dout[at];
                        at += 1;
                        for k in 0..4 {
                            plane[t.idx[k]] += t.w[k] * g;
                        }
                    }
                }
            }
        }
        df
    }
}

/// Crop one box out of a single-face feature map (`[C,H,W]` or `[1,C,H,W]`),
/// returning `[C, out_size, out_size]`.
pub fn roi_align<T: Real>(features: &Tensor<T>, roi: RoiBox, out_size: usize) -> Result<Tensor<T>> {
    let shape: Vec<usize> = match *features.shape() {
        [c, h, w] => vec![1, c, h, w],
        [1, c, h, w] => vec![1, c, h, w],
        _ => {
            return Err(Error::shape(format!(
                "roi_align expects one face's features, got {:?}",
                features.shape()
            )))
        }
    };
    let plan = RoiPlan::<T>::new(&shape, &[roi], out_size)?;
    Tensor::new([shape[1], out_size, out_size], plan.forward(features.data()))
}

/// Crop every box for every sample: `boxes` holds `boxes_per_sample`
/// consecutive boxes per batch entry; output is `[N, L*C, S, S]`.
pub fn roi_align_batched<T: Real>(features: &Tensor<T>, boxes: &[RoiBox], out_size: usize) -> Result<Tensor<T>> {
    let plan = RoiPlan::<T>::new(features.shape(), boxes, out_size)?;
    Tensor::new(plan.output_shape(), plan.forward(features.data()))
}
