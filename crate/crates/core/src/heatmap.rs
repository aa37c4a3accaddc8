//! Heatmap encoding and decoding.
//!
//! Grid convention: a heatmap of height `H` and width `W` is stored row-major
//! (`[j][i]`). Pixel `(i, j)` sits at continuous coordinate `(i, j)`, `i`
//! along x/width and `j` along y/height, so decoded coordinates live in
//! `[0, W-1] x [0, H-1]`. A normalized image coordinate `u` maps to heatmap
//! units as `u * H - 0.5`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::landmarks::{LandmarkLayout, LandmarkSet, Subset};
use crate::tensor::{Real, Tensor, EPS_GUARD};

/// How logits become a distribution before taking the expectation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapNorm {
    /// `sigmoid(z) / sum(sigmoid(z))`, consistent with sigmoid cross-entropy.
    #[default]
    Sigmoid,
    Softmax,
}

pub(crate) fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^z)` without overflow.
pub(crate) fn softplus<T: Real>(z: T) -> T {
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

pub fn to_heatmap_units(normalized: f64, extent: usize) -> f64 {
    normalized * extent as f64 - 0.5
}

pub fn to_normalized(heatmap: f64, extent: usize) -> f64 {
    (heatmap + 0.5) / extent as f64
}

/// Ground-truth Gaussian heatmap for one landmark.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthHeatmap {
    /// `[H, H]`, unnormalized, peak 1 at the center.
    pub values: Tensor<f32>,
    pub sigma: f64,
    pub center: [f64; 2],
    /// Center lies outside the grid; the Gaussian is truncated.
    pub truncated: bool,
}

fn gaussian_into<T: Real>(out: &mut [T], size: usize, center: [f64; 2], sigma: f64) {
    let denom = 2.0 * sigma * sigma;
    for j in 0..size {
        let dy = j as f64 - center[1];
        for i in 0..size {
            let dx = i as f64 - center[0];
            out[j * size + i] = T::of((-(dx * dx + dy * dy) / denom).exp());
        }
    }
}

pub fn make_gt_heatmap(center: [f64; 2], size: usize, sigma: f64) -> Result<GroundTruthHeatmap> {
    if size < 2 {
        return Err(Error::Config(format!("heatmap size {size} < 2")));
    }
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("heatmap sigma {sigma} must be positive")));
    }
    let mut data = vec![0.0f32; size * size];
    gaussian_into(&mut data, size, center, sigma);
    let hi = (size - 1) as f64;
    let truncated = !(0.0..=hi).contains(&center[0]) || !(0.0..=hi).contains(&center[1]);
    Ok(GroundTruthHeatmap {
        values: Tensor::new([size, size], data)?,
        sigma,
        center,
        truncated,
    })
}

/// Targets for a whole batch: `centers` is `[N*L]` in heatmap units; returns
/// `[N, L, size, size]`.
pub fn gt_heatmap_batch<T: Real>(centers: &[[f64; 2]], batch: usize, size: usize, sigma: f64) -> Result<Tensor<T>> {
    if batch == 0 || centers.len() % batch != 0 {
        return Err(Error::shape("gt_heatmap_batch: centers not divisible by batch"));
    }
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("heatmap sigma {sigma} must be positive")));
    }
    let plane = size * size;
    let mut data = vec![T::zero(); centers.len() * plane];
    for (k, &c) in centers.iter().enumerate() {
        gaussian_into(&mut data[k * plane..(k + 1) * plane], size, c, sigma);
    }
    Tensor::new([batch, centers.len() / batch, size, size], data)
}

/// Pixel weight of the heatmap loss: squared distance to the ground-truth
/// coordinate scaled by `2 / (W^2 + H^2)`.
pub fn loss_weight(i: usize, j: usize, gt: [f64; 2], width: usize, height: usize) -> f64 {
    let dx = i as f64 - gt[0];
    let dy = j as f64 - gt[1];
    (dx * dx + dy * dy) * 2.0 / ((width * width + height * height) as f64)
}

struct Activations<T> {
    /// Unnormalized activations, row-major.
    act: Vec<T>,
    /// Column sums (marginal over y) and row sums (marginal over x).
    col: Vec<T>,
    row: Vec<T>,
    /// Normalizers built from `col` and `row` respectively.
    zx: T,
    zy: T,
}

/// Sum of a vector by mirror pairs, so reversing the input gives a
/// bit-identical result.
fn mirror_sum<T: Real>(v: &[T]) -> T {
    let n = v.len();
    let mut s = T::zero();
    for i in 0..n / 2 {
        s += v[i] + v[n - 1 - i];
    }
    if n % 2 == 1 {
        s += v[n / 2];
    }
    s
}

/// `sum_i v[i] * (i - c)` with `c = (n-1)/2`, paired so that a mirror
/// symmetric `v` gives exactly zero.
fn centered_moment<T: Real>(v: &[T]) -> T {
    let n = v.len();
    let c = T::of((n as f64 - 1.0) / 2.0);
    let mut s = T::zero();
    for i in 0..n / 2 {
        s += (v[n - 1 - i] - v[i]) * (c - T::of(i as f64));
    }
    s
}

fn activations<T: Real>(logits: &[T], height: usize, width: usize, norm: HeatmapNorm) -> Result<Activations<T>> {
    let act: Vec<T> = match norm {
        HeatmapNorm::Sigmoid => logits.iter().map(|&z| sigmoid(z)).collect(),
        HeatmapNorm::Softmax => {
            let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
            if !m.is_finite() {
                return Err(Error::NonFinite("soft_argmax"));
            }
            logits.iter().map(|&z| (z - m).exp()).collect()
        }
    };
    let mut col = vec![T::zero(); width];
    let mut row = vec![T::zero(); height];
    for j in 0..height {
        for i in 0..width {
            col[i] += act[j * width + i];
        }
    }
    for j in 0..height {
        row[j] = mirror_sum(&act[j * width..(j + 1) * width]);
    }
    let zx = mirror_sum(&col);
    let zy = mirror_sum(&row);
    let eps = T::of(EPS_GUARD);
    if !(zx > eps && zy > eps) {
        return Err(Error::NonFinite("soft_argmax: activation mass underflow"));
    }
    Ok(Activations { act, col, row, zx, zy })
}

/// Expected coordinate of one `[height, width]` heatmap. With `centered` the
/// result is relative to the grid center `((W-1)/2, (H-1)/2)`.
pub(crate) fn soft_argmax_one<T: Real>(
    logits: &[T],
    height: usize,
    width: usize,
    norm: HeatmapNorm,
    centered: bool,
) -> Result<[T; 2]> {
    let a = activations(logits, height, width, norm)?;
    let mut x = centered_moment(&a.col) / a.zx;
    let mut y = centered_moment(&a.row) / a.zy;
    if !centered {
        x += T::of((width as f64 - 1.0) / 2.0);
        y += T::of((height as f64 - 1.0) / 2.0);
    }
    Ok([x, y])
}

/// Gradient of the decoded coordinate w.r.t. the logits given upstream
/// gradient `(gx, gy)`, accumulated into `dlogits`.
pub(crate) fn soft_argmax_one_backward<T: Real>(
    logits: &[T],
    height: usize,
    width: usize,
    norm: HeatmapNorm,
    grad: [T; 2],
    dlogits: &mut [T],
) -> Result<()> {
    let a = activations(logits, height, width, norm)?;
    let cx = T::of((width as f64 - 1.0) / 2.0);
    let cy = T::of((height as f64 - 1.0) / 2.0);
    let mx = centered_moment(&a.col) / a.zx;
    let my = centered_moment(&a.row) / a.zy;
    for j in 0..height {
        let dy = T::of(j as f64) - cy - my;
        for i in 0..width {
            let dx = T::of(i as f64) - cx - mx;
            let k = j * width + i;
            // d coord / d act_k = (pos - coord) / Z
            let dact = grad[0] * dx / a.zx + grad[1] * dy / a.zy;
            let s = a.act[k];
            dlogits[k] += match norm {
                HeatmapNorm::Sigmoid => dact * s * (T::one() - s),
                // softmax: act = exp(z - m) and Z cancels the shift
                HeatmapNorm::Softmax => dact * s,
            };
        }
    }
    Ok(())
}

/// Decode one heatmap (`[H, W]`) to `(x, y)` in heatmap units.
pub fn soft_argmax<T: Real>(logits: &Tensor<T>, norm: HeatmapNorm) -> Result<[T; 2]> {
    let &[h, w] = logits.shape() else {
        return Err(Error::shape(format!("soft_argmax expects [H, W], got {:?}", logits.shape())));
    };
    soft_argmax_one(logits.data(), h, w, norm, false)
}

fn check_loss_shapes<T: Real>(logits: &Tensor<T>, target: &Tensor<T>, gt_coords: &Tensor<T>) -> Result<[usize; 4]> {
    let &[n, l, h, w] = logits.shape() else {
        return Err(Error::shape(format!("heatmap_loss expects [N,L,H,W], got {:?}", logits.shape())));
    };
    if target.shape() != logits.shape() {
        return Err(Error::shape(format!(
            "heatmap_loss target {:?} vs logits {:?}",
            target.shape(),
            logits.shape()
        )));
    }
    if gt_coords.shape() != [n, l, 2] {
        return Err(Error::shape(format!("heatmap_loss coords {:?}", gt_coords.shape())));
    }
    Ok([n, l, h, w])
}

/// Distance-weighted pixelwise sigmoid cross-entropy, averaged over the batch.
///
/// `target` holds ground-truth heatmaps in `[0, 1]`; `gt_coords` (`[N,L,2]`)
/// are the ground-truth positions in heatmap units that define the weights.
pub fn heatmap_loss<T: Real>(logits: &Tensor<T>, target: &Tensor<T>, gt_coords: &Tensor<T>) -> Result<T> {
    let [n, l, h, w] = check_loss_shapes(logits, target, gt_coords)?;
    let plane = h * w;
    let mut total = T::zero();
    for k in 0..n * l {
        let gt = [gt_coords.data()[2 * k].as_f64(), gt_coords.data()[2 * k + 1].as_f64()];
        let z = &logits.data()[k * plane..][..plane];
        let t = &target.data()[k * plane..][..plane];
        let mut acc = T::zero();
        for j in 0..h {
            for i in 0..w {
                let p = j * w + i;
                // softplus(z) - t*z == -(t ln s + (1-t) ln(1-s))
                let bce = softplus(z[p]) - t[p] * z[p];
                acc += bce * T::of(loss_weight(i, j, gt, w, h));
            }
        }
        total += acc;
    }
    let loss = total / T::of(n as f64);
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFinite("heatmap_loss"))
    }
}

pub(crate) fn heatmap_loss_backward<T: Real>(
    logits: &Tensor<T>,
    target: &Tensor<T>,
    gt_coords: &Tensor<T>,
    upstream: T,
) -> Result<Vec<T>> {
    let [n, l, h, w] = check_loss_shapes(logits, target, gt_coords)?;
    let plane = h * w;
    let scale = upstream / T::of(n as f64);
    let mut grad = vec![T::zero(); logits.len()];
    for k in 0..n * l {
        let gt = [gt_coords.data()[2 * k].as_f64(), gt_coords.data()[2 * k + 1].as_f64()];
        for j in 0..h {
            for i in 0..w {
                let p = k * plane + j * w + i;
                let d = sigmoid(logits.data()[p]) - target.data()[p];
                grad[p] = d * T::of(loss_weight(i, j, gt, w, h)) * scale;
            }
        }
    }
    Ok(grad)
}

/// Mean over batch and landmarks of the squared Euclidean distance.
pub fn l2_coord_loss<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<T> {
    if pred.shape() != gt.shape() || pred.shape().last() != Some(&2) {
        return Err(Error::shape(format!(
            "l2_coord_loss shapes {:?} vs {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let count = T::of((pred.len() / 2).max(1) as f64);
    let sum: T = pred.data().iter().zip(gt.data()).map(|(&p, &g)| (p - g) * (p - g)).sum();
    Ok(sum / count)
}

/// Normalized mean error in percent: mean point-to-point distance over the
/// subset divided by the inter-pupil distance of the ground truth.
pub fn nme(pred: &LandmarkSet, gt: &LandmarkSet, layout: &LandmarkLayout, subset: Subset) -> Result<f64> {
    let distances = point_errors(pred, gt, layout)?;
    let idx = layout.indices(subset);
    if idx.is_empty() {
        return Err(Error::Data(format!("layout {} has no {subset:?} points", layout.name)));
    }
    Ok(idx.iter().map(|&i| distances[i]).sum::<f64>() / idx.len() as f64)
}

/// Per-landmark distance divided by inter-pupil distance, in percent.
pub fn point_errors(pred: &LandmarkSet, gt: &LandmarkSet, layout: &LandmarkLayout) -> Result<Vec<f64>> {
    if pred.len() != gt.len() || gt.len() != layout.len() {
        return Err(Error::Data(format!(
            "landmark count mismatch: pred {}, gt {}, layout {}",
            pred.len(),
            gt.len(),
            layout.len()
        )));
    }
    let (l, r) = layout.pupils(gt)?;
    let ipd = (l[0] - r[0]).hypot(l[1] - r[1]);
    if !(ipd > 0.0) {
        return Err(Error::Degenerate("inter-pupil distance is zero".into()));
    }
    Ok(pred
        .points
        .iter()
        .zip(&gt.points)
        .map(|(p, g)| 100.0 * (p[0] - g[0]).hypot(p[1] - g[1]) / ipd)
        .collect())
}
