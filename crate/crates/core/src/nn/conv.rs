//! Grouped 2-D convolution over NCHW tensors.
//!
//! Three execution paths share one contract: pointwise (1x1, stride 1, no
//! padding) runs straight through GEMM, depthwise (one input and one output
//! channel per group) is a direct loop, and everything else goes through
//! im2col + GEMM. Accumulation order is fixed, so results are bit-identical
//! run to run.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, Real, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Activation {
    #[default]
    None,
    Relu6,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub bias: bool,
    pub activation: Activation,
}

impl ConvSpec {
    /// Square `kernel x kernel` convolution, stride 1, "same" padding, one
    /// group, with bias and no activation.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: kernel / 2,
            groups: 1,
            bias: true,
            activation: Activation::None,
        }
    }

    pub fn depthwise(channels: usize, kernel: usize) -> Self {
        ConvSpec::new(channels, channels, kernel).with_groups(channels)
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.groups == self.out_channels
    }

    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_per_group(), self.kernel, self.kernel]
    }

    pub fn weight_len(&self) -> usize {
        self.weight_shape().iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.kernel == 0 || self.stride == 0 {
            return Err(Error::Config(format!("zero kernel/stride/groups in {self:?}")));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(Error::shape(format!(
                "channels {}->{} not divisible by groups {}",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        Ok(())
    }

    pub fn output_size(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let padded_h = height + 2 * self.padding;
        let padded_w = width + 2 * self.padding;
        if padded_h < self.kernel || padded_w < self.kernel {
            return Err(Error::shape(format!(
                "input {height}x{width} with padding {} smaller than kernel {}",
                self.padding, self.kernel
            )));
        }
        Ok((
            (padded_h - self.kernel) / self.stride + 1,
            (padded_w - self.kernel) / self.stride + 1,
        ))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

struct Geometry {
    batch: usize,
    height: usize,
    width: usize,
    out_h: usize,
    out_w: usize,
}

fn geometry<T: Real>(x: &Tensor<T>, w: &Tensor<T>, spec: &ConvSpec) -> Result<Geometry> {
    spec.validate()?;
    let &[batch, channels, height, width] = x.shape() else {
        return Err(Error::shape(format!("conv2d input must be NCHW, got {:?}", x.shape())));
    };
    if channels != spec.in_channels {
        return Err(Error::shape(format!(
            "conv2d expects {} input channels, got {channels}",
            spec.in_channels
        )));
    }
    if w.shape() != spec.weight_shape() {
        return Err(Error::shape(format!(
            "conv2d weight shape {:?}, expected {:?}",
            w.shape(),
            spec.weight_shape()
        )));
    }
    let (out_h, out_w) = spec.output_size(height, width)?;
    Ok(Geometry {
        batch,
        height,
        width,
        out_h,
        out_w,
    })
}

/// Unfold one group of one sample into a `(cin_g * k * k) x (out_h * out_w)`
/// column matrix.
fn im2col<T: Real>(src: &[T], cin_g: usize, g: &Geometry, spec: &ConvSpec, cols: &mut [T]) {
    let k = spec.kernel;
    let plane = g.out_h * g.out_w;
    for c in 0..cin_g {
        let channel = &src[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * plane..][..plane];
                for oy in 0..g.out_h {
                    let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                    let dst = &mut row[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let line = &channel[iy as usize * g.width..][..g.width];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                        *d = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            line[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], cin_g: usize, g: &Geometry, spec: &ConvSpec, dst: &mut [T]) {
    let k = spec.kernel;
    let plane = g.out_h * g.out_w;
    for c in 0..cin_g {
        let channel = &mut dst[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * plane..][..plane];
                for oy in 0..g.out_h {
                    let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let line = &mut channel[iy as usize * g.width..][..g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            line[ix as usize] += row[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `ox` whose tap `kx` lands inside a row of `width`.
fn valid_columns(kx: usize, width: usize, out_w: usize, spec: &ConvSpec) -> std::ops::Range<usize> {
    let (s, p) = (spec.stride, spec.padding);
    let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
    let hi = if width + p > kx { ((width + p - kx - 1) / s + 1).min(out_w) } else { 0 };
    lo..hi.max(lo)
}

fn valid_row(oy: usize, ky: usize, height: usize, spec: &ConvSpec) -> Option<usize> {
    let iy = (oy * spec.stride + ky).checked_sub(spec.padding)?;
    (iy < height).then_some(iy)
}

fn depthwise_forward<T: Real>(src: &[T], kernel: &[T], g: &Geometry, spec: &ConvSpec, out: &mut [T]) {
    let (k, s, p) = (spec.kernel, spec.stride, spec.padding);
    let cols: Vec<_> = (0..k).map(|kx| valid_columns(kx, g.width, g.out_w, spec)).collect();
    for oy in 0..g.out_h {
        let dst = &mut out[oy * g.out_w..(oy + 1) * g.out_w];
        dst.fill(T::zero());
        for ky in 0..k {
            let Some(iy) = valid_row(oy, ky, g.height, spec) else { continue };
            let line = &src[iy * g.width..(iy + 1) * g.width];
            for (kx, range) in cols.iter().enumerate() {
                let wv = kernel[ky * k + kx];
                if range.is_empty() {
                    continue;
                }
                let first = range.start * s + kx - p;
                if s == 1 {
                    let n = range.len();
                    for (d, &v) in dst[range.clone()].iter_mut().zip(&line[first..first + n]) {
                        *d += wv * v;
                    }
                } else {
                    for (j, ox) in range.clone().enumerate() {
                        dst[ox] += wv * line[first + j * s];
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn depthwise_backward<T: Real>(
    src: &[T],
    kernel: &[T],
    dout: &[T],
    g: &Geometry,
    spec: &ConvSpec,
    dsrc: Option<&mut [T]>,
    dkernel: Option<&mut [T]>,
) {
    let (k, s, p) = (spec.kernel, spec.stride, spec.padding);
    let cols: Vec<_> = (0..k).map(|kx| valid_columns(kx, g.width, g.out_w, spec)).collect();
    let mut dsrc = dsrc;
    let mut dkernel = dkernel;
    let mut gathered = vec![T::zero(); g.out_w];
    for oy in 0..g.out_h {
        let go = &dout[oy * g.out_w..(oy + 1) * g.out_w];
        for ky in 0..k {
            let Some(iy) = valid_row(oy, ky, g.height, spec) else { continue };
            for (kx, range) in cols.iter().enumerate() {
                if range.is_empty() {
                    continue;
                }
                let first = iy * g.width + range.start * s + kx - p;
                let n = range.len();
                let gr = &go[range.clone()];
                if let Some(dk) = dkernel.as_deref_mut() {
                    let acc = if s == 1 {
                        dot(gr, &src[first..first + n])
                    } else {
                        for (j, v) in gathered[..n].iter_mut().enumerate() {
                            *v = src[first + j * s];
                        }
                        dot(gr, &gathered[..n])
                    };
                    dk[ky * k + kx] += acc;
                }
                if let Some(ds) = dsrc.as_deref_mut() {
                    let wv = kernel[ky * k + kx];
                    if s == 1 {
                        for (d, &gv) in ds[first..first + n].iter_mut().zip(gr) {
                            *d += gv * wv;
                        }
                    } else {
                        for (j, &gv) in gr.iter().enumerate() {
                            ds[first + j * s] += gv * wv;
                        }
                    }
                }
            }
        }
    }
}

/// Linear convolution; `spec.activation` is applied by the caller.
pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let g = geometry(x, w, spec)?;
    if let Some(b) = b {
        if b.shape() != [spec.out_channels] {
            return Err(Error::shape(format!("conv2d bias shape {:?}", b.shape())));
        }
    }
    let (cin_g, cout_g) = (spec.in_per_group(), spec.out_per_group());
    let in_plane = g.height * g.width;
    let plane = g.out_h * g.out_w;
    let kdim = cin_g * spec.kernel * spec.kernel;
    let mut out = vec![T::zero(); g.batch * spec.out_channels * plane];
    let mut cols = if spec.is_pointwise() || spec.is_depthwise() {
        Vec::new()
    } else {
        vec![T::zero(); kdim * plane]
    };
    for n in 0..g.batch {
        for grp in 0..spec.groups {
            let src = &x.data()[(n * spec.in_channels + grp * cin_g) * in_plane..][..cin_g * in_plane];
            let wg = &w.data()[grp * cout_g * kdim..][..cout_g * kdim];
            let dst = &mut out[(n * spec.out_channels + grp * cout_g) * plane..][..cout_g * plane];
            if spec.is_depthwise() {
                depthwise_forward(src, wg, &g, spec, dst);
            } else if spec.is_pointwise() {
                T::gemm(false, false, cout_g, plane, kdim, T::one(), wg, src, T::zero(), dst);
            } else {
                im2col(src, cin_g, &g, spec, &mut cols);
                T::gemm(false, false, cout_g, plane, kdim, T::one(), wg, &cols, T::zero(), dst);
            }
        }
        if let Some(b) = b {
            for (c, &bias) in b.data().iter().enumerate() {
                let dst = &mut out[(n * spec.out_channels + c) * plane..][..plane];
                dst.iter_mut().for_each(|v| *v += bias);
            }
        }
    }
    Tensor::new([g.batch, spec.out_channels, g.out_h, g.out_w], out)
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: &ConvSpec,
    dout: &[T],
    need: (bool, bool, bool),
) -> Result<ConvGrads<T>> {
    let g = geometry(x, w, spec)?;
    let (cin_g, cout_g) = (spec.in_per_group(), spec.out_per_group());
    let in_plane = g.height * g.width;
    let plane = g.out_h * g.out_w;
    let kdim = cin_g * spec.kernel * spec.kernel;
    let (need_dx, need_dw, need_db) = need;
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    let db = need_db.then(|| {
        let mut db = vec![T::zero(); spec.out_channels];
        for n in 0..g.batch {
            for (c, acc) in db.iter_mut().enumerate() {
                *acc += dout[(n * spec.out_channels + c) * plane..][..plane].iter().copied().sum::<T>();
            }
        }
        db
    });
    let general = !(spec.is_pointwise() || spec.is_depthwise());
    let mut cols = if general { vec![T::zero(); kdim * plane] } else { Vec::new() };
    let mut dcols = if general && need_dx { vec![T::zero(); kdim * plane] } else { Vec::new() };
    for n in 0..g.batch {
        for grp in 0..spec.groups {
            let src_at = (n * spec.in_channels + grp * cin_g) * in_plane;
            let src = &x.data()[src_at..][..cin_g * in_plane];
            let w_at = grp * cout_g * kdim;
            let wg = &w.data()[w_at..][..cout_g * kdim];
            let go = &dout[(n * spec.out_channels + grp * cout_g) * plane..][..cout_g * plane];
            let dsrc = dx.as_mut().map(|d| &mut d[src_at..src_at + cin_g * in_plane]);
            let dwg = dw.as_mut().map(|d| &mut d[w_at..w_at + cout_g * kdim]);
            if spec.is_depthwise() {
                depthwise_backward(src, wg, go, &g, spec, dsrc, dwg);
            } else if spec.is_pointwise() {
                if let Some(dwg) = dwg {
                    T::gemm(false, true, cout_g, kdim, plane, T::one(), go, src, T::one(), dwg);
                }
                if let Some(dsrc) = dsrc {
                    T::gemm(true, false, kdim, plane, cout_g, T::one(), wg, go, T::one(), dsrc);
                }
            } else {
                if let Some(dwg) = dwg {
                    im2col(src, cin_g, &g, spec, &mut cols);
                    T::gemm(false, true, cout_g, kdim, plane, T::one(), go, &cols, T::one(), dwg);
                }
                if let Some(dsrc) = dsrc {
                    T::gemm(true, false, kdim, plane, cout_g, T::one(), wg, go, T::zero(), &mut dcols);
                    col2im(&dcols, cin_g, &g, spec, dsrc);
                }
            }
        }
    }
    Ok(ConvGrads { dx, dw, db })
}
