//! Forward and backward kernels for the layer set used by the network.
//!
//! Every kernel is a pure function of its arguments; [`crate::graph::Tape`]
//! records them for reverse-mode differentiation.

use crate::error::{shape_err, Result};
use crate::tensor::{Real, Tensor4};

/// Convolution geometry. Padding is symmetric per axis: `pad[0]` rows on top
/// and bottom, `pad[1]` columns left and right.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: [usize; 2],
}

impl ConvGeom {
    pub fn new(stride: usize, pad: [usize; 2]) -> Self {
        Self { stride, pad }
    }

    /// Stride-1 padding that keeps spatial dims for an odd kernel.
    pub fn same(kh: usize, kw: usize) -> Self {
        Self { stride: 1, pad: [(kh - 1) / 2, (kw - 1) / 2] }
    }

    pub fn out_dim(&self, input: usize, kernel: usize, pad: usize) -> Option<usize> {
        let padded = input + 2 * pad;
        if self.stride == 0 || padded < kernel {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }
}

fn conv_out_dims<T: Real>(x: &Tensor4<T>, w: &Tensor4<T>, g: ConvGeom) -> Result<[usize; 4]> {
    let [n, c, h, wd] = x.dims();
    let [co, ci, kh, kw] = w.dims();
    if ci != c {
        return shape_err(format!(
            "conv2d: weight expects {ci} input channels, input has {c} (input {:?}, weight {:?})",
            x.dims(),
            w.dims()
        ));
    }
    if g.stride == 0 {
        return shape_err("conv2d: stride must be positive");
    }
    let oh = g.out_dim(h, kh, g.pad[0]);
    let ow = g.out_dim(wd, kw, g.pad[1]);
    match (oh, ow) {
        (Some(oh), Some(ow)) if oh > 0 && ow > 0 && co > 0 && n > 0 => Ok([n, co, oh, ow]),
        _ => shape_err(format!(
            "conv2d: zero-sized output for input {:?}, kernel {kh}x{kw}, stride {}, pad {:?}",
            x.dims(),
            g.stride,
            g.pad
        )),
    }
}

fn is_pointwise<T: Real>(w: &Tensor4<T>, g: ConvGeom) -> bool {
    w.height() == 1 && w.width() == 1 && g.stride == 1 && g.pad == [0, 0]
}

/// Unfolds one batch item into a `(c·kh·kw) × (oh·ow)` column matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    src: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    g: ConvGeom,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let p = oh * ow;
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &mut cols[((ci * kh + ky) * kw + kx) * p..][..p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad[0] as isize;
                    let out = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let line = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad[1] as isize;
                        *o = if ix < 0 || ix >= w as isize { T::zero() } else { line[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    g: ConvGeom,
    oh: usize,
    ow: usize,
    dst: &mut [T],
) {
    let p = oh * ow;
    for ci in 0..c {
        let plane = &mut dst[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &cols[((ci * kh + ky) * kw + kx) * p..][..p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad[0] as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad[1] as isize;
                        if ix >= 0 && ix < w as isize {
                            line[ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Bias-free 2-D cross-correlation. `weight` is laid out `(out, in, kh, kw)`.
pub fn conv2d<T: Real>(x: &Tensor4<T>, weight: &Tensor4<T>, g: ConvGeom) -> Result<Tensor4<T>> {
    let out_dims = conv_out_dims(x, weight, g)?;
    let [n, c, h, w] = x.dims();
    let [co, _, kh, kw] = weight.dims();
    let [_, _, oh, ow] = out_dims;
    let (p, r) = (oh * ow, c * kh * kw);
    let mut out = Tensor4::zeros(out_dims);
    let pointwise = is_pointwise(weight, g);
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); r * p] };
    for b in 0..n {
        let src = &x.data()[b * c * h * w..(b + 1) * c * h * w];
        let dst = &mut out.data_mut()[b * co * p..(b + 1) * co * p];
        if pointwise {
            T::gemm(co, r, p, weight.data(), false, src, false, T::zero(), dst);
        } else {
            im2col(src, c, h, w, kh, kw, g, oh, ow, &mut cols);
            T::gemm(co, r, p, weight.data(), false, &cols, false, T::zero(), dst);
        }
    }
    debug_assert!(!x.is_finite() || !weight.is_finite() || out.is_finite());
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to its input and weight.
pub fn conv2d_backward<T: Real>(
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    g: ConvGeom,
    grad_out: &[T],
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let [n, c, h, w] = x.dims();
    let [co, _, kh, kw] = weight.dims();
    let oh = g.out_dim(h, kh, g.pad[0]).unwrap();
    let ow = g.out_dim(w, kw, g.pad[1]).unwrap();
    let (p, r) = (oh * ow, c * kh * kw);
    let pointwise = is_pointwise(weight, g);
    let mut gx = need_input.then(|| vec![T::zero(); x.len()]);
    let mut gw = need_weight.then(|| vec![T::zero(); weight.len()]);
    let mut cols = vec![T::zero(); if pointwise { 0 } else { r * p }];
    let mut gcols = vec![T::zero(); if pointwise || !need_input { 0 } else { r * p }];
    for b in 0..n {
        let src = &x.data()[b * c * h * w..(b + 1) * c * h * w];
        let gy = &grad_out[b * co * p..(b + 1) * co * p];
        if let Some(gw) = gw.as_mut() {
            let cols_ref = if pointwise {
                src
            } else {
                im2col(src, c, h, w, kh, kw, g, oh, ow, &mut cols);
                &cols
            };
            T::gemm(co, p, r, gy, false, cols_ref, true, T::one(), gw);
        }
        if let Some(gx) = gx.as_mut() {
            let dst = &mut gx[b * c * h * w..(b + 1) * c * h * w];
            if pointwise {
                T::gemm(r, co, p, weight.data(), true, gy, false, T::one(), dst);
            } else {
                T::gemm(r, co, p, weight.data(), true, gy, false, T::zero(), &mut gcols);
                col2im(&gcols, c, h, w, kh, kw, g, oh, ow, dst);
            }
        }
    }
    (gx, gw)
}

/// Per-channel statistics saved by a training-mode batch-norm forward pass.
#[derive(Clone, Debug)]
pub struct BnSaved<T> {
    pub mean: Vec<T>,
    /// Biased batch variance.
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
}

fn check_channels<T: Real>(x: &Tensor4<T>, scale: &[T], shift: &[T], op: &str) -> Result<()> {
    if scale.len() != x.channels() || shift.len() != x.channels() {
        return shape_err(format!(
            "{op}: {} scale / {} shift values for {} channels",
            scale.len(),
            shift.len(),
            x.channels()
        ));
    }
    Ok(())
}

/// Training-mode batch normalisation over (batch, row, col) per channel.
pub fn batch_norm_train<T: Real>(
    x: &Tensor4<T>,
    scale: &[T],
    shift: &[T],
    eps: f64,
) -> Result<(Tensor4<T>, BnSaved<T>)> {
    check_channels(x, scale, shift, "batch_norm")?;
    let [n, c, h, w] = x.dims();
    let hw = h * w;
    let count = (n * hw) as f64;
    let mut saved = BnSaved { mean: vec![T::zero(); c], var: vec![T::zero(); c], inv_std: vec![T::zero(); c] };
    let mut out = Tensor4::zeros(x.dims());
    for ch in 0..c {
        let mut sum = 0.0f64;
        for b in 0..n {
            sum += x.plane(b, ch).iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let mean = sum / count;
        let mut sq = 0.0f64;
        for b in 0..n {
            sq += x.plane(b, ch).iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>();
        }
        let var = sq / count;
        let inv_std = 1.0 / (var + eps).sqrt();
        saved.mean[ch] = T::of(mean);
        saved.var[ch] = T::of(var);
        saved.inv_std[ch] = T::of(inv_std);
        let (m, s, g, beta) = (T::of(mean), T::of(inv_std), scale[ch], shift[ch]);
        for b in 0..n {
            let o = (b * c + ch) * hw;
            let src = &x.data()[o..o + hw];
            for (d, &v) in out.data_mut()[o..o + hw].iter_mut().zip(src) {
                *d = (v - m) * s * g + beta;
            }
        }
    }
    Ok((out, saved))
}

/// Inference-mode batch normalisation using running statistics.
pub fn batch_norm_infer<T: Real>(
    x: &Tensor4<T>,
    scale: &[T],
    shift: &[T],
    mean: &[T],
    var: &[T],
    eps: f64,
) -> Result<Tensor4<T>> {
    check_channels(x, scale, shift, "batch_norm")?;
    check_channels(x, mean, var, "batch_norm running stats")?;
    let [n, c, h, w] = x.dims();
    let hw = h * w;
    let mut out = Tensor4::zeros(x.dims());
    for ch in 0..c {
        let s = T::of(1.0 / (var[ch].as_f64() + eps).sqrt());
        let (m, g, beta) = (mean[ch], scale[ch], shift[ch]);
        for b in 0..n {
            let o = (b * c + ch) * hw;
            for i in o..o + hw {
                out.data_mut()[i] = (x.data()[i] - m) * s * g + beta;
            }
        }
    }
    Ok(out)
}

/// Backward of training-mode batch norm: returns (dx, dscale, dshift).
pub fn batch_norm_train_backward<T: Real>(
    x: &Tensor4<T>,
    scale: &[T],
    saved: &BnSaved<T>,
    grad_out: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let [n, c, h, w] = x.dims();
    let hw = h * w;
    let count = (n * hw) as f64;
    let mut gx = vec![T::zero(); x.len()];
    let mut gscale = vec![T::zero(); c];
    let mut gshift = vec![T::zero(); c];
    for ch in 0..c {
        let (m, s) = (saved.mean[ch].as_f64(), saved.inv_std[ch].as_f64());
        let (mut sum_dy, mut sum_dy_xhat) = (0.0f64, 0.0f64);
        for b in 0..n {
            let o = (b * c + ch) * hw;
            for (dy, xv) in grad_out[o..o + hw].iter().zip(&x.data()[o..o + hw]) {
                let dy = dy.as_f64();
                sum_dy += dy;
                sum_dy_xhat += dy * (xv.as_f64() - m) * s;
            }
        }
        gscale[ch] = T::of(sum_dy_xhat);
        gshift[ch] = T::of(sum_dy);
        let k = scale[ch].as_f64() * s / count;
        for b in 0..n {
            let o = (b * c + ch) * hw;
            for i in o..o + hw {
                let xhat = (x.data()[i].as_f64() - m) * s;
                gx[i] = T::of(k * (count * grad_out[i].as_f64() - sum_dy - xhat * sum_dy_xhat));
            }
        }
    }
    (gx, gscale, gshift)
}

/// Backward of inference-mode batch norm: returns (dx, dscale, dshift).
pub fn batch_norm_infer_backward<T: Real>(
    x: &Tensor4<T>,
    scale: &[T],
    mean: &[T],
    var: &[T],
    eps: f64,
    grad_out: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let [n, c, h, w] = x.dims();
    let hw = h * w;
    let mut gx = vec![T::zero(); x.len()];
    let mut gscale = vec![T::zero(); c];
    let mut gshift = vec![T::zero(); c];
    for ch in 0..c {
        let s = T::of(1.0 / (var[ch].as_f64() + eps).sqrt());
        for b in 0..n {
            let o = (b * c + ch) * hw;
            for i in o..o + hw {
                let dy = grad_out[i];
                gshift[ch] += dy;
                gscale[ch] += dy * (x.data()[i] - mean[ch]) * s;
                gx[i] = dy * scale[ch] * s;
            }
        }
    }
    (gx, gscale, gshift)
}

pub fn relu<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn sigmoid_scalar<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(sigmoid_scalar)
}

pub fn add<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    if a.dims() != b.dims() {
        return shape_err(format!("elementwise_add: {:?} vs {:?}", a.dims(), b.dims()));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor4::new(a.dims(), data)
}

/// Source index pair and interpolation weight for one output coordinate of a
/// 2x half-pixel-centre upsample.
#[inline]
fn upsample_taps(o: usize, len: usize) -> (usize, usize, f64) {
    let src = ((o as f64 + 0.5) * 0.5 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, src - i0 as f64)
}

/// Bilinear 2x upsampling, align-corners = false.
pub fn bilinear_upsample2x<T: Real>(x: &Tensor4<T>) -> Result<Tensor4<T>> {
    let [n, c, h, w] = x.dims();
    if h == 0 || w == 0 {
        return shape_err(format!("bilinear_upsample2x: empty spatial dims {:?}", x.dims()));
    }
    let (oh, ow) = (2 * h, 2 * w);
    let rows: Vec<_> = (0..oh).map(|o| upsample_taps(o, h)).collect();
    let cols: Vec<_> = (0..ow).map(|o| upsample_taps(o, w)).collect();
    let mut out = Tensor4::zeros([n, c, oh, ow]);
    for bc in 0..n * c {
        let src = &x.data()[bc * h * w..(bc + 1) * h * w];
        let dst = &mut out.data_mut()[bc * oh * ow..(bc + 1) * oh * ow];
        for (oy, &(y0, y1, ly)) in rows.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in cols.iter().enumerate() {
                let (ly, lx) = (T::of(ly), T::of(lx));
                let top = src[y0 * w + x0] * (T::one() - lx) + src[y0 * w + x1] * lx;
                let bot = src[y1 * w + x0] * (T::one() - lx) + src[y1 * w + x1] * lx;
                dst[oy * ow + ox] = top * (T::one() - ly) + bot * ly;
            }
        }
    }
    Ok(out)
}

pub fn bilinear_upsample2x_backward<T: Real>(dims: [usize; 4], grad_out: &[T]) -> Vec<T> {
    let [n, c, h, w] = dims;
    let (oh, ow) = (2 * h, 2 * w);
    let rows: Vec<_> = (0..oh).map(|o| upsample_taps(o, h)).collect();
    let cols: Vec<_> = (0..ow).map(|o| upsample_taps(o, w)).collect();
    let mut gx = vec![T::zero(); n * c * h * w];
    for bc in 0..n * c {
        let gy = &grad_out[bc * oh * ow..(bc + 1) * oh * ow];
        let dst = &mut gx[bc * h * w..(bc + 1) * h * w];
        for (oy, &(y0, y1, ly)) in rows.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in cols.iter().enumerate() {
                let g = gy[oy * ow + ox];
                let (ly, lx) = (T::of(ly), T::of(lx));
                dst[y0 * w + x0] += g * (T::one() - ly) * (T::one() - lx);
                dst[y0 * w + x1] += g * (T::one() - ly) * lx;
                dst[y1 * w + x0] += g * ly * (T::one() - lx);
                dst[y1 * w + x1] += g * ly * lx;
            }
        }
    }
    gx
}

/// 2x2 average pooling with stride 2; trailing odd rows/cols are dropped.
pub fn avg_downsample2x<T: Real>(x: &Tensor4<T>) -> Result<Tensor4<T>> {
    let [n, c, h, w] = x.dims();
    if h < 2 || w < 2 {
        return shape_err(format!("avg_downsample2x: input {:?} smaller than 2x2", x.dims()));
    }
    let (oh, ow) = (h / 2, w / 2);
    let q = T::of(0.25);
    let out = Tensor4::from_fn([n, c, oh, ow], |[b, ch, y, xx]| {
        (x.at(b, ch, 2 * y, 2 * xx)
            + x.at(b, ch, 2 * y, 2 * xx + 1)
            + x.at(b, ch, 2 * y + 1, 2 * xx)
            + x.at(b, ch, 2 * y + 1, 2 * xx + 1))
            * q
    });
    Ok(out)
}

pub fn avg_downsample2x_backward<T: Real>(dims: [usize; 4], grad_out: &[T]) -> Vec<T> {
    let [n, c, h, w] = dims;
    let (oh, ow) = (h / 2, w / 2);
    let q = T::of(0.25);
    let mut gx = vec![T::zero(); n * c * h * w];
    for bc in 0..n * c {
        for y in 0..oh {
            for x in 0..ow {
                let g = grad_out[(bc * oh + y) * ow + x] * q;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    gx[(bc * h + 2 * y + dy) * w + 2 * x + dx] += g;
                }
            }
        }
    }
    gx
}

/// Mean over each (batch, channel) plane, producing `(n, c, 1, 1)`.
pub fn global_avg_pool<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    let [n, c, h, w] = x.dims();
    let inv = T::of(1.0 / (h * w) as f64);
    Tensor4::from_fn([n, c, 1, 1], |[b, ch, _, _]| x.plane(b, ch).iter().fold(T::zero(), |a, &v| a + v) * inv)
}

/// Mean of one channel over the half-open cell rectangle `rows × cols`.
pub fn region_mean<T: Real>(
    x: &Tensor4<T>,
    b: usize,
    c: usize,
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
) -> T {
    let w = x.width();
    let plane = x.plane(b, c);
    let count = rows.len() * cols.len();
    let mut acc = T::zero();
    for y in rows {
        for v in &plane[y * w + cols.start..y * w + cols.end] {
            acc += *v;
        }
    }
    acc / T::of(count as f64)
}
