use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Square-kernel convolution geometry shared by the three conv kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub const fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        ConvGeometry { kernel, stride, pad }
    }
}

pub fn conv_out_size(input: usize, geo: ConvGeometry) -> Option<usize> {
    let padded = input + 2 * geo.pad;
    if padded < geo.kernel || geo.stride == 0 {
        return None;
    }
    Some((padded - geo.kernel) / geo.stride + 1)
}

fn dims4(t: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    match *t {
        [a, b, c, d] => Ok((a, b, c, d)),
        _ => Err(Error::shape(format!("4-d {}", what), format!("{:?}", t))),
    }
}

/// Unfolds one `[C, H, W]` image into `Ho*Wo` columns starting at `col0` of a
/// `[C*k*k, _]` matrix with row stride `stride`.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    img: &[T],
    channels: usize,
    h: usize,
    w: usize,
    geo: ConvGeometry,
    oh: usize,
    ow: usize,
    cols: &mut [T],
    stride: usize,
    col0: usize,
) {
    let k = geo.kernel;
    let ncols = oh * ow;
    for c in 0..channels {
        let plane = &img[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * stride + col0..row * stride + col0 + ncols];
                for oy in 0..oh {
                    let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                        *d = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Folds columns back, accumulating into `img`; the layout matches [`im2col`].
#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &[T],
    channels: usize,
    h: usize,
    w: usize,
    geo: ConvGeometry,
    oh: usize,
    ow: usize,
    img: &mut [T],
    stride: usize,
    col0: usize,
) {
    let k = geo.kernel;
    let ncols = oh * ow;
    for c in 0..channels {
        let plane = &mut img[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * stride + col0..row * stride + col0 + ncols];
                for oy in 0..oh {
                    let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `x: [N, Cin, H, W]`, `w: [Cout, Cin, k, k]` → `[N, Cout, Ho, Wo]`.
pub fn conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, geo: ConvGeometry) -> Result<Tensor<T>> {
    let (n, cin, h, wd) = dims4(x.shape(), "conv input")?;
    let (cout, wcin, kh, kw) = dims4(w.shape(), "conv weight")?;
    if wcin != cin || kh != geo.kernel || kw != geo.kernel {
        return Err(Error::shape(
            format!("weight [_, {}, {}, {}]", cin, geo.kernel, geo.kernel),
            format!("{:?}", w.shape()),
        ));
    }
    let (oh, ow) = match (conv_out_size(h, geo), conv_out_size(wd, geo)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::shape(format!("input at least {} wide", geo.kernel), format!("{}x{}", h, wd))),
    };
    let kk = cin * geo.kernel * geo.kernel;
    let ncols = oh * ow;
    let total = n * ncols;
    let mut cols = vec![T::zero(); kk * total];
    for b in 0..n {
        im2col(&x.data()[b * cin * h * wd..(b + 1) * cin * h * wd], cin, h, wd, geo, oh, ow, &mut cols, total, b * ncols);
    }
    let mut flat = vec![T::zero(); cout * total];
    T::gemm(cout, kk, total, T::one(), w.data(), kk as isize, 1, &cols, total as isize, 1, T::zero(), &mut flat, total as isize, 1);
    Tensor::new(vec![n, cout, oh, ow], unflatten_batch(&flat, n, cout, ncols))
}

/// `[C, N*L]` → `[N, C, L]`.
fn unflatten_batch<T: Real>(flat: &[T], n: usize, c: usize, l: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * c * l];
    for ch in 0..c {
        for b in 0..n {
            out[(b * c + ch) * l..(b * c + ch + 1) * l].copy_from_slice(&flat[ch * n * l + b * l..ch * n * l + (b + 1) * l]);
        }
    }
    out
}

/// `[N, C, L]` → `[C, N*L]`.
fn flatten_batch<T: Real>(x: &[T], n: usize, c: usize, l: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * c * l];
    for b in 0..n {
        for ch in 0..c {
            out[ch * n * l + b * l..ch * n * l + (b + 1) * l].copy_from_slice(&x[(b * c + ch) * l..(b * c + ch + 1) * l]);
        }
    }
    out
}

/// Gradient of `conv2d` with respect to its input (a transposed convolution).
pub fn conv2d_input_grad<T: Real>(
    g: &Tensor<T>,
    w: &Tensor<T>,
    geo: ConvGeometry,
    in_h: usize,
    in_w: usize,
) -> Result<Tensor<T>> {
    let (n, gc, oh, ow) = dims4(g.shape(), "conv output grad")?;
    let (cout, cin, _, _) = dims4(w.shape(), "conv weight")?;
    if gc != cout || conv_out_size(in_h, geo) != Some(oh) || conv_out_size(in_w, geo) != Some(ow) {
        return Err(Error::shape(format!("grad with {} channels", cout), format!("{:?}", g.shape())));
    }
    let kk = cin * geo.kernel * geo.kernel;
    let ncols = oh * ow;
    let total = n * ncols;
    let gflat = flatten_batch(g.data(), n, cout, ncols);
    // cols = Wᵀ · g
    let mut cols = vec![T::zero(); kk * total];
    T::gemm(kk, cout, total, T::one(), w.data(), 1, kk as isize, &gflat, total as isize, 1, T::zero(), &mut cols, total as isize, 1);
    let mut out = vec![T::zero(); n * cin * in_h * in_w];
    for b in 0..n {
        col2im(&cols, cin, in_h, in_w, geo, oh, ow, &mut out[b * cin * in_h * in_w..(b + 1) * cin * in_h * in_w], total, b * ncols);
    }
    Tensor::new(vec![n, cin, in_h, in_w], out)
}

/// Gradient of `conv2d` with respect to its weight, summed over the batch.
pub fn conv2d_weight_grad<T: Real>(x: &Tensor<T>, g: &Tensor<T>, geo: ConvGeometry) -> Result<Tensor<T>> {
    let (n, cin, h, wd) = dims4(x.shape(), "conv input")?;
    let (gn, cout, oh, ow) = dims4(g.shape(), "conv output grad")?;
    if gn != n || conv_out_size(h, geo) != Some(oh) || conv_out_size(wd, geo) != Some(ow) {
        return Err(Error::shape(format!("grad for input {:?}", x.shape()), format!("{:?}", g.shape())));
    }
    let kk = cin * geo.kernel * geo.kernel;
    let ncols = oh * ow;
    let total = n * ncols;
    let mut cols = vec![T::zero(); kk * total];
    for b in 0..n {
        im2col(&x.data()[b * cin * h * wd..(b + 1) * cin * h * wd], cin, h, wd, geo, oh, ow, &mut cols, total, b * ncols);
    }
    let gflat = flatten_batch(g.data(), n, cout, ncols);
    // dW = g · colsᵀ
    let mut out = vec![T::zero(); cout * kk];
    T::gemm(cout, total, kk, T::one(), &gflat, total as isize, 1, &cols, 1, total as isize, T::zero(), &mut out, kk as isize, 1);
    Tensor::new(vec![cout, cin, geo.kernel, geo.kernel], out)
}

#[inline]
fn nearest_src(dst: usize, dst_len: usize, src_len: usize) -> usize {
    dst * src_len / dst_len
}

/// Nearest-neighbour resize of `[N, C, H, W]` to `[N, C, oh, ow]`.
pub fn upsample_nearest<T: Real>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4(x.shape(), "upsample input")?;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.data().chunks_exact(h * w) {
        for oy in 0..oh {
            let row = &plane[nearest_src(oy, oh, h) * w..];
            for ox in 0..ow {
                out.push(row[nearest_src(ox, ow, w)]);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

/// Adjoint of [`upsample_nearest`]: scatter-adds `[N, C, oh, ow]` back onto `[N, C, h, w]`.
pub fn upsample_nearest_adjoint<T: Real>(g: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (n, c, oh, ow) = dims4(g.shape(), "upsample grad")?;
    let mut out = vec![T::zero(); n * c * h * w];
    for (plane, dst) in g.data().chunks_exact(oh * ow).zip(out.chunks_exact_mut(h * w)) {
        for oy in 0..oh {
            let sy = nearest_src(oy, oh, h);
            for ox in 0..ow {
                dst[sy * w + nearest_src(ox, ow, w)] += plane[oy * ow + ox];
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}
