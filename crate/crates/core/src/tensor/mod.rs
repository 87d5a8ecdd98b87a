//! Dense row-major tensors and the numeric kernels behind the autodiff graph.
//!
//! Everything here is single-threaded and allocation-explicit so that a given
//! sequence of operations produces bit-identical results on one platform.

mod kernels;

pub use kernels::{
    conv2d, conv2d_input_grad, conv2d_weight_grad, conv_out_size, upsample_nearest,
    upsample_nearest_adjoint, ConvGeometry,
};

use std::fmt;
use std::ops::{AddAssign, MulAssign};

use crate::error::{Error, Result};

/// Floating point element type usable by the engine.
///
/// Training runs in `f32`; gradient checks run the same code in `f64`.
pub trait Real:
    num_traits::Float + AddAssign + MulAssign + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = alpha * a·b + beta * c` with arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            #[inline]
            fn lit(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: callers pass slices whose extents cover the strided
                // index ranges; checked below in debug builds.
                debug_assert!(k == 0 || max_index(m, k, rsa, csa) < a.len());
                debug_assert!(k == 0 || max_index(k, n, rsb, csb) < b.len());
                debug_assert!(max_index(m, n, rsc, csc) < c.len());
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

fn max_index(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    ((rows as isize - 1) * rs + (cols as isize - 1) * cs) as usize
}

/// Owned dense tensor in row-major order.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                format!("{} elements", n),
                format!("{} elements for shape {:?}", data.len(), shape),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    /// Reads the only element of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!("{:?}", self.shape), format!("{:?}", shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        let mut acc = T::zero();
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    /// Converts element type; used to run f32 parameters through f64 checks.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Broadcasts a tensor whose dims are either 1 or equal to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self> {
        check_broadcastable(&self.shape, shape)?;
        let strides = broadcast_strides(&self.shape, shape);
        let mut out = Vec::with_capacity(shape.iter().product());
        for_each_index(shape, |_, offsets| out.push(self.data[dot(offsets, &strides)]));
        Ok(Tensor { shape: shape.to_vec(), data: out })
    }

    /// Sums over the axes where `shape` has extent 1; the adjoint of `broadcast_to`.
    pub fn sum_to(&self, shape: &[usize]) -> Result<Self> {
        check_broadcastable(shape, &self.shape)?;
        let strides = broadcast_strides(shape, &self.shape);
        let mut out = vec![T::zero(); shape.iter().product()];
        let mut i = 0;
        for_each_index(&self.shape, |_, offsets| {
            out[dot(offsets, &strides)] += self.data[i];
            i += 1;
        });
        Ok(Tensor { shape: shape.to_vec(), data: out })
    }

    /// Concatenates along axis 1 (channels).
    pub fn concat_channels(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let n = first.shape[0];
        let inner: usize = first.shape[2..].iter().product();
        let mut channels = 0;
        for p in parts {
            if p.shape.len() != first.shape.len() || p.shape[0] != n || p.shape[2..] != first.shape[2..] {
                return Err(Error::shape(format!("{:?}", first.shape), format!("{:?}", p.shape)));
            }
            channels += p.shape[1];
        }
        let mut data = Vec::with_capacity(n * channels * inner);
        for b in 0..n {
            for p in parts {
                let block = p.shape[1] * inner;
                data.extend_from_slice(&p.data[b * block..(b + 1) * block]);
            }
        }
        let mut shape = first.shape.clone();
        shape[1] = channels;
        Ok(Tensor { shape, data })
    }

    /// Takes channels `start..start+len` along axis 1.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Self> {
        if self.shape.len() < 2 || start + len > self.shape[1] {
            return Err(Error::shape(
                format!("at least {} channels", start + len),
                format!("{:?}", self.shape),
            ));
        }
        let n = self.shape[0];
        let c = self.shape[1];
        let inner: usize = self.shape[2..].iter().product();
        let mut data = Vec::with_capacity(n * len * inner);
        for b in 0..n {
            let base = b * c * inner + start * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[1] = len;
        Ok(Tensor { shape, data })
    }

    /// Splits along axis 0 into single-item tensors (keeping the leading 1).
    pub fn batch_item(&self, index: usize) -> Self {
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor { shape, data: self.data[index * inner..(index + 1) * inner].to_vec() }
    }

    /// Stacks tensors of identical shape `[1, ...]` or `[...]` along a new/existing axis 0.
    pub fn stack_batch(items: &[Tensor<T>]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::invalid("stack of zero tensors"))?;
        let item_shape: Vec<usize> =
            if first.shape.first() == Some(&1) { first.shape[1..].to_vec() } else { first.shape.clone() };
        let mut data = Vec::with_capacity(items.len() * first.len());
        for it in items {
            if it.len() != first.len() {
                return Err(Error::shape(format!("{:?}", first.shape), format!("{:?}", it.shape)));
            }
            data.extend_from_slice(&it.data);
        }
        let mut shape = vec![items.len()];
        shape.extend(item_shape);
        Ok(Tensor { shape, data })
    }
}

fn check_broadcastable(src: &[usize], dst: &[usize]) -> Result<()> {
    if src.len() != dst.len() || src.iter().zip(dst).any(|(&s, &d)| s != 1 && s != d) {
        return Err(Error::shape(format!("broadcastable to {:?}", dst), format!("{:?}", src)));
    }
    Ok(())
}

fn broadcast_strides(src: &[usize], dst: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; src.len()];
    let mut acc = 1;
    for axis in (0..src.len()).rev() {
        strides[axis] = if src[axis] == 1 && dst[axis] != 1 { 0 } else { acc };
        acc *= src[axis];
    }
    strides
}

#[inline]
fn dot(a: &[usize], b: &[usize]) -> usize {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Visits every multi-index of `shape` in row-major order.
fn for_each_index(shape: &[usize], mut f: impl FnMut(usize, &[usize])) {
    let n: usize = shape.iter().product();
    if n == 0 {
        return;
    }
    let mut idx = vec![0usize; shape.len()];
    for flat in 0..n {
        f(flat, &idx);
        for axis in (0..shape.len()).rev() {
            idx[axis] += 1;
            if idx[axis] < shape[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
}
