//! Dense channels-first tensors, label volumes and resampling.
//!
//! Volumes are stored row-major with the last index fastest, in the order
//! `(channels, depth, height, width)`. Continuous resampling uses the
//! align-corners convention: output coordinate `i` of an axis with `n_out`
//! samples maps to input coordinate `i * (n_in - 1) / (n_out - 1)`, and a
//! single output sample maps to the input center.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar type of the engine. Training runs at `f32`, gradient checks at `f64`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Sum + Send + Sync + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }

    /// `C ← α·A·B + β·C` over strided dense matrices (`m×k` times `k×n`).
    ///
    /// # Safety
    /// Every element addressed through the pointers and strides must lie
    /// inside its allocation, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Convert between scalar types.
pub fn cast<A: Real, B: Real>(v: A) -> B {
    B::from_f64_lossy(v.as_f64())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Max,
    Min,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Axes {
    All,
    Set(Vec<usize>),
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "extents must be at least 1".into(),
        });
    }
    Ok(())
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        validate_shape(&shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("holds {} values", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        validate_shape(shape).expect("valid shape");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self::zeros(&other.shape)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        validate_shape(shape).expect("valid shape");
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Interpret as a `(C, D, H, W)` volume.
    pub fn dims4(&self) -> Result<(usize, [usize; 3])> {
        match *self.shape.as_slice() {
            [c, d, h, w] => Ok((c, [d, h, w])),
            [d, h, w] => Ok((1, [d, h, w])),
            _ => Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "expected a (C, D, H, W) or (D, H, W) volume".into(),
            }),
        }
    }

    /// Values of one channel of a channels-first tensor.
    pub fn channel(&self, c: usize) -> &[T] {
        let per = self.data.len() / self.shape[0];
        &self.data[c * per..(c + 1) * per]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let per = self.data.len() / self.shape[0];
        &mut self.data[c * per..(c + 1) * per]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| cast(v)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_scalar(&self, s: T) -> Self {
        self.map(|v| v + s)
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        ensure_same_shape(self, other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        elementwise(BinaryOp::Add, self, other)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        elementwise(BinaryOp::Sub, self, other)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        elementwise(BinaryOp::Mul, self, other)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        ensure_same_shape(self, other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn ensure_same_shape<T>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    Ok(())
}

pub fn elementwise<T: Real>(op: BinaryOp, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    ensure_same_shape(a, b)?;
    let f = |x: T, y: T| match op {
        BinaryOp::Add => x + y,
        BinaryOp::Sub => x - y,
        BinaryOp::Mul => x * y,
        BinaryOp::Max => x.max(y),
        BinaryOp::Min => x.min(y),
    };
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    })
}

/// Fold `a` over `axes`. Reduced axes are dropped unless `keep_dims`, in
/// which case they remain with extent 1. Reducing every axis without
/// `keep_dims` yields a shape-`[1]` tensor.
pub fn reduce<T: Real>(op: ReduceOp, a: &Tensor<T>, axes: &Axes, keep_dims: bool) -> Result<Tensor<T>> {
    let rank = a.rank();
    let mut reduced = vec![false; rank];
    match axes {
        Axes::All => reduced.iter_mut().for_each(|r| *r = true),
        Axes::Set(set) => {
            for &ax in set {
                if ax >= rank {
                    return Err(Error::InvalidAxis { axis: ax, rank });
                }
                reduced[ax] = true;
            }
        }
    }

    let kept_shape: Vec<usize> = a
        .shape
        .iter()
        .zip(&reduced)
        .map(|(&e, &r)| if r { 1 } else { e })
        .collect();
    let out_len: usize = kept_shape.iter().product();
    let count: usize = a
        .shape
        .iter()
        .zip(&reduced)
        .filter(|(_, &r)| r)
        .map(|(&e, _)| e)
        .product();

    let init = match op {
        ReduceOp::Sum | ReduceOp::Mean => T::zero(),
        ReduceOp::Max => T::neg_infinity(),
    };
    let mut out = vec![init; out_len];

    // Output strides over the kept shape; reduced axes contribute nothing.
    let mut out_strides = vec![0usize; rank];
    let mut s = 1;
    for ax in (0..rank).rev() {
        out_strides[ax] = if reduced[ax] { 0 } else { s };
        s *= kept_shape[ax];
    }

    let mut idx = vec![0usize; rank];
    for &v in &a.data {
        let o: usize = idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum();
        out[o] = match op {
            ReduceOp::Sum | ReduceOp::Mean => out[o] + v,
            ReduceOp::Max => out[o].max(v),
        };
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < a.shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    if op == ReduceOp::Mean {
        let n = T::from_usize(count).expect("count");
        out.iter_mut().for_each(|v| *v = *v / n);
    }

    let shape = if keep_dims {
        kept_shape
    } else {
        let s: Vec<usize> = a
            .shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| !r)
            .map(|(&e, _)| e)
            .collect();
        if s.is_empty() {
            vec![1]
        } else {
            s
        }
    };
    Tensor::new(shape, out)
}

/// Integer-labeled 3D volume.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVolume {
    dims: [usize; 3],
    class_count: usize,
    data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], class_count: usize, data: Vec<u8>) -> Result<Self> {
        validate_shape(&dims)?;
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::InvalidShape {
                shape: dims.to_vec(),
                reason: format!("holds {} labels", data.len()),
            });
        }
        if let Some(&bad) = data.iter().find(|&&l| l as usize >= class_count) {
            return Err(Error::LabelOutOfRange {
                label: bad as usize,
                class_count,
            });
        }
        Ok(Self {
            dims,
            class_count,
            data,
        })
    }

    /// Class count inferred as `max label + 1` (at least 2).
    pub fn from_labels(dims: [usize; 3], data: Vec<u8>) -> Result<Self> {
        let classes = data.iter().copied().max().map_or(2, |m| (m as usize + 1).max(2));
        Self::new(dims, classes, data)
    }

    pub fn background(dims: [usize; 3], class_count: usize) -> Self {
        Self::new(dims, class_count, vec![0; dims.iter().product()]).expect("valid dims")
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, d: usize, h: usize, w: usize) -> u8 {
        self.data[(d * self.dims[1] + h) * self.dims[2] + w]
    }

    pub fn with_class_count(mut self, class_count: usize) -> Result<Self> {
        if let Some(&bad) = self.data.iter().find(|&&l| l as usize >= class_count) {
            return Err(Error::LabelOutOfRange {
                label: bad as usize,
                class_count,
            });
        }
        self.class_count = class_count;
        Ok(self)
    }

    /// Indicator of class `c` as a real-valued mask.
    pub fn one_hot<T: Real>(&self, c: usize) -> Vec<T> {
        self.data
            .iter()
            .map(|&l| if l as usize == c { T::one() } else { T::zero() })
            .collect()
    }

    pub fn count(&self, c: usize) -> usize {
        self.data.iter().filter(|&&l| l as usize == c).count()
    }
}

/// Continuous source coordinate of output sample `i` under align-corners.
pub fn align_corners_coord(i: usize, n_in: usize, n_out: usize) -> f64 {
    if n_out == 1 {
        (n_in - 1) as f64 / 2.0
    } else {
        (i * (n_in - 1)) as f64 / (n_out - 1) as f64
    }
}

/// Two-tap linear interpolation stencil along one axis.
#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    t: f64,
}

fn taps(n_in: usize, n_out: usize) -> Vec<Tap> {
    (0..n_out)
        .map(|i| {
            let c = align_corners_coord(i, n_in, n_out);
            let lo = (c.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            Tap { lo, hi, t: c - lo as f64 }
        })
        .collect()
}

#[inline]
fn lerp<T: Real>(a: T, b: T, t: T) -> T {
    a + (b - a) * t
}

fn volume_parts<T: Real>(v: &Tensor<T>) -> Result<(usize, [usize; 3], bool)> {
    let (c, dims) = v.dims4()?;
    Ok((c, dims, v.rank() == 3))
}

fn check_out_shape(out: [usize; 3]) -> Result<()> {
    validate_shape(&out)
}

/// Linear resampling along one spatial axis (0 = depth, 1 = height, 2 = width)
/// of a `(C, D, H, W)` buffer.
fn resample_axis<T: Real>(data: &[T], c: usize, dims: [usize; 3], axis: usize, n_out: usize) -> (Vec<T>, [usize; 3]) {
    let mut out_dims = dims;
    out_dims[axis] = n_out;
    let tp = taps(dims[axis], n_out);
    let outer: usize = c * dims[..axis].iter().product::<usize>();
    let inner: usize = dims[axis + 1..].iter().product();
    let n_in = dims[axis];
    let mut out = vec![T::zero(); outer * n_out * inner];
    for o in 0..outer {
        let src = &data[o * n_in * inner..(o + 1) * n_in * inner];
        let dst = &mut out[o * n_out * inner..(o + 1) * n_out * inner];
        for (i, tap) in tp.iter().enumerate() {
            let t = T::from_f64_lossy(tap.t);
            let a = &src[tap.lo * inner..(tap.lo + 1) * inner];
            let b = &src[tap.hi * inner..(tap.hi + 1) * inner];
            for ((d, &x), &y) in dst[i * inner..(i + 1) * inner].iter_mut().zip(a).zip(b) {
                *d = lerp(x, y, t);
            }
        }
    }
    (out, out_dims)
}

/// Adjoint of [`resample_axis`]: scatters output gradients back to the input grid.
fn resample_axis_adjoint<T: Real>(
    grad: &[T],
    c: usize,
    in_dims: [usize; 3],
    axis: usize,
    n_out: usize,
) -> Vec<T> {
    let tp = taps(in_dims[axis], n_out);
    let outer: usize = c * in_dims[..axis].iter().product::<usize>();
    let inner: usize = in_dims[axis + 1..].iter().product();
    let n_in = in_dims[axis];
    let mut out = vec![T::zero(); outer * n_in * inner];
    for o in 0..outer {
        let g = &grad[o * n_out * inner..(o + 1) * n_out * inner];
        let dst = &mut out[o * n_in * inner..(o + 1) * n_in * inner];
        for (i, tap) in tp.iter().enumerate() {
            let t = T::from_f64_lossy(tap.t);
            let wa = T::one() - t;
            for k in 0..inner {
                let gv = g[i * inner + k];
                dst[tap.lo * inner + k] = dst[tap.lo * inner + k] + gv * wa;
                dst[tap.hi * inner + k] = dst[tap.hi * inner + k] + gv * t;
            }
        }
    }
    out
}

/// Trilinear resampling of a `(C, D, H, W)` or `(D, H, W)` volume to new
/// spatial extents. Interpolates along depth, then height, then width.
pub fn resample_trilinear<T: Real>(v: &Tensor<T>, out: [usize; 3]) -> Result<Tensor<T>> {
    check_out_shape(out)?;
    let (c, dims, rank3) = volume_parts(v)?;
    let mut buf = v.data.clone();
    let mut cur = dims;
    for axis in 0..3 {
        if cur[axis] != out[axis] {
            let (b, d) = resample_axis(&buf, c, cur, axis, out[axis]);
            buf = b;
            cur = d;
        }
    }
    let shape = if rank3 { out.to_vec() } else { vec![c, out[0], out[1], out[2]] };
    Tensor::new(shape, buf)
}

/// Transpose of [`resample_trilinear`] as a linear map: given the gradient
/// with respect to the resampled volume, returns the gradient with respect
/// to the source volume of spatial extents `src`.
pub fn resample_trilinear_adjoint<T: Real>(grad: &Tensor<T>, src: [usize; 3]) -> Result<Tensor<T>> {
    check_out_shape(src)?;
    let (c, out_dims, rank3) = volume_parts(grad)?;
    // Forward pass visits axes 0, 1, 2; the adjoint unwinds them in reverse.
    let mut stage_dims = [src; 4];
    for axis in 0..3 {
        let mut d = stage_dims[axis];
        d[axis] = out_dims[axis];
        stage_dims[axis + 1] = d;
    }
    let mut buf = grad.data.clone();
    for axis in (0..3).rev() {
        let in_dims = stage_dims[axis];
        if in_dims[axis] != out_dims[axis] {
            buf = resample_axis_adjoint(&buf, c, in_dims, axis, out_dims[axis]);
        }
    }
    let shape = if rank3 { src.to_vec() } else { vec![c, src[0], src[1], src[2]] };
    Tensor::new(shape, buf)
}

fn nearest_index(i: usize, n_in: usize, n_out: usize) -> usize {
    (align_corners_coord(i, n_in, n_out).round() as usize).min(n_in - 1)
}

/// Nearest-neighbor resampling of labels under the align-corners mapping.
pub fn resample_nearest(v: &LabelVolume, out: [usize; 3]) -> Result<LabelVolume> {
    check_out_shape(out)?;
    let [d, h, w] = v.dims;
    let id: Vec<usize> = (0..out[0]).map(|i| nearest_index(i, d, out[0])).collect();
    let ih: Vec<usize> = (0..out[1]).map(|i| nearest_index(i, h, out[1])).collect();
    let iw: Vec<usize> = (0..out[2]).map(|i| nearest_index(i, w, out[2])).collect();
    let mut data = Vec::with_capacity(out.iter().product());
    for &z in &id {
        for &y in &ih {
            let row = (z * h + y) * w;
            data.extend(iw.iter().map(|&x| v.data[row + x]));
        }
    }
    LabelVolume::new(out, v.class_count, data)
}

/// Repeat every voxel `factor` times along each spatial axis.
pub fn repeat_voxels<T: Real>(v: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (c, [d, h, w]) = v.dims4()?;
    let (od, oh, ow) = (d * factor, h * factor, w * factor);
    let mut out = Vec::with_capacity(c * od * oh * ow);
    for ch in 0..c {
        let src = v.channel(ch);
        for z in 0..od {
            for y in 0..oh {
                let row = &src[((z / factor) * h + y / factor) * w..][..w];
                for x in 0..ow {
                    out.push(row[x / factor]);
                }
            }
        }
    }
    let shape = if v.rank() == 3 { vec![od, oh, ow] } else { vec![c, od, oh, ow] };
    Tensor::new(shape, out)
}

/// Adjoint of [`repeat_voxels`]: sums each `factor³` block.
pub fn repeat_voxels_adjoint<T: Real>(g: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (c, [od, oh, ow]) = g.dims4()?;
    for e in [od, oh, ow] {
        if e % factor != 0 {
            return Err(Error::NotDivisible { extent: e, divisor: factor });
        }
    }
    let (d, h, w) = (od / factor, oh / factor, ow / factor);
    let mut out = vec![T::zero(); c * d * h * w];
    for ch in 0..c {
        let src = g.channel(ch);
        let dst = &mut out[ch * d * h * w..(ch + 1) * d * h * w];
        for z in 0..od {
            for y in 0..oh {
                let row = &src[(z * oh + y) * ow..][..ow];
                let base = ((z / factor) * h + y / factor) * w;
                for (x, &v) in row.iter().enumerate() {
                    dst[base + x / factor] = dst[base + x / factor] + v;
                }
            }
        }
    }
    let shape = if g.rank() == 3 { vec![d, h, w] } else { vec![c, d, h, w] };
    Tensor::new(shape, out)
}
