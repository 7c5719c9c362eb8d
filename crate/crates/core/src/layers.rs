//! Layer primitives with hand-derived backward passes: zero-padded 3D
//! convolution (plain, strided, and nearest-neighbor deconvolution), PReLU
//! and batch normalization.
//!
//! Convolution is cross-correlation with `k / 2` zero padding, so plain
//! convolution preserves spatial extents. A stride-`s` convolution keeps
//! the voxels of the plain result whose indices are all `≡ 0 mod s`.
//! Deconvolution repeats each voxel twice along every axis and convolves.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{repeat_voxels, repeat_voxels_adjoint, Real, Tensor};

/// Upsampling factor of [`deconv3d_forward`].
pub const DECONV_FACTOR: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConvKind {
    Plain,
    Strided(usize),
    Deconv,
}

/// Weights `(out, in, k, k, k)` and bias `(out)` of a convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> ConvParams<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let ws = weight.shape();
        let ok = ws.len() == 5 && ws[2] == ws[3] && ws[3] == ws[4] && ws[2] % 2 == 1;
        if !ok {
            return Err(Error::InvalidShape {
                shape: ws.to_vec(),
                reason: "convolution weights must be (out, in, k, k, k) with odd k".into(),
            });
        }
        if bias.shape() != [ws[0]] {
            return Err(Error::ShapeMismatch {
                left: bias.shape().to_vec(),
                right: vec![ws[0]],
            });
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self::new(
            Tensor::zeros(&[out_channels, in_channels, kernel, kernel, kernel]),
            Tensor::zeros(&[out_channels]),
        )
        .expect("valid conv shape")
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn cast<U: Real>(&self) -> ConvParams<U> {
        ConvParams {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

/// Range of output indices `o` with `0 <= o*stride + shift < n_in`.
#[inline]
fn valid_range(shift: isize, stride: usize, n_in: usize, n_out: usize) -> std::ops::Range<usize> {
    let s = stride as isize;
    let lo = if shift < 0 { ((-shift) + s - 1) / s } else { 0 };
    let last = n_in as isize - 1 - shift;
    if last < 0 {
        return 0..0;
    }
    let hi = ((last / s) + 1).min(n_out as isize);
    (lo as usize)..(hi.max(lo) as usize)
}

fn check_input<T: Real>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<[usize; 3]> {
    let (c, dims) = x.dims4()?;
    if x.rank() != 4 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "convolution input must be (C, D, H, W)".into(),
        });
    }
    if c != p.in_channels() {
        return Err(Error::ChannelMismatch {
            expected: p.in_channels(),
            actual: c,
        });
    }
    Ok(dims)
}

fn strided_dims(dims: [usize; 3], stride: usize) -> Result<[usize; 3]> {
    if stride == 0 {
        return Err(Error::NotDivisible { extent: 0, divisor: 0 });
    }
    for &e in &dims {
        if e % stride != 0 {
            return Err(Error::NotDivisible {
                extent: e,
                divisor: stride,
            });
        }
    }
    Ok([dims[0] / stride, dims[1] / stride, dims[2] / stride])
}

/// A strided view of a dense matrix inside a slice.
#[derive(Clone, Copy)]
struct View {
    offset: usize,
    rs: usize,
    cs: usize,
}

impl View {
    fn rows(rs: usize) -> Self {
        Self { offset: 0, rs, cs: 1 }
    }

    fn transposed(self) -> Self {
        Self {
            offset: self.offset,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn at(mut self, offset: usize) -> Self {
        self.offset = offset;
        self
    }

    fn last(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            return self.offset;
        }
        self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// `c ← a·b + beta·c` for an `m×k` view `a` and a `k×n` view `b`.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Real>(m: usize, k: usize, n: usize, a: &[T], va: View, b: &[T], vb: View, beta: T, c: &mut [T], vc: View) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(va.last(m, k) < a.len().max(1) && vb.last(k, n) < b.len().max(1) && vc.last(m, n) < c.len());
    // SAFETY: the bounds above cover every addressed element; `c` is a
    // unique borrow so it cannot alias `a` or `b`.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr().add(va.offset),
            va.rs as isize,
            va.cs as isize,
            b.as_ptr().add(vb.offset),
            vb.rs as isize,
            vb.cs as isize,
            beta,
            c.as_mut_ptr().add(vc.offset),
            vc.rs as isize,
            vc.cs as isize,
        );
    }
}

/// Upper bound on the number of elements in one column buffer.
const COLUMN_BUDGET: usize = 1 << 22;

/// Geometry shared by the forward and backward correlation passes.
struct Geometry {
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    dims: [usize; 3],
    od: [usize; 3],
}

impl Geometry {
    fn new<T: Real>(x: &Tensor<T>, p: &ConvParams<T>, stride: usize) -> Result<Self> {
        let dims = check_input(x, p)?;
        let od = strided_dims(dims, stride)?;
        Ok(Self {
            cin: p.in_channels(),
            cout: p.out_channels(),
            k: p.kernel(),
            stride,
            dims,
            od,
        })
    }

    fn taps(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    fn plane(&self) -> usize {
        self.od[1] * self.od[2]
    }

    fn volume_out(&self) -> usize {
        self.od[0] * self.plane()
    }

    /// A 1×1×1 unit-stride convolution is a plain matrix product on the input.
    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }

    /// Output depth slabs `[z0, z1)` whose column buffers fit the budget.
    fn slabs(&self) -> Vec<(usize, usize)> {
        let per = (self.taps() * self.plane()).max(1);
        let step = (COLUMN_BUDGET / per).clamp(1, self.od[0]);
        (0..self.od[0]).step_by(step).map(|z0| (z0, (z0 + step).min(self.od[0]))).collect()
    }

    /// Visit every (column row, output row segment, input row) triple of
    /// the slab; `f(row, segment offset in the column buffer, input row
    /// start, valid output x-range, x shift)`. Rows falling outside the
    /// input are reported with `None`.
    fn for_each_row(&self, z0: usize, z1: usize, mut f: impl FnMut(usize, usize, Option<usize>, Range<usize>, isize)) {
        let [d, h, w] = self.dims;
        let (k, s, od) = (self.k, self.stride, self.od);
        let pad = (k / 2) as isize;
        let nc = (z1 - z0) * self.plane();
        for ci in 0..self.cin {
            for kd in 0..k {
                let sd = kd as isize - pad;
                for kh in 0..k {
                    let sh = kh as isize - pad;
                    for kw in 0..k {
                        let sw = kw as isize - pad;
                        let row = ((ci * k + kd) * k + kh) * k + kw;
                        let rw = valid_range(sw, s, w, od[2]);
                        for oz in z0..z1 {
                            let iz = (oz * s) as isize + sd;
                            for oy in 0..od[1] {
                                let iy = (oy * s) as isize + sh;
                                let seg = row * nc + ((oz - z0) * od[1] + oy) * od[2];
                                let inside = (0..d as isize).contains(&iz) && (0..h as isize).contains(&iy);
                                let irow = inside.then(|| ci * d * h * w + (iz as usize * h + iy as usize) * w);
                                f(row, seg, irow, rw.clone(), sw);
                            }
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Real>(&self, x: &[T], z0: usize, z1: usize, cols: &mut [T]) {
        let (ow, s) = (self.od[2], self.stride);
        self.for_each_row(z0, z1, |_, seg, irow, rw, sw| {
            let dst = &mut cols[seg..seg + ow];
            match irow {
                None => dst.fill(T::zero()),
                Some(irow) => {
                    dst[..rw.start].fill(T::zero());
                    dst[rw.end..].fill(T::zero());
                    if s == 1 {
                        let i0 = (irow as isize + rw.start as isize + sw) as usize;
                        dst[rw.clone()].copy_from_slice(&x[i0..i0 + rw.len()]);
                    } else {
                        for ox in rw {
                            dst[ox] = x[(irow as isize + (ox * s) as isize + sw) as usize];
                        }
                    }
                }
            }
        });
    }

    fn col2im<T: Real>(&self, cols: &[T], z0: usize, z1: usize, dx: &mut [T]) {
        let s = self.stride;
        self.for_each_row(z0, z1, |_, seg, irow, rw, sw| {
            if let Some(irow) = irow {
                for ox in rw {
                    let i = (irow as isize + (ox * s) as isize + sw) as usize;
                    dx[i] = dx[i] + cols[seg + ox];
                }
            }
        });
    }
}

/// Shared correlation kernel: im2col followed by a matrix product, one
/// depth slab at a time. The bias seeds the output and the taps of every
/// output voxel are reduced in the same order regardless of stride, so the
/// strided result is bit-identical to subsampling the plain result.
fn correlate<T: Real>(x: &Tensor<T>, p: &ConvParams<T>, stride: usize) -> Result<Tensor<T>> {
    let g = Geometry::new(x, p, stride)?;
    let (cout, taps, nt) = (g.cout, g.taps(), g.volume_out());
    let mut out = vec![T::zero(); cout * nt];
    for (co, plane) in out.chunks_mut(nt.max(1)).enumerate() {
        plane.fill(p.bias.data()[co]);
    }
    let w = p.weight.data();
    if g.pointwise() {
        gemm(cout, taps, nt, w, View::rows(taps), x.data(), View::rows(nt), T::one(), &mut out, View::rows(nt));
    } else {
        let mut cols = Vec::new();
        for (z0, z1) in g.slabs() {
            let nc = (z1 - z0) * g.plane();
            cols.resize(taps * nc, T::zero());
            g.im2col(x.data(), z0, z1, &mut cols);
            let vc = View::rows(nt).at(z0 * g.plane());
            gemm(cout, taps, nc, w, View::rows(taps), &cols, View::rows(nc), T::one(), &mut out, vc);
        }
    }
    Tensor::new(vec![cout, g.od[0], g.od[1], g.od[2]], out)
}

/// Gradients of [`correlate`] with respect to input, weights and bias.
fn correlate_backward<T: Real>(
    x: &Tensor<T>,
    p: &ConvParams<T>,
    stride: usize,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, ConvParams<T>)> {
    let g = Geometry::new(x, p, stride)?;
    let (cout, taps, nt) = (g.cout, g.taps(), g.volume_out());
    let expected = vec![cout, g.od[0], g.od[1], g.od[2]];
    if grad.shape() != expected.as_slice() {
        return Err(Error::ShapeMismatch {
            left: grad.shape().to_vec(),
            right: expected,
        });
    }
    let w = p.weight.data();
    let gd = grad.data();
    let db: Vec<T> = gd.chunks(nt.max(1)).map(|c| c.iter().copied().sum()).collect();
    let mut dw = vec![T::zero(); w.len()];
    let mut dx = vec![T::zero(); x.len()];
    let wt = View::rows(taps).transposed();
    if g.pointwise() {
        let xt = View::rows(nt).transposed();
        gemm(cout, nt, taps, gd, View::rows(nt), x.data(), xt, T::zero(), &mut dw, View::rows(taps));
        gemm(taps, cout, nt, w, wt, gd, View::rows(nt), T::zero(), &mut dx, View::rows(nt));
    } else {
        let mut cols = Vec::new();
        let mut dcols = Vec::new();
        for (z0, z1) in g.slabs() {
            let nc = (z1 - z0) * g.plane();
            cols.resize(taps * nc, T::zero());
            dcols.resize(taps * nc, T::zero());
            g.im2col(x.data(), z0, z1, &mut cols);
            let vg = View::rows(nt).at(z0 * g.plane());
            let ct = View::rows(nc).transposed();
            gemm(cout, nc, taps, gd, vg, &cols, ct, T::one(), &mut dw, View::rows(taps));
            gemm(taps, cout, nc, w, wt, gd, vg, T::zero(), &mut dcols, View::rows(nc));
            g.col2im(&dcols, z0, z1, &mut dx);
        }
    }
    let dx = Tensor::new(x.shape().to_vec(), dx)?;
    let grads = ConvParams {
        weight: Tensor::new(p.weight.shape().to_vec(), dw)?,
        bias: Tensor::new(vec![cout], db)?,
    };
    Ok((dx, grads))
}

/// Zero-padded, extent-preserving 3D convolution.
pub fn conv3d_forward<T: Real>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    correlate(x, p, 1)
}

/// Convolution followed by keeping voxels at indices `≡ 0 mod stride`.
pub fn conv3d_strided_forward<T: Real>(x: &Tensor<T>, p: &ConvParams<T>, stride: usize) -> Result<Tensor<T>> {
    correlate(x, p, stride)
}

/// Nearest-neighbor upsampling by two followed by convolution.
pub fn deconv3d_forward<T: Real>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    check_input(x, p)?;
    correlate(&repeat_voxels(x, DECONV_FACTOR)?, p, 1)
}

pub fn conv3d_backward<T: Real>(x: &Tensor<T>, p: &ConvParams<T>, grad: &Tensor<T>) -> Result<(Tensor<T>, ConvParams<T>)> {
    correlate_backward(x, p, 1, grad)
}

pub fn conv3d_strided_backward<T: Real>(
    x: &Tensor<T>,
    p: &ConvParams<T>,
    stride: usize,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, ConvParams<T>)> {
    correlate_backward(x, p, stride, grad)
}

pub fn deconv3d_backward<T: Real>(x: &Tensor<T>, p: &ConvParams<T>, grad: &Tensor<T>) -> Result<(Tensor<T>, ConvParams<T>)> {
    check_input(x, p)?;
    let up = repeat_voxels(x, DECONV_FACTOR)?;
    let (dup, grads) = correlate_backward(&up, p, 1, grad)?;
    Ok((repeat_voxels_adjoint(&dup, DECONV_FACTOR)?, grads))
}

pub fn conv_forward<T: Real>(kind: ConvKind, x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    match kind {
        ConvKind::Plain => conv3d_forward(x, p),
        ConvKind::Strided(s) => conv3d_strided_forward(x, p, s),
        ConvKind::Deconv => deconv3d_forward(x, p),
    }
}

pub fn conv_backward<T: Real>(
    kind: ConvKind,
    x: &Tensor<T>,
    p: &ConvParams<T>,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, ConvParams<T>)> {
    match kind {
        ConvKind::Plain => conv3d_backward(x, p, grad),
        ConvKind::Strided(s) => conv3d_strided_backward(x, p, s, grad),
        ConvKind::Deconv => deconv3d_backward(x, p, grad),
    }
}

/// Per-channel PReLU slopes: `f(x) = max(0, x) + a * min(0, x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PReluParams<T = f32> {
    pub slope: Tensor<T>,
}

impl<T: Real> PReluParams<T> {
    pub fn new(channels: usize, init: T) -> Self {
        Self {
            slope: Tensor::full(&[channels], init),
        }
    }

    pub fn channels(&self) -> usize {
        self.slope.len()
    }
}

fn check_channels<T: Real>(x: &Tensor<T>, expected: usize) -> Result<usize> {
    let c = x.shape()[0];
    if c != expected {
        return Err(Error::ChannelMismatch { expected, actual: c });
    }
    Ok(x.len() / c)
}

pub fn prelu_forward<T: Real>(x: &Tensor<T>, p: &PReluParams<T>) -> Result<Tensor<T>> {
    let per = check_channels(x, p.channels())?;
    let a = p.slope.data();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| if v >= T::zero() { v } else { a[i / per] * v })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Returns `(input gradient, slope gradient)`.
pub fn prelu_backward<T: Real>(x: &Tensor<T>, p: &PReluParams<T>, grad: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let per = check_channels(x, p.channels())?;
    if grad.shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            left: grad.shape().to_vec(),
            right: x.shape().to_vec(),
        });
    }
    let a = p.slope.data();
    let mut da = vec![T::zero(); p.channels()];
    let dx = x
        .data()
        .iter()
        .zip(grad.data())
        .enumerate()
        .map(|(i, (&v, &g))| {
            if v >= T::zero() {
                g
            } else {
                da[i / per] = da[i / per] + g * v;
                a[i / per] * g
            }
        })
        .collect();
    Ok((Tensor::new(x.shape().to_vec(), dx)?, Tensor::new(vec![p.channels()], da)?))
}

/// Batch normalization with per-channel gain/shift and running statistics
/// updated as `r <- momentum * r + (1 - momentum) * current`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_std: Tensor<T>,
    pub momentum: T,
    pub eps: T,
}

/// Initial values and constants of a [`BatchNormState`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchNormConfig {
    pub momentum: f64,
    pub eps: f64,
    pub init_mean: f64,
    pub init_std: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        Self {
            momentum: 0.5,
            eps: 1e-5,
            init_mean: 1.0,
            init_std: 0.0,
        }
    }
}

/// Values saved by [`BatchNormState::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    pub mode: Mode,
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    pub batch_std: Vec<T>,
}

impl<T: Real> BatchNormState<T> {
    pub fn new(channels: usize, cfg: &BatchNormConfig) -> Self {
        Self {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::full(&[channels], T::from_f64_lossy(cfg.init_mean)),
            running_std: Tensor::full(&[channels], T::from_f64_lossy(cfg.init_std)),
            momentum: T::from_f64_lossy(cfg.momentum),
            eps: T::from_f64_lossy(cfg.eps),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Normalize without touching the running statistics.
    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, BnCache<T>)> {
        let c = self.channels();
        let per = check_channels(x, c)?;
        let mut normalized = Vec::with_capacity(x.len());
        let mut out = Vec::with_capacity(x.len());
        let mut inv_std = Vec::with_capacity(c);
        let mut batch_mean = Vec::with_capacity(c);
        let mut batch_std = Vec::with_capacity(c);
        for ch in 0..c {
            let xs = x.channel(ch);
            let (mean, denom) = match mode {
                Mode::Train => {
                    let n = per as f64;
                    let m = xs.iter().map(|v| v.as_f64()).sum::<f64>() / n;
                    let var = xs.iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>() / n;
                    batch_mean.push(T::from_f64_lossy(m));
                    batch_std.push(T::from_f64_lossy(var.sqrt()));
                    (T::from_f64_lossy(m), T::from_f64_lossy(var) + self.eps)
                }
                Mode::Infer => {
                    let s = self.running_std.data()[ch];
                    (self.running_mean.data()[ch], s * s + self.eps)
                }
            };
            let inv = T::one() / denom.sqrt();
            inv_std.push(inv);
            let (g, b) = (self.gamma.data()[ch], self.beta.data()[ch]);
            for &v in xs {
                let n = (v - mean) * inv;
                normalized.push(n);
                out.push(g * n + b);
            }
        }
        let shape = x.shape().to_vec();
        Ok((
            Tensor::new(shape.clone(), out)?,
            BnCache {
                mode,
                normalized: Tensor::new(shape, normalized)?,
                inv_std,
                batch_mean,
                batch_std,
            },
        ))
    }

    /// Fold the batch statistics of a train-mode pass into the running averages.
    pub fn update_running(&mut self, cache: &BnCache<T>) {
        if cache.mode != Mode::Train {
            return;
        }
        let a = self.momentum;
        let b = T::one() - a;
        for (r, &m) in self.running_mean.data_mut().iter_mut().zip(&cache.batch_mean) {
            *r = a * *r + b * m;
        }
        for (r, &s) in self.running_std.data_mut().iter_mut().zip(&cache.batch_std) {
            *r = a * *r + b * s;
        }
    }

    /// Returns `(input gradient, gamma gradient, beta gradient)`.
    pub fn backward(&self, cache: &BnCache<T>, grad: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        if grad.shape() != cache.normalized.shape() {
            return Err(Error::ShapeMismatch {
                left: grad.shape().to_vec(),
                right: cache.normalized.shape().to_vec(),
            });
        }
        let c = self.channels();
        let per = grad.len() / c;
        let n = T::from_usize(per).expect("count");
        let mut dx = Vec::with_capacity(grad.len());
        let mut dgamma = Vec::with_capacity(c);
        let mut dbeta = Vec::with_capacity(c);
        for ch in 0..c {
            let g = grad.channel(ch);
            let xh = cache.normalized.channel(ch);
            let sum_g: T = g.iter().copied().sum();
            let sum_gx: T = g.iter().zip(xh).map(|(&a, &b)| a * b).sum();
            dgamma.push(sum_gx);
            dbeta.push(sum_g);
            let gamma = self.gamma.data()[ch];
            let inv = cache.inv_std[ch];
            match cache.mode {
                Mode::Infer => dx.extend(g.iter().map(|&v| v * gamma * inv)),
                Mode::Train => {
                    let k = gamma * inv / n;
                    dx.extend(
                        g.iter()
                            .zip(xh)
                            .map(|(&gv, &xv)| k * (n * gv - sum_g - xv * sum_gx)),
                    );
                }
            }
        }
        Ok((
            Tensor::new(grad.shape().to_vec(), dx)?,
            Tensor::new(vec![c], dgamma)?,
            Tensor::new(vec![c], dbeta)?,
        ))
    }
}

/// Normalize and, in train mode, update the running statistics.
pub fn batchnorm_forward<T: Real>(x: &Tensor<T>, s: &mut BatchNormState<T>, mode: Mode) -> Result<(Tensor<T>, BnCache<T>)> {
    let (y, cache) = s.forward(x, mode)?;
    s.update_running(&cache);
    Ok((y, cache))
}
