//! Random geometric transforms and preprocessing.

use std::f64::consts::TAU;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{resample_nearest, resample_trilinear, LabelVolume, Real, Tensor};

/// The three axis pairs a rotation can act in.
pub const PLANES: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TransformDraw {
    Identity,
    /// Reverse one spatial axis (0 = depth, 1 = height, 2 = width).
    Flip { axis: usize },
    /// Rotate by `angle` radians in the plane spanned by two distinct axes,
    /// about the geometric center.
    Rotate { plane: (usize, usize), angle: f64 },
}

/// Which transforms training may draw.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentPolicy {
    /// Identity, flip and rotation with equal probability.
    #[default]
    Random,
    /// Always the identity.
    None,
}

pub fn draw_transform<R: Rng + ?Sized>(rng: &mut R) -> TransformDraw {
    match rng.random_range(0..3) {
        0 => TransformDraw::Identity,
        1 => TransformDraw::Flip {
            axis: rng.random_range(0..3),
        },
        _ => TransformDraw::Rotate {
            plane: PLANES[rng.random_range(0..3)],
            angle: rng.random::<f64>() * TAU,
        },
    }
}

impl AugmentPolicy {
    pub fn draw<R: Rng + ?Sized>(self, rng: &mut R) -> TransformDraw {
        match self {
            AugmentPolicy::Random => draw_transform(rng),
            AugmentPolicy::None => TransformDraw::Identity,
        }
    }
}

fn check_congruent<T: Real>(image: &Tensor<T>, labels: &LabelVolume) -> Result<[usize; 3]> {
    let (_, dims) = image.dims4()?;
    if dims != labels.dims() {
        return Err(Error::ShapeMismatch {
            left: image.shape().to_vec(),
            right: labels.dims().to_vec(),
        });
    }
    Ok(dims)
}

fn check_axis(axis: usize) -> Result<()> {
    if axis >= 3 {
        return Err(Error::InvalidAxis { axis, rank: 3 });
    }
    Ok(())
}

/// Gather `out[c][dst] = src[c][map(dst)]` for every channel; `None` fills `fill`.
fn gather<V: Copy>(src: &[V], channels: usize, dims: [usize; 3], fill: V, map: &[Option<usize>]) -> Vec<V> {
    let per: usize = dims.iter().product();
    let mut out = Vec::with_capacity(src.len());
    for c in 0..channels {
        let s = &src[c * per..(c + 1) * per];
        out.extend(map.iter().map(|m| m.map_or(fill, |i| s[i])));
    }
    out
}

fn flip_map(dims: [usize; 3], axis: usize) -> Vec<Option<usize>> {
    let [d, h, w] = dims;
    let mut map = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let mut p = [z, y, x];
                p[axis] = dims[axis] - 1 - p[axis];
                map.push(Some((p[0] * h + p[1]) * w + p[2]));
            }
        }
    }
    map
}

pub fn flip<T: Real>(image: &Tensor<T>, labels: &LabelVolume, axis: usize) -> Result<(Tensor<T>, LabelVolume)> {
    check_axis(axis)?;
    let dims = check_congruent(image, labels)?;
    let (c, _) = image.dims4()?;
    let map = flip_map(dims, axis);
    let img = Tensor::new(image.shape().to_vec(), gather(image.data(), c, dims, T::zero(), &map))?;
    let lab = LabelVolume::new(dims, labels.class_count(), gather(labels.data(), 1, dims, 0, &map))?;
    Ok((img, lab))
}

/// Source coordinate of every destination voxel under rotation by `angle`.
fn rotation_sources(dims: [usize; 3], plane: (usize, usize), angle: f64) -> Vec<[f64; 3]> {
    let (a, b) = plane;
    let center = dims.map(|n| (n as f64 - 1.0) / 2.0);
    let (s, c) = angle.sin_cos();
    let [d, h, w] = dims;
    let mut out = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64, y as f64, x as f64];
                let (u, v) = (p[a] - center[a], p[b] - center[b]);
                let mut q = p;
                q[a] = c * u + s * v + center[a];
                q[b] = -s * u + c * v + center[b];
                out.push(q);
            }
        }
    }
    out
}

fn nearest_source(q: [f64; 3], dims: [usize; 3]) -> Option<usize> {
    let mut idx = [0usize; 3];
    for k in 0..3 {
        let r = q[k].round();
        if r < 0.0 || r > (dims[k] - 1) as f64 {
            return None;
        }
        idx[k] = r as usize;
    }
    Some((idx[0] * dims[1] + idx[1]) * dims[2] + idx[2])
}

/// Trilinear sample treating everything outside the grid as zero.
fn sample_zero_padded<T: Real>(src: &[T], dims: [usize; 3], q: [f64; 3]) -> T {
    let f = q.map(f64::floor);
    let t = [q[0] - f[0], q[1] - f[1], q[2] - f[2]];
    let base = f.map(|v| v as i64);
    let mut acc = 0.0;
    for corner in 0..8 {
        let mut idx = [0usize; 3];
        let mut weight = 1.0;
        let mut inside = true;
        for k in 0..3 {
            let bit = (corner >> (2 - k)) & 1;
            let i = base[k] + bit as i64;
            weight *= if bit == 1 { t[k] } else { 1.0 - t[k] };
            if i < 0 || i >= dims[k] as i64 {
                inside = false;
            } else {
                idx[k] = i as usize;
            }
        }
        if inside && weight != 0.0 {
            acc += weight * src[(idx[0] * dims[1] + idx[1]) * dims[2] + idx[2]].as_f64();
        }
    }
    T::from_f64_lossy(acc)
}

pub fn rotate<T: Real>(
    image: &Tensor<T>,
    labels: &LabelVolume,
    plane: (usize, usize),
    angle: f64,
) -> Result<(Tensor<T>, LabelVolume)> {
    check_axis(plane.0)?;
    check_axis(plane.1)?;
    if plane.0 == plane.1 {
        return Err(Error::InvalidAxis {
            axis: plane.1,
            rank: 3,
        });
    }
    let dims = check_congruent(image, labels)?;
    let (c, _) = image.dims4()?;
    let per: usize = dims.iter().product();
    let sources = rotation_sources(dims, plane, angle);
    let mut img = Vec::with_capacity(image.len());
    for ch in 0..c {
        let s = &image.data()[ch * per..(ch + 1) * per];
        img.extend(sources.iter().map(|&q| sample_zero_padded(s, dims, q)));
    }
    let map: Vec<Option<usize>> = sources.iter().map(|&q| nearest_source(q, dims)).collect();
    let lab = gather(labels.data(), 1, dims, 0, &map);
    Ok((
        Tensor::new(image.shape().to_vec(), img)?,
        LabelVolume::new(dims, labels.class_count(), lab)?,
    ))
}

/// Apply one transform coherently to an image and its labels.
pub fn apply<T: Real>(t: TransformDraw, image: &Tensor<T>, labels: &LabelVolume) -> Result<(Tensor<T>, LabelVolume)> {
    match t {
        TransformDraw::Identity => {
            check_congruent(image, labels)?;
            Ok((image.clone(), labels.clone()))
        }
        TransformDraw::Flip { axis } => flip(image, labels, axis),
        TransformDraw::Rotate { plane, angle } => rotate(image, labels, plane, angle),
    }
}

fn check_window(offsets: [usize; 3], extents: [usize; 3], dims: [usize; 3]) -> Result<()> {
    for k in 0..3 {
        if extents[k] == 0 || offsets[k] + extents[k] > dims[k] {
            return Err(Error::WindowOutOfBounds { offsets, extents, dims });
        }
    }
    Ok(())
}

fn crop_slice<V: Copy>(src: &[V], channels: usize, dims: [usize; 3], offsets: [usize; 3], extents: [usize; 3]) -> Vec<V> {
    let per: usize = dims.iter().product();
    let mut out = Vec::with_capacity(channels * extents.iter().product::<usize>());
    for c in 0..channels {
        let s = &src[c * per..(c + 1) * per];
        for z in offsets[0]..offsets[0] + extents[0] {
            for y in offsets[1]..offsets[1] + extents[1] {
                let row = (z * dims[1] + y) * dims[2];
                out.extend_from_slice(&s[row + offsets[2]..row + offsets[2] + extents[2]]);
            }
        }
    }
    out
}

pub fn crop<T: Real>(v: &Tensor<T>, offsets: [usize; 3], extents: [usize; 3]) -> Result<Tensor<T>> {
    let (c, dims) = v.dims4()?;
    check_window(offsets, extents, dims)?;
    let data = crop_slice(v.data(), c, dims, offsets, extents);
    let shape = if v.rank() == 3 { extents.to_vec() } else { vec![c, extents[0], extents[1], extents[2]] };
    Tensor::new(shape, data)
}

pub fn crop_labels(v: &LabelVolume, offsets: [usize; 3], extents: [usize; 3]) -> Result<LabelVolume> {
    check_window(offsets, extents, v.dims())?;
    LabelVolume::new(extents, v.class_count(), crop_slice(v.data(), 1, v.dims(), offsets, extents))
}

/// Extents after downsampling by `factor`: `floor(n / factor)`, at least 1.
pub fn downsampled_dims(dims: [usize; 3], factor: usize) -> Result<[usize; 3]> {
    if factor == 0 {
        return Err(Error::Config("downsample factor must be at least 1".into()));
    }
    Ok(dims.map(|n| (n / factor).max(1)))
}

pub fn downsample<T: Real>(v: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (_, dims) = v.dims4()?;
    resample_trilinear(v, downsampled_dims(dims, factor)?)
}

pub fn downsample_labels(v: &LabelVolume, factor: usize) -> Result<LabelVolume> {
    resample_nearest(v, downsampled_dims(v.dims(), factor)?)
}

/// Centered crop to the largest extents divisible by `multiple`.
pub fn center_crop_to_multiple<T: Real>(
    image: &Tensor<T>,
    labels: &LabelVolume,
    multiple: usize,
) -> Result<(Tensor<T>, LabelVolume)> {
    let dims = check_congruent(image, labels)?;
    let extents = dims.map(|n| n / multiple * multiple);
    if extents.contains(&0) {
        return Err(Error::NotDivisible {
            extent: *dims.iter().min().expect("three extents"),
            divisor: multiple,
        });
    }
    let offsets = [0, 1, 2].map(|k| (dims[k] - extents[k]) / 2);
    Ok((crop(image, offsets, extents)?, crop_labels(labels, offsets, extents)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Half {
    /// Indices `0..ceil(n/2)`.
    Lower,
    /// Indices `floor(n/2)..n`.
    Upper,
}

impl Half {
    fn contains(self, i: usize, n: usize) -> bool {
        match self {
            Half::Lower => i < n.div_ceil(2),
            Half::Upper => i >= n / 2,
        }
    }
}

/// Reflect the healthy `source` half of the volume across the mid-plane of
/// `axis`, producing a volume without foreground.
pub fn mirror_hemisphere<T: Real>(
    image: &Tensor<T>,
    labels: &LabelVolume,
    axis: usize,
    source: Half,
) -> Result<(Tensor<T>, LabelVolume)> {
    check_axis(axis)?;
    let dims = check_congruent(image, labels)?;
    let (c, _) = image.dims4()?;
    let n = dims[axis];
    let [d, h, w] = dims;
    let mut map = Vec::with_capacity(d * h * w);
    let mut foreground = 0;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z, y, x];
                let i = (z * h + y) * w + x;
                if source.contains(p[axis], n) {
                    if labels.data()[i] != 0 {
                        foreground += 1;
                    }
                    map.push(Some(i));
                } else {
                    let mut q = p;
                    q[axis] = n - 1 - p[axis];
                    map.push(Some((q[0] * h + q[1]) * w + q[2]));
                }
            }
        }
    }
    if foreground > 0 {
        return Err(Error::ForegroundInSourceHalf(foreground));
    }
    let img = Tensor::new(image.shape().to_vec(), gather(image.data(), c, dims, T::zero(), &map))?;
    Ok((img, LabelVolume::background(dims, labels.class_count())))
}
