//! Synthetic labeled volumes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::{mirror_hemisphere, Half};
use crate::error::{Error, Result};
use crate::optim::Sample;
use crate::tensor::{LabelVolume, Tensor};

/// An axis-aligned ellipsoid painted with one class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Blob {
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub class: u8,
}

impl Blob {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|k| ((p[k] - self.center[k]) / self.radii[k]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    Spheres,
    HandLike,
    Imbalanced,
}

/// Paint `blobs` in order (later blobs overwrite earlier ones) and derive
/// an image whose channels carry the class index scaled to `[0, 1]` plus
/// Gaussian noise of standard deviation `noise`.
pub fn render<R: Rng + ?Sized>(
    dims: [usize; 3],
    class_count: usize,
    channels: usize,
    blobs: &[Blob],
    noise: f64,
    rng: &mut R,
) -> Result<Sample<f32>> {
    let [d, h, w] = dims;
    let mut labels = vec![0u8; d * h * w];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64, y as f64, x as f64];
                for b in blobs {
                    if b.contains(p) {
                        labels[(z * h + y) * w + x] = b.class;
                    }
                }
            }
        }
    }
    let labels = LabelVolume::new(dims, class_count, labels)?;
    let normal = Normal::new(0.0, noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let scale = 1.0 / (class_count - 1) as f64;
    let mut image = Vec::with_capacity(channels * labels.len());
    for c in 0..channels {
        let gain = 1.0 + 0.25 * c as f64;
        for &l in labels.data() {
            let v = l as f64 * scale * gain + if noise > 0.0 { normal.sample(rng) } else { 0.0 };
            image.push(v as f32);
        }
    }
    Ok(Sample {
        image: Tensor::new(vec![channels, d, h, w], image)?,
        labels,
    })
}

/// Two-class volume with one centered sphere of radius `radius · min(dims) / 2`.
pub fn sphere(dims: [usize; 3], radius: f64, noise: f64, seed: u64) -> Result<Sample<f32>> {
    let r = radius * *dims.iter().min().expect("three extents") as f64 / 2.0;
    let blob = Blob {
        center: dims.map(|n| (n as f64 - 1.0) / 2.0),
        radii: [r; 3],
        class: 1,
    };
    render(dims, 2, 1, &[blob], noise, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// One random ellipsoid per foreground class.
pub fn spheres(dims: [usize; 3], class_count: usize, channels: usize, seed: u64) -> Result<Sample<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let min = *dims.iter().min().expect("three extents") as f64;
    let blobs: Vec<Blob> = (1..class_count as u8)
        .map(|class| {
            let radii = [0, 1, 2].map(|_| rng.random_range(0.12..0.25) * min);
            let center = [0, 1, 2].map(|k| {
                let n = dims[k] as f64;
                rng.random_range(radii[k].min(n / 2.0)..(n - radii[k]).max(n / 2.0 + 1e-9))
            });
            Blob { center, radii, class }
        })
        .collect();
    render(dims, class_count, channels, &blobs, 0.1, &mut rng)
}

/// Five classes: background and four bone segments per finger, chained
/// along the width axis with shrinking size, several fingers side by side.
pub fn hand_like(dims: [usize; 3], channels: usize, seed: u64) -> Result<Sample<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [d, h, w] = dims.map(|n| n as f64);
    let fingers = 4;
    let lengths = [0.3, 0.2, 0.13, 0.09];
    let thick = [0.09, 0.075, 0.06, 0.05];
    let mut blobs = Vec::new();
    for f in 0..fingers {
        let cy = h * (f as f64 + 0.5) / fingers as f64 + rng.random_range(-0.03..0.03) * h;
        let cz = d / 2.0 + rng.random_range(-0.08..0.08) * d;
        let mut x = w * rng.random_range(0.04..0.1);
        for (seg, (&len, &t)) in lengths.iter().zip(&thick).enumerate() {
            let half = len * w / 2.0;
            let r = (t * d.min(h / fingers as f64 * 2.0)).max(1.0);
            blobs.push(Blob {
                center: [cz, cy, x + half],
                radii: [r, r, half],
                class: seg as u8 + 1,
            });
            x += 2.0 * half + 0.02 * w;
        }
    }
    render(dims, 5, channels, &blobs, 0.1, &mut rng)
}

/// Per-class voxel fractions of [`imbalanced`] volumes: a common class and
/// two rare ones below one voxel in a thousand.
pub const IMBALANCED_FRACTIONS: [f64; 3] = [5.13e-3, 6.78e-4, 4.32e-4];

/// Four classes with voxel fractions near [`IMBALANCED_FRACTIONS`], each a
/// sphere at a random position.
pub fn imbalanced(dims: [usize; 3], channels: usize, noise: f64, seed: u64) -> Result<Sample<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total: f64 = dims.iter().product::<usize>() as f64;
    let mut blobs: Vec<Blob> = Vec::new();
    for (i, &frac) in IMBALANCED_FRACTIONS.iter().enumerate() {
        let r = (3.0 * frac * total / (4.0 * std::f64::consts::PI)).cbrt();
        // Keep spheres apart and inside the volume.
        let center = loop {
            let c = dims.map(|n| rng.random_range(r + 1.0..(n as f64 - r - 2.0).max(r + 1.0 + 1e-9)));
            let clear = blobs
                .iter()
                .all(|b| (0..3).map(|k| (b.center[k] - c[k]).powi(2)).sum::<f64>().sqrt() > b.radii[0] + r + 2.0);
            if clear {
                break c;
            }
        };
        blobs.push(Blob {
            center,
            radii: [r; 3],
            class: i as u8 + 1,
        });
    }
    render(dims, 4, channels, &blobs, noise, &mut rng)
}

/// Reflect whichever half of `axis` is free of foreground. `None` when
/// both halves contain foreground.
pub fn healthy_mirror(sample: &Sample<f32>, axis: usize) -> Result<Option<Sample<f32>>> {
    for half in [Half::Lower, Half::Upper] {
        match mirror_hemisphere(&sample.image, &sample.labels, axis, half) {
            Ok((image, labels)) => return Ok(Some(Sample { image, labels })),
            Err(Error::ForegroundInSourceHalf(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(None)
}

pub fn generate(kind: SynthKind, dims: [usize; 3], channels: usize, seed: u64) -> Result<Sample<f32>> {
    match kind {
        SynthKind::Spheres => spheres(dims, 5, channels, seed),
        SynthKind::HandLike => hand_like(dims, channels, seed),
        SynthKind::Imbalanced => imbalanced(dims, channels, 0.1, seed),
    }
}
