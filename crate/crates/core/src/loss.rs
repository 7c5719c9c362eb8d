//! Overlap losses and the cross-entropy baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{LabelVolume, Real, Tensor};

/// Smoothing added to numerator and denominator of the overlap ratios, and
/// the probability clamp used by cross-entropy.
pub const SMOOTH: f64 = 1e-7;

/// A soft (`[0, 1]`) or hard (`{0, 1}`) mask over one volume.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    values: Vec<f64>,
}

impl BinaryMask {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidShape {
                shape: vec![values.len()],
                reason: format!("mask value {v} outside [0, 1]"),
            });
        }
        Ok(Self { values })
    }

    pub fn from_bits(bits: &[bool]) -> Self {
        Self {
            values: bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `(Σ p·t, Σ p² + Σ t²)` accumulated in f64.
fn overlap<T: Real>(p: &[T], t: &[T]) -> (f64, f64) {
    let mut inter = 0.0;
    let mut squares = 0.0;
    for (&a, &b) in p.iter().zip(t) {
        let (a, b) = (a.as_f64(), b.as_f64());
        inter += a * b;
        squares += a * a + b * b;
    }
    (inter, squares)
}

fn jaccard_terms(inter: f64, squares: f64) -> f64 {
    (inter + SMOOTH) / (squares - inter + SMOOTH)
}

fn check_len(p: &BinaryMask, t: &BinaryMask) -> Result<()> {
    if p.len() != t.len() {
        return Err(Error::ShapeMismatch {
            left: vec![p.len()],
            right: vec![t.len()],
        });
    }
    Ok(())
}

/// Smoothed Jaccard index `(Σ PT + ε) / (Σ P² + Σ T² − Σ PT + ε)`.
pub fn jaccard(p: &BinaryMask, t: &BinaryMask) -> Result<f64> {
    check_len(p, t)?;
    let (i, s) = overlap(p.values(), t.values());
    Ok(jaccard_terms(i, s))
}

/// Smoothed dice coefficient `(2 Σ PT + ε) / (Σ P² + Σ T² + ε)`.
pub fn dice(p: &BinaryMask, t: &BinaryMask) -> Result<f64> {
    check_len(p, t)?;
    let (i, s) = overlap(p.values(), t.values());
    Ok((2.0 * i + SMOOTH) / (s + SMOOTH))
}

/// Which score channels a loss sums over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassSet {
    #[default]
    Foreground,
    All,
}

impl ClassSet {
    pub fn classes(self, class_count: usize) -> Vec<usize> {
        match self {
            ClassSet::Foreground => (1..class_count).collect(),
            ClassSet::All => (0..class_count).collect(),
        }
    }
}

/// Loss value with its per-class terms.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub per_class: Vec<(usize, f64)>,
}

fn check_scores<T: Real>(scores: &Tensor<T>, target: &LabelVolume) -> Result<(usize, usize)> {
    let (c, dims) = scores.dims4()?;
    if dims != target.dims() {
        return Err(Error::ShapeMismatch {
            left: scores.shape().to_vec(),
            right: target.dims().to_vec(),
        });
    }
    if c != target.class_count() {
        return Err(Error::ChannelMismatch {
            expected: target.class_count(),
            actual: c,
        });
    }
    Ok((c, scores.len() / c))
}

/// Σ over `classes` of `1 − jaccard(P_c, onehot_c(target))`.
pub fn jaccard_loss<T: Real>(scores: &Tensor<T>, target: &LabelVolume, classes: ClassSet) -> Result<LossValue> {
    let (c, _) = check_scores(scores, target)?;
    let mut per_class = Vec::new();
    for k in classes.classes(c) {
        let t: Vec<T> = target.one_hot(k);
        let (i, s) = overlap(scores.channel(k), &t);
        per_class.push((k, 1.0 - jaccard_terms(i, s)));
    }
    Ok(LossValue {
        total: per_class.iter().map(|(_, v)| v).sum(),
        per_class,
    })
}

/// Gradient of [`jaccard_loss`] with respect to `scores`.
pub fn jaccard_loss_grad<T: Real>(scores: &Tensor<T>, target: &LabelVolume, classes: ClassSet) -> Result<Tensor<T>> {
    let (c, per) = check_scores(scores, target)?;
    let mut grad = Tensor::zeros_like(scores);
    for k in classes.classes(c) {
        let t: Vec<T> = target.one_hot(k);
        let p = scores.channel(k);
        let (i, s) = overlap(p, &t);
        let num = i + SMOOTH;
        let den = s - i + SMOOTH;
        let den2 = den * den;
        let g = &mut grad.data_mut()[k * per..(k + 1) * per];
        for ((gv, &pv), &tv) in g.iter_mut().zip(p).zip(&t) {
            let (pv, tv) = (pv.as_f64(), tv.as_f64());
            // d/dp of −num/den
            let d = (tv * den - num * (2.0 * pv - tv)) / den2;
            *gv = T::from_f64_lossy(-d);
        }
    }
    Ok(grad)
}

/// Mean over voxels of `−log p_true`, probabilities clamped to `[ε, 1 − ε]`.
pub fn cross_entropy<T: Real>(scores: &Tensor<T>, target: &LabelVolume) -> Result<f64> {
    let (_, per) = check_scores(scores, target)?;
    let s = scores.data();
    let total: f64 = target
        .data()
        .iter()
        .enumerate()
        .map(|(v, &l)| -s[l as usize * per + v].as_f64().clamp(SMOOTH, 1.0 - SMOOTH).ln())
        .sum();
    Ok(total / per as f64)
}

pub fn cross_entropy_grad<T: Real>(scores: &Tensor<T>, target: &LabelVolume) -> Result<Tensor<T>> {
    let (_, per) = check_scores(scores, target)?;
    let mut grad = Tensor::zeros_like(scores);
    let n = per as f64;
    for (v, &l) in target.data().iter().enumerate() {
        let idx = l as usize * per + v;
        let p = scores.data()[idx].as_f64();
        if p > SMOOTH && p < 1.0 - SMOOTH {
            grad.data_mut()[idx] = T::from_f64_lossy(-1.0 / (n * p));
        }
    }
    Ok(grad)
}

/// Training objective applied to the network's probability output.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Jaccard,
    CrossEntropy,
}

impl LossKind {
    pub fn value<T: Real>(self, scores: &Tensor<T>, target: &LabelVolume, classes: ClassSet) -> Result<f64> {
        match self {
            LossKind::Jaccard => jaccard_loss(scores, target, classes).map(|l| l.total),
            LossKind::CrossEntropy => cross_entropy(scores, target),
        }
    }

    pub fn grad<T: Real>(self, scores: &Tensor<T>, target: &LabelVolume, classes: ClassSet) -> Result<Tensor<T>> {
        match self {
            LossKind::Jaccard => jaccard_loss_grad(scores, target, classes),
            LossKind::CrossEntropy => cross_entropy_grad(scores, target),
        }
    }
}
