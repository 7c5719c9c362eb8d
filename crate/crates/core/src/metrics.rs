//! Evaluation metrics over hard label volumes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{LabelVolume, Real, Tensor};

/// A named group of foreground classes evaluated as one binary region.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub name: String,
    pub classes: Vec<u8>,
}

/// Ordered set of evaluation regions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionMap {
    pub region: Vec<Region>,
}

impl Default for RegionMap {
    /// Labels: 1 necrosis, 2 edema, 3 non-enhancing, 4 enhancing.
    fn default() -> Self {
        let r = |name: &str, classes: &[u8]| Region {
            name: name.into(),
            classes: classes.to_vec(),
        };
        Self {
            region: vec![r("whole", &[1, 2, 3, 4]), r("core", &[1, 3, 4]), r("enhanced", &[4])],
        }
    }
}

impl RegionMap {
    /// One region per foreground class, named `class<k>`.
    pub fn per_class(class_count: usize) -> Self {
        Self {
            region: (1..class_count as u8)
                .map(|k| Region {
                    name: format!("class{k}"),
                    classes: vec![k],
                })
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Region> {
        self.region
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::UnknownRegion(name.into()))
    }

    pub fn names(&self) -> Vec<&str> {
        self.region.iter().map(|r| r.name.as_str()).collect()
    }

    pub fn validate(&self, class_count: usize) -> Result<()> {
        for r in &self.region {
            if let Some(&c) = r.classes.iter().find(|&&c| c == 0 || c as usize >= class_count) {
                return Err(Error::Config(format!(
                    "region {} lists class {c} outside 1..{}",
                    r.name,
                    class_count - 1
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl std::ops::AddAssign for Confusion {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl Confusion {
    pub fn dice(&self) -> Option<f64> {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn sensitivity(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> Option<f64> {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn metrics(&self) -> RegionMetrics {
        RegionMetrics {
            dice: self.dice(),
            precision: self.precision(),
            sensitivity: self.sensitivity(),
            specificity: self.specificity(),
        }
    }
}

/// Metrics for one region; `None` marks an empty denominator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionMetrics {
    pub dice: Option<f64>,
    pub precision: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

fn check_pair(pred: &LabelVolume, truth: &LabelVolume) -> Result<()> {
    if pred.dims() != truth.dims() {
        return Err(Error::ShapeMismatch {
            left: pred.dims().to_vec(),
            right: truth.dims().to_vec(),
        });
    }
    Ok(())
}

pub fn confusion(pred: &LabelVolume, truth: &LabelVolume, classes: &[u8]) -> Result<Confusion> {
    check_pair(pred, truth)?;
    let mut member = [false; 256];
    for &c in classes {
        member[c as usize] = true;
    }
    let mut m = Confusion::default();
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        match (member[p as usize], member[t as usize]) {
            (true, true) => m.tp += 1,
            (true, false) => m.fp += 1,
            (false, true) => m.fn_ += 1,
            (false, false) => m.tn += 1,
        }
    }
    Ok(m)
}

pub fn confusion_metrics(pred: &LabelVolume, truth: &LabelVolume, region: &str, map: &RegionMap) -> Result<RegionMetrics> {
    let r = map.get(region)?;
    Ok(confusion(pred, truth, &r.classes)?.metrics())
}

/// One-vs-all confusion of `class`: a voxel is predicted positive when its
/// score in that channel exceeds `threshold`, whatever the other channels say.
pub fn binary_confusion<T: Real>(scores: &Tensor<T>, truth: &LabelVolume, class: usize, threshold: f64) -> Result<Confusion> {
    let (c, dims) = scores.dims4()?;
    if dims != truth.dims() {
        return Err(Error::ShapeMismatch {
            left: scores.shape().to_vec(),
            right: truth.dims().to_vec(),
        });
    }
    if class >= c {
        return Err(Error::LabelOutOfRange {
            label: class,
            class_count: c,
        });
    }
    let mut m = Confusion::default();
    for (&s, &t) in scores.channel(class).iter().zip(truth.data()) {
        match (s.as_f64() > threshold, t as usize == class) {
            (true, true) => m.tp += 1,
            (true, false) => m.fp += 1,
            (false, true) => m.fn_ += 1,
            (false, false) => m.tn += 1,
        }
    }
    Ok(m)
}

/// Per-class voxel fractions averaged over volumes.
pub fn class_frequencies(dataset: &[LabelVolume]) -> Result<Vec<f64>> {
    let first = dataset.first().ok_or(Error::EmptyDataset)?;
    let classes = first.class_count();
    let mut acc = vec![0.0; classes];
    for v in dataset {
        if v.class_count() != classes {
            return Err(Error::ChannelMismatch {
                expected: classes,
                actual: v.class_count(),
            });
        }
        let mut counts = vec![0u64; classes];
        for &l in v.data() {
            counts[l as usize] += 1;
        }
        for (a, c) in acc.iter_mut().zip(counts) {
            *a += c as f64 / v.len() as f64;
        }
    }
    Ok(acc.into_iter().map(|a| a / dataset.len() as f64).collect())
}

/// `Σ min(P_i, T_i) / Σ max(P_i, T_i)` over integer labels; `None` when
/// both volumes are all background.
pub fn multiclass_jaccard_reference(p: &LabelVolume, t: &LabelVolume) -> Result<Option<f64>> {
    check_pair(p, t)?;
    let (mut lo, mut hi) = (0u64, 0u64);
    for (&a, &b) in p.data().iter().zip(t.data()) {
        lo += a.min(b) as u64;
        hi += a.max(b) as u64;
    }
    Ok(ratio(lo, hi))
}

/// Render an optional metric for CSV output.
pub fn format_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |x| format!("{x:.6}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(d: &[u8]) -> LabelVolume {
        LabelVolume::new([1, 1, d.len()], 5, d.to_vec()).unwrap()
    }

    #[test]
    fn identical_volumes_score_one() {
        let a = vol(&[0, 1, 2, 4, 4, 0]);
        let map = RegionMap::default();
        for name in map.names() {
            let m = confusion_metrics(&a, &a, name, &map).unwrap();
            for v in [m.dice, m.precision, m.sensitivity, m.specificity].into_iter().flatten() {
                assert_eq!(v, 1.0);
            }
        }
    }

    #[test]
    fn empty_prediction() {
        let truth = vol(&[0, 1, 2, 0]);
        let pred = vol(&[0, 0, 0, 0]);
        let m = confusion_metrics(&pred, &truth, "whole", &RegionMap::default()).unwrap();
        assert_eq!(m.sensitivity, Some(0.0));
        assert_eq!(m.specificity, Some(1.0));
        assert_eq!(m.precision, None);
        assert_eq!(format_metric(m.precision), "undefined");
    }

    #[test]
    fn unknown_region_is_an_error() {
        let a = vol(&[0]);
        assert!(matches!(
            confusion_metrics(&a, &a, "nope", &RegionMap::default()),
            Err(Error::UnknownRegion(_))
        ));
    }

    #[test]
    fn frequencies() {
        let bg = LabelVolume::background([2, 2, 2], 3);
        assert_eq!(class_frequencies(std::slice::from_ref(&bg)).unwrap(), vec![1.0, 0.0, 0.0]);
        let mut d = vec![0u8; 64];
        for z in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    d[z * 16 + y * 4 + x] = 2;
                }
            }
        }
        let oct = LabelVolume::new([4, 4, 4], 3, d).unwrap();
        let f = class_frequencies(&[oct, bg]).unwrap();
        assert_eq!(f, vec![(0.875 + 1.0) / 2.0, 0.0, 0.125 / 2.0]);
        assert!(matches!(class_frequencies(&[]), Err(Error::EmptyDataset)));
    }

    #[test]
    fn binary_confusion_ignores_other_channels() {
        let truth = vol(&[0, 1, 1, 2]);
        let scores = Tensor::new(vec![5, 1, 1, 4], [[0.0; 4], [0.2, 0.9, 0.4, 0.7], [1.0; 4], [0.0; 4], [0.0; 4]].concat()).unwrap();
        let m = binary_confusion(&scores, &truth, 1, 0.5).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_, m.tn), (1, 1, 1, 1));
        assert!(binary_confusion(&scores, &truth, 5, 0.5).is_err());
    }

    #[test]
    fn multiclass_reference_examples() {
        assert_eq!(multiclass_jaccard_reference(&vol(&[2]), &vol(&[1])).unwrap(), Some(0.5));
        assert_eq!(multiclass_jaccard_reference(&vol(&[0, 3]), &vol(&[0, 3])).unwrap(), Some(1.0));
        assert_eq!(multiclass_jaccard_reference(&vol(&[0]), &vol(&[0])).unwrap(), None);
    }
}
