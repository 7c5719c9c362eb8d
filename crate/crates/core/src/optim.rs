//! Adam, the training loop and cross-validation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{apply, AugmentPolicy};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::loss::{ClassSet, LossKind};
use crate::metrics::{confusion, Confusion, RegionMap, RegionMetrics};
use crate::network::{predict_labels, ArchSpec, Network, OutputActivation, OutputGrad, SegmentationOutput};
use crate::tensor::{resample_nearest, LabelVolume, Real, Tensor};

/// Offsets added to the master seed for each consumer of randomness.
pub mod seed_offset {
    pub const INIT: u64 = 0;
    pub const AUGMENT: u64 = 1;
    pub const FOLDS: u64 = 2;
    pub const SYNTH: u64 = 3;
}

/// Adam hyperparameters. `beta1` and `beta2` are the fractions of the
/// previous moment estimates retained at each step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.1,
            beta2: 0.001,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    /// The conventional `0.9 / 0.999` retention coefficients.
    pub fn conventional(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T = f32> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig, params: &[&Tensor<T>]) -> Self {
        Self {
            config,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros_like(p)).collect(),
            v: params.iter().map(|p| Tensor::zeros_like(p)).collect(),
        }
    }
}

/// One bias-corrected Adam update:
/// `m ← β₁m + (1−β₁)g`, `v ← β₂v + (1−β₂)g²`,
/// `p ← p − lr·m̂ / (√v̂ + ε)` with `m̂ = m/(1−β₁ᵗ)`, `v̂ = v/(1−β₂ᵗ)`.
pub fn adam_step<T: Real>(params: &mut [&mut Tensor<T>], grads: &[Tensor<T>], state: &mut AdamState<T>) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch {
            left: vec![params.len()],
            right: vec![grads.len(), state.m.len()],
        });
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::ShapeMismatch {
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let b1 = T::from_f64_lossy(c.beta1);
    let b2 = T::from_f64_lossy(c.beta2);
    let one = T::one();
    let corr1 = T::from_f64_lossy(1.0 - c.beta1.powi(t));
    let corr2 = T::from_f64_lossy(1.0 - c.beta2.powi(t));
    let lr = T::from_f64_lossy(c.lr);
    let eps = T::from_f64_lossy(c.eps);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = b1 * *mv + (one - b1) * gv;
            *vv = b2 * *vv + (one - b2) * gv * gv;
            let mh = *mv / corr1;
            let vh = *vv / corr2;
            *pv = *pv - lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// An image `(C, D, H, W)` with its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T = f32> {
    pub image: Tensor<T>,
    pub labels: LabelVolume,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// Epochs without improvement of the best validation loss before stopping.
    pub patience: usize,
    /// Minimum decrease that counts as an improvement.
    pub tolerance: f64,
    pub augment: AugmentPolicy,
    pub seed: u64,
    pub loss: LossKind,
    pub loss_classes: ClassSet,
    /// Weights of the half- and quarter-resolution head losses.
    pub aux_weights: [f64; 2],
    pub adam: AdamConfig,
    /// Training volumes held out for validation inside each cross-validation fold.
    pub val_holdout: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 600,
            patience: 100,
            tolerance: 1e-6,
            augment: AugmentPolicy::Random,
            seed: 0,
            loss: LossKind::Jaccard,
            loss_classes: ClassSet::Foreground,
            aux_weights: [0.0, 0.0],
            adam: AdamConfig::default(),
            val_holdout: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be positive".into()));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterLog {
    pub epoch: usize,
    pub iteration: usize,
    pub fused: f64,
    /// Losses of the half- and quarter-resolution heads (empty for one head).
    pub aux: Vec<f64>,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T = f32> {
    /// Snapshot with the best validation loss.
    pub net: Network<T>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs: Vec<EpochLog>,
    pub iterations: Vec<IterLog>,
}

fn check_sample<T: Real>(net: &Network<T>, s: &Sample<T>) -> Result<()> {
    let (_, dims) = s.image.dims4()?;
    if dims != s.labels.dims() {
        return Err(Error::ShapeMismatch {
            left: s.image.shape().to_vec(),
            right: s.labels.dims().to_vec(),
        });
    }
    if s.labels.class_count() != net.spec().class_count {
        return Err(Error::ChannelMismatch {
            expected: net.spec().class_count,
            actual: s.labels.class_count(),
        });
    }
    Ok(())
}

/// Mean loss of the fused output over `set`, evaluated in inference mode.
pub fn evaluate_loss<T: Real>(net: &Network<T>, set: &[Sample<T>], loss: LossKind, classes: ClassSet) -> Result<f64> {
    let mut total = 0.0;
    for s in set {
        let out = net.infer(&s.image)?;
        total += loss.value(&out.probabilities, &s.labels, classes)?;
    }
    Ok(total / set.len() as f64)
}

/// Loss components of one iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLoss {
    pub fused: f64,
    pub aux: Vec<f64>,
    pub total: f64,
}

/// Total training loss of a forward output (fused map plus weighted
/// auxiliary heads against nearest-downsampled labels) and its gradient
/// with respect to the raw network outputs.
pub fn objective<T: Real>(
    output: OutputActivation,
    out: &SegmentationOutput<T>,
    labels: &LabelVolume,
    cfg: &TrainConfig,
) -> Result<(StepLoss, OutputGrad<T>)> {
    let fused = cfg.loss.value(&out.probabilities, labels, cfg.loss_classes)?;
    let dprob = cfg.loss.grad(&out.probabilities, labels, cfg.loss_classes)?;
    let mut grad = OutputGrad::fused_only(output.vjp(&out.probabilities, &dprob));
    let mut aux = Vec::new();
    let mut total = fused;
    if out.heads.len() > 1 {
        grad.heads.push(None);
        for (k, head) in out.heads.iter().enumerate().skip(1) {
            let (_, dims) = head.dims4()?;
            let target = resample_nearest(labels, dims)?;
            let probs = output.apply(head);
            let value = cfg.loss.value(&probs, &target, cfg.loss_classes)?;
            let w = cfg.aux_weights[k - 1];
            aux.push(value);
            total += w * value;
            if w != 0.0 {
                let g = cfg.loss.grad(&probs, &target, cfg.loss_classes)?;
                grad.heads.push(Some(output.vjp(&probs, &g).scale(T::from_f64_lossy(w))));
            } else {
                grad.heads.push(None);
            }
        }
    }
    Ok((StepLoss { fused, aux, total }, grad))
}

/// One optimization step on one volume.
pub fn train_step<T: Real>(
    net: &mut Network<T>,
    adam: &mut AdamState<T>,
    sample: &Sample<T>,
    cfg: &TrainConfig,
) -> Result<StepLoss> {
    let out = net.forward(&sample.image, Mode::Train)?;
    let (loss, grad) = objective(net.spec().output, &out, &sample.labels, cfg)?;
    let grads = net.backward(&grad)?;
    net.clear_tape();
    adam_step(&mut net.params_mut(), &grads.tensors, adam)?;
    Ok(loss)
}

/// Train on `dataset`, one volume per iteration, validating after each
/// epoch on `val_set` (or on `dataset` when `val_set` is empty).
pub fn train<T: Real>(
    mut net: Network<T>,
    dataset: &[Sample<T>],
    val_set: &[Sample<T>],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for s in dataset.iter().chain(val_set) {
        check_sample(&net, s)?;
    }
    let val = if val_set.is_empty() { dataset } else { val_set };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(seed_offset::AUGMENT));
    let mut adam = AdamState::new(cfg.adam, &net.params());
    let mut epochs = Vec::new();
    let mut iterations = Vec::new();
    let mut best: Option<(Network<T>, usize, f64)> = None;
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        let mut train_sum = 0.0;
        for s in dataset {
            let draw = cfg.augment.draw(&mut rng);
            let (image, labels) = apply(draw, &s.image, &s.labels)?;
            let loss = train_step(&mut net, &mut adam, &Sample { image, labels }, cfg)?;
            train_sum += loss.total;
            iterations.push(IterLog {
                epoch,
                iteration: iterations.len() + 1,
                fused: loss.fused,
                aux: loss.aux,
                total: loss.total,
            });
        }
        let val_loss = evaluate_loss(&net, val, cfg.loss, cfg.loss_classes)?;
        epochs.push(EpochLog {
            epoch,
            train_loss: train_sum / dataset.len() as f64,
            val_loss,
        });
        let improved = match &best {
            None => !val_loss.is_nan(),
            Some((_, _, b)) => val_loss < b - cfg.tolerance,
        };
        if improved {
            best = Some((net.clone(), epoch, val_loss));
            stale = 0;
        } else {
            stale += 1;
        }
        if stale >= cfg.patience {
            break;
        }
    }
    let (net, best_epoch, best_val_loss) = best.ok_or_else(|| Error::Config("validation loss is NaN".into()))?;
    Ok(TrainOutcome {
        net,
        best_epoch,
        best_val_loss,
        epochs,
        iterations,
    })
}

/// Seeded shuffle of `0..n` cut into `k` contiguous folds whose sizes differ
/// by at most one.
pub fn fold_partition(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    if k > n {
        return Err(Error::TooManyFolds { folds: k, size: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(seed_offset::FOLDS)));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let len = base + usize::from(i < extra);
        folds.push(order[start..start + len].to_vec());
        start += len;
    }
    Ok(folds)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldReport {
    pub fold: usize,
    pub test_indices: Vec<usize>,
    /// One entry per region, in region-map order.
    pub metrics: Vec<(String, RegionMetrics)>,
}

#[derive(Clone, Debug)]
pub struct CrossvalOutcome<T = f32> {
    pub folds: Vec<TrainOutcome<T>>,
    pub reports: Vec<FoldReport>,
    /// Mean over folds of each defined metric.
    pub mean: Vec<(String, RegionMetrics)>,
}

/// Pool the confusion counts of all `(prediction, truth)` pairs per region.
pub fn region_report(pairs: &[(LabelVolume, LabelVolume)], regions: &RegionMap) -> Result<Vec<(String, RegionMetrics)>> {
    regions
        .region
        .iter()
        .map(|r| {
            let mut acc = Confusion::default();
            for (p, t) in pairs {
                acc += confusion(p, t, &r.classes)?;
            }
            Ok((r.name.clone(), acc.metrics()))
        })
        .collect()
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn mean_report(reports: &[FoldReport]) -> Vec<(String, RegionMetrics)> {
    let Some(first) = reports.first() else {
        return Vec::new();
    };
    (0..first.metrics.len())
        .map(|i| {
            let col = |f: fn(&RegionMetrics) -> Option<f64>| mean_defined(reports.iter().map(|r| f(&r.metrics[i].1)));
            (
                first.metrics[i].0.clone(),
                RegionMetrics {
                    dice: col(|m| m.dice),
                    precision: col(|m| m.precision),
                    sensitivity: col(|m| m.sensitivity),
                    specificity: col(|m| m.specificity),
                },
            )
        })
        .collect()
}

/// Train one network per fold (folds run in parallel) and evaluate each on
/// its held-out fold.
pub fn crossval<T: Real>(
    spec: &ArchSpec,
    dataset: &[Sample<T>],
    k: usize,
    cfg: &TrainConfig,
    regions: &RegionMap,
) -> Result<CrossvalOutcome<T>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    regions.validate(spec.class_count)?;
    let folds = fold_partition(dataset.len(), k, cfg.seed)?;
    let results: Vec<Result<(TrainOutcome<T>, FoldReport)>> = folds
        .par_iter()
        .enumerate()
        .map(|(i, test)| {
            let rest: Vec<Sample<T>> = (0..dataset.len())
                .filter(|j| !test.contains(j))
                .map(|j| dataset[j].clone())
                .collect();
            let hold = if cfg.val_holdout < rest.len() { cfg.val_holdout } else { 0 };
            let (train_set, val_set) = rest.split_at(rest.len() - hold);
            let net = Network::build(spec, cfg.seed.wrapping_add(seed_offset::INIT))?;
            let outcome = train(net, train_set, val_set, cfg)?;
            let pairs = test
                .iter()
                .map(|&j| Ok((predict_labels(&outcome.net, &dataset[j].image)?, dataset[j].labels.clone())))
                .collect::<Result<Vec<_>>>()?;
            let report = FoldReport {
                fold: i,
                test_indices: test.clone(),
                metrics: region_report(&pairs, regions)?,
            };
            Ok((outcome, report))
        })
        .collect();
    let mut outcomes = Vec::with_capacity(k);
    let mut reports = Vec::with_capacity(k);
    for r in results {
        let (o, rep) = r?;
        outcomes.push(o);
        reports.push(rep);
    }
    let mean = mean_report(&reports);
    Ok(CrossvalOutcome {
        folds: outcomes,
        reports,
        mean,
    })
}
