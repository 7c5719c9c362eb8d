//! Finite-difference verification of every analytic gradient, in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::layers::{
    conv_backward, conv_forward, prelu_backward, prelu_forward, BatchNormConfig, BatchNormState, ConvKind, ConvParams,
    Mode, PReluParams,
};
use crate::loss::{cross_entropy, cross_entropy_grad, jaccard_loss, jaccard_loss_grad, ClassSet, LossKind};
use crate::network::{ArchSpec, InitScheme, Network, OutputActivation, SkipMode};
use crate::optim::{objective, TrainConfig};
use crate::tensor::{resample_trilinear, resample_trilinear_adjoint, LabelVolume, Tensor};

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Outcome of one named check over several random instances.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub instances: usize,
    pub probes: usize,
    /// Probes discarded because the perturbation crossed a PReLU kink.
    pub skipped: usize,
    pub max_rel_error: f64,
    /// `(tensor, index, analytic, numeric)` of the worst probe.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl CheckReport {
    fn new(name: &str) -> Self {
        Self {
            name: name.into(),
            instances: 0,
            probes: 0,
            skipped: 0,
            max_rel_error: 0.0,
            worst: None,
        }
    }

    pub fn passed(&self) -> bool {
        self.probes > 0 && self.max_rel_error < TOLERANCE
    }

    fn record(&mut self, tensor: &str, index: usize, analytic: f64, numeric: f64) {
        self.probes += 1;
        let e = relative_error(analytic, numeric);
        if e > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(e);
            self.worst = Some((tensor.into(), index, analytic, numeric));
        }
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal) * scale)
}

fn random_labels(rng: &mut ChaCha8Rng, dims: [usize; 3], classes: usize) -> LabelVolume {
    let n = dims.iter().product();
    LabelVolume::new(dims, classes, (0..n).map(|_| rng.random_range(0..classes) as u8).collect()).expect("valid")
}

/// Checks `∂f/∂inputs[k]` against central differences at every index (or
/// `limit` random indices per tensor). `f` returns the objective, or `None`
/// when the perturbed point is not smooth.
fn probe(
    report: &mut CheckReport,
    names: &[&str],
    inputs: &mut [Tensor<f64>],
    analytic: &[Tensor<f64>],
    limit: Option<usize>,
    rng: &mut ChaCha8Rng,
    f: &mut dyn FnMut(&[Tensor<f64>]) -> Option<f64>,
) {
    for k in 0..inputs.len() {
        let n = inputs[k].len();
        let indices: Vec<usize> = match limit {
            Some(m) if m < n => (0..m).map(|_| rng.random_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for i in indices {
            let orig = inputs[k].data()[i];
            inputs[k].data_mut()[i] = orig + STEP;
            let plus = f(inputs);
            inputs[k].data_mut()[i] = orig - STEP;
            let minus = f(inputs);
            inputs[k].data_mut()[i] = orig;
            match (plus, minus) {
                (Some(p), Some(m)) => report.record(names[k], i, analytic[k].data()[i], (p - m) / (2.0 * STEP)),
                _ => report.skipped += 1,
            }
        }
    }
}

/// `Σ r ⊙ y`, the scalar objective used to check a layer with upstream `r`.
fn weighted(y: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    y.dot(r).expect("same shape")
}

fn check_conv(kind: ConvKind, k: usize, instances: usize, rng: &mut ChaCha8Rng) -> Result<CheckReport> {
    let name = match kind {
        ConvKind::Plain => format!("conv {k}x{k}x{k}"),
        ConvKind::Strided(s) => format!("conv {k}x{k}x{k} stride {s}"),
        ConvKind::Deconv => "deconv".to_string(),
    };
    let mut report = CheckReport::new(&name);
    for _ in 0..instances {
        let (cin, cout) = (2, 3);
        let x = randn(rng, &[cin, 4, 4, 4], 1.0);
        let p = ConvParams::new(randn(rng, &[cout, cin, k, k, k], 0.5), randn(rng, &[cout], 0.5))?;
        let y = conv_forward(kind, &x, &p)?;
        let r = randn(rng, y.shape(), 1.0);
        let (dx, dp) = conv_backward(kind, &x, &p, &r)?;
        let mut inputs = vec![x, p.weight, p.bias];
        let analytic = [dx, dp.weight, dp.bias];
        probe(&mut report, &["input", "weight", "bias"], &mut inputs, &analytic, None, rng, &mut |t| {
            let p = ConvParams::new(t[1].clone(), t[2].clone()).ok()?;
            Some(weighted(&conv_forward(kind, &t[0], &p).ok()?, &r))
        });
        report.instances += 1;
    }
    Ok(report)
}

fn check_prelu(instances: usize, rng: &mut ChaCha8Rng) -> Result<CheckReport> {
    let mut report = CheckReport::new("prelu");
    for _ in 0..instances {
        let x = randn(rng, &[3, 3, 3, 3], 1.0);
        let slope = Tensor::from_fn(&[3], |_| rng.random_range(0.05..0.5));
        let r = randn(rng, x.shape(), 1.0);
        let (dx, ds) = prelu_backward(&x, &PReluParams { slope: slope.clone() }, &r)?;
        let signs: Vec<bool> = x.data().iter().map(|&v| v >= 0.0).collect();
        let mut inputs = vec![x, slope];
        probe(&mut report, &["input", "slope"], &mut inputs, &[dx, ds], None, rng, &mut |t| {
            if t[0].data().iter().zip(&signs).any(|(&v, &s)| (v >= 0.0) != s) {
                return None;
            }
            let y = prelu_forward(&t[0], &PReluParams { slope: t[1].clone() }).ok()?;
            Some(weighted(&y, &r))
        });
        report.instances += 1;
    }
    Ok(report)
}

fn check_batchnorm(mode: Mode, instances: usize, rng: &mut ChaCha8Rng) -> Result<CheckReport> {
    let name = match mode {
        Mode::Train => "batchnorm train",
        Mode::Infer => "batchnorm infer",
    };
    let mut report = CheckReport::new(name);
    for _ in 0..instances {
        let x = randn(rng, &[2, 3, 3, 2], 1.0);
        let mut bn = BatchNormState::<f64>::new(2, &BatchNormConfig::default());
        bn.gamma = Tensor::from_fn(&[2], |_| rng.random_range(0.5..1.5));
        bn.beta = randn(rng, &[2], 0.5);
        bn.running_mean = randn(rng, &[2], 0.5);
        bn.running_std = Tensor::from_fn(&[2], |_| rng.random_range(0.5..1.5));
        let (y, cache) = bn.forward(&x, mode)?;
        let r = randn(rng, y.shape(), 1.0);
        let (dx, dg, db) = bn.backward(&cache, &r)?;
        let mut inputs = vec![x, bn.gamma.clone(), bn.beta.clone()];
        probe(&mut report, &["input", "gamma", "beta"], &mut inputs, &[dx, dg, db], None, rng, &mut |t| {
            let mut s = bn.clone();
            s.gamma = t[1].clone();
            s.beta = t[2].clone();
            Some(weighted(&s.forward(&t[0], mode).ok()?.0, &r))
        });
        report.instances += 1;
    }
    Ok(report)
}

fn check_resample(instances: usize, rng: &mut ChaCha8Rng) -> Result<CheckReport> {
    let mut report = CheckReport::new("trilinear upsampling");
    for _ in 0..instances {
        let x = randn(rng, &[2, 2, 3, 2], 1.0);
        let out = [4, 6, 4];
        let r = randn(rng, &[2, 4, 6, 4], 1.0);
        let dx = resample_trilinear_adjoint(&r, [2, 3, 2])?;
        let mut inputs = vec![x];
        probe(&mut report, &["input"], &mut inputs, &[dx], None, rng, &mut |t| {
            Some(weighted(&resample_trilinear(&t[0], out).ok()?, &r))
        });
        report.instances += 1;
    }
    Ok(report)
}

fn check_activation(act: OutputActivation, instances: usize, rng: &mut ChaCha8Rng) -> Result<CheckReport> {
    let name = match act {
        OutputActivation::Sigmoid => "sigmoid",
        OutputActivation::Softmax => "softmax",
    };
    let mut report = CheckReport::new(name);
    for _ in 0..instances {
        let z = randn(rng, &[4, 2, 2, 2], 2.0);
        let r = randn(rng, z.shape(), 1.0);
        let dz = act.vjp(&act.apply(&z), &r);
        let mut inputs = vec![z];
        probe(&mut report, &["logits"], &mut inputs, &[dz], None, rng, &mut |t| Some(weighted(&act.apply(&t[0]), &r)));
        report.instances += 1;
    }
    Ok(report)
}

fn check_loss(kind: LossKind, instances: usize, rng: &mut ChaCha8Rng) -> Result<CheckReport> {
    let name = match kind {
        LossKind::Jaccard => "jaccard loss",
        LossKind::CrossEntropy => "cross-entropy",
    };
    let mut report = CheckReport::new(name);
    for i in 0..instances {
        let classes = if i % 2 == 0 { ClassSet::Foreground } else { ClassSet::All };
        let target = random_labels(rng, [4, 4, 4], 3);
        let p = Tensor::from_fn(&[3, 4, 4, 4], |_| rng.random_range(0.05..0.95));
        let g = match kind {
            LossKind::Jaccard => jaccard_loss_grad(&p, &target, classes)?,
            LossKind::CrossEntropy => cross_entropy_grad(&p, &target)?,
        };
        let mut inputs = vec![p];
        probe(&mut report, &["scores"], &mut inputs, &[g], None, rng, &mut |t| match kind {
            LossKind::Jaccard => jaccard_loss(&t[0], &target, classes).ok().map(|l| l.total),
            LossKind::CrossEntropy => cross_entropy(&t[0], &target).ok(),
        });
        report.instances += 1;
    }
    Ok(report)
}

/// Every layer primitive, activation and loss.
pub fn check_layers(seed: u64, instances: usize) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    Ok(vec![
        check_conv(ConvKind::Plain, 3, instances, r)?,
        check_conv(ConvKind::Plain, 1, instances, r)?,
        check_conv(ConvKind::Strided(2), 3, instances, r)?,
        check_conv(ConvKind::Deconv, 3, instances, r)?,
        check_prelu(instances, r)?,
        check_batchnorm(Mode::Train, instances, r)?,
        check_batchnorm(Mode::Infer, instances, r)?,
        check_resample(instances, r)?,
        check_activation(OutputActivation::Sigmoid, instances, r)?,
        check_activation(OutputActivation::Softmax, instances, r)?,
        check_loss(LossKind::Jaccard, instances, r)?,
        check_loss(LossKind::CrossEntropy, instances, r)?,
    ])
}

/// Tiny network configuration used by [`check_network`].
pub fn tiny_spec(skip: SkipMode, heads: usize, loss: LossKind) -> ArchSpec {
    ArchSpec {
        in_channels: 2,
        class_count: 3,
        widths: ArchSpec::scaled_widths(2),
        skip_mode: skip,
        head_count: heads,
        init: InitScheme::Xavier,
        output: match loss {
            LossKind::Jaccard => OutputActivation::Sigmoid,
            LossKind::CrossEntropy => OutputActivation::Softmax,
        },
        ..ArchSpec::default()
    }
}

/// Whole-network check on an 8³ input, train mode, including the
/// auxiliary head losses. `per_tensor` limits the probes per parameter
/// tensor (`None` probes every entry).
pub fn check_network(
    skip: SkipMode,
    heads: usize,
    loss: LossKind,
    seed: u64,
    instances: usize,
    per_tensor: Option<usize>,
) -> Result<CheckReport> {
    let skip_name = match skip {
        SkipMode::Sum => "sum",
        SkipMode::Concat => "concat",
        SkipMode::None => "none",
    };
    let loss_name = match loss {
        LossKind::Jaccard => "jaccard",
        LossKind::CrossEntropy => "cross-entropy",
    };
    let mut report = CheckReport::new(&format!("network skip={skip_name} heads={heads} loss={loss_name}"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = tiny_spec(skip, heads, loss);
    let cfg = TrainConfig {
        loss,
        aux_weights: [0.5, 0.25],
        ..TrainConfig::default()
    };
    for _ in 0..instances {
        let mut net = Network::<f64>::build(&spec, rng.random())?;
        // Move off the symmetric initial values.
        for t in net.params_mut() {
            for v in t.data_mut() {
                *v += rng.sample::<f64, _>(StandardNormal) * 0.05;
            }
        }
        let x = randn(&mut rng, &[2, 8, 8, 8], 1.0);
        let labels = random_labels(&mut rng, [8, 8, 8], 3);
        let (out, tape) = net.run(&x, Mode::Train)?;
        let (_, grad) = objective(spec.output, &out, &labels, &cfg)?;
        let (grads, _) = net.backward_with(&tape, &grad)?;
        let signature = tape.kink_signature();

        let names = net.param_names();
        let mut inputs: Vec<Tensor<f64>> = net.params().into_iter().cloned().collect();
        let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let mut eval = |t: &[Tensor<f64>]| -> Option<f64> {
            let mut n = net.clone();
            for (p, v) in n.params_mut().into_iter().zip(t) {
                *p = v.clone();
            }
            let (out, tape) = n.run(&x, Mode::Train).ok()?;
            if tape.kink_signature() != signature {
                return None;
            }
            objective(spec.output, &out, &labels, &cfg).ok().map(|(l, _)| l.total)
        };
        probe(&mut report, &name_refs, &mut inputs, &grads.tensors, per_tensor, &mut rng, &mut eval);
        report.instances += 1;
    }
    Ok(report)
}

/// The eight network configurations: both skip merges, both head counts,
/// both losses.
pub fn network_matrix() -> Vec<(SkipMode, usize, LossKind)> {
    let mut out = Vec::new();
    for skip in [SkipMode::Sum, SkipMode::Concat] {
        for heads in [1, 3] {
            for loss in [LossKind::Jaccard, LossKind::CrossEntropy] {
                out.push((skip, heads, loss));
            }
        }
    }
    out
}

/// Layers plus the full network matrix.
pub fn run_suite(seed: u64, instances: usize, per_tensor: Option<usize>) -> Result<Vec<CheckReport>> {
    let mut reports = check_layers(seed, instances)?;
    for (i, (skip, heads, loss)) in network_matrix().into_iter().enumerate() {
        reports.push(check_network(skip, heads, loss, seed.wrapping_add(i as u64 + 1), instances, per_tensor)?);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-9) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn layers_pass_on_a_few_instances() {
        for r in check_layers(1, 2).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }
}
