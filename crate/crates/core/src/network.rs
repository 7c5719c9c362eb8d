//! The U-shaped segmentation network.
//!
//! Layer stack (widths indexed as in [`ArchSpec::widths`]):
//!
//! ```text
//! enc1  conv 3³          w0   full      ─────────────── skip ──┐
//! enc2  conv 3³ /2       w1   1/2                              │
//! enc3  conv 3³          w2   1/2       ──────── skip ──┐      │
//! enc4  conv 3³ /2       w3   1/4                       │      │
//! enc5  conv 3³          w4   1/4       ─ skip ─┐       │      │
//! enc6  conv 3³ /2       w5   1/8               │       │      │
//! enc7  conv 3³          w6   1/8               │       │      │
//! dec1  1³ reduce, deconv w7 (1/4), merge ──────┘, conv w8 → head 1/4
//! dec2  1³ reduce, deconv w9 (1/2), merge ──────────────┘, conv w10 → head 1/2
//! dec3  1³ reduce, deconv w11 (full), merge ───────────────────┘, conv w12 → head full
//! ```
//!
//! Every 3³ convolution (plain, strided or deconvolution) is followed by
//! batch normalization and PReLU. The 1³ reducers halve their input width
//! and, like the segmentation heads, are purely linear. Heads are fused as
//! `full + up(half + up(quarter))` with trilinear upsampling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    conv3d_backward, conv3d_forward, conv_backward, conv_forward, prelu_backward, prelu_forward, BatchNormConfig,
    BatchNormState, BnCache, ConvKind, ConvParams, Mode, PReluParams,
};
use crate::tensor::{resample_trilinear, resample_trilinear_adjoint, LabelVolume, Real, Tensor};

/// Number of stride-2 reductions; input extents must be divisible by `2^DEPTH`.
pub const DEPTH: usize = 3;

/// Feature widths of the reference network.
pub const DEFAULT_WIDTHS: [usize; 13] = [8, 8, 16, 32, 32, 64, 64, 32, 64, 16, 32, 8, 16];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SkipMode {
    Sum,
    Concat,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum InitScheme {
    Gaussian { std: f64 },
    Xavier,
}

/// Squashing applied to the fused scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    /// Independent per-class probabilities (one-vs-all).
    Sigmoid,
    /// Categorical distribution over classes.
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchSpec {
    pub in_channels: usize,
    pub class_count: usize,
    pub widths: Vec<usize>,
    pub skip_mode: SkipMode,
    pub head_count: usize,
    pub init: InitScheme,
    pub output: OutputActivation,
    pub batch_norm: BatchNormConfig,
    pub prelu_init: f64,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self {
            in_channels: 4,
            class_count: 5,
            widths: DEFAULT_WIDTHS.to_vec(),
            skip_mode: SkipMode::Concat,
            head_count: 3,
            init: InitScheme::Gaussian { std: 0.01 },
            output: OutputActivation::Sigmoid,
            batch_norm: BatchNormConfig::default(),
            prelu_init: 0.25,
        }
    }
}

impl ArchSpec {
    /// Reference widths scaled so the first stage has `base` features.
    pub fn scaled_widths(base: usize) -> Vec<usize> {
        DEFAULT_WIDTHS.iter().map(|w| w / 8 * base).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArch(m));
        if self.in_channels == 0 {
            return bad("in_channels must be positive".into());
        }
        if self.class_count < 2 {
            return bad(format!("class_count {} < 2", self.class_count));
        }
        if self.widths.len() != 13 {
            return bad(format!("expected 13 widths, got {}", self.widths.len()));
        }
        if self.widths.contains(&0) {
            return bad("widths must be positive".into());
        }
        if self.head_count != 1 && self.head_count != 3 {
            return bad(format!("head_count must be 1 or 3, got {}", self.head_count));
        }
        if !(0.0..=1.0).contains(&self.batch_norm.momentum) {
            return bad("batch-norm momentum must lie in [0, 1]".into());
        }
        if self.skip_mode == SkipMode::Sum {
            for (stage, (up, skip)) in Self::merge_pairs().iter().enumerate() {
                if self.widths[*up] != self.widths[*skip] {
                    return bad(format!(
                        "sum skip at expanding stage {} joins {} and {} features",
                        stage + 1,
                        self.widths[*up],
                        self.widths[*skip]
                    ));
                }
            }
        }
        Ok(())
    }

    /// `(deconvolution width index, contracting skip width index)` per expanding stage.
    fn merge_pairs() -> [(usize, usize); 3] {
        [(7, 4), (9, 2), (11, 0)]
    }

    fn reducer_width(input: usize) -> usize {
        (input / 2).max(1)
    }

    fn merged_width(&self, stage: usize) -> usize {
        let (up, skip) = Self::merge_pairs()[stage];
        match self.skip_mode {
            SkipMode::Sum | SkipMode::None => self.widths[up],
            SkipMode::Concat => self.widths[up] + self.widths[skip],
        }
    }
}

/// A 3³ convolution followed by batch normalization and PReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock<T = f32> {
    pub kind: ConvKind,
    pub conv: ConvParams<T>,
    pub bn: BatchNormState<T>,
    pub act: PReluParams<T>,
}

#[derive(Clone, Debug)]
struct BlockCache<T> {
    input: Tensor<T>,
    bn: BnCache<T>,
    pre_act: Tensor<T>,
}

const BLOCK_PARAMS: [&str; 5] = ["conv.weight", "conv.bias", "bn.gamma", "bn.beta", "prelu.slope"];
const BLOCK_BUFFERS: [&str; 2] = ["bn.running_mean", "bn.running_std"];

impl<T: Real> ConvBlock<T> {
    fn new(kind: ConvKind, cin: usize, cout: usize, spec: &ArchSpec) -> Self {
        Self {
            kind,
            conv: ConvParams::zeros(cin, cout, 3),
            bn: BatchNormState::new(cout, &spec.batch_norm),
            act: PReluParams::new(cout, T::from_f64_lossy(spec.prelu_init)),
        }
    }

    fn params(&self) -> [&Tensor<T>; 5] {
        [&self.conv.weight, &self.conv.bias, &self.bn.gamma, &self.bn.beta, &self.act.slope]
    }

    fn params_mut(&mut self) -> [&mut Tensor<T>; 5] {
        [
            &mut self.conv.weight,
            &mut self.conv.bias,
            &mut self.bn.gamma,
            &mut self.bn.beta,
            &mut self.act.slope,
        ]
    }

    fn buffers_mut(&mut self) -> [&mut Tensor<T>; 2] {
        [&mut self.bn.running_mean, &mut self.bn.running_std]
    }

    fn buffers(&self) -> [&Tensor<T>; 2] {
        [&self.bn.running_mean, &self.bn.running_std]
    }

    fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, BlockCache<T>)> {
        let z = conv_forward(self.kind, x, &self.conv)?;
        let (b, bn) = self.bn.forward(&z, mode)?;
        let y = prelu_forward(&b, &self.act)?;
        Ok((
            y,
            BlockCache {
                input: x.clone(),
                bn,
                pre_act: b,
            },
        ))
    }

    fn backward(&self, cache: &BlockCache<T>, dy: &Tensor<T>) -> Result<(Tensor<T>, [Tensor<T>; 5])> {
        let (db, dslope) = prelu_backward(&cache.pre_act, &self.act, dy)?;
        let (dz, dgamma, dbeta) = self.bn.backward(&cache.bn, &db)?;
        let (dx, dconv) = conv_backward(self.kind, &cache.input, &self.conv, &dz)?;
        Ok((dx, [dconv.weight, dconv.bias, dgamma, dbeta, dslope]))
    }
}

/// One expanding stage: 1³ reducer, deconvolution block, merge, conv block.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpandStage<T = f32> {
    pub reduce: ConvParams<T>,
    pub up: ConvBlock<T>,
    pub fuse: ConvBlock<T>,
}

#[derive(Clone, Debug)]
struct StageCache<T> {
    reduce_in: Tensor<T>,
    up: BlockCache<T>,
    up_channels: usize,
    fuse: BlockCache<T>,
}

/// Activations cached by a forward pass for [`Network::backward`].
#[derive(Clone, Debug)]
pub struct Tape<T> {
    enc: Vec<BlockCache<T>>,
    dec: Vec<StageCache<T>>,
    /// Inputs of the heads, ordered full, half, quarter.
    head_inputs: Vec<Tensor<T>>,
    head_dims: Vec<[usize; 3]>,
}

impl<T: Real> Tape<T> {
    /// Sign of every PReLU input; a change between two nearby evaluations
    /// means a kink was crossed.
    pub fn kink_signature(&self) -> Vec<bool> {
        self.enc
            .iter()
            .chain(self.dec.iter().flat_map(|s| [&s.up, &s.fuse]))
            .flat_map(|c| c.pre_act.data().iter().map(|&v| v >= T::zero()))
            .collect()
    }
}

/// Network outputs for one volume.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationOutput<T = f32> {
    /// Fused raw scores `(classes, D, H, W)`.
    pub logits: Tensor<T>,
    /// `logits` after the output activation.
    pub probabilities: Tensor<T>,
    /// Raw per-head maps ordered full, half, quarter resolution.
    pub heads: Vec<Tensor<T>>,
}

/// Upstream gradient for [`Network::backward`]: with respect to the fused
/// logits, plus optional extra gradients on individual head maps.
#[derive(Clone, Debug)]
pub struct OutputGrad<T> {
    pub logits: Tensor<T>,
    pub heads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> OutputGrad<T> {
    pub fn fused_only(logits: Tensor<T>) -> Self {
        Self { logits, heads: Vec::new() }
    }
}

/// Parameter gradients aligned with [`Network::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn max_abs(&self) -> T {
        self.tensors.iter().fold(T::zero(), |m, t| m.max(t.max_abs()))
    }
}

#[derive(Clone, Debug)]
pub struct Network<T = f32> {
    spec: ArchSpec,
    pub encoder: Vec<ConvBlock<T>>,
    pub decoder: Vec<ExpandStage<T>>,
    /// Segmentation heads ordered full, half, quarter resolution.
    pub heads: Vec<ConvParams<T>>,
    tape: Option<Tape<T>>,
}

impl<T: Real> PartialEq for Network<T> {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
            && self.encoder == other.encoder
            && self.decoder == other.decoder
            && self.heads == other.heads
    }
}

impl OutputActivation {
    pub fn apply<T: Real>(self, logits: &Tensor<T>) -> Tensor<T> {
        match self {
            OutputActivation::Sigmoid => logits.map(sigmoid),
            OutputActivation::Softmax => softmax_channels(logits),
        }
    }

    /// Vector-Jacobian product: gradient with respect to the logits given the
    /// activation output and the gradient with respect to it.
    pub fn vjp<T: Real>(self, probs: &Tensor<T>, dprobs: &Tensor<T>) -> Tensor<T> {
        match self {
            OutputActivation::Sigmoid => {
                let data = probs
                    .data()
                    .iter()
                    .zip(dprobs.data())
                    .map(|(&p, &g)| g * p * (T::one() - p))
                    .collect();
                Tensor::new(probs.shape().to_vec(), data).expect("same shape")
            }
            OutputActivation::Softmax => {
                let c = probs.shape()[0];
                let per = probs.len() / c;
                let (p, g) = (probs.data(), dprobs.data());
                let mut out = vec![T::zero(); probs.len()];
                for v in 0..per {
                    let dot: T = (0..c).map(|k| p[k * per + v] * g[k * per + v]).sum();
                    for k in 0..c {
                        out[k * per + v] = p[k * per + v] * (g[k * per + v] - dot);
                    }
                }
                Tensor::new(probs.shape().to_vec(), out).expect("same shape")
            }
        }
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softmax_channels<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let c = logits.shape()[0];
    let per = logits.len() / c;
    let z = logits.data();
    let mut out = vec![T::zero(); logits.len()];
    for v in 0..per {
        let m = (0..c).map(|k| z[k * per + v]).fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for k in 0..c {
            let e = (z[k * per + v] - m).exp();
            out[k * per + v] = e;
            s = s + e;
        }
        for k in 0..c {
            out[k * per + v] = out[k * per + v] / s;
        }
    }
    Tensor::new(logits.shape().to_vec(), out).expect("same shape")
}

fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape()[1..] != b.shape()[1..] {
        return Err(Error::ShapeMismatch {
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut shape = a.shape().to_vec();
    shape[0] += b.shape()[0];
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::new(shape, data)
}

fn split_channels<T: Real>(t: &Tensor<T>, first: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let per = t.len() / t.shape()[0];
    let (a, b) = t.data().split_at(first * per);
    let mut sa = t.shape().to_vec();
    sa[0] = first;
    let mut sb = t.shape().to_vec();
    sb[0] -= first;
    Ok((Tensor::new(sa, a.to_vec())?, Tensor::new(sb, b.to_vec())?))
}

fn add_opt<T: Real>(acc: Tensor<T>, extra: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    match extra {
        Some(e) => acc.add(e),
        None => Ok(acc),
    }
}

fn init_weight<T: Real>(t: &mut Tensor<T>, scheme: InitScheme, rng: &mut ChaCha8Rng) {
    let s = t.shape();
    let k3: usize = s[2..].iter().product();
    let std = match scheme {
        InitScheme::Gaussian { std } => std,
        InitScheme::Xavier => (2.0 / ((s[1] * k3 + s[0] * k3) as f64)).sqrt(),
    };
    for v in t.data_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v = T::from_f64_lossy(z * std);
    }
}

impl<T: Real> Network<T> {
    /// Construct and initialize a network. Convolution weights are drawn in
    /// parameter order from a generator seeded with `seed`; biases start at
    /// zero, batch-norm gains at one.
    pub fn build(spec: &ArchSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let w = &spec.widths;
        let enc_kinds = [
            ConvKind::Plain,
            ConvKind::Strided(2),
            ConvKind::Plain,
            ConvKind::Strided(2),
            ConvKind::Plain,
            ConvKind::Strided(2),
            ConvKind::Plain,
        ];
        let mut cin = spec.in_channels;
        let mut encoder = Vec::with_capacity(7);
        for (i, kind) in enc_kinds.into_iter().enumerate() {
            encoder.push(ConvBlock::new(kind, cin, w[i], spec));
            cin = w[i];
        }
        let mut decoder = Vec::with_capacity(3);
        for stage in 0..3 {
            let (up_idx, _) = ArchSpec::merge_pairs()[stage];
            let red = ArchSpec::reducer_width(cin);
            decoder.push(ExpandStage {
                reduce: ConvParams::zeros(cin, red, 1),
                up: ConvBlock::new(ConvKind::Deconv, red, w[up_idx], spec),
                fuse: ConvBlock::new(ConvKind::Plain, spec.merged_width(stage), w[up_idx + 1], spec),
            });
            cin = w[up_idx + 1];
        }
        let head_inputs = [w[12], w[10], w[8]];
        let heads = head_inputs[..spec.head_count]
            .iter()
            .map(|&c| ConvParams::zeros(c, spec.class_count, 1))
            .collect();

        let mut net = Self {
            spec: spec.clone(),
            encoder,
            decoder,
            heads,
            tape: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names = net.param_names();
        for (name, t) in names.iter().zip(net.params_mut()) {
            if name.ends_with("weight") {
                init_weight(t, spec.init, &mut rng);
            }
        }
        Ok(net)
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.encoder.len() {
            names.extend(BLOCK_PARAMS.iter().map(|p| format!("enc{}.{p}", i + 1)));
        }
        for i in 0..self.decoder.len() {
            names.push(format!("dec{}.reduce.weight", i + 1));
            names.push(format!("dec{}.reduce.bias", i + 1));
            names.extend(BLOCK_PARAMS.iter().map(|p| format!("dec{}.up.{p}", i + 1)));
            names.extend(BLOCK_PARAMS.iter().map(|p| format!("dec{}.fuse.{p}", i + 1)));
        }
        for h in HEAD_NAMES.iter().take(self.heads.len()) {
            names.push(format!("{h}.weight"));
            names.push(format!("{h}.bias"));
        }
        names
    }

    /// Learnable tensors in canonical order.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for b in &self.encoder {
            out.extend(b.params());
        }
        for s in &self.decoder {
            out.push(&s.reduce.weight);
            out.push(&s.reduce.bias);
            out.extend(s.up.params());
            out.extend(s.fuse.params());
        }
        for h in &self.heads {
            out.push(&h.weight);
            out.push(&h.bias);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for b in &mut self.encoder {
            out.extend(b.params_mut());
        }
        for s in &mut self.decoder {
            out.push(&mut s.reduce.weight);
            out.push(&mut s.reduce.bias);
            out.extend(s.up.params_mut());
            out.extend(s.fuse.params_mut());
        }
        for h in &mut self.heads {
            out.push(&mut h.weight);
            out.push(&mut h.bias);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn buffer_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.encoder.len() {
            names.extend(BLOCK_BUFFERS.iter().map(|p| format!("enc{}.{p}", i + 1)));
        }
        for i in 0..self.decoder.len() {
            names.extend(BLOCK_BUFFERS.iter().map(|p| format!("dec{}.up.{p}", i + 1)));
            names.extend(BLOCK_BUFFERS.iter().map(|p| format!("dec{}.fuse.{p}", i + 1)));
        }
        names
    }

    /// Batch-norm running statistics in canonical order.
    pub fn buffers(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for b in &self.encoder {
            out.extend(b.buffers());
        }
        for s in &self.decoder {
            out.extend(s.up.buffers());
            out.extend(s.fuse.buffers());
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for b in &mut self.encoder {
            out.extend(b.buffers_mut());
        }
        for s in &mut self.decoder {
            out.extend(s.up.buffers_mut());
            out.extend(s.fuse.buffers_mut());
        }
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut ConvBlock<T>> {
        let mut out: Vec<&mut ConvBlock<T>> = self.encoder.iter_mut().collect();
        for s in &mut self.decoder {
            out.push(&mut s.up);
            out.push(&mut s.fuse);
        }
        out
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        let block = |b: &ConvBlock<T>| ConvBlock {
            kind: b.kind,
            conv: b.conv.cast(),
            bn: BatchNormState {
                gamma: b.bn.gamma.cast(),
                beta: b.bn.beta.cast(),
                running_mean: b.bn.running_mean.cast(),
                running_std: b.bn.running_std.cast(),
                momentum: crate::tensor::cast(b.bn.momentum),
                eps: crate::tensor::cast(b.bn.eps),
            },
            act: PReluParams { slope: b.act.slope.cast() },
        };
        Network {
            spec: self.spec.clone(),
            encoder: self.encoder.iter().map(block).collect(),
            decoder: self
                .decoder
                .iter()
                .map(|s| ExpandStage {
                    reduce: s.reduce.cast(),
                    up: block(&s.up),
                    fuse: block(&s.fuse),
                })
                .collect(),
            heads: self.heads.iter().map(|h| h.cast()).collect(),
            tape: None,
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<[usize; 3]> {
        let (c, dims) = x.dims4()?;
        if x.rank() != 4 {
            return Err(Error::InvalidShape {
                shape: x.shape().to_vec(),
                reason: "network input must be (C, D, H, W)".into(),
            });
        }
        if c != self.spec.in_channels {
            return Err(Error::ChannelMismatch {
                expected: self.spec.in_channels,
                actual: c,
            });
        }
        let div = 1 << DEPTH;
        for &e in &dims {
            if e % div != 0 {
                return Err(Error::NotDivisible { extent: e, divisor: div });
            }
        }
        Ok(dims)
    }

    /// Pure forward pass returning the outputs and the activation tape.
    pub fn run(&self, x: &Tensor<T>, mode: Mode) -> Result<(SegmentationOutput<T>, Tape<T>)> {
        self.check_input(x)?;
        let mut enc = Vec::with_capacity(7);
        let mut skips = Vec::with_capacity(3);
        let mut h = x.clone();
        for (i, block) in self.encoder.iter().enumerate() {
            let (y, cache) = block.forward(&h, mode)?;
            enc.push(cache);
            if i % 2 == 0 && i < 6 {
                skips.push(y.clone());
            }
            h = y;
        }

        let mut dec = Vec::with_capacity(3);
        let mut stage_outputs = Vec::with_capacity(3);
        for (stage, s) in self.decoder.iter().enumerate() {
            let reduce_in = h;
            let r = conv3d_forward(&reduce_in, &s.reduce)?;
            let (u, up_cache) = s.up.forward(&r, mode)?;
            let skip = &skips[2 - stage];
            let up_channels = u.shape()[0];
            let merged = match self.spec.skip_mode {
                SkipMode::Sum => u.add(skip)?,
                SkipMode::Concat => concat_channels(&u, skip)?,
                SkipMode::None => u,
            };
            let (y, fuse_cache) = s.fuse.forward(&merged, mode)?;
            dec.push(StageCache {
                reduce_in,
                up: up_cache,
                up_channels,
                fuse: fuse_cache,
            });
            stage_outputs.push(y.clone());
            h = y;
        }

        // Heads ordered full, half, quarter; stage outputs run quarter → full.
        let head_inputs: Vec<Tensor<T>> = (0..self.heads.len()).map(|k| stage_outputs[2 - k].clone()).collect();
        let heads = self
            .heads
            .iter()
            .zip(&head_inputs)
            .map(|(p, inp)| conv3d_forward(inp, p))
            .collect::<Result<Vec<_>>>()?;
        let head_dims: Vec<[usize; 3]> = heads.iter().map(|t| t.dims4().map(|d| d.1)).collect::<Result<_>>()?;

        let logits = fuse_heads(&heads)?;
        let probabilities = self.spec.output.apply(&logits);
        Ok((
            SegmentationOutput {
                logits,
                probabilities,
                heads,
            },
            Tape {
                enc,
                dec,
                head_inputs,
                head_dims,
            },
        ))
    }

    /// Forward pass that caches activations for [`Network::backward`]. In
    /// train mode the batch-norm running statistics are updated.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<SegmentationOutput<T>> {
        let (out, tape) = self.run(x, mode)?;
        if mode == Mode::Train {
            let caches: Vec<&BnCache<T>> = tape
                .enc
                .iter()
                .map(|c| &c.bn)
                .chain(tape.dec.iter().flat_map(|s| [&s.up.bn, &s.fuse.bn]))
                .collect();
            for (block, cache) in self.blocks_mut().into_iter().zip(caches) {
                block.bn.update_running(cache);
            }
        }
        self.tape = Some(tape);
        Ok(out)
    }

    /// Inference without caching; safe to share across threads.
    pub fn infer(&self, x: &Tensor<T>) -> Result<SegmentationOutput<T>> {
        self.run(x, Mode::Infer).map(|(o, _)| o)
    }

    pub fn clear_tape(&mut self) {
        self.tape = None;
    }

    /// Gradients of every learnable parameter given the upstream gradient of
    /// the most recent [`Network::forward`] call.
    pub fn backward(&self, grad: &OutputGrad<T>) -> Result<Gradients<T>> {
        let tape = self.tape.as_ref().ok_or(Error::NoCachedForward)?;
        self.backward_with(tape, grad).map(|(g, _)| g)
    }

    /// Backward pass against an explicit tape. Also returns the gradient
    /// with respect to the network input.
    pub fn backward_with(&self, tape: &Tape<T>, grad: &OutputGrad<T>) -> Result<(Gradients<T>, Tensor<T>)> {
        let extra = |k: usize| grad.heads.get(k).and_then(|g| g.as_ref());

        // Unfuse: fused = full + up(half + up(quarter)).
        let mut head_grads = Vec::with_capacity(self.heads.len());
        head_grads.push(add_opt(grad.logits.clone(), extra(0))?);
        if self.heads.len() == 3 {
            let d_mid = resample_trilinear_adjoint(&grad.logits, tape.head_dims[1])?;
            let d_quarter = resample_trilinear_adjoint(&d_mid, tape.head_dims[2])?;
            head_grads.push(add_opt(d_mid, extra(1))?);
            head_grads.push(add_opt(d_quarter, extra(2))?);
        }

        // Gradients flowing into each expanding stage's output, quarter → full.
        let mut stage_grads: Vec<Option<Tensor<T>>> = vec![None, None, None];
        let mut head_param_grads = Vec::with_capacity(self.heads.len());
        for (k, (p, g)) in self.heads.iter().zip(&head_grads).enumerate() {
            let (dx, dp) = conv3d_backward(&tape.head_inputs[k], p, g)?;
            stage_grads[2 - k] = Some(dx);
            head_param_grads.push(dp);
        }

        let mut skip_grads: Vec<Option<Tensor<T>>> = vec![None, None, None];
        let mut dec_grads: Vec<Vec<Tensor<T>>> = vec![Vec::new(), Vec::new(), Vec::new()];
        let mut carry: Option<Tensor<T>> = None;
        for stage in (0..3).rev() {
            let s = &self.decoder[stage];
            let c = &tape.dec[stage];
            let dy = match (stage_grads[stage].take(), carry.take()) {
                (Some(a), Some(b)) => a.add(&b)?,
                (Some(a), None) | (None, Some(a)) => a,
                (None, None) => unreachable!("the full-resolution head always receives a gradient"),
            };
            let (dmerged, fuse_g) = s.fuse.backward(&c.fuse, &dy)?;
            let (du, dskip) = match self.spec.skip_mode {
                SkipMode::Sum => (dmerged.clone(), Some(dmerged)),
                SkipMode::Concat => {
                    let (a, b) = split_channels(&dmerged, c.up_channels)?;
                    (a, Some(b))
                }
                SkipMode::None => (dmerged, None),
            };
            skip_grads[2 - stage] = dskip;
            let (dr, up_g) = s.up.backward(&c.up, &du)?;
            let (dh, red_g) = conv3d_backward(&c.reduce_in, &s.reduce, &dr)?;
            let mut g = vec![red_g.weight, red_g.bias];
            g.extend(up_g);
            g.extend(fuse_g);
            dec_grads[stage] = g;
            carry = Some(dh);
        }

        let mut enc_grads: Vec<[Tensor<T>; 5]> = Vec::with_capacity(7);
        let mut dh = carry.expect("decoder produced a gradient");
        for i in (0..7).rev() {
            if i % 2 == 0 && i < 6 {
                if let Some(sg) = skip_grads[i / 2].take() {
                    dh = dh.add(&sg)?;
                }
            }
            let (dx, g) = self.encoder[i].backward(&tape.enc[i], &dh)?;
            enc_grads.push(g);
            dh = dx;
        }
        enc_grads.reverse();

        let mut tensors = Vec::new();
        for g in enc_grads {
            tensors.extend(g);
        }
        for g in dec_grads {
            tensors.extend(g);
        }
        for g in head_param_grads {
            tensors.push(g.weight);
            tensors.push(g.bias);
        }
        Ok((Gradients { tensors }, dh))
    }
}

const HEAD_NAMES: [&str; 3] = ["head_full", "head_half", "head_quarter"];

/// `full + up(half + up(quarter))`; a single head passes through unchanged.
pub fn fuse_heads<T: Real>(heads: &[Tensor<T>]) -> Result<Tensor<T>> {
    match heads {
        [only] => Ok(only.clone()),
        [full, half, quarter] => {
            let (_, hd) = half.dims4()?;
            let (_, fd) = full.dims4()?;
            let mid = half.add(&resample_trilinear(quarter, hd)?)?;
            full.add(&resample_trilinear(&mid, fd)?)
        }
        _ => Err(Error::InvalidArch(format!("cannot fuse {} heads", heads.len()))),
    }
}

/// Per-voxel argmax over channels; ties go to the lowest class index.
pub fn argmax_labels<T: Real>(scores: &Tensor<T>) -> Result<LabelVolume> {
    let (c, dims) = scores.dims4()?;
    let per = scores.len() / c;
    let s = scores.data();
    let labels = (0..per)
        .map(|v| {
            let mut best = 0;
            for k in 1..c {
                if s[k * per + v] > s[best * per + v] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelVolume::new(dims, c, labels)
}

pub fn predict_labels<T: Real>(net: &Network<T>, x: &Tensor<T>) -> Result<LabelVolume> {
    argmax_labels(&net.infer(x)?.probabilities)
}

/// Average the members' class probabilities, then take the argmax.
pub fn ensemble_predict<T: Real>(nets: &[Network<T>], x: &Tensor<T>) -> Result<LabelVolume> {
    let first = nets
        .first()
        .ok_or_else(|| Error::HeterogeneousEnsemble("ensemble has no members".into()))?;
    for n in nets {
        if n.spec.class_count != first.spec.class_count || n.spec.in_channels != first.spec.in_channels {
            return Err(Error::HeterogeneousEnsemble(format!(
                "members disagree on (classes, channels): ({}, {}) vs ({}, {})",
                first.spec.class_count, first.spec.in_channels, n.spec.class_count, n.spec.in_channels
            )));
        }
    }
    let mut acc: Option<Tensor<f64>> = None;
    for n in nets {
        let p = n.infer(x)?.probabilities.cast::<f64>();
        acc = Some(match acc {
            Some(a) => a.add(&p)?,
            None => p,
        });
    }
    let mean = acc.expect("nonempty").scale(1.0 / nets.len() as f64);
    argmax_labels(&mean)
}
