//! Acceptance criteria 1 to 9. Every test prints one `criterion N: PASS|FAIL`
//! line straight to stdout (visible without `--nocapture`) and then asserts.

use std::f64::consts::FRAC_PI_2;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vseg_cli::commands::{cmd_eval, cmd_gradcheck, cmd_infer, cmd_rf_report, cmd_train, write_sample, RF_INPUT};
use vseg_cli::config::Config;
use vseg_cli::io::{decode_checkpoint, decode_volume, encode_checkpoint, encode_volume, read_labels, Volume};
use vseg_core::augment::{draw_transform, flip, mirror_hemisphere, rotate, Half, TransformDraw, PLANES};
use vseg_core::layers::{conv3d_forward, conv3d_strided_forward, deconv3d_forward};
use vseg_core::loss::{dice, jaccard, jaccard_loss, BinaryMask};
use vseg_core::metrics::{binary_confusion, confusion};
use vseg_core::network::argmax_labels;
use vseg_core::optim::{train, AdamConfig};
use vseg_core::tensor::{align_corners_coord, repeat_voxels, resample_nearest, resample_trilinear};
use vseg_core::{
    synth, ArchSpec, ClassSet, ConvParams, InitScheme, LabelVolume, LossKind, Network, OutputActivation,
    Sample, SkipMode, Tensor, TrainConfig,
};

fn report(n: usize, ok: bool, detail: &str) {
    let line = format!("criterion {n}: {} ({detail})\n", if ok { "PASS" } else { "FAIL" });
    std::io::stdout().lock().write_all(line.as_bytes()).unwrap();
    assert!(ok, "criterion {n} failed: {detail}");
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn random_labels(rng: &mut ChaCha8Rng, dims: [usize; 3], classes: u8) -> LabelVolume {
    let n: usize = dims.iter().product();
    LabelVolume::new(dims, classes as usize, (0..n).map(|_| rng.random_range(0..classes)).collect()).unwrap()
}

#[test]
fn criterion_1_receptive_field_table() {
    let start = Instant::now();
    let (text, csv) = cmd_rf_report(&ArchSpec::default(), RF_INPUT).unwrap();
    let elapsed = start.elapsed();
    let golden = include_str!("golden/rf_default.csv");
    let fields: Vec<usize> = csv.lines().skip(1).map(|l| l.split(',').nth(3).unwrap().parse().unwrap()).collect();
    let features: Vec<usize> = csv.lines().skip(1).map(|l| l.split(',').nth(4).unwrap().parse().unwrap()).collect();
    let ok = csv == golden
        && fields == [3, 5, 9, 13, 21, 29, 45, 53, 61, 65, 69, 71, 73]
        && features == [8, 8, 16, 32, 32, 64, 64, 32, 64, 16, 32, 8, 16]
        && text.lines().count() == 16
        && elapsed < Duration::from_secs(1);
    report(1, ok, &format!("13 rows equal the golden table, {elapsed:?}"));
}

#[test]
fn criterion_2_gradients() {
    let start = Instant::now();
    let reports = cmd_gradcheck(2, 20, Some(2)).unwrap();
    let elapsed = start.elapsed();
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    let ok = failed.is_empty()
        && reports.iter().all(|r| r.instances >= 20)
        && reports.iter().filter(|r| r.name.starts_with("network")).count() == 8
        && elapsed < Duration::from_secs(300);
    report(
        2,
        ok,
        &format!("{} checks, worst relative error {worst:.2e}, failed {failed:?}, {elapsed:?}", reports.len()),
    );
}

fn subsample(v: &Tensor<f64>, s: usize) -> Tensor<f64> {
    let (c, [d, h, w]) = v.dims4().unwrap();
    let (od, oh, ow) = (d / s, h / s, w / s);
    let mut out = Vec::new();
    for ch in 0..c {
        let src = v.channel(ch);
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    out.push(src[((z * s) * h + y * s) * w + x * s]);
                }
            }
        }
    }
    Tensor::new(vec![c, od, oh, ow], out).unwrap()
}

fn trilinear_at(src: &[f64], dims: [usize; 3], out: [usize; 3], p: [usize; 3]) -> f64 {
    let q: Vec<f64> = (0..3).map(|k| align_corners_coord(p[k], dims[k], out[k])).collect();
    let mut acc = 0.0;
    for corner in 0..8 {
        let mut idx = [0usize; 3];
        let mut weight = 1.0;
        for k in 0..3 {
            let lo = q[k].floor() as usize;
            let t = q[k] - lo as f64;
            if (corner >> k) & 1 == 1 {
                idx[k] = (lo + 1).min(dims[k] - 1);
                weight *= t;
            } else {
                idx[k] = lo;
                weight *= 1.0 - t;
            }
        }
        acc += weight * src[(idx[0] * dims[1] + idx[1]) * dims[2] + idx[2]];
    }
    acc
}

#[test]
fn criterion_3_exact_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut failures = Vec::new();
    for _ in 0..20 {
        let (cin, cout) = (rng.random_range(1..4), rng.random_range(1..4));
        let p = ConvParams::new(random_tensor(&mut rng, &[cout, cin, 3, 3, 3]), random_tensor(&mut rng, &[cout])).unwrap();
        let x = random_tensor(&mut rng, &[cin, 4, 6, 8]);
        if conv3d_strided_forward(&x, &p, 2).unwrap() != subsample(&conv3d_forward(&x, &p).unwrap(), 2) {
            failures.push("strided");
        }
        let y = random_tensor(&mut rng, &[cin, 2, 3, 4]);
        if deconv3d_forward(&y, &p).unwrap() != conv3d_forward(&repeat_voxels(&y, 2).unwrap(), &p).unwrap() {
            failures.push("deconv");
        }

        let (a, b) = (random_labels(&mut rng, [3, 4, 5], 5), random_labels(&mut rng, [3, 4, 5], 5));
        let members: Vec<u8> = (1..5).filter(|_| rng.random::<bool>()).collect();
        let m = confusion(&a, &b, &members).unwrap();
        let mut brute = [0u64; 4];
        for (&pa, &tb) in a.data().iter().zip(b.data()) {
            brute[match (members.contains(&pa), members.contains(&tb)) {
                (true, true) => 0,
                (true, false) => 1,
                (false, true) => 2,
                (false, false) => 3,
            }] += 1;
        }
        if [m.tp, m.fp, m.fn_, m.tn] != brute {
            failures.push("confusion");
        }

        let c = rng.random_range(1..6);
        let s = Tensor::from_fn(&[c, 2, 3, 4], |_| rng.random_range(0..4) as f64 / 4.0);
        let l = argmax_labels(&s).unwrap();
        for v in 0..24 {
            let mut best = 0;
            for k in 1..c {
                if s.channel(k)[v] > s.channel(best)[v] {
                    best = k;
                }
            }
            if l.data()[v] as usize != best {
                failures.push("argmax");
            }
        }

        let dims = [0, 1, 2].map(|_| rng.random_range(1..=8));
        let out = [0, 1, 2].map(|_| rng.random_range(1..=8));
        let v = random_tensor(&mut rng, &[1, dims[0], dims[1], dims[2]]);
        let r = resample_trilinear(&v, out).unwrap();
        let lv = random_labels(&mut rng, dims, 5);
        let rn = resample_nearest(&lv, out).unwrap();
        for i in 0..out.iter().product() {
            let q = [i / (out[1] * out[2]), (i / out[2]) % out[1], i % out[2]];
            if (r.data()[i] - trilinear_at(v.data(), dims, out, q)).abs() > 1e-12 {
                failures.push("trilinear");
            }
            let src = [0, 1, 2].map(|k| (align_corners_coord(q[k], dims[k], out[k]).round() as usize).min(dims[k] - 1));
            if rn.get(q[0], q[1], q[2]) != lv.get(src[0], src[1], src[2]) {
                failures.push("nearest");
            }
        }
    }
    failures.dedup();
    report(3, failures.is_empty(), &format!("20 random cases per oracle, mismatches {failures:?}"));
}

#[test]
fn criterion_4_loss_algebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..200);
        let density = rng.random::<f64>();
        let mut bits = || (0..n).map(|_| rng.random::<f64>() < density).collect::<Vec<_>>();
        let (p, t) = (BinaryMask::from_bits(&bits()), BinaryMask::from_bits(&bits()));
        let j = jaccard(&p, &t).unwrap();
        worst = worst.max((dice(&p, &t).unwrap() - 2.0 * j / (1.0 + j)).abs());
    }
    let mut bounded = true;
    for _ in 0..100 {
        let c = rng.random_range(2..5);
        let s = Tensor::from_fn(&[c, 3, 3, 3], |_| rng.random::<f64>());
        let t = random_labels(&mut rng, [3, 3, 3], c as u8);
        bounded &= jaccard_loss(&s, &t, ClassSet::All)
            .unwrap()
            .per_class
            .iter()
            .all(|(_, v)| (0.0..=1.0).contains(v));
    }
    let t = LabelVolume::background([4, 4, 4], 2);
    let predicted = Tensor::from_fn(&[2, 4, 4, 4], |i| if i < 64 { 0.0 } else { 1.0 });
    let silent = Tensor::from_fn(&[2, 4, 4, 4], |i| if i < 64 { 1.0 } else { 0.0 });
    let false_alarm = jaccard_loss(&predicted, &t, ClassSet::Foreground).unwrap().per_class[0].1;
    let both_empty = jaccard_loss(&silent, &t, ClassSet::Foreground).unwrap().per_class[0].1;
    let ok = worst < 1e-6 && bounded && false_alarm > 0.99 && both_empty < 1e-3;
    report(
        4,
        ok,
        &format!(
            "max |DSC - 2J/(1+J)| {worst:.1e}, bounded {bounded}, empty target {false_alarm:.4}, empty/empty {both_empty:.1e}"
        ),
    );
}

fn smoke_run() -> Vec<f64> {
    let s = synth::sphere([16, 16, 16], 0.6, 0.05, 1).unwrap();
    let spec = ArchSpec {
        in_channels: 1,
        class_count: 2,
        widths: ArchSpec::scaled_widths(2),
        ..ArchSpec::default()
    };
    let cfg = TrainConfig {
        max_epochs: 500,
        patience: 500,
        augment: vseg_core::augment::AugmentPolicy::None,
        adam: AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    };
    let set = [s];
    let out = train(Network::build(&spec, 0).unwrap(), &set, &set, &cfg).unwrap();
    out.iterations.iter().map(|i| i.fused).collect()
}

#[test]
fn criterion_5_smoke_training() {
    let a = smoke_run();
    let b = smoke_run();
    let first = a.iter().position(|&l| l < 0.1);
    let same = a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits());
    let ok = first.is_some() && a.len() <= 500 && same;
    report(
        5,
        ok,
        &format!(
            "loss {:.4} -> {:.4}, first below 0.1 at iteration {:?}, repeat run bit-identical {same}",
            a[0],
            a[a.len() - 1],
            first.map(|i| i + 1)
        ),
    );
}

fn rare_class_dice(seed: u64, loss: LossKind) -> [f64; 2] {
    let data: Vec<Sample<f32>> = (0..22)
        .map(|i| synth::imbalanced([24; 3], 1, 0.1, seed * 100 + i).unwrap())
        .collect();
    let (train_set, rest) = data.split_at(16);
    let (val, test) = rest.split_at(2);
    let spec = ArchSpec {
        in_channels: 1,
        class_count: 4,
        widths: ArchSpec::scaled_widths(2),
        init: InitScheme::Xavier,
        output: match loss {
            LossKind::Jaccard => OutputActivation::Sigmoid,
            LossKind::CrossEntropy => OutputActivation::Softmax,
        },
        ..ArchSpec::default()
    };
    let cfg = TrainConfig {
        max_epochs: 50,
        patience: 50,
        augment: vseg_core::augment::AugmentPolicy::None,
        loss,
        seed,
        adam: AdamConfig::conventional(1e-3),
        ..TrainConfig::default()
    };
    let net = train(Network::build(&spec, seed).unwrap(), train_set, val, &cfg).unwrap().net;
    [2, 3].map(|class| {
        let mut acc = vseg_core::metrics::Confusion::default();
        for s in test {
            acc += binary_confusion(&net.infer(&s.image).unwrap().probabilities, &s.labels, class, 0.5).unwrap();
        }
        acc.dice().unwrap_or(0.0)
    })
}

#[test]
fn criterion_6_imbalance_contrast() {
    let start = Instant::now();
    let freq = vseg_core::metrics::class_frequencies(
        &(0..3).map(|i| synth::imbalanced([24; 3], 1, 0.1, i).unwrap().labels).collect::<Vec<_>>(),
    )
    .unwrap();
    let (mut jac, mut ce) = ([0.0; 2], [0.0; 2]);
    for seed in 0..3 {
        let (j, c) = (rare_class_dice(seed, LossKind::Jaccard), rare_class_dice(seed, LossKind::CrossEntropy));
        for k in 0..2 {
            jac[k] += j[k] / 3.0;
            ce[k] += c[k] / 3.0;
        }
    }
    let elapsed = start.elapsed();
    let rare = freq[2] < 1e-3 && freq[3] < 1e-3;
    let ok = rare && (0..2).all(|k| jac[k] > 0.5 && ce[k] <= jac[k] - 0.2) && elapsed < Duration::from_secs(1800);
    report(
        6,
        ok,
        &format!(
            "rare fractions {:.1e}/{:.1e}, mean rare dice jaccard {:.3}/{:.3} vs cross-entropy {:.3}/{:.3}, {elapsed:?}",
            freq[2], freq[3], jac[0], jac[1], ce[0], ce[1]
        ),
    );
}

fn write_config(path: &Path, skip: SkipMode, heads: usize) {
    let skip = match skip {
        SkipMode::Sum => "sum",
        SkipMode::Concat => "concat",
        SkipMode::None => "none",
    };
    let text = format!(
        "[arch]\nin_channels = 1\nclass_count = 5\nwidths = [4, 4, 4, 4, 4, 4, 4, 4, 4, 4, 4, 4, 4]\n\
         skip_mode = \"{skip}\"\nhead_count = {heads}\ninit = {{ kind = \"xavier\" }}\n\n\
         [train]\nmax_epochs = 1\npatience = 1\naux_weights = [0.5, 0.25]\n"
    );
    std::fs::write(path, text).unwrap();
}

#[test]
fn criterion_7_architecture_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir(&data).unwrap();
    let s = synth::spheres([8, 8, 8], 5, 1, 7).unwrap();
    write_sample(&data, "only", &s).unwrap();
    let mut ran = Vec::new();
    for skip in [SkipMode::Sum, SkipMode::Concat, SkipMode::None] {
        for heads in [1, 3] {
            let cfg_path = dir.path().join(format!("{skip:?}{heads}.toml"));
            write_config(&cfg_path, skip, heads);
            let cfg = Config::load(Some(&cfg_path)).unwrap();
            let out = dir.path().join(format!("run_{skip:?}_{heads}"));
            let summary = cmd_train(&cfg, &data, &out, None).unwrap();
            let pred = out.join("pred.vseg");
            cmd_infer(&summary.checkpoints, &data.join("only.image.vseg"), &pred, false).unwrap();
            let csv = cmd_eval(&pred, &data.join("only.labels.vseg"), &cfg.regions()).unwrap();
            let loss_ok = summary.best_val_loss[0].is_finite() && summary.epochs_run == [1];
            if loss_ok && csv.lines().count() == 5 && read_labels(&pred).unwrap().dims() == [8, 8, 8] {
                ran.push(format!("{skip:?}/{heads}"));
            }
        }
    }
    report(7, ran.len() == 6, &format!("train, infer, eval completed for {ran:?}"));
}

#[test]
fn criterion_8_augmentation() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut failures = Vec::new();
    for _ in 0..30 {
        let dims = [0, 1, 2].map(|_| rng.random_range(1..7));
        let image = Tensor::<f32>::from_fn(&[2, dims[0], dims[1], dims[2]], |_| rng.random_range(-1.0..1.0));
        let labels = random_labels(&mut rng, dims, 4);
        let axis = rng.random_range(0..3);
        let (a, b) = flip(&image, &labels, axis).unwrap();
        if flip(&a, &b, axis).unwrap() != (image.clone(), labels.clone()) {
            failures.push("double flip");
        }

        let (pa, pb) = PLANES[rng.random_range(0..3)];
        let n = rng.random_range(1..7);
        let mut rd = [rng.random_range(1..5); 3];
        rd[pa] = n;
        rd[pb] = n;
        let img = Tensor::<f32>::from_fn(&[1, rd[0], rd[1], rd[2]], |_| rng.random_range(-1.0..1.0));
        let lab = random_labels(&mut rng, rd, 4);
        let (_, r) = rotate(&img, &lab, (pa, pb), FRAC_PI_2).unwrap();
        for i in 0..lab.len() {
            let p = [i / (rd[1] * rd[2]), (i / rd[2]) % rd[1], i % rd[2]];
            let mut q = p;
            q[pa] = p[pb];
            q[pb] = n - 1 - p[pa];
            if r.get(p[0], p[1], p[2]) != lab.get(q[0], q[1], q[2]) {
                failures.push("rotation");
            }
        }

        let bg = LabelVolume::background(dims, 4);
        for half in [Half::Lower, Half::Upper] {
            let (m, ml) = mirror_hemisphere(&image, &bg, axis, half).unwrap();
            if ml.count(0) != ml.len() || flip(&m, &ml, axis).unwrap().0 != m {
                failures.push("mirror");
            }
        }
    }
    let draws = 30_000;
    let mut counts = [0usize; 3];
    for _ in 0..draws {
        counts[match draw_transform(&mut rng) {
            TransformDraw::Identity => 0,
            TransformDraw::Flip { .. } => 1,
            TransformDraw::Rotate { .. } => 2,
        }] += 1;
    }
    let sigma = (draws as f64 * 2.0 / 9.0).sqrt();
    let uniform = counts.iter().all(|&c| (c as f64 - draws as f64 / 3.0).abs() < 3.0 * sigma);
    failures.dedup();
    report(
        8,
        failures.is_empty() && uniform,
        &format!("mismatches {failures:?}, kind counts {counts:?} over {draws} draws, 3 sigma = {:.0}", 3.0 * sigma),
    );
}

#[test]
fn criterion_9_determinism_and_serialization() {
    let data: Vec<Sample<f32>> = (0..3).map(|i| synth::spheres([8, 8, 8], 3, 2, i).unwrap()).collect();
    let spec = ArchSpec {
        in_channels: 2,
        class_count: 3,
        widths: ArchSpec::scaled_widths(2),
        init: InitScheme::Xavier,
        ..ArchSpec::default()
    };
    let cfg = TrainConfig {
        max_epochs: 3,
        patience: 3,
        aux_weights: [0.5, 0.25],
        adam: AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        },
        seed: 9,
        ..TrainConfig::default()
    };
    let run = || train(Network::build(&spec, 9).unwrap(), &data, &data[..1], &cfg).unwrap();
    let (a, b) = (run(), run());
    let trajectories = a.iterations == b.iterations
        && a.net.params().iter().zip(b.net.params()).all(|(x, y)| {
            x.data().iter().zip(y.data()).all(|(u, v)| u.to_bits() == v.to_bits())
        });

    let volumes = [Volume::Image(data[0].image.clone()), Volume::Labels(data[0].labels.clone())];
    let volume_bytes = volumes.iter().all(|v| {
        let bytes = encode_volume(v).unwrap();
        encode_volume(&decode_volume(&bytes).unwrap()).unwrap() == bytes
    });
    let bytes = encode_checkpoint(&a.net).unwrap();
    let reloaded = decode_checkpoint(&bytes).unwrap();
    let checkpoint_bytes = encode_checkpoint(&reloaded).unwrap() == bytes;
    let forward = data.iter().all(|s| {
        let (x, y) = (a.net.infer(&s.image).unwrap(), reloaded.infer(&s.image).unwrap());
        x.probabilities.data().iter().zip(y.probabilities.data()).all(|(u, v)| u.to_bits() == v.to_bits())
            && x.logits.data().iter().zip(y.logits.data()).all(|(u, v)| u.to_bits() == v.to_bits())
    });
    report(
        9,
        trajectories && volume_bytes && checkpoint_bytes && forward,
        &format!(
            "trajectories {trajectories}, volume bytes {volume_bytes}, checkpoint bytes {checkpoint_bytes}, reloaded forward {forward}"
        ),
    );
}
