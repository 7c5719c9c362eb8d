use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::FRAC_PI_2;
use vseg_core::augment::{crop, downsampled_dims, mirror_hemisphere, rotate, Half};
use vseg_core::gradcheck::{relative_error, STEP, TOLERANCE};
use vseg_core::layers::conv3d_forward;
use vseg_core::loss::{jaccard, jaccard_loss, jaccard_loss_grad, BinaryMask};
use vseg_core::tensor::{resample_nearest, resample_trilinear};
use vseg_core::{BatchNormConfig, BatchNormState, ClassSet, ConvParams, LabelVolume, Mode, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn trilinear_commutes_with_affine_maps(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0,
                                           out in [1usize..7, 1usize..7, 1usize..7]) {
        let mut r = rng(seed);
        let v = uniform(&mut r, &[2, 3, 4, 5]);
        let lhs = resample_trilinear(&v.map(|x| a * x + b), out).unwrap();
        let rhs = resample_trilinear(&v, out).unwrap().map(|x| a * x + b);
        for (p, q) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((p - q).abs() <= 1e-6 * (1.0 + q.abs()));
        }
    }

    #[test]
    fn nearest_keeps_the_label_set(seed in any::<u64>(), out in [1usize..9, 1usize..9, 1usize..9]) {
        let mut r = rng(seed);
        let v = LabelVolume::new([3, 5, 4], 6, (0..60).map(|_| r.random_range(0..6)).collect()).unwrap();
        let o = resample_nearest(&v, out).unwrap();
        prop_assert!(o.data().iter().all(|l| v.data().contains(l)));
        prop_assert_eq!(resample_nearest(&v, v.dims()).unwrap(), v);
    }

    #[test]
    fn conv_is_linear(seed in any::<u64>(), s in -2.0f64..2.0) {
        let mut r = rng(seed);
        let (x, y) = (uniform(&mut r, &[2, 3, 4, 3]), uniform(&mut r, &[2, 3, 4, 3]));
        let p = ConvParams::new(uniform(&mut r, &[3, 2, 3, 3, 3]), Tensor::zeros(&[3])).unwrap();
        let sum = conv3d_forward(&x.add(&y).unwrap(), &p).unwrap();
        let parts = conv3d_forward(&x, &p).unwrap().add(&conv3d_forward(&y, &p).unwrap()).unwrap();
        let scaled = ConvParams::new(p.weight.scale(s), p.bias.clone()).unwrap();
        let by_weight = conv3d_forward(&x, &scaled).unwrap();
        let by_output = conv3d_forward(&x, &p).unwrap().scale(s);
        for (a, b) in sum.data().iter().zip(parts.data()).chain(by_weight.data().iter().zip(by_output.data())) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_train_output_is_standardized(seed in any::<u64>(), shift in -5.0f64..5.0, scale in 0.1f64..10.0) {
        let mut r = rng(seed);
        let x = uniform(&mut r, &[3, 4, 4, 4]).map(|v| v * scale + shift);
        let bn = BatchNormState::<f64>::new(3, &BatchNormConfig::default());
        let (y, _) = bn.forward(&x, Mode::Train).unwrap();
        for c in 0..3 {
            let ch = y.channel(c);
            let mean = ch.iter().sum::<f64>() / 64.0;
            let var = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
            prop_assert!(mean.abs() < 1e-5);
            prop_assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn jaccard_is_symmetric_on_hard_masks(seed in any::<u64>(), n in 1usize..64) {
        let mut r = rng(seed);
        let p: Vec<bool> = (0..n).map(|_| r.random()).collect();
        let t: Vec<bool> = (0..n).map(|_| r.random()).collect();
        let (p, t) = (BinaryMask::from_bits(&p), BinaryMask::from_bits(&t));
        prop_assert_eq!(jaccard(&p, &t).unwrap(), jaccard(&t, &p).unwrap());
    }

    #[test]
    fn removing_a_false_positive_never_lowers_jaccard(seed in any::<u64>(), n in 2usize..64) {
        let mut r = rng(seed);
        let mut p: Vec<bool> = (0..n).map(|_| r.random()).collect();
        let t: Vec<bool> = (0..n).map(|_| r.random()).collect();
        let before = jaccard(&BinaryMask::from_bits(&p), &BinaryMask::from_bits(&t)).unwrap();
        if let Some(i) = (0..n).find(|&i| p[i] && !t[i]) {
            p[i] = false;
            let after = jaccard(&BinaryMask::from_bits(&p), &BinaryMask::from_bits(&t)).unwrap();
            prop_assert!(after >= before);
        }
    }

    #[test]
    fn four_quarter_turns_restore_labels(seed in any::<u64>(), plane in 0usize..3, n in 1usize..7) {
        let mut r = rng(seed);
        let image = uniform(&mut r, &[1, n, n, n]);
        let labels = LabelVolume::new([n; 3], 3, (0..n * n * n).map(|_| r.random_range(0..3)).collect()).unwrap();
        let (mut i, mut l) = (image.clone(), labels.clone());
        for _ in 0..4 {
            (i, l) = rotate(&i, &l, vseg_core::augment::PLANES[plane], FRAC_PI_2).unwrap();
        }
        prop_assert_eq!(l, labels);
    }

    #[test]
    fn crop_of_crop_is_one_crop(seed in any::<u64>(), o1 in [0usize..3, 0usize..3, 0usize..3], o2 in [0usize..2, 0usize..2, 0usize..2]) {
        let mut r = rng(seed);
        let v = uniform(&mut r, &[2, 6, 6, 6]);
        let inner = crop(&v, o1, [4, 4, 4]).unwrap();
        let twice = crop(&inner, o2, [2, 2, 2]).unwrap();
        let once = crop(&v, [o1[0] + o2[0], o1[1] + o2[1], o1[2] + o2[2]], [2, 2, 2]).unwrap();
        prop_assert_eq!(twice, once);
    }
}

#[test]
fn jaccard_loss_gradient_matches_finite_differences() {
    let mut r = rng(77);
    for _ in 0..100 {
        let c = r.random_range(2..4);
        let s = Tensor::from_fn(&[c, 2, 2, 3], |_| r.random_range(0.05..0.95));
        let t = LabelVolume::new([2, 2, 3], c, (0..12).map(|_| r.random_range(0..c as u8)).collect()).unwrap();
        let g = jaccard_loss_grad(&s, &t, ClassSet::All).unwrap();
        for i in 0..s.len() {
            let eval = |d: f64| {
                let mut p = s.clone();
                p.data_mut()[i] += d;
                jaccard_loss(&p, &t, ClassSet::All).unwrap().total
            };
            let fd = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
            assert!(relative_error(g.data()[i], fd) < TOLERANCE, "{} vs {}", g.data()[i], fd);
        }
    }
}

#[test]
fn full_crop_is_identity() {
    let v = uniform(&mut rng(1), &[2, 3, 4, 5]);
    assert_eq!(crop(&v, [0, 0, 0], [3, 4, 5]).unwrap(), v);
}

#[test]
fn reference_volume_downsamples_then_crops() {
    assert_eq!(downsampled_dims([480, 480, 280], 4).unwrap(), [120, 120, 70]);
    let v = Tensor::<f32>::zeros(&[1, 12, 12, 70]);
    assert_eq!(crop(&v, [0, 0, 3], [12, 12, 64]).unwrap().shape(), &[1, 12, 12, 64]);
}

#[test]
fn mirroring_a_symmetric_healthy_volume_is_identity() {
    let mut r = rng(3);
    let half = uniform(&mut r, &[1, 3, 4, 2]);
    let mut data = Vec::new();
    for z in 0..3 {
        for y in 0..4 {
            let row = &half.data()[(z * 4 + y) * 2..][..2];
            data.extend_from_slice(row);
            data.extend(row.iter().rev());
        }
    }
    let image = Tensor::new(vec![1, 3, 4, 4], data).unwrap();
    let labels = LabelVolume::background([3, 4, 4], 2);
    let (m, l) = mirror_hemisphere(&image, &labels, 2, Half::Lower).unwrap();
    assert_eq!(m, image);
    assert_eq!(l, labels);
}

#[test]
fn mirroring_reflects_the_healthy_half() {
    let mut r = rng(4);
    let image = uniform(&mut r, &[2, 4, 3, 6]);
    let mut labels = vec![0u8; 72];
    labels[(2 * 3 + 1) * 6 + 4] = 1;
    let labels = LabelVolume::new([4, 3, 6], 2, labels).unwrap();
    let (m, l) = mirror_hemisphere(&image, &labels, 2, Half::Lower).unwrap();
    assert_eq!(l.count(0), 72);
    for c in 0..2 {
        for v in 0..72 {
            let x = v % 6;
            let src = if x < 3 { v } else { v - x + (5 - x) };
            assert_eq!(m.channel(c)[v], image.channel(c)[src]);
        }
    }
}
