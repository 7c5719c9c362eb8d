use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vseg_core::layers::{conv3d_forward, conv3d_strided_forward, deconv3d_forward};
use vseg_core::tensor::repeat_voxels;
use vseg_core::{ConvParams, Tensor};

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn random_params(rng: &mut ChaCha8Rng, cin: usize, cout: usize, k: usize) -> ConvParams<f64> {
    ConvParams::new(random_tensor(rng, &[cout, cin, k, k, k]), random_tensor(rng, &[cout])).unwrap()
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

/// Direct zero-padded cross-correlation, one output voxel at a time.
fn naive_conv(x: &Tensor<f64>, p: &ConvParams<f64>) -> Tensor<f64> {
    let (cin, [d, h, w]) = x.dims4().unwrap();
    let (cout, k) = (p.out_channels(), p.kernel());
    let pad = (k / 2) as isize;
    let wt = p.weight.data();
    Tensor::from_fn(&[cout, d, h, w], |i| {
        let (co, v) = (i / (d * h * w), i % (d * h * w));
        let (z, y, xx) = ((v / (h * w)) as isize, ((v / w) % h) as isize, (v % w) as isize);
        let mut acc = p.bias.data()[co];
        for ci in 0..cin {
            for a in 0..k {
                for b in 0..k {
                    for c in 0..k {
                        let (iz, iy, ix) = (z + a as isize - pad, y + b as isize - pad, xx + c as isize - pad);
                        if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        let xi = ((ci * d + iz as usize) * h + iy as usize) * w + ix as usize;
                        acc += wt[(((co * cin + ci) * k + a) * k + b) * k + c] * x.data()[xi];
                    }
                }
            }
        }
        acc
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn strided_equals_subsampled_plain(seed in any::<u64>(), cin in 1usize..4, cout in 1usize..4, n in 1usize..4, s in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [2 * n, 2 * (4 - n).max(1), 2 * n + 2];
        let x = random_tensor(&mut rng, &[cin, dims[0], dims[1], dims[2]]);
        let p = random_params(&mut rng, cin, cout, 3);
        let strided = conv3d_strided_forward(&x, &p, s).unwrap();
        prop_assert_eq!(strided, subsample(&conv3d_forward(&x, &p).unwrap(), s));
    }

    #[test]
    fn deconv_equals_repeat_then_conv(seed in any::<u64>(), cin in 1usize..4, cout in 1usize..4, n in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, &[cin, n, n + 1, 2]);
        let p = random_params(&mut rng, cin, cout, 3);
        let direct = deconv3d_forward(&x, &p).unwrap();
        prop_assert_eq!(direct, conv3d_forward(&repeat_voxels(&x, 2).unwrap(), &p).unwrap());
    }

    #[test]
    fn conv_matches_direct_sum(seed in any::<u64>(), cin in 1usize..4, cout in 1usize..4, k in prop::sample::select(vec![1usize, 3, 5])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, &[cin, 3, 5, 4]);
        let p = random_params(&mut rng, cin, cout, k);
        let fast = conv3d_forward(&x, &p).unwrap();
        let slow = naive_conv(&x, &p);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
        }
    }
}

#[test]
fn large_volume_spans_several_slabs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(&mut rng, &[4, 40, 36, 36]);
    let p = random_params(&mut rng, 4, 2, 3);
    let fast = conv3d_forward(&x, &p).unwrap();
    let slow = naive_conv(&x, &p);
    for (a, b) in fast.data().iter().zip(slow.data()) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(conv3d_strided_forward(&x, &p, 2).unwrap(), subsample(&fast, 2));
}
