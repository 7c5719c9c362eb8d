//! Receptive fields against the support of an impulse pushed back through
//! a linear chain of the planned layers.

use vseg_core::layers::conv_backward;
use vseg_core::rf::{plan, receptive_field_trace, PlanLayer};
use vseg_core::{ArchSpec, ConvKind, ConvParams, Tensor};

fn out_dims(kind: ConvKind, d: [usize; 3]) -> [usize; 3] {
    match kind {
        ConvKind::Plain => d,
        ConvKind::Strided(s) => d.map(|e| e / s),
        ConvKind::Deconv => d.map(|e| e * 2),
    }
}

/// Extent along depth of the input voxels that reach the central output voxel.
fn depth_support(layers: &[PlanLayer], input: [usize; 3], offset: usize) -> usize {
    let mut shapes = vec![input];
    for l in layers {
        shapes.push(out_dims(l.kind, *shapes.last().unwrap()));
    }
    let last = *shapes.last().unwrap();
    let mut g = Tensor::<f64>::zeros(&[1, last[0], last[1], last[2]]);
    let centre = ((last[0] / 2 + offset) * last[1] + last[1] / 2) * last[2] + last[2] / 2;
    g.data_mut()[centre] = 1.0;
    for (l, s) in layers.iter().zip(&shapes).rev() {
        let k = l.filter;
        let p = ConvParams::new(Tensor::ones(&[1, 1, k, k, k]), Tensor::zeros(&[1])).unwrap();
        let x = Tensor::zeros(&[1, s[0], s[1], s[2]]);
        g = conv_backward(l.kind, &x, &p, &g).unwrap().0;
    }
    let plane = input[1] * input[2];
    let hit: Vec<usize> = (0..input[0]).filter(|&z| g.data()[z * plane..(z + 1) * plane].iter().any(|&v| v > 0.0)).collect();
    hit.last().unwrap() - hit.first().unwrap() + 1
}

// Past an upsampling layer the exact support depends on where the output
// voxel sits relative to the coarse grid; the tabulated field is its mean
// over one period of positions.
#[test]
fn impulse_support_matches_table() {
    let spec = ArchSpec::default();
    let layers = plan(&spec).unwrap();
    let input = [256, 8, 8];
    let period = 8;
    for row in receptive_field_trace(&spec, input).unwrap() {
        let all: Vec<usize> = (0..period).map(|o| depth_support(&layers[..row.ordinal], input, o)).collect();
        let total: usize = all.iter().sum();
        assert_eq!(total, row.receptive_field * period, "layer {} supports {all:?}", row.ordinal);
        if row.ordinal <= 10 {
            assert!(all.iter().all(|&s| s == row.receptive_field), "layer {}", row.ordinal);
        }
    }
}

mod random_plans {
    use super::*;
    use proptest::prelude::*;
    use vseg_core::rf::trace_plan;

    fn layer() -> impl Strategy<Value = (bool, usize)> {
        (any::<bool>(), prop::sample::select(vec![1usize, 3]))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        // Without upsampling every output position has the same support.
        #[test]
        fn contracting_chains_match_exactly(spec in prop::collection::vec(layer(), 1..7)) {
            let layers: Vec<PlanLayer> = spec
                .iter()
                .enumerate()
                .map(|(i, &(strided, filter))| PlanLayer {
                    ordinal: i + 1,
                    kind: if strided { ConvKind::Strided(2) } else { ConvKind::Plain },
                    filter,
                    features: 1,
                })
                .collect();
            let strides = layers.iter().filter(|l| l.kind != ConvKind::Plain).count();
            let input = [(1 << strides) * 32, 1 << strides, 1 << strides];
            for row in trace_plan(&layers, input).unwrap() {
                for offset in 0..3 {
                    prop_assert_eq!(depth_support(&layers[..row.ordinal], input, offset), row.receptive_field);
                }
            }
        }
    }
}
