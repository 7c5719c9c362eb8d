use vseg_core::augment::AugmentPolicy;
use vseg_core::optim::{crossval, fold_partition, train, AdamConfig};
use vseg_core::{synth, ArchSpec, InitScheme, LossKind, Network, RegionMap, Sample, SkipMode, TrainConfig};

fn tiny(classes: usize) -> ArchSpec {
    ArchSpec {
        in_channels: 1,
        class_count: classes,
        widths: ArchSpec::scaled_widths(2),
        init: InitScheme::Xavier,
        ..ArchSpec::default()
    }
}

fn spheres(n: usize, seed: u64) -> Vec<Sample<f32>> {
    (0..n).map(|i| synth::sphere([8, 8, 8], 0.5 + 0.05 * i as f64, 0.05, seed + i as u64).unwrap()).collect()
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        max_epochs: epochs,
        patience: epochs,
        adam: AdamConfig { lr: 1e-3, ..AdamConfig::default() },
        ..TrainConfig::default()
    }
}

#[test]
fn equal_seeds_give_identical_trajectories() {
    let data = spheres(2, 1);
    let run = || train(Network::build(&tiny(2), 3).unwrap(), &data, &[], &cfg(4)).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.iterations, b.iterations);
    assert_eq!(a.epochs, b.epochs);
    assert_eq!(a.net, b.net);
    let mut other = cfg(4);
    other.seed = 1;
    let c = train(Network::build(&tiny(2), 3).unwrap(), &data, &[], &other).unwrap();
    assert_ne!(a.iterations, c.iterations);
}

#[test]
fn zero_patience_runs_one_epoch() {
    let data = spheres(3, 2);
    let mut c = cfg(10);
    c.patience = 0;
    let out = train(Network::build(&tiny(2), 0).unwrap(), &data, &[], &c).unwrap();
    assert_eq!(out.epochs.len(), 1);
    assert_eq!(out.iterations.len(), 3);
}

#[test]
fn snapshot_has_the_best_validation_loss() {
    let data = spheres(2, 5);
    let out = train(Network::build(&tiny(2), 1).unwrap(), &data, &spheres(1, 40), &cfg(8)).unwrap();
    let best = out.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(out.best_val_loss, best);
    assert_eq!(out.epochs[out.best_epoch - 1].val_loss, best);
}

#[test]
fn logged_total_is_fused_plus_weighted_aux() {
    let data = spheres(2, 7);
    let mut c = cfg(2);
    c.aux_weights = [0.5, 0.25];
    c.loss = LossKind::Jaccard;
    let out = train(Network::build(&tiny(2), 1).unwrap(), &data, &[], &c).unwrap();
    for it in &out.iterations {
        assert_eq!(it.aux.len(), 2);
        let total = it.fused + 0.5 * it.aux[0] + 0.25 * it.aux[1];
        assert!((it.total - total).abs() < 1e-12);
    }
}

#[test]
fn empty_dataset_is_an_error() {
    assert!(train(Network::<f32>::build(&tiny(2), 1).unwrap(), &[], &[], &cfg(1)).is_err());
}

#[test]
fn leave_one_out_partition() {
    let folds = fold_partition(5, 5, 9).unwrap();
    assert!(folds.iter().all(|f| f.len() == 1));
    let mut all: Vec<usize> = folds.concat();
    all.sort();
    assert_eq!(all, (0..5).collect::<Vec<_>>());
    assert!(fold_partition(3, 4, 0).is_err());
}

#[test]
fn two_fold_crossval_structure() {
    let data = spheres(4, 11);
    let mut c = cfg(2);
    c.augment = AugmentPolicy::None;
    let spec = ArchSpec {
        skip_mode: SkipMode::Sum,
        widths: vec![2, 2, 2, 2, 2, 2, 2, 2, 2, 2, 2, 2, 2],
        ..tiny(2)
    };
    let out = crossval(&spec, &data, 2, &c, &RegionMap::per_class(2)).unwrap();
    assert_eq!(out.folds.len(), 2);
    assert_eq!(out.reports.len(), 2);
    let mut seen: Vec<usize> = out.reports.iter().flat_map(|r| r.test_indices.clone()).collect();
    seen.sort();
    assert_eq!(seen, vec![0, 1, 2, 3]);
    assert_eq!(out.mean.len(), out.reports[0].metrics.len());
    let again = crossval(&spec, &data, 2, &c, &RegionMap::per_class(2)).unwrap();
    assert_eq!(out.reports, again.reports);
}
