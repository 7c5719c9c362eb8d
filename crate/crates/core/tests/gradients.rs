use vseg_core::gradcheck::{check_layers, check_network, TOLERANCE};
use vseg_core::{LossKind, SkipMode};

#[test]
fn every_layer_matches_finite_differences() {
    for r in check_layers(11, 20).unwrap() {
        assert_eq!(r.instances, 20);
        assert!(r.passed(), "{} max rel error {:.3e} at {:?}", r.name, r.max_rel_error, r.worst);
    }
}

// The sampled network matrix lives in the acceptance suite; here every
// parameter entry of one configuration is probed.
#[test]
fn every_network_parameter_entry_matches() {
    let r = check_network(SkipMode::Concat, 3, LossKind::Jaccard, 7, 1, None).unwrap();
    assert!(r.max_rel_error < TOLERANCE, "{:?}", r);
    assert!(r.skipped * 10 < r.probes, "{:?}", r);
}
