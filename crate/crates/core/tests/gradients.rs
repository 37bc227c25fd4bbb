mod common;

use common::*;

#[test]
fn every_layer_matches_finite_differences() {
    for seed in 0..10 {
        for (name, r) in layer_checks(seed) {
            assert!(r.checked > 0, "{name}: nothing checked");
            assert!(r.max_rel_error <= 1e-4, "{name} seed {seed}: {r:?}");
        }
    }
}

#[test]
fn unet_gradients_match_finite_differences() {
    for (width, coords) in [(2, None), (4, Some(1500)), (8, Some(1500))] {
        let r = unet_check(width, coords, 100 + width as u64);
        println!(
            "unet width {width}: max rel {:.3e} over {} coords ({} skipped)",
            r.max_rel_error, r.checked, r.skipped
        );
        assert!(r.checked > 0);
        assert!(r.max_rel_error <= 1e-4, "width {width}: {r:?}");
    }
}

#[test]
fn classifier_gradients_match_finite_differences() {
    let r = classifier_check(Some(3000), 7);
    println!(
        "classifier: max rel {:.3e} over {} coords ({} skipped)",
        r.max_rel_error, r.checked, r.skipped
    );
    assert!(r.checked > 1000);
    assert!(r.max_rel_error <= 1e-4, "{r:?}");
}
