mod common;

use common::{grad_fixture, small_bundle, LOSS_CONFIGS};
use uodlab::model::gradcheck::{check_gradients, relative_error, GradCheckConfig};
use uodlab::rng::SplitMix64;

#[test]
fn analytic_gradients_match_central_differences() {
    let bundle = small_bundle(40, 0);
    let check = GradCheckConfig {
        samples_per_layer: 15,
        ..GradCheckConfig::default()
    };
    for which in LOSS_CONFIGS {
        let f = grad_fixture(which, &bundle);
        let mut rng = SplitMix64::new(7);
        let report = check_gradients(&f.arch, &f.params, &f.plans, &f.graph, &check, &mut rng).unwrap();
        assert!(!report.entries.is_empty());
        assert!(
            report.passed(check.tolerance),
            "{which}: max relative error {:.3e}",
            report.max_rel_err()
        );
        assert!(report.layers.iter().all(|l| l.checked > 0), "{which}: a layer went unchecked");
    }
}

#[test]
fn relative_error_uses_the_floor() {
    assert_eq!(relative_error(0.0, 0.0, 1e-6), 0.0);
    assert!((relative_error(1e-9, 0.0, 1e-6) - 1e-3).abs() < 1e-15);
    assert!((relative_error(2.0, 1.0, 1e-6) - 0.5).abs() < 1e-15);
}
