//! Finite-difference checks of every differentiable operation, grouped by module.

use promim_testkit::grad::{run_group, TOL};

fn assert_group(group: &str) {
    let results = run_group(Some(group));
    assert!(!results.is_empty());
    for (name, err) in results {
        assert!(err < TOL, "{name}: worst relative error {err:e}");
    }
}

#[test]
fn numerics_gradients() {
    assert_group("numerics");
}

#[test]
fn encoder_gradients() {
    assert_group("encoders");
}

#[test]
fn prompting_gradients() {
    assert_group("prompting");
}

#[test]
fn objective_gradients() {
    assert_group("objectives");
}
