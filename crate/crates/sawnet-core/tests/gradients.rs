//! Gradient correctness from the public API: the per-layer battery, the
//! end-to-end model check, and proof the checker rejects planted faults.

use sawnet_core::verify::{
    check_gradcheck_teeth, check_gradient_rules, check_model_gradients, gradcheck_model_spec,
    model_gradcheck, planted_fault_outcome,
};

#[test]
fn layer_gradient_battery_passes() {
    let o = check_gradient_rules(11);
    assert!(o.passed, "{o}");
}

#[test]
fn end_to_end_model_gradients_pass() {
    let o = check_model_gradients(11, 3);
    assert!(o.passed, "{o}");
}

#[test]
fn segmentation_model_gradients_pass() {
    use sawnet_core::sawnet::Task;
    let mut spec = gradcheck_model_spec();
    spec.config.task = Task::Segment;
    spec.config.parts = Some(4);
    let (worst, name) = model_gradcheck(&spec, 23, 2, 12).unwrap();
    assert!(worst <= 1e-4, "worst {worst:.3e} at {name}");
}

#[test]
fn a_five_percent_gradient_error_is_rejected() {
    let fault = planted_fault_outcome(11);
    assert!(!fault.passed, "{fault}");
    assert!(fault.max_error > fault.tolerance);
    let teeth = check_gradcheck_teeth(11);
    assert!(teeth.passed, "{teeth}");
}
