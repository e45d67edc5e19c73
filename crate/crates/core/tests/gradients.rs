use ffpdet_core::gradcheck::{detector_check, op_checks, total_loss_check, Check, TOLERANCE};

fn assert_passed(c: &Check) {
    assert!(c.passed(), "{}: relative error {:e} > {:e}", c.name, c.error, TOLERANCE);
}

#[test]
fn every_op_matches_finite_differences() {
    let checks = op_checks();
    assert!(checks.len() >= 15);
    checks.iter().for_each(assert_passed);
}

#[test]
fn total_loss_matches_finite_differences() {
    assert_passed(&total_loss_check());
}

#[test]
fn detector_parameters_match_finite_differences() {
    assert_passed(&detector_check().unwrap());
}
