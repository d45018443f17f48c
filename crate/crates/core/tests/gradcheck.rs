use spre_core::gradcheck::*;

const SHAPES: usize = 50;
const TOL: f64 = 1e-4;

fn assert_ok(rep: GradReport) {
    assert_eq!(rep.cases, SHAPES);
    assert!(rep.max_rel_err < TOL, "{rep:?}");
}

#[test]
fn conv2d() {
    assert_ok(check_conv(SHAPES, 11));
}

#[test]
fn batchnorm() {
    assert_ok(check_batchnorm(SHAPES, 12));
}

#[test]
fn linear() {
    assert_ok(check_linear(SHAPES, 13));
}

#[test]
fn cross_entropy() {
    assert_ok(check_cross_entropy(SHAPES, 14));
}

#[test]
fn ste_without_decay() {
    assert_ok(check_ste(SHAPES, 15, Some(0.0)));
}

#[test]
fn ste_with_decay() {
    assert_ok(check_ste(SHAPES, 16, None));
}

#[test]
fn relative_error_is_normwise() {
    assert_eq!(rel_err(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
    assert!((rel_err(&[2.0], &[1.0]) - 0.5).abs() < 1e-15);
    assert_eq!(rel_err(&[0.0], &[0.0]), 0.0);
}
