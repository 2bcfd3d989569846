use stconv::selftest::{gradient_suite, oracle_suite, GRAD_TOLERANCE};

#[test]
fn every_op_and_block_matches_finite_differences() {
    let checks = gradient_suite(11).unwrap();
    assert!(checks.len() >= 25);
    for c in &checks {
        assert_eq!(c.tolerance, GRAD_TOLERANCE);
        assert!(c.passed, "{}: rel err {:.3e}", c.name, c.worst);
    }
}

#[test]
fn fast_kernels_agree_with_naive_oracles() {
    for c in oracle_suite(25, 5).unwrap() {
        assert!(c.passed, "{}: {:.3e} > {:.3e}", c.name, c.worst, c.tolerance);
    }
}
