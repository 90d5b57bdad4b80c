mod common;

use common::*;

#[test]
fn analytic_gradients_match_central_differences() {
    let mut r = rng(7);
    for _ in 0..20 {
        let space = random_space(10, 4, 3, 0.1, &mut r);
        let p = random_params(10, 0.3, &mut r);
        let open = random_batch(&space, 12, true, &mut r);
        let closed = closed_part(&open);
        let err = gradient_check(&p, &open, &closed, &space, 1e-5);
        assert!(err < 1e-4, "relative error {err}");
    }
}

#[test]
fn gradient_at_identity_on_one_entry() {
    let mut r = rng(8);
    let space = random_space(12, 5, 3, 0.05, &mut r);
    let p = ovd_selftrain::heads::DetectorParams::init(12);
    let batch = random_batch(&space, 1, false, &mut r);
    let err = gradient_check(&p, &batch, &batch, &space, 1e-5);
    assert!(err < 1e-4, "relative error {err}");
}
