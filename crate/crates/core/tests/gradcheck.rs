#[path = "support/gradcheck.rs"]
mod cases;

use cases::TOL;

fn check(cases: Vec<cases::Case>) {
    let failed: Vec<String> = cases
        .into_iter()
        .filter_map(|(name, f)| {
            let e = f();
            (!(e < TOL)).then(|| format!("{name}: relative error {e:.2e}"))
        })
        .collect();
    assert!(failed.is_empty(), "{failed:#?}");
}

#[test]
fn every_op_matches_finite_differences() {
    check(cases::ops());
}

#[test]
fn training_losses_match_finite_differences() {
    check(cases::losses());
}
