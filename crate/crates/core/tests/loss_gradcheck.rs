#[path = "support/gradcheck.rs"]
mod gradcheck;

#[test]
fn every_training_loss_matches_finite_differences() {
    for (name, err) in gradcheck::all() {
        assert!(err < 1e-3, "{name}: relative error {err:.2e}");
    }
}
