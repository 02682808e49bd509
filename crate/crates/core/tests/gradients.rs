mod common;

use common::gradcheck::{self, GradReport};

fn assert_clean(name: &str, rep: &GradReport) {
    assert!(rep.failures.is_empty(), "{name}: {} failures\n{}", rep.failures.len(), rep.failures.join("\n"));
    assert!(rep.coords > 0, "{name}: every coordinate was a breakpoint");
}

#[test]
fn primitive_chains_match_central_differences() {
    assert_clean("ops", &gradcheck::op_chains(25, 11));
}

#[test]
fn pac_message_matches_central_differences() {
    assert_clean("pac", &gradcheck::pac_ops(10, 12));
}

#[test]
fn backbone_matches_central_differences() {
    assert_clean("backbone", &gradcheck::backbone(6, 13));
}

#[test]
fn crf_matches_central_differences() {
    assert_clean("crf", &gradcheck::crf(6, 14));
}

#[test]
fn every_loss_family_matches_central_differences() {
    assert_clean("losses", &gradcheck::losses(18, 15));
}

#[test]
fn loss_through_the_full_model_matches_central_differences() {
    assert_clean("e2e", &gradcheck::end_to_end(6, 16));
}
