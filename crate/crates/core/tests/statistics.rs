//! Sampler and masking frequencies against their closed forms.

mod common;

#[test]
fn sampler_matches_joint_distribution() {
    common::statistics::sampler_chi_square();
}

#[test]
fn worked_three_language_example() {
    common::statistics::worked_example();
}

#[test]
fn span_mask_coverage() {
    common::statistics::masking_coverage();
}
