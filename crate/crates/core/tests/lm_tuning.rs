//! Random search over the LM weight and word bonus on a constructed dev set.

mod common;

use common::lm_tuning::{dev_set, dev_wer, lm};

#[test]
fn constructed_dev_set_has_the_intended_boundaries() {
    let (set, lm) = (dev_set(), lm());
    // Each lattice flips exactly where it was built to.
    let single = |i: usize, l: f64, b: f64| dev_wer(&set[i..i + 1], &lm, l, b) == 0.0;
    assert!(!single(0, 1.8, 0.0) && single(0, 1.95, 0.0));
    assert!(single(1, 3.05, 0.0) && !single(1, 3.2, 0.0));
    assert!(!single(2, 2.5, -1.3) && single(2, 2.5, -1.2));
    assert!(single(3, 2.5, 1.2) && !single(3, 2.5, 1.3));
}

#[test]
fn search_recovers_the_grid_minimizer() {
    println!("{}", common::lm_tuning::grid_recovery());
}
