mod common;

use common::*;
use semiseg_core::HyperParams;

#[test]
fn teacher_equals_offline_ema_replay() {
    check_ema_replay().unwrap();
}

#[test]
fn logged_total_is_the_weighted_sum() {
    check_composition().unwrap();
}

#[test]
fn self_training_gate_extremes() {
    check_st_gate().unwrap();
}

#[test]
fn training_is_reproducible() {
    let hp = HyperParams {
        gamma: 0.5,
        ..HyperParams::default()
    };
    assert_eq!(run_branch(hp.clone(), 20), run_branch(hp, 20));
}

#[test]
fn zero_weights_leave_only_cross_entropy() {
    let hp = HyperParams {
        lambda_fm: 0.0,
        lambda_st: 0.0,
        ..HyperParams::default()
    };
    let log = run_branch(hp, 10);
    assert!(log.iter().all(|l| (l.total - l.ce).abs() < 1e-12));
}
