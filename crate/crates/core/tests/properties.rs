mod common;

use common::props;

const CASES: u32 = 256;

#[test]
fn balance_after_rebalance() {
    props::balance_after_rebalance(CASES).unwrap();
}

#[test]
fn propensity_floor() {
    props::propensity_floor(CASES).unwrap();
}

#[test]
fn tangent_idempotence() {
    props::tangent_idempotence(CASES).unwrap();
}

#[test]
fn regret_nonnegative() {
    props::regret_nonnegative(CASES).unwrap();
}

#[test]
fn replay_conservation() {
    props::replay_conservation(CASES).unwrap();
}
