//! Property suites, each run through a `proptest` runner with a given case
//! count so the acceptance target and the plain tests share them.

use mcb_core::lowrank::{rebalance_fast, tangent_project, thin_svd};
use mcb_core::replay::{replay_run, LogRecord};
use mcb_core::schedule::propensities;
use mcb_core::sim::{GroundTruth, NoiseKind, RegretLedger};
use mcb_core::{BanditConfig, Cell, Error, FactorPair, LearnerState, Mat};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{jacobi_svd, tangent_dense};

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    })
}

fn mat(rows: usize, cols: usize, data: &[f64]) -> Mat {
    Mat::from_row_slice(rows, cols, &data[..rows * cols])
}

/// `(d1, d2, r, values)` with enough values for `d1×r + d2×r`.
fn factor_dims() -> impl Strategy<Value = (usize, usize, usize, Vec<f64>)> {
    (2usize..10, 2usize..10, 1usize..4).prop_flat_map(|(d1, d2, r)| {
        let r = r.min(d1).min(d2);
        (
            Just(d1),
            Just(d2),
            Just(r),
            prop::collection::vec(-10.0f64..10.0, (d1 + d2) * r),
        )
    })
}

fn split_factors(d1: usize, d2: usize, r: usize, vals: &[f64]) -> (Mat, Mat) {
    (mat(d1, r, vals), mat(d2, r, &vals[d1 * r..]))
}

fn rel_close(a: &Mat, b: &Mat, tol: f64) -> bool {
    (a - b).amax() <= tol * b.amax().max(1.0)
}

/// `UᵀU = VᵀV` after a rebalance, and the product is unchanged.
pub fn balance_after_rebalance(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(&factor_dims(), |(d1, d2, r, vals)| {
            let (u, v) = split_factors(d1, d2, r, &vals);
            let pair = FactorPair::new(u, v).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let out = match rebalance_fast(&pair) {
                Ok(p) => p,
                Err(Error::RankDeficient { .. }) => return Err(TestCaseError::reject("rank deficient")),
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            };
            let gu = out.u().transpose() * out.u();
            let gv = out.v().transpose() * out.v();
            prop_assert!(rel_close(&gu, &gv, 1e-9), "UᵀU {gu} vs VᵀV {gv}");
            prop_assert!(rel_close(&out.product(), &pair.product(), 1e-10));
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Every arm keeps at least `ε/K`, the greedy arm gets `1 − ε + ε/K`, and
/// the probabilities sum to one.
pub fn propensity_floor(cases: u32) -> Result<(), String> {
    let strat = (2usize..7, 1usize..5, 1usize..5, 1e-9f64..=1.0)
        .prop_flat_map(|(k, d1, d2, eps)| {
            (
                Just(k),
                Just(d1),
                Just(d2),
                Just(eps),
                prop::collection::vec(-5.0f64..5.0, k * (d1 + d2)),
                0..d1,
                0..d2,
            )
        });
    runner(cases)
        .run(&strat, |(k, d1, d2, eps, vals, i, j)| {
            let arms: Vec<FactorPair> = (0..k)
                .map(|a| {
                    let s = &vals[a * (d1 + d2)..];
                    FactorPair::new(mat(d1, 1, s), mat(d2, 1, &s[d1..])).unwrap()
                })
                .collect();
            let pv = propensities(&arms, Cell::new(i, j), eps);
            let floor = eps / k as f64;
            let total: f64 = pv.probs.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12, "sum {total}");
            for (a, p) in pv.probs.iter().enumerate() {
                prop_assert!(*p >= floor * (1.0 - 1e-12), "arm {a}: {p} < {floor}");
            }
            prop_assert!((pv.probs[pv.greedy_arm] - (1.0 - eps + floor)).abs() <= 1e-15);
            let best = arms.iter().map(|p| p.entry(i, j)).fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(arms[pv.greedy_arm].entry(i, j), best);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// `P_M(P_M(Q)) = P_M(Q)` and `P_M` matches the explicit-complement form.
pub fn tangent_idempotence(cases: u32) -> Result<(), String> {
    let strat = factor_dims().prop_flat_map(|(d1, d2, r, vals)| {
        (Just(d1), Just(d2), Just(r), Just(vals), prop::collection::vec(-3.0f64..3.0, d1 * d2))
    });
    runner(cases)
        .run(&strat, |(d1, d2, r, vals, qv)| {
            let (u, v) = split_factors(d1, d2, r, &vals);
            let m = &u * v.transpose();
            let svd = thin_svd(&m, r).map_err(|e| TestCaseError::fail(e.to_string()))?;
            if svd.lambda_min() < 1e-6 * svd.lambda_max() {
                return Err(TestCaseError::reject("ill-conditioned"));
            }
            let q = mat(d1, d2, &qv);
            let p = tangent_project(&q, &svd).unwrap();
            let pp = tangent_project(&p, &svd).unwrap();
            prop_assert!(rel_close(&pp, &p, 1e-9));
            let reference = jacobi_svd(&m);
            let l = reference.u.columns(0, r).into_owned();
            let rr = reference.v.columns(0, r).into_owned();
            prop_assert!(rel_close(&p, &tangent_dense(&q, &l, &rr), 1e-8));
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Instantaneous regret is nonnegative and the cumulative ledger never falls.
pub fn regret_nonnegative(cases: u32) -> Result<(), String> {
    let strat = (2usize..5, 2usize..6, 2usize..6).prop_flat_map(|(k, d1, d2)| {
        (
            Just(k),
            Just(d1),
            Just(d2),
            prop::collection::vec(-50.0f64..50.0, k * d1 * d2),
            prop::collection::vec((0..d1, 0..d2, 0..k), 1..40),
        )
    });
    runner(cases)
        .run(&strat, |(k, d1, d2, vals, pulls)| {
            let raw: Vec<Mat> = (0..k).map(|a| mat(d1, d2, &vals[a * d1 * d2..])).collect();
            let truth = GroundTruth::from_matrices(raw, 1, vec![1.0; k], NoiseKind::Gaussian).unwrap();
            let mut ledger = RegretLedger::new(k);
            let mut prev = 0.0;
            for (i, j, a) in pulls {
                let x = Cell::new(i, j);
                prop_assert!(truth.regret(x, a) >= 0.0);
                ledger.record(&truth, x, a);
                prop_assert!(ledger.total() >= prev);
                prev = ledger.total();
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// `matched + skipped = total` overall and per arm; matched rewards come from
/// the log; an all-skipped replay leaves the learner untouched.
pub fn replay_conservation(cases: u32) -> Result<(), String> {
    let (d1, d2) = (3usize, 4usize);
    let strat = (2usize..4, 1e-6f64..=1.0, any::<u64>()).prop_flat_map(move |(k, eps, seed)| {
        (
            Just(k),
            Just(eps),
            Just(seed),
            prop::collection::vec((0..d1, 0..d2, 0..k, -5.0f64..5.0), 0..120),
        )
    });
    runner(cases)
        .run(&strat, |(k, eps, seed, rows)| {
            let records: Vec<LogRecord> = rows
                .iter()
                .enumerate()
                .map(|(n, &(i, j, a, r))| LogRecord {
                    cell: Cell::new(i, j),
                    action: a,
                    reward: r,
                    order: n as f64,
                    outcome: r,
                    line: n as u64 + 2,
                })
                .collect();
            let config = BanditConfig {
                d1,
                d2,
                rank: 1,
                arms: k,
                horizon: 100,
                phase1_len: 30,
                gamma: 1.0 / 3.0,
                epsilon: eps,
                c2: 1.0,
                eta: 0.01,
                seed,
                sampling_weights: None,
            };
            let init: Vec<Mat> = (0..k)
                .map(|a| Mat::from_fn(d1, d2, |i, j| 1.0 + a as f64 + 0.1 * (i * d2 + j) as f64))
                .collect();
            let learner = LearnerState::init_from_matrices(&init, config).unwrap();
            let before = learner.clone();
            let out = replay_run(&records, learner, true, &mut ChaCha8Rng::seed_from_u64(seed))
                .map_err(|e| TestCaseError::fail(e.to_string()))?;
            let s = &out.stats;
            prop_assert_eq!(s.total_records as usize, records.len());
            prop_assert_eq!(s.matched + s.skipped, s.total_records);
            for a in 0..k {
                prop_assert_eq!(s.matched_per_arm[a] + s.skipped_per_arm[a], s.total_per_arm[a]);
            }
            prop_assert_eq!(out.learner.t as u64, s.matched);
            for o in &s.matched_outcomes {
                prop_assert!(rows.iter().any(|r| r.3 == *o));
            }
            if s.matched == 0 {
                prop_assert_eq!(&out.learner, &before);
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}
