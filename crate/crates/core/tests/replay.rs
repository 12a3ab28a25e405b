use std::collections::HashMap;
use std::fmt::Write as _;

use mcb_core::replay::{ingest_log, ingest_reader, replay_run, target_band_metric, LogSchema, LogShape};
use mcb_core::{BanditConfig, Error, LearnerState, Mat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(d1: usize, d2: usize, arms: usize, horizon: usize, epsilon: f64, c2: f64) -> BanditConfig {
    BanditConfig {
        d1,
        d2,
        rank: 1,
        arms,
        horizon,
        phase1_len: horizon / 3,
        gamma: 1.0 / 3.0,
        epsilon,
        c2,
        eta: 1e-3,
        seed: 0,
        sampling_weights: None,
    }
}

fn synthetic_log(d1: usize, d2: usize, arms: usize, rows: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = String::from("j1,j2,action,reward,order\n");
    for n in 0..rows {
        let (i, j, a) = (rng.random_range(0..d1), rng.random_range(0..d2), rng.random_range(0..arms));
        let r: f64 = rng.random_range(-1.0..1.0);
        writeln!(s, "{i},{j},{a},{r},{n}").unwrap();
    }
    s
}

#[test]
fn three_rows_in_file_order() {
    let text = "j1,j2,action,reward\n2,0,1,0.5\n0,3,0,-1\n1,1,1,2.25\n";
    let schema = LogSchema {
        order: None,
        ..LogSchema::default()
    };
    let recs = ingest_reader(text.as_bytes(), "log.csv", &schema, LogShape { d1: 3, d2: 4, arms: 2 }).unwrap();
    assert_eq!(recs.len(), 3);
    assert_eq!(
        recs.iter().map(|r| (r.cell.row, r.cell.col, r.action, r.reward)).collect::<Vec<_>>(),
        vec![(2, 0, 1, 0.5), (0, 3, 0, -1.0), (1, 1, 1, 2.25)]
    );
}

#[test]
fn out_of_range_row_names_line() {
    let text = "j1,j2,action,reward,order\n0,0,0,1,0\n4,0,0,1,1\n";
    let err = ingest_reader(text.as_bytes(), "park.csv", &LogSchema::default(), LogShape { d1: 3, d2: 2, arms: 2 })
        .unwrap_err();
    match &err {
        Error::Malformed { line, .. } => assert_eq!(*line, 3),
        other => panic!("unexpected {other:?}"),
    }
    assert!(err.to_string().contains("park.csv: line 3"), "{err}");
}

#[test]
fn sfpark_shaped_counts_match_tally() {
    let (d1, d2) = (34, 22);
    let text = synthetic_log(d1, d2, 2, 1000, 4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sfpark.csv");
    std::fs::write(&path, &text).unwrap();

    let mut tally: HashMap<(usize, usize), usize> = HashMap::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        *tally.entry((f[0].parse().unwrap(), f[1].parse().unwrap())).or_default() += 1;
    }
    let recs = ingest_log(&path, &LogSchema::default(), LogShape { d1, d2, arms: 2 }).unwrap();
    let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
    for r in &recs {
        *counts.entry((r.cell.row, r.cell.col)).or_default() += 1;
    }
    assert_eq!(recs.len(), 1000);
    assert_eq!(counts, tally);
}

#[test]
fn full_exploration_matches_half_the_log() {
    let n = 20_000;
    let text = synthetic_log(6, 5, 2, n, 5);
    let recs = ingest_reader(text.as_bytes(), "log", &LogSchema::default(), LogShape { d1: 6, d2: 5, arms: 2 }).unwrap();
    // c2 large enough that ε_t = 1 throughout phase 2 as well.
    let cfg = config(6, 5, 2, n, 1.0, 1e9);
    let init = vec![Mat::from_element(6, 5, 1.0), Mat::from_element(6, 5, 2.0)];
    let learner = LearnerState::init_from_matrices(&init, cfg).unwrap();
    let out = replay_run(&recs, learner, false, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let frac = out.stats.matched_fraction();
    let half_width = 4.0 * (0.25 / n as f64).sqrt();
    assert!((frac - 0.5).abs() <= half_width, "matched fraction {frac}");
}

#[test]
fn greedy_log_with_vanishing_exploration_is_kept() {
    let (d1, d2) = (4, 3);
    let m0 = Mat::from_fn(d1, d2, |i, j| (i + j) as f64);
    let m1 = Mat::from_fn(d1, d2, |i, j| 3.0 - (i + j) as f64 + 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut text = String::from("j1,j2,action,reward\n");
    for _ in 0..5000 {
        let (i, j) = (rng.random_range(0..d1), rng.random_range(0..d2));
        let a = usize::from(m1[(i, j)] > m0[(i, j)]);
        let r = if a == 1 { m1[(i, j)] } else { m0[(i, j)] };
        writeln!(text, "{i},{j},{a},{r}").unwrap();
    }
    let schema = LogSchema {
        order: None,
        ..LogSchema::default()
    };
    let recs = ingest_reader(text.as_bytes(), "log", &schema, LogShape { d1, d2, arms: 2 }).unwrap();
    let cfg = config(d1, d2, 2, 5000, 1e-9, 1e-9);
    let truth_rank1 = |m: &Mat| mcb_core::lowrank::rank_r_project(m, 1).unwrap().0;
    let learner = LearnerState::init_from_matrices(&[truth_rank1(&m0), truth_rank1(&m1)], cfg).unwrap();
    let greedy_ok = recs
        .iter()
        .all(|r| mcb_core::schedule::greedy_arm(&learner.arms, r.cell) == r.action);
    assert!(greedy_ok, "fixture must log the learner's greedy arm");
    let out = replay_run(&recs, learner, false, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    assert!(out.stats.matched_fraction() > 0.999, "{}", out.stats.matched_fraction());
}

#[test]
fn replay_is_seeded() {
    let text = synthetic_log(5, 5, 3, 3000, 9);
    let recs = ingest_reader(text.as_bytes(), "log", &LogSchema::default(), LogShape { d1: 5, d2: 5, arms: 3 }).unwrap();
    let run = || {
        let init: Vec<Mat> = (0..3).map(|a| Mat::from_fn(5, 5, |i, j| (a * 5 + i + j) as f64 * 0.1 + 0.3)).collect();
        let learner = LearnerState::init_from_matrices(&init, config(5, 5, 3, 3000, 0.6, 10.0)).unwrap();
        replay_run(&recs, learner, true, &mut ChaCha8Rng::seed_from_u64(10)).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.stats, b.stats);
    assert_eq!(a.learner, b.learner);
    assert_eq!(a.debias, b.debias);
}

#[test]
fn band_metric_fixtures() {
    assert_eq!(target_band_metric(&[0.7; 40], 0.6, 0.8).unwrap(), 1.0);
    let alternating: Vec<f64> = (0..40).map(|k| if k % 2 == 0 { 0.5 } else { 0.9 }).collect();
    assert_eq!(target_band_metric(&alternating, 0.6, 0.8).unwrap(), 0.0);
    let mut known: Vec<f64> = (0..63).map(|k| 0.6 + 0.2 * k as f64 / 62.0).collect();
    known.extend((0..37).map(|k| if k % 2 == 0 { 0.1 } else { 0.95 }));
    assert_eq!(target_band_metric(&known, 0.6, 0.8).unwrap(), 0.63);
}
