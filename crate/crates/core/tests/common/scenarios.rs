//! Seeded end-to-end scenarios shared by the topic tests and the acceptance run.

use mcb_core::inference::DebiasState;
use mcb_core::schedule::{propensities, scaled_step_size};
use mcb_core::sim::{
    GroundTruth, InitSpec, NoiseKind, PhaseOneSpec, RunSpec, StepSpec, TruthSpec,
};
use mcb_core::{BanditConfig, Cell, LearnerState, Mat, StepRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{balanced, dense_step, epsilon, greedy_and_probs, pick};

/// The two-arm desk truth: `d × d`, rank 2, unit noise, perturbation 2.
pub fn desk_truth_spec(d: usize, seed: u64) -> TruthSpec {
    TruthSpec {
        d1: d,
        d2: d,
        rank: 2,
        arms: 2,
        perturbation_scale: 2.0,
        sigmas: vec![1.0, 1.0],
        noise: NoiseKind::Gaussian,
        base_scale: 100.0,
        seed,
    }
}

/// `γ = 1/3`, `ε = 0.6`, `c2 = 10`, `c1 = 0.025`, Soft-Impute start.
pub fn desk_run(horizon: usize, phase1: PhaseOneSpec) -> RunSpec {
    RunSpec {
        horizon,
        phase1,
        gamma: 1.0 / 3.0,
        epsilon: 0.6,
        c2: 10.0,
        step: StepSpec::Scaled { c1: 0.025 },
        init: InitSpec::default(),
        sampling_weights: None,
    }
}

/// `T0 = C0·T^{2/3}` with `C0` chosen so that `T0 = 6000` at `T = 20000`.
pub fn desk_c0() -> f64 {
    6000.0 / 20000f64.powf(2.0 / 3.0)
}

pub struct Equivalence {
    /// Largest `|M̂_fast − M̂_dense|` entry over all steps and arms.
    pub max_discrepancy: f64,
    /// Steps where the two paths disagreed on the greedy arm.
    pub greedy_mismatches: usize,
    pub steps: usize,
}

/// Runs the library learner and the dense full-SVD reference side by side on
/// one shared request/action/reward stream.
pub fn fast_vs_dense(d1: usize, d2: usize, steps: usize, seed: u64) -> Equivalence {
    let spec = TruthSpec {
        d1,
        d2,
        rank: 2,
        arms: 2,
        perturbation_scale: 2.0,
        sigmas: vec![1.0, 1.0],
        noise: NoiseKind::Gaussian,
        base_scale: 100.0,
        seed,
    };
    let truth = spec.generate().unwrap();
    let t0 = steps * 3 / 10;
    let gamma = 1.0 / 3.0;
    let config = BanditConfig {
        d1,
        d2,
        rank: 2,
        arms: 2,
        horizon: steps,
        phase1_len: t0,
        gamma,
        epsilon: 0.6,
        c2: 10.0,
        eta: scaled_step_size(0.025, d1, d2, steps, gamma, truth.lambda_max),
        seed,
        sampling_weights: None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let noise = Normal::new(0.0, 5.0).unwrap();
    let init: Vec<Mat> = truth
        .matrices
        .iter()
        .map(|m| m.map(|v| v + noise.sample(&mut rng)))
        .collect();

    let mut fast = LearnerState::init_from_matrices(&init, config.clone()).unwrap();
    let mut dense: Vec<(Mat, Mat)> = init.iter().map(|m| balanced(m, 2)).collect();

    let mut out = Equivalence {
        max_discrepancy: 0.0,
        greedy_mismatches: 0,
        steps,
    };
    let check = |fast: &LearnerState, dense: &[(Mat, Mat)], out: &mut Equivalence| {
        for (a, (u, v)) in dense.iter().enumerate() {
            let diff = (fast.arms[a].product() - u * v.transpose()).amax();
            out.max_discrepancy = out.max_discrepancy.max(diff);
        }
    };
    check(&fast, &dense, &mut out);

    for t in 1..=steps {
        let x = Cell::new(rng.random_range(0..d1), rng.random_range(0..d2));
        let u_draw: f64 = rng.random();
        let eps = epsilon(t, t0, config.epsilon, config.c2, gamma);

        let pv = fast.propose(x).unwrap();
        let values: Vec<f64> = dense.iter().map(|(u, v)| u.row(x.row).dot(&v.row(x.col))).collect();
        let (greedy, probs) = greedy_and_probs(&values, eps);
        if greedy != pv.greedy_arm {
            out.greedy_mismatches += 1;
        }
        let action = pick(&pv.probs, u_draw);
        let reward = truth.matrices[action][(x.row, x.col)] + rng.sample::<f64, _>(rand_distr::StandardNormal);

        let eta_t = if t <= t0 { config.eta } else { eps * config.eta };
        let (u, v) = &dense[action];
        dense[action] = dense_step(u, v, x.row, x.col, reward, eta_t / probs[action]);

        let rec = StepRecord {
            t,
            x,
            propensities: pv,
            action,
            reward,
            phase: config.phase(t),
        };
        fast.sgd_step(&rec).unwrap();
        check(&fast, &dense, &mut out);
    }
    out
}

pub struct Unbiasedness {
    /// Per arm, entries whose Monte Carlo mean lies within 3 standard errors.
    pub within: Vec<usize>,
    pub cells: usize,
    /// Largest `|mean − M| / se` per arm.
    pub worst_z: Vec<f64>,
}

fn rank_one(a: &[f64], b: &[f64]) -> Mat {
    Mat::from_fn(a.len(), b.len(), |i, j| a[i] * b[j])
}

/// Frozen, biased estimates; IPW-debiased means over `reps` independent
/// streams of `steps` phase-2 rounds each.
pub fn ipw_unbiasedness(steps: usize, reps: usize, seed: u64) -> Unbiasedness {
    let d = 5;
    let m0 = rank_one(&[1.0, 2.0, -1.0, 0.5, 1.5], &[1.0, -0.5, 2.0, 1.0, 0.3]);
    let m1 = rank_one(&[0.8, 2.5, -0.5, 1.0, 1.0], &[1.2, -0.2, 1.5, 1.0, 0.8]);
    let truth = GroundTruth::from_matrices(vec![m0, m1], 1, vec![1.0, 1.0], NoiseKind::Gaussian).unwrap();
    let est0 = rank_one(&[1.3, 1.8, -1.2, 0.2, 1.5], &[1.0, -0.3, 2.2, 0.8, 0.5]);
    let est1 = rank_one(&[0.6, 2.9, -0.4, 1.1, 0.9], &[1.0, -0.4, 1.2, 1.3, 0.6]);
    let t0 = 100;
    let config = BanditConfig {
        d1: d,
        d2: d,
        rank: 1,
        arms: 2,
        horizon: t0 + steps,
        phase1_len: t0,
        gamma: 1.0 / 3.0,
        epsilon: 0.6,
        c2: 10.0,
        eta: 0.0,
        seed,
        sampling_weights: None,
    };
    let frozen = LearnerState::init_from_matrices(&[est0, est1], config.clone()).unwrap();

    let mut sums = vec![Mat::zeros(d, d); 2];
    let mut sq_sums = vec![Mat::zeros(d, d); 2];
    for rep in 0..reps {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(rep as u64);
        let mut state = frozen.clone();
        let mut db = DebiasState::for_config(&config);
        for t in t0 + 1..=t0 + steps {
            state.t = t - 1;
            let x = Cell::new(rng.random_range(0..d), rng.random_range(0..d));
            let eps = epsilon(t, t0, config.epsilon, config.c2, config.gamma);
            let pv = propensities(&state.arms, x, eps);
            let action = pick(&pv.probs, rng.random());
            let reward = truth.reward(x, action, &mut rng);
            let rec = StepRecord {
                t,
                x,
                propensities: pv,
                action,
                reward,
                phase: 2,
            };
            db.accumulate(&state, &rec).unwrap();
        }
        for (a, m) in db.finalize_ipw().unwrap().into_iter().enumerate() {
            sums[a] += &m;
            sq_sums[a] += m.component_mul(&m);
        }
    }
    let n = reps as f64;
    let mut within = vec![0; 2];
    let mut worst_z = vec![0.0f64; 2];
    for a in 0..2 {
        for i in 0..d {
            for j in 0..d {
                let mean = sums[a][(i, j)] / n;
                let var = (sq_sums[a][(i, j)] - n * mean * mean) / (n - 1.0);
                let se = (var / n).sqrt();
                let z = (mean - truth.matrices[a][(i, j)]).abs() / se;
                worst_z[a] = worst_z[a].max(z);
                if z <= 3.0 {
                    within[a] += 1;
                }
            }
        }
    }
    Unbiasedness {
        within,
        cells: d * d,
        worst_z,
    }
}

/// Top two singular values by orthogonal subspace iteration on `MᵀM`
/// followed by a 2 × 2 Rayleigh–Ritz step.
pub fn top_two_singular_values(m: &Mat) -> (f64, f64) {
    let n = m.ncols();
    let mut q = Mat::from_fn(n, 2, |i, j| ((i * 7 + j * 3 + 1) as f64).sin());
    let gram = m.transpose() * m;
    for _ in 0..200 {
        let z = &gram * &q;
        q = gram_schmidt(&z);
    }
    let h = q.transpose() * &gram * &q;
    let (a, b, c) = (h[(0, 0)], h[(0, 1)], h[(1, 1)]);
    let mid = 0.5 * (a + c);
    let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    ((mid + rad).max(0.0).sqrt(), (mid - rad).max(0.0).sqrt())
}

fn gram_schmidt(z: &Mat) -> Mat {
    let mut q = z.clone();
    for j in 0..q.ncols() {
        for k in 0..j {
            let proj = q.column(k).dot(&q.column(j));
            let col = q.column(k).into_owned();
            q.column_mut(j).axpy(-proj, &col, 1.0);
        }
        let norm = q.column(j).norm();
        q.column_mut(j).scale_mut(1.0 / norm);
    }
    q
}
