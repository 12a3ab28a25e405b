//! Synthetic environments and seeded study runners.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::impute::{soft_impute_init, Observation, SoftImputeOptions};
use crate::inference::{DebiasState, FormMode, InferenceContext, LinearForm, LinearTerm};
use crate::learner::{ArmError, LearnerState, StepRecord};
use crate::lowrank::{rank_r_project, Mat, ThinSvd};
use crate::schedule::{
    epsilon_at, propensities, sample_action, sample_request, scaled_step_size, BanditConfig, Cell,
    SamplingWeights,
};
use crate::stats::{ks_critical_value, ks_standard_normal, linear_fit, mean, median, std_dev, LinearFit};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    #[default]
    Gaussian,
    /// `U(−√3σ, √3σ)`: bounded, same standard deviation.
    Uniform,
}

fn default_base_scale() -> f64 {
    100.0
}

/// Recipe for a ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthSpec {
    pub d1: usize,
    pub d2: usize,
    pub rank: usize,
    pub arms: usize,
    /// Half-width of the uniform perturbation separating the arms.
    pub perturbation_scale: f64,
    /// Per-arm noise standard deviation.
    pub sigmas: Vec<f64>,
    #[serde(default)]
    pub noise: NoiseKind,
    /// Half-width of the uniform base entries.
    #[serde(default = "default_base_scale")]
    pub base_scale: f64,
    pub seed: u64,
}

impl TruthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d1 == 0 || self.d2 == 0 {
            return bad("truth dimensions must be positive".into());
        }
        if self.rank == 0 || self.rank > self.d1.min(self.d2) {
            return Err(Error::RankTooLarge {
                rank: self.rank,
                rows: self.d1,
                cols: self.d2,
            });
        }
        if self.arms < 2 {
            return bad(format!("arms must be at least 2, got {}", self.arms));
        }
        if self.sigmas.len() != self.arms {
            return bad(format!("{} sigmas for {} arms", self.sigmas.len(), self.arms));
        }
        if self.sigmas.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return bad("sigmas must be finite and nonnegative".into());
        }
        if !(self.perturbation_scale.is_finite() && self.perturbation_scale >= 0.0) {
            return bad("perturbation_scale must be finite and nonnegative".into());
        }
        if !(self.base_scale.is_finite() && self.base_scale > 0.0) {
            return bad("base_scale must be positive".into());
        }
        Ok(())
    }

    /// Generates the truth from `self.seed`.
    pub fn generate(&self) -> Result<GroundTruth> {
        generate_truth(self, &mut ChaCha8Rng::seed_from_u64(self.seed))
    }
}

/// Exactly rank-`r` arm matrices and their noise levels.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub matrices: Vec<Mat>,
    pub sigmas: Vec<f64>,
    pub noise: NoiseKind,
    pub svds: Vec<ThinSvd>,
    /// Smallest nonzero singular value over arms.
    pub lambda_min: f64,
    /// Largest singular value over arms.
    pub lambda_max: f64,
}

/// Base `G` with entries `U(−b, b)`. The last arm is the rank-`r` truncation of
/// `G`; every other arm truncates its own `G + U(−s, s)`.
pub fn generate_truth<R: Rng + ?Sized>(spec: &TruthSpec, rng: &mut R) -> Result<GroundTruth> {
    spec.validate()?;
    let (d1, d2, b, s) = (spec.d1, spec.d2, spec.base_scale, spec.perturbation_scale);
    let base = Mat::from_fn(d1, d2, |_, _| rng.random_range(-b..b));
    let mut raw = Vec::with_capacity(spec.arms);
    for _ in 0..spec.arms - 1 {
        if s > 0.0 {
            raw.push(&base + Mat::from_fn(d1, d2, |_, _| rng.random_range(-s..s)));
        } else {
            raw.push(base.clone());
        }
    }
    raw.push(base);
    GroundTruth::from_matrices(raw, spec.rank, spec.sigmas.clone(), spec.noise)
}

impl GroundTruth {
    /// Rank-`r` truncations of `raw` become the arm matrices.
    pub fn from_matrices(raw: Vec<Mat>, r: usize, sigmas: Vec<f64>, noise: NoiseKind) -> Result<Self> {
        if raw.len() != sigmas.len() || raw.is_empty() {
            return Err(Error::Dimension(format!("{} matrices, {} sigmas", raw.len(), sigmas.len())));
        }
        let mut matrices = Vec::with_capacity(raw.len());
        let mut svds = Vec::with_capacity(raw.len());
        for m in &raw {
            let (p, svd) = rank_r_project(m, r)?;
            matrices.push(p);
            svds.push(svd);
        }
        let lambda_max = svds.iter().map(ThinSvd::lambda_max).fold(0.0, f64::max);
        let lambda_min = svds.iter().map(ThinSvd::lambda_min).fold(f64::INFINITY, f64::min);
        Ok(Self {
            matrices,
            sigmas,
            noise,
            svds,
            lambda_min,
            lambda_max,
        })
    }

    pub fn arms(&self) -> usize {
        self.matrices.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.matrices[0].shape()
    }

    pub fn rank(&self) -> usize {
        self.svds[0].rank()
    }

    /// `M_arm(x) + ξ`.
    pub fn reward<R: Rng + ?Sized>(&self, x: Cell, arm: usize, rng: &mut R) -> f64 {
        let mean = self.matrices[arm][(x.row, x.col)];
        let sigma = self.sigmas[arm];
        if sigma == 0.0 {
            return mean;
        }
        match self.noise {
            NoiseKind::Gaussian => mean + Normal::new(0.0, sigma).expect("finite sigma").sample(rng),
            NoiseKind::Uniform => {
                let h = sigma * 3f64.sqrt();
                mean + rng.random_range(-h..h)
            }
        }
    }

    /// Best arm at `x` (ties to the lowest index) and its mean reward.
    pub fn optimal(&self, x: Cell) -> (usize, f64) {
        let mut best = (0, self.matrices[0][(x.row, x.col)]);
        for (a, m) in self.matrices.iter().enumerate().skip(1) {
            if m[(x.row, x.col)] > best.1 {
                best = (a, m[(x.row, x.col)]);
            }
        }
        best
    }

    /// `max_a ⟨M_a, X⟩ − ⟨M_arm, X⟩`.
    pub fn regret(&self, x: Cell, arm: usize) -> f64 {
        self.optimal(x).1 - self.matrices[arm][(x.row, x.col)]
    }

    /// Fraction of cells whose best and runner-up arms differ by less than `delta`.
    pub fn omega_empty_mass(&self, delta: f64) -> f64 {
        let (d1, d2) = self.dims();
        let mut count = 0usize;
        for i in 0..d1 {
            for j in 0..d2 {
                let mut vals: Vec<f64> = self.matrices.iter().map(|m| m[(i, j)]).collect();
                vals.sort_by(|a, b| b.total_cmp(a));
                if vals[0] - vals[1] < delta {
                    count += 1;
                }
            }
        }
        count as f64 / (d1 * d2) as f64
    }

    /// `δ_T = (C·Σσ²·r·d1·log⁴(d1) / T^{1−γ})^{1/2}`.
    pub fn delta_t(&self, c: f64, horizon: usize, gamma: f64) -> f64 {
        let (d1, _) = self.dims();
        let s2: f64 = self.sigmas.iter().map(|s| s * s).sum();
        let l = (d1 as f64).ln();
        (c * s2 * (self.rank() * d1) as f64 * l.powi(4) / (horizon as f64).powf(1.0 - gamma)).sqrt()
    }

    /// `⟨M_a, Q⟩` or `⟨M_g − M_h, Q⟩`.
    pub fn form_value(&self, q: &LinearForm, mode: FormMode) -> Result<f64> {
        match mode {
            FormMode::Single { arm } => q.evaluate(self.arm(arm)?),
            FormMode::Difference { g, h } => Ok(q.evaluate(self.arm(g)?)? - q.evaluate(self.arm(h)?)?),
        }
    }

    fn arm(&self, a: usize) -> Result<&Mat> {
        self.matrices
            .get(a)
            .ok_or_else(|| Error::Config(format!("arm {a} out of range for {} arms", self.arms())))
    }
}

/// Exact regret accounting against the ground truth.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RegretLedger {
    pub instantaneous: Vec<f64>,
    pub cumulative: Vec<f64>,
    /// Pulls of arm `a` on cells where `a` is optimal.
    pub pulls_optimal: Vec<u64>,
    /// Pulls of arm `a` on cells where it is not.
    pub pulls_suboptimal: Vec<u64>,
}

impl RegretLedger {
    pub fn new(arms: usize) -> Self {
        Self {
            pulls_optimal: vec![0; arms],
            pulls_suboptimal: vec![0; arms],
            ..Default::default()
        }
    }

    pub fn record(&mut self, truth: &GroundTruth, x: Cell, arm: usize) {
        let (best, best_val) = truth.optimal(x);
        let inst = best_val - truth.matrices[arm][(x.row, x.col)];
        let total = self.total() + inst;
        self.instantaneous.push(inst);
        self.cumulative.push(total);
        if best == arm || inst == 0.0 {
            self.pulls_optimal[arm] += 1;
        } else {
            self.pulls_suboptimal[arm] += 1;
        }
    }

    pub fn total(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }

    pub fn len(&self) -> usize {
        self.instantaneous.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instantaneous.is_empty()
    }
}

/// `T0` either fixed or `⌈C0·T^{1−γ}⌉`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PhaseOneSpec {
    Fixed(usize),
    Scaled { c0: f64 },
}

/// Phase-1 step size: fixed, or `c1·d1·d2·log(d1)/(T^{1−γ}·λ_max)` with the
/// truth's `λ_max` (`Scaled`) or the initial estimates' largest singular value
/// (`ScaledFromInit`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum StepSpec {
    Fixed(f64),
    Scaled { c1: f64 },
    ScaledFromInit { c1: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InitSpec {
    /// Forced sampling of `n_init` requests (round-robin over arms), then
    /// Soft-Impute. `None` uses `10·r·(d1+d2)·ln(d1)`.
    SoftImpute {
        #[serde(default)]
        n_init: Option<usize>,
        #[serde(default)]
        options: SoftImputeOptions,
    },
    /// `M_a` plus i.i.d. `N(0, sd²)` entries, truncated to rank `r`.
    TruthPlusNoise { sd: f64 },
}

impl Default for InitSpec {
    fn default() -> Self {
        InitSpec::SoftImpute {
            n_init: None,
            options: SoftImputeOptions::default(),
        }
    }
}

/// Schedule of one episode; the dimensions come from the truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub horizon: usize,
    pub phase1: PhaseOneSpec,
    pub gamma: f64,
    pub epsilon: f64,
    pub c2: f64,
    pub step: StepSpec,
    #[serde(default)]
    pub init: InitSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling_weights: Option<Vec<f64>>,
}

impl RunSpec {
    pub fn with_horizon(&self, horizon: usize) -> Self {
        Self {
            horizon,
            ..self.clone()
        }
    }

    /// Concrete learner configuration for `truth`.
    pub fn resolve(&self, truth: &GroundTruth, seed: u64) -> Result<BanditConfig> {
        let (d1, d2) = truth.dims();
        let t0 = match self.phase1 {
            PhaseOneSpec::Fixed(t0) => t0,
            PhaseOneSpec::Scaled { c0 } => {
                if !(c0.is_finite() && c0 > 0.0) {
                    return Err(Error::Config(format!("c0 {c0} must be positive")));
                }
                (c0 * (self.horizon as f64).powf(1.0 - self.gamma)).ceil() as usize
            }
        };
        let eta = match self.step {
            StepSpec::Fixed(eta) => eta,
            StepSpec::Scaled { c1 } | StepSpec::ScaledFromInit { c1 } => {
                scaled_step_size(c1, d1, d2, self.horizon, self.gamma, truth.lambda_max)
            }
        };
        let config = BanditConfig {
            d1,
            d2,
            rank: truth.rank(),
            arms: truth.arms(),
            horizon: self.horizon,
            phase1_len: t0,
            gamma: self.gamma,
            epsilon: self.epsilon,
            c2: self.c2,
            eta,
            seed,
            sampling_weights: self.sampling_weights.clone().map(SamplingWeights::new).transpose()?,
        };
        config.validate()?;
        Ok(config)
    }
}

/// Forced-sampling size used when none is configured.
pub fn default_n_init(r: usize, d1: usize, d2: usize) -> usize {
    (10.0 * (r * (d1 + d2)) as f64 * (d1 as f64).ln()).ceil() as usize
}

/// Aggregate view of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: BanditConfig,
    pub n_init: usize,
    pub pulls: Vec<u64>,
    pub phase1_steps: usize,
    pub phase2_steps: usize,
    pub total_regret: f64,
    pub init_errors: Vec<ArmError>,
    pub final_errors: Vec<ArmError>,
    pub degenerate_rebalances: u64,
    pub max_incoherence: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub learner: LearnerState,
    pub debias: Option<DebiasState>,
    pub ledger: RegretLedger,
    pub summary: RunSummary,
}

fn initial_estimates<R: Rng + ?Sized>(
    truth: &GroundTruth,
    config: &BanditConfig,
    init: &InitSpec,
    rng: &mut R,
) -> Result<(Vec<Mat>, usize)> {
    let (d1, d2) = truth.dims();
    match init {
        InitSpec::SoftImpute { n_init, options } => {
            let n = n_init.unwrap_or_else(|| default_n_init(config.rank, d1, d2));
            let obs: Vec<Observation> = (0..n)
                .map(|k| {
                    let cell = sample_request(config, rng);
                    let arm = k % config.arms;
                    Observation {
                        cell,
                        arm,
                        reward: truth.reward(cell, arm, rng),
                    }
                })
                .collect();
            Ok((soft_impute_init(&obs, d1, d2, config.arms, config.rank, options)?, n))
        }
        InitSpec::TruthPlusNoise { sd } => {
            if !(sd.is_finite() && *sd >= 0.0) {
                return Err(Error::Config(format!("init sd {sd} must be nonnegative")));
            }
            let noise = Normal::new(0.0, *sd).expect("finite sd");
            let mats = truth
                .matrices
                .iter()
                .map(|m| m.map(|v| v + noise.sample(rng)))
                .collect();
            Ok((mats, 0))
        }
    }
}

/// One seeded episode: initialization, `T` rounds, regret accounting and,
/// when `debias` is set, the phase-2 IPW accumulators.
pub fn run_experiment<R: RngCore>(
    truth: &GroundTruth,
    run: &RunSpec,
    debias: bool,
    seed: u64,
    rng: &mut R,
) -> Result<ExperimentOutcome> {
    let mut config = run.resolve(truth, seed)?;
    let (init, n_init) = initial_estimates(truth, &config, &run.init, rng)?;
    if let StepSpec::ScaledFromInit { c1 } = run.step {
        let mut top = 0.0f64;
        for m in &init {
            top = top.max(crate::lowrank::thin_svd(m, 1)?.lambda_max());
        }
        if !(top > 0.0) {
            return Err(Error::Numerical("initial estimates are all zero".into()));
        }
        config.eta = scaled_step_size(c1, config.d1, config.d2, config.horizon, config.gamma, top);
    }
    let mut learner = LearnerState::init_from_matrices(&init, config.clone())?;
    let init_errors = learner.estimation_errors(&truth.matrices)?;
    let mut db = debias.then(|| DebiasState::for_config(&config));
    let mut ledger = RegretLedger::new(config.arms);
    let mut pulls = vec![0u64; config.arms];

    for t in 1..=config.horizon {
        let eps = epsilon_at(&config, t)?;
        let x = sample_request(&config, rng);
        let pv = propensities(&learner.arms, x, eps);
        let action = sample_action(&pv, rng);
        let reward = truth.reward(x, action, rng);
        let rec = StepRecord {
            t,
            x,
            propensities: pv,
            action,
            reward,
            phase: config.phase(t),
        };
        if let Some(db) = db.as_mut().filter(|_| t > config.phase1_len) {
            db.accumulate(&learner, &rec)?;
        }
        learner.sgd_step(&rec)?;
        ledger.record(truth, x, action);
        pulls[action] += 1;
    }

    let summary = RunSummary {
        n_init,
        pulls,
        phase1_steps: config.phase1_len,
        phase2_steps: config.horizon - config.phase1_len,
        total_regret: ledger.total(),
        init_errors,
        final_errors: learner.estimation_errors(&truth.matrices)?,
        degenerate_rebalances: learner.diagnostics.degenerate_rebalances,
        max_incoherence: learner.diagnostics.max_incoherence,
        config,
    };
    Ok(ExperimentOutcome {
        learner,
        debias: db,
        ledger,
        summary,
    })
}

/// Trial count, worker count and base seed of a study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudyOptions {
    pub trials: usize,
    pub workers: usize,
    pub seed: u64,
}

/// Independent stream per trial, derived from the base seed.
pub fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64 + 1);
    rng
}

fn run_trials<T, F>(opts: &StudyOptions, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, &mut ChaCha8Rng) -> Result<T> + Sync,
{
    if opts.trials == 0 {
        return Err(Error::Config("trials must be positive".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    pool.install(|| {
        (0..opts.trials)
            .into_par_iter()
            .map(|k| f(k, &mut trial_rng(opts.seed, k)))
            .collect()
    })
}

/// A named linear form to study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormSpec {
    pub name: String,
    pub mode: FormMode,
    pub terms: LinearForm,
}

/// The four two-arm scenarios: `e1e5ᵀ` on arm 1, on arm 0, on arm 0 minus
/// arm 1, and `e1e5ᵀ − e2e2ᵀ` on arm 0 (one-based `e_k`).
pub fn standard_forms() -> Vec<FormSpec> {
    let e15 = LinearForm::entry(0, 4);
    let contrast = LinearForm::new(vec![
        LinearTerm { row: 0, col: 4, coef: 1.0 },
        LinearTerm { row: 1, col: 1, coef: -1.0 },
    ])
    .expect("finite");
    vec![
        FormSpec { name: "m1_e1e5".into(), mode: FormMode::Single { arm: 1 }, terms: e15.clone() },
        FormSpec { name: "m0_e1e5".into(), mode: FormMode::Single { arm: 0 }, terms: e15.clone() },
        FormSpec { name: "m0_minus_m1_e1e5".into(), mode: FormMode::Difference { g: 0, h: 1 }, terms: e15 },
        FormSpec { name: "m0_e1e5_minus_e2e2".into(), mode: FormMode::Single { arm: 0 }, terms: contrast },
    ]
}

/// One form in one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialStat {
    pub trial: usize,
    pub form: usize,
    pub estimate: f64,
    pub truth: f64,
    /// `NaN` when ill-posed.
    pub std_error: f64,
    /// `(estimate − truth)/std_error`; `NaN` when ill-posed.
    pub statistic: f64,
    pub covered: bool,
    pub ill_posed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormSummary {
    pub name: String,
    pub trials: usize,
    pub ill_posed: usize,
    /// KS distance of the well-posed statistics to `N(0, 1)`.
    pub ks: f64,
    /// KS critical value at level 0.01 for the well-posed count.
    pub ks_critical_01: f64,
    pub coverage: f64,
    pub mean_stat: f64,
    pub sd_stat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalityResult {
    pub alpha: f64,
    pub forms: Vec<FormSummary>,
    /// Ordered by trial, then form.
    pub stats: Vec<TrialStat>,
    /// `σ̂²_a` per trial.
    pub sigma_sq: Vec<Vec<f64>>,
    pub total_regret: Vec<f64>,
    /// Ground-truth `Ω_∅(δ_T)` mass with unit constant.
    pub omega_empty_mass: f64,
}

/// Repeated debiased runs; studentized statistic, coverage and KS per form.
pub fn normality_study(
    truth: &GroundTruth,
    run: &RunSpec,
    forms: &[FormSpec],
    alpha: f64,
    opts: &StudyOptions,
) -> Result<NormalityResult> {
    if forms.is_empty() {
        return Err(Error::Config("no linear forms to study".into()));
    }
    let targets = forms
        .iter()
        .map(|f| truth.form_value(&f.terms, f.mode))
        .collect::<Result<Vec<_>>>()?;
    let z = crate::inference::normal_quantile(1.0 - alpha / 2.0);

    let per_trial = run_trials(opts, |k, rng| {
        let out = run_experiment(truth, run, true, opts.seed, rng)?;
        let db = out.debias.as_ref().expect("debias requested");
        let ctx = InferenceContext::new(db, &out.learner.arms, &out.summary.config)?;
        let mut stats = Vec::with_capacity(forms.len());
        for (fi, f) in forms.iter().enumerate() {
            let truth_val = targets[fi];
            let stat = match ctx.infer(&f.terms, f.mode, alpha) {
                Ok(rep) => {
                    let s = (rep.estimate - truth_val) / rep.std_error;
                    TrialStat {
                        trial: k,
                        form: fi,
                        estimate: rep.estimate,
                        truth: truth_val,
                        std_error: rep.std_error,
                        statistic: s,
                        covered: s.abs() <= z,
                        ill_posed: false,
                    }
                }
                Err(Error::IllPosed { estimate }) => TrialStat {
                    trial: k,
                    form: fi,
                    estimate,
                    truth: truth_val,
                    std_error: f64::NAN,
                    statistic: f64::NAN,
                    covered: false,
                    ill_posed: true,
                },
                Err(e) => return Err(e),
            };
            stats.push(stat);
        }
        let sigma_sq = (0..truth.arms()).map(|a| db.sigma_sq(a)).collect::<Result<Vec<_>>>()?;
        Ok((stats, sigma_sq, out.summary.total_regret))
    })?;

    let mut stats = Vec::new();
    let mut sigma_sq = Vec::new();
    let mut total_regret = Vec::new();
    for (s, v, r) in per_trial {
        stats.extend(s);
        sigma_sq.push(v);
        total_regret.push(r);
    }
    let summaries = forms
        .iter()
        .enumerate()
        .map(|(fi, f)| {
            let rows: Vec<&TrialStat> = stats.iter().filter(|s| s.form == fi).collect();
            let good: Vec<f64> = rows.iter().filter(|s| !s.ill_posed).map(|s| s.statistic).collect();
            let covered = rows.iter().filter(|s| s.covered).count();
            let (ks, crit, coverage, m, sd) = if good.is_empty() {
                (f64::NAN, f64::NAN, f64::NAN, f64::NAN, f64::NAN)
            } else {
                (
                    ks_standard_normal(&good),
                    ks_critical_value(good.len(), 0.01),
                    covered as f64 / good.len() as f64,
                    mean(&good),
                    std_dev(&good),
                )
            };
            FormSummary {
                name: f.name.clone(),
                trials: rows.len(),
                ill_posed: rows.len() - good.len(),
                ks,
                ks_critical_01: crit,
                coverage,
                mean_stat: m,
                sd_stat: sd,
            }
        })
        .collect();
    Ok(NormalityResult {
        alpha,
        forms: summaries,
        stats,
        sigma_sq,
        total_regret,
        omega_empty_mass: truth.omega_empty_mass(truth.delta_t(1.0, run.horizon, run.gamma)),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretPoint {
    pub horizon: usize,
    /// `T^{1−γ}`.
    pub x: f64,
    pub mean_regret: f64,
    pub sd_regret: f64,
    pub mean_final_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretScalingResult {
    pub gamma: f64,
    pub points: Vec<RegretPoint>,
    /// `[grid point][trial]`.
    pub regrets: Vec<Vec<f64>>,
    pub fit: Option<LinearFit>,
    /// Mean regret at the last grid point over the first.
    pub ratio_last_first: f64,
    /// `(T_last/T_first)^{1−γ}`.
    pub expected_ratio: f64,
}

/// Mean cumulative regret over a horizon grid, regressed on `T^{1−γ}`.
/// Trial `k` uses the same stream at every horizon.
pub fn regret_scaling_study(
    truth: &GroundTruth,
    run: &RunSpec,
    grid: &[usize],
    opts: &StudyOptions,
) -> Result<RegretScalingResult> {
    if grid.len() < 2 {
        return Err(Error::Config("regret grid needs at least two horizons".into()));
    }
    let mut points = Vec::with_capacity(grid.len());
    let mut regrets = Vec::with_capacity(grid.len());
    for &h in grid {
        let spec = run.with_horizon(h);
        let rows = run_trials(opts, |_, rng| {
            let out = run_experiment(truth, &spec, false, opts.seed, rng)?;
            let err: f64 = out.summary.final_errors.iter().map(|e| e.frobenius_sq).sum();
            Ok((out.summary.total_regret, err))
        })?;
        let r: Vec<f64> = rows.iter().map(|p| p.0).collect();
        let e: Vec<f64> = rows.iter().map(|p| p.1).collect();
        points.push(RegretPoint {
            horizon: h,
            x: (h as f64).powf(1.0 - run.gamma),
            mean_regret: mean(&r),
            sd_regret: std_dev(&r),
            mean_final_error: mean(&e),
        });
        regrets.push(r);
    }
    let xs: Vec<f64> = points.iter().map(|p| p.x).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.mean_regret).collect();
    let first = &points[0];
    let last = &points[points.len() - 1];
    Ok(RegretScalingResult {
        gamma: run.gamma,
        fit: linear_fit(&xs, &ys),
        ratio_last_first: last.mean_regret / first.mean_regret,
        expected_ratio: last.x / first.x,
        points,
        regrets,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDecayResult {
    pub short_horizon: usize,
    pub long_horizon: usize,
    /// `Σ_a ‖M̂_a − M_a‖²_F` per trial.
    pub short_errors: Vec<f64>,
    pub long_errors: Vec<f64>,
    pub ratios: Vec<f64>,
    pub median_ratio: f64,
    /// `(T_short/T_long)^{1−γ}`.
    pub expected_ratio: f64,
}

/// Paired runs at two horizons; ratio of final squared Frobenius errors.
pub fn error_decay_study(
    truth: &GroundTruth,
    run: &RunSpec,
    short_horizon: usize,
    long_horizon: usize,
    opts: &StudyOptions,
) -> Result<ErrorDecayResult> {
    let errors = |h: usize| {
        let spec = run.with_horizon(h);
        run_trials(opts, |_, rng| {
            let out = run_experiment(truth, &spec, false, opts.seed, rng)?;
            Ok(out.summary.final_errors.iter().map(|e| e.frobenius_sq).sum::<f64>())
        })
    };
    let short_errors = errors(short_horizon)?;
    let long_errors = errors(long_horizon)?;
    let ratios: Vec<f64> = long_errors.iter().zip(&short_errors).map(|(l, s)| l / s).collect();
    Ok(ErrorDecayResult {
        short_horizon,
        long_horizon,
        median_ratio: median(&ratios),
        expected_ratio: (short_horizon as f64 / long_horizon as f64).powf(1.0 - run.gamma),
        short_errors,
        long_errors,
        ratios,
    })
}
