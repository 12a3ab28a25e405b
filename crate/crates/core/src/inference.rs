//! Online IPW debiasing and studentized inference for linear forms `⟨M_a, Q⟩`.
//!
//! Only phase-2 steps (`t > T0`) contribute. The running mean of the learner's
//! pre-update estimates is kept lazily: a step changes the acting arm's product
//! only on row `j1` and column `j2`, so only those `d1 + d2 − 1` cells are
//! flushed and refreshed on the following call.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::io::mat_serde;
use crate::learner::{LearnerState, StepRecord};
use crate::lowrank::{rank_r_project, tangent_project, FactorPair, Mat, ThinSvd};
use crate::schedule::{BanditConfig, Cell};

/// Residuals at rounding level relative to the reward do not count towards
/// `σ̂²`, so noiseless data yields an exactly zero variance estimate.
const RESIDUAL_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArmAccumulator {
    /// Sum of `M̂_{a,t−1}` per cell, flushed up to `stamps`.
    #[serde(with = "mat_serde")]
    mean_sum: Mat,
    /// `M̂_a` per cell as of its last refresh.
    #[serde(with = "mat_serde")]
    current: Mat,
    stamps: Vec<u64>,
    /// Sparse-updated `Σ 1{a_t=a}/(π p_X) · residual · X_t`.
    #[serde(with = "mat_serde")]
    ipw_sum: Mat,
    sigma_sq_sum: f64,
    pulls: u64,
}

impl ArmAccumulator {
    fn new(d1: usize, d2: usize) -> Self {
        Self {
            mean_sum: Mat::zeros(d1, d2),
            current: Mat::zeros(d1, d2),
            stamps: vec![0; d1 * d2],
            ipw_sum: Mat::zeros(d1, d2),
            sigma_sq_sum: 0.0,
            pulls: 0,
        }
    }

    fn refresh(&mut self, i: usize, j: usize, count: u64, pair: &FactorPair) {
        let d2 = self.current.ncols();
        let idx = i * d2 + j;
        self.mean_sum[(i, j)] += self.current[(i, j)] * (count - self.stamps[idx]) as f64;
        self.stamps[idx] = count;
        self.current[(i, j)] = pair.entry(i, j);
    }
}

/// Streaming accumulators for the debiased estimator of every arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebiasState {
    d1: usize,
    d2: usize,
    t0: usize,
    arms: Vec<ArmAccumulator>,
    n_phase2: u64,
    last_t: Option<usize>,
    pending: Option<(usize, Cell)>,
}

impl DebiasState {
    pub fn new(d1: usize, d2: usize, arms: usize, t0: usize) -> Self {
        Self {
            d1,
            d2,
            t0,
            arms: (0..arms).map(|_| ArmAccumulator::new(d1, d2)).collect(),
            n_phase2: 0,
            last_t: None,
            pending: None,
        }
    }

    pub fn for_config(config: &BanditConfig) -> Self {
        Self::new(config.d1, config.d2, config.arms, config.phase1_len)
    }

    pub fn t0(&self) -> usize {
        self.t0
    }

    pub fn n_phase2(&self) -> u64 {
        self.n_phase2
    }

    /// Last accumulated step, `T0 + n_phase2`.
    pub fn t_final(&self) -> usize {
        self.t0 + self.n_phase2 as usize
    }

    pub fn pulls(&self, arm: usize) -> u64 {
        self.arms[arm].pulls
    }

    pub fn num_arms(&self) -> usize {
        self.arms.len()
    }

    /// Adds step `rec` given the learner state *before* that step's update.
    pub fn accumulate(&mut self, state_before: &LearnerState, rec: &StepRecord) -> Result<()> {
        if rec.t <= self.t0 {
            return Err(Error::InvalidRecord(format!(
                "step {} is not past T0 = {}",
                rec.t, self.t0
            )));
        }
        let expected = self.last_t.map_or(self.t0 + 1, |t| t + 1);
        if rec.t != expected || state_before.t + 1 != rec.t {
            return Err(Error::InvalidRecord(format!(
                "debias expects step {expected} on a state at step {}, got record {} on state {}",
                expected - 1,
                rec.t,
                state_before.t
            )));
        }
        if state_before.arms.len() != self.arms.len() || state_before.config.d1 != self.d1 || state_before.config.d2 != self.d2 {
            return Err(Error::Dimension("learner shape differs from debias state".into()));
        }
        let a = rec.action;
        let pi = rec.propensities.probs.get(a).copied().unwrap_or(0.0);
        if a >= self.arms.len() || !(pi > 0.0) || !rec.reward.is_finite() {
            return Err(Error::InvalidRecord(format!(
                "action {a} with propensity {pi} and reward {}",
                rec.reward
            )));
        }

        let count = self.n_phase2;
        if self.last_t.is_none() {
            for (acc, pair) in self.arms.iter_mut().zip(&state_before.arms) {
                acc.current = pair.product();
            }
        } else if let Some((p, cell)) = self.pending.take() {
            let pair = &state_before.arms[p];
            let acc = &mut self.arms[p];
            for j in 0..self.d2 {
                acc.refresh(cell.row, j, count, pair);
            }
            for i in (0..self.d1).filter(|&i| i != cell.row) {
                acc.refresh(i, cell.col, count, pair);
            }
        }

        let (i, j) = (rec.x.row, rec.x.col);
        let residual = rec.reward - state_before.arms[a].entry(i, j);
        let ipw_weight = 1.0 / (pi * state_before.config.request_prob(rec.x));
        let acc = &mut self.arms[a];
        acc.ipw_sum[(i, j)] += ipw_weight * residual;
        if residual.abs() > RESIDUAL_FLOOR * (rec.reward.abs() + 1.0) {
            acc.sigma_sq_sum += residual * residual / pi;
        }
        acc.pulls += 1;

        self.n_phase2 += 1;
        self.last_t = Some(rec.t);
        self.pending = Some((a, rec.x));
        Ok(())
    }

    /// `M̂^IPW_a = mean of M̂_{a,t−1} + Σ IPW corrections / (T − T0)` per arm.
    pub fn finalize_ipw(&self) -> Result<Vec<Mat>> {
        if self.n_phase2 == 0 {
            return Err(Error::NoPhase2Steps);
        }
        let n = self.n_phase2;
        let nf = n as f64;
        Ok(self
            .arms
            .iter()
            .map(|acc| {
                Mat::from_fn(self.d1, self.d2, |i, j| {
                    let pending = (n - acc.stamps[i * self.d2 + j]) as f64;
                    let mean = (acc.mean_sum[(i, j)] + acc.current[(i, j)] * pending) / nf;
                    mean + acc.ipw_sum[(i, j)] / nf
                })
            })
            .collect())
    }

    /// `σ̂²_a = Σ 1{a_t=a}/π_{a,t} · residual² / (T − T0)`.
    pub fn sigma_sq(&self, arm: usize) -> Result<f64> {
        if self.n_phase2 == 0 {
            return Err(Error::NoPhase2Steps);
        }
        let acc = self
            .arms
            .get(arm)
            .ok_or_else(|| Error::Config(format!("arm {arm} out of range")))?;
        Ok(acc.sigma_sq_sum / self.n_phase2 as f64)
    }
}

/// Sparse linear form `Q = Σ c_k e_{i_k} e_{j_k}ᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<LinearTerm>", into = "Vec<LinearTerm>")]
pub struct LinearForm {
    terms: Vec<LinearTerm>,
    l1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearTerm {
    pub row: usize,
    pub col: usize,
    pub coef: f64,
}

impl LinearForm {
    pub fn new(terms: Vec<LinearTerm>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::Config("linear form has no terms".into()));
        }
        if terms.iter().any(|t| !t.coef.is_finite()) {
            return Err(Error::NonFinite("linear form coefficient"));
        }
        let mut dense = std::collections::BTreeMap::new();
        for t in &terms {
            *dense.entry((t.row, t.col)).or_insert(0.0) += t.coef;
        }
        let l1 = dense.values().map(|c: &f64| c.abs()).sum();
        Ok(Self { terms, l1 })
    }

    /// `e_i e_jᵀ`.
    pub fn entry(row: usize, col: usize) -> Self {
        Self::new(vec![LinearTerm { row, col, coef: 1.0 }]).expect("finite")
    }

    pub fn terms(&self) -> &[LinearTerm] {
        &self.terms
    }

    /// `‖Q‖_{ℓ1}` (duplicates merged).
    pub fn l1_norm(&self) -> f64 {
        self.l1
    }

    pub fn check_dims(&self, d1: usize, d2: usize) -> Result<()> {
        match self.terms.iter().find(|t| t.row >= d1 || t.col >= d2) {
            Some(t) => Err(Error::Dimension(format!(
                "linear form references ({}, {}) outside {d1}x{d2}",
                t.row, t.col
            ))),
            None => Ok(()),
        }
    }

    pub fn to_dense(&self, d1: usize, d2: usize) -> Result<Mat> {
        self.check_dims(d1, d2)?;
        let mut q = Mat::zeros(d1, d2);
        for t in &self.terms {
            q[(t.row, t.col)] += t.coef;
        }
        Ok(q)
    }

    /// `⟨M, Q⟩`.
    pub fn evaluate(&self, m: &Mat) -> Result<f64> {
        self.check_dims(m.nrows(), m.ncols())?;
        Ok(self.terms.iter().map(|t| t.coef * m[(t.row, t.col)]).sum())
    }
}

impl TryFrom<Vec<LinearTerm>> for LinearForm {
    type Error = Error;

    fn try_from(terms: Vec<LinearTerm>) -> Result<Self> {
        Self::new(terms)
    }
}

impl From<LinearForm> for Vec<LinearTerm> {
    fn from(q: LinearForm) -> Self {
        q.terms
    }
}

/// Cells assigned to the arm with the largest final estimate (ties to the
/// lowest index).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmegaPartition {
    pub d1: usize,
    pub d2: usize,
    /// Row-major arm index per cell.
    pub assignment: Vec<usize>,
    pub sizes: Vec<usize>,
}

impl OmegaPartition {
    pub fn arm_of(&self, i: usize, j: usize) -> usize {
        self.assignment[i * self.d2 + j]
    }
}

/// `Ω̂_a = {X : argmax_k ⟨M̂_{k,T}, X⟩ = a}`.
pub fn omega_hat(final_estimates: &[FactorPair]) -> Result<OmegaPartition> {
    let first = final_estimates
        .first()
        .ok_or_else(|| Error::Config("no estimates".into()))?;
    let (d1, d2) = first.dims();
    if final_estimates.iter().any(|p| p.dims() != (d1, d2)) {
        return Err(Error::Dimension("estimates differ in shape".into()));
    }
    let products: Vec<Mat> = final_estimates.iter().map(FactorPair::product).collect();
    let mut assignment = Vec::with_capacity(d1 * d2);
    let mut sizes = vec![0; products.len()];
    for i in 0..d1 {
        for j in 0..d2 {
            let mut best = 0;
            for (a, m) in products.iter().enumerate().skip(1) {
                if m[(i, j)] > products[best][(i, j)] {
                    best = a;
                }
            }
            assignment.push(best);
            sizes[best] += 1;
        }
    }
    Ok(OmegaPartition {
        d1,
        d2,
        assignment,
        sizes,
    })
}

/// Horizon bookkeeping for variance formulas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Horizon {
    pub t: usize,
    pub t0: usize,
}

impl Horizon {
    /// `b_T = T / (T − T0)`.
    pub fn b_t(&self) -> f64 {
        self.t as f64 / (self.t - self.t0) as f64
    }
}

/// The pieces of `Ŝ²_a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SComponents {
    pub s_sq: f64,
    /// `‖P_{Ω̂_k} P_{M̂_a}(Q)‖²` for every `k` (weighted by `1/(p_X d1 d2)`).
    pub omega_norms: Vec<f64>,
}

/// `Ŝ²_a = (T^{−γ}‖P_{Ω̂_a}P_{M̂_a}(Q)‖² + C_γ Σ_{k≠a}‖P_{Ω̂_k}P_{M̂_a}(Q)‖²)·b_T`.
pub fn estimate_s_sq(
    q: &LinearForm,
    omega: &OmegaPartition,
    svd: &ThinSvd,
    arm: usize,
    config: &BanditConfig,
    horizon: Horizon,
) -> Result<SComponents> {
    if !(config.c2 > 0.0) {
        return Err(Error::Config(format!("c2 = {} must be positive", config.c2)));
    }
    if horizon.t <= horizon.t0 {
        return Err(Error::NoPhase2Steps);
    }
    let (d1, d2) = (omega.d1, omega.d2);
    let projected = tangent_project(&q.to_dense(d1, d2)?, svd)?;
    let mut omega_norms = vec![0.0; omega.sizes.len()];
    for i in 0..d1 {
        for j in 0..d2 {
            let p = projected[(i, j)];
            let w = config.request_weight(Cell::new(i, j));
            omega_norms[omega.arm_of(i, j)] += w * p * p;
        }
    }
    let own = omega_norms[arm];
    let cross: f64 = omega_norms
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != arm)
        .map(|(_, v)| v)
        .sum();
    let t = horizon.t as f64;
    let s_sq = (t.powf(-config.gamma) * own + config.c_gamma() * cross) * horizon.b_t();
    Ok(SComponents { s_sq, omega_norms })
}

/// Which linear form to test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormMode {
    /// `⟨M_a, Q⟩`.
    Single { arm: usize },
    /// `⟨M_g − M_h, Q⟩`.
    Difference { g: usize, h: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmComponent {
    pub arm: usize,
    pub sigma_sq: f64,
    pub s_sq: f64,
    pub omega_norms: Vec<f64>,
}

pub const REPORT_SCHEMA: &str = "mcb.inference.v1";

/// Point estimate, standard error, interval and z-test for one linear form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    pub schema: String,
    pub mode: FormMode,
    pub estimate: f64,
    pub std_error: f64,
    pub alpha: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub z_stat: f64,
    /// Two-sided p-value for `H0: form = 0`.
    pub p_value: f64,
    /// One-sided p-value against `H1: form > 0`.
    pub p_value_greater: f64,
    /// One-sided p-value against `H1: form < 0`.
    pub p_value_less: f64,
    pub components: Vec<ArmComponent>,
    pub omega_sizes: Vec<usize>,
    pub b_t: f64,
    pub t: usize,
    pub t0: usize,
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("valid normal")
}

/// `z_{1−α/2}`.
pub fn normal_quantile(p: f64) -> f64 {
    std_normal().inverse_cdf(p)
}

pub fn normal_cdf(x: f64) -> f64 {
    std_normal().cdf(x)
}

/// Shared per-run quantities: debiased rank-`r` estimates, their SVDs, `Ω̂`.
#[derive(Debug, Clone)]
pub struct InferenceContext {
    config: BanditConfig,
    horizon: Horizon,
    projected: Vec<Mat>,
    svds: Vec<ThinSvd>,
    sigma_sq: Vec<f64>,
    omega: OmegaPartition,
}

impl InferenceContext {
    pub fn new(db: &DebiasState, final_estimates: &[FactorPair], config: &BanditConfig) -> Result<Self> {
        config.validate()?;
        if db.num_arms() != final_estimates.len() || db.d1 != config.d1 || db.d2 != config.d2 {
            return Err(Error::Dimension("debias state, estimates and config disagree".into()));
        }
        let ipw = db.finalize_ipw()?;
        let mut projected = Vec::with_capacity(ipw.len());
        let mut svds = Vec::with_capacity(ipw.len());
        for m in &ipw {
            let (p, svd) = rank_r_project(m, config.rank)?;
            projected.push(p);
            svds.push(svd);
        }
        let sigma_sq = (0..db.num_arms())
            .map(|a| db.sigma_sq(a))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            horizon: Horizon {
                t: db.t_final(),
                t0: db.t0(),
            },
            projected,
            svds,
            sigma_sq,
            omega: omega_hat(final_estimates)?,
        })
    }

    /// Rank-`r` projections of the debiased matrices.
    pub fn estimates(&self) -> &[Mat] {
        &self.projected
    }

    pub fn omega(&self) -> &OmegaPartition {
        &self.omega
    }

    pub fn horizon(&self) -> Horizon {
        self.horizon
    }

    fn component(&self, q: &LinearForm, arm: usize) -> Result<ArmComponent> {
        let s = estimate_s_sq(q, &self.omega, &self.svds[arm], arm, &self.config, self.horizon)?;
        Ok(ArmComponent {
            arm,
            sigma_sq: self.sigma_sq[arm],
            s_sq: s.s_sq,
            omega_norms: s.omega_norms,
        })
    }

    /// Studentized inference for `q` at level `alpha`.
    ///
    /// A zero standard error (ill-posed `Q` or noiseless data) is an error that
    /// still carries the point estimate.
    pub fn infer(&self, q: &LinearForm, mode: FormMode, alpha: f64) -> Result<InferenceReport> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Config(format!("alpha {alpha} must lie in (0, 1)")));
        }
        let k = self.projected.len();
        let arms: Vec<usize> = match mode {
            FormMode::Single { arm } => vec![arm],
            FormMode::Difference { g, h } => vec![g, h],
        };
        if let Some(a) = arms.iter().find(|&&a| a >= k) {
            return Err(Error::Config(format!("arm {a} out of range for {k} arms")));
        }
        if let FormMode::Difference { g, h } = mode {
            if g == h {
                return Err(Error::Config("difference of an arm with itself".into()));
            }
        }
        q.check_dims(self.config.d1, self.config.d2)?;

        let components = arms
            .iter()
            .map(|&a| self.component(q, a))
            .collect::<Result<Vec<_>>>()?;
        let estimate = match mode {
            FormMode::Single { arm } => q.evaluate(&self.projected[arm])?,
            FormMode::Difference { g, h } => {
                q.evaluate(&self.projected[g])? - q.evaluate(&self.projected[h])?
            }
        };
        let scale = (self.config.d1 * self.config.d2) as f64
            / (self.horizon.t as f64).powf(1.0 - self.config.gamma);
        // Arms share no step in their IPW sums, so variances add.
        let variance: f64 = components.iter().map(|c| c.sigma_sq * c.s_sq).sum::<f64>() * scale;
        let std_error = variance.sqrt();
        if !(std_error > 0.0 && std_error.is_finite()) {
            return Err(Error::IllPosed { estimate });
        }
        let z_stat = estimate / std_error;
        let half = normal_quantile(1.0 - alpha / 2.0) * std_error;
        Ok(InferenceReport {
            schema: REPORT_SCHEMA.to_string(),
            mode,
            estimate,
            std_error,
            alpha,
            ci_low: estimate - half,
            ci_high: estimate + half,
            z_stat,
            p_value: (2.0 * normal_cdf(-z_stat.abs())).min(1.0),
            p_value_greater: normal_cdf(-z_stat),
            p_value_less: normal_cdf(z_stat),
            components,
            omega_sizes: self.omega.sizes.clone(),
            b_t: self.horizon.b_t(),
            t: self.horizon.t,
            t0: self.horizon.t0,
        })
    }
}

/// One-shot inference for a single form.
pub fn infer_linear_form(
    db: &DebiasState,
    final_estimates: &[FactorPair],
    q: &LinearForm,
    config: &BanditConfig,
    mode: FormMode,
    alpha: f64,
) -> Result<InferenceReport> {
    InferenceContext::new(db, final_estimates, config)?.infer(q, mode, alpha)
}
