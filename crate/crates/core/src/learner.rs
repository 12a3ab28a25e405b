//! Online IPW-weighted gradient learner for K-arm matrix completion bandits.
//!
//! Each request `X_t = e_{j1} e_{j2}ᵀ` touches exactly one row of `U` and one
//! row of `V` for the acting arm, so a step is row-local followed by an
//! `r × r` rebalance; no `d1 × d2` matrix is formed.

use log::warn;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lowrank::{balanced_factorize, FactorPair, GramSplit, Mat};
use crate::schedule::{
    epsilon_at, eta_at, propensities, sample_action, sample_request, BanditConfig, Cell,
    PropensityVector,
};

/// Running diagnostics of a learner.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Largest incoherence `μ(M̂_{a,t})` seen after any update.
    pub max_incoherence: f64,
    /// Updates whose rebalance clamped a Gram eigenvalue.
    pub degenerate_rebalances: u64,
    /// Arms initialized with all-zero factors (they cannot learn).
    pub zero_init_arms: Vec<usize>,
}

/// One round of the bandit: request, propensities, action, reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub x: Cell,
    pub propensities: PropensityVector,
    pub action: usize,
    pub reward: f64,
    pub phase: u8,
}

/// Current factor estimates of every arm plus the step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerState {
    pub arms: Vec<FactorPair>,
    pub t: usize,
    pub config: BanditConfig,
    pub diagnostics: Diagnostics,
}

/// Anything that can produce a reward for `(request, arm)`.
pub trait RewardSource {
    fn reward(&mut self, x: Cell, arm: usize, rng: &mut dyn RngCore) -> Result<f64>;
}

impl<F> RewardSource for F
where
    F: FnMut(Cell, usize, &mut dyn RngCore) -> Result<f64>,
{
    fn reward(&mut self, x: Cell, arm: usize, rng: &mut dyn RngCore) -> Result<f64> {
        self(x, arm, rng)
    }
}

/// Squared estimation errors of one arm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmError {
    pub frobenius_sq: f64,
    pub max_sq: f64,
}

fn mu_of(svd: &crate::lowrank::ThinSvd) -> f64 {
    let r = svd.rank() as f64;
    let scan = |m: &Mat| {
        m.row_iter()
            .map(|row| row.norm_squared())
            .fold(0.0, f64::max)
            .sqrt()
    };
    let l = (svd.left.nrows() as f64 / r).sqrt() * scan(&svd.left);
    let rr = (svd.right.nrows() as f64 / r).sqrt() * scan(&svd.right);
    l.max(rr)
}

impl LearnerState {
    /// Balanced rank-`r` factorization of each initial estimate; `t = 0`.
    pub fn init_from_matrices(init: &[Mat], config: BanditConfig) -> Result<Self> {
        config.validate()?;
        if init.len() != config.arms {
            return Err(Error::Dimension(format!(
                "{} initial matrices for {} arms",
                init.len(),
                config.arms
            )));
        }
        let mut arms = Vec::with_capacity(init.len());
        let mut diagnostics = Diagnostics::default();
        for (a, m) in init.iter().enumerate() {
            if m.shape() != (config.d1, config.d2) {
                return Err(Error::Dimension(format!(
                    "initial estimate for arm {a} is {}x{}, expected {}x{}",
                    m.nrows(),
                    m.ncols(),
                    config.d1,
                    config.d2
                )));
            }
            let svd = crate::lowrank::thin_svd(m, config.rank)?;
            let pair = svd.balanced_factors();
            if pair.is_zero() {
                warn!("arm {a} initialized with zero factors; its gradient is identically zero");
                diagnostics.zero_init_arms.push(a);
            } else {
                diagnostics.max_incoherence = diagnostics.max_incoherence.max(mu_of(&svd));
            }
            arms.push(pair);
        }
        Ok(Self {
            arms,
            t: 0,
            config,
            diagnostics,
        })
    }

    /// Starts from explicit factor pairs, taken as given.
    pub fn from_factors(arms: Vec<FactorPair>, config: BanditConfig) -> Result<Self> {
        config.validate()?;
        let state = Self {
            arms,
            t: 0,
            config,
            diagnostics: Diagnostics::default(),
        };
        state.validate()?;
        Ok(state)
    }

    /// Structural checks used after deserialization.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.arms.len() != self.config.arms {
            return Err(Error::Dimension(format!(
                "{} factor pairs for {} arms",
                self.arms.len(),
                self.config.arms
            )));
        }
        for (a, p) in self.arms.iter().enumerate() {
            if p.dims() != (self.config.d1, self.config.d2) || p.rank() != self.config.rank {
                return Err(Error::Dimension(format!(
                    "arm {a} factors are {:?} rank {}, config says {}x{} rank {}",
                    p.dims(),
                    p.rank(),
                    self.config.d1,
                    self.config.d2,
                    self.config.rank
                )));
            }
        }
        if self.t > self.config.horizon {
            return Err(Error::StepOutOfRange {
                t: self.t,
                horizon: self.config.horizon,
            });
        }
        Ok(())
    }

    pub fn arms(&self) -> usize {
        self.arms.len()
    }

    pub fn predict(&self, arm: usize, x: Cell) -> f64 {
        self.arms[arm].entry(x.row, x.col)
    }

    pub fn products(&self) -> Vec<Mat> {
        self.arms.iter().map(FactorPair::product).collect()
    }

    /// ε-greedy propensities for request `x` at the next step.
    pub fn propose(&self, x: Cell) -> Result<PropensityVector> {
        let eps = epsilon_at(&self.config, self.t + 1)?;
        Ok(propensities(&self.arms, x, eps))
    }

    fn check_record(&self, rec: &StepRecord) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidRecord(msg));
        if rec.t != self.t + 1 {
            return bad(format!("record step {} does not follow state step {}", rec.t, self.t));
        }
        if rec.t > self.config.horizon {
            return Err(Error::StepOutOfRange {
                t: rec.t,
                horizon: self.config.horizon,
            });
        }
        if rec.action >= self.arms.len() || rec.propensities.probs.len() != self.arms.len() {
            return bad(format!(
                "action {} / {} propensities for {} arms",
                rec.action,
                rec.propensities.probs.len(),
                self.arms.len()
            ));
        }
        if rec.x.row >= self.config.d1 || rec.x.col >= self.config.d2 {
            return bad(format!("request ({}, {}) out of range", rec.x.row, rec.x.col));
        }
        let pi = rec.propensities.probs[rec.action];
        if !(pi.is_finite() && pi > 0.0) {
            return bad(format!("propensity {pi} of the taken action must be positive"));
        }
        if !rec.reward.is_finite() {
            return Err(Error::NonFinite("reward"));
        }
        Ok(())
    }

    /// One IPW-weighted gradient step on the acting arm, then rebalance.
    ///
    /// With `c = η_t · w · (⟨Û_a V̂_aᵀ, X_t⟩ − r_t)` and `w = 1/(π_a·p_X·d1·d2)`,
    /// row `j1` of `Û_a` moves by `−c·V̂_a[j2,:]·T_U` and row `j2` of `V̂_a`
    /// by `−c·Û_a[j1,:]·T_V`, where `T_U`, `T_V` are the `r × r` maps that
    /// express the step in the balanced frame. Other arms are left untouched.
    pub fn sgd_step(&mut self, rec: &StepRecord) -> Result<()> {
        self.check_record(rec)?;
        let eta = eta_at(&self.config, rec.t)?;
        self.t = rec.t;
        let a = rec.action;
        let weight = self.config.request_weight(rec.x) / rec.propensities.probs[a];
        let (i, j) = (rec.x.row, rec.x.col);
        let arm = &self.arms[a];
        let residual = arm.entry(i, j) - rec.reward;
        let c = eta * weight * residual;
        if c == 0.0 {
            return Ok(());
        }

        let (map_u, map_v) = GramSplit::new(arm).gradient_maps();
        let u_row = arm.u.row(i).clone_owned();
        let v_row = arm.v.row(j).clone_owned();
        let mut next = arm.clone();
        {
            let du = &v_row * &map_u;
            let dv = &u_row * &map_v;
            let mut row = next.u.row_mut(i);
            row -= du * c;
            let mut row = next.v.row_mut(j);
            row -= dv * c;
        }
        if !next.u.row(i).iter().chain(next.v.row(j).iter()).all(|x| x.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite factors after step {} on arm {a}",
                rec.t
            )));
        }

        let split = GramSplit::new(&next);
        if split.is_deficient() {
            self.diagnostics.degenerate_rebalances += 1;
        }
        let svd = split.thin_svd(&next);
        self.diagnostics.max_incoherence = self.diagnostics.max_incoherence.max(mu_of(&svd));
        self.arms[a] = svd.balanced_factors();
        Ok(())
    }

    /// Samples a request, acts ε-greedily, collects a reward and updates.
    pub fn run_round<R, S>(&mut self, rng: &mut R, source: &mut S) -> Result<StepRecord>
    where
        R: RngCore,
        S: RewardSource + ?Sized,
    {
        let t = self.t + 1;
        let eps = epsilon_at(&self.config, t)?;
        let x = sample_request(&self.config, rng);
        let pv = propensities(&self.arms, x, eps);
        let action = sample_action(&pv, rng);
        let reward = source.reward(x, action, rng)?;
        let rec = StepRecord {
            t,
            x,
            propensities: pv,
            action,
            reward,
            phase: self.config.phase(t),
        };
        self.sgd_step(&rec)?;
        Ok(rec)
    }

    /// `‖M̂_a − M_a‖²_F` and `‖M̂_a − M_a‖²_max` for every arm.
    pub fn estimation_errors(&self, truth: &[Mat]) -> Result<Vec<ArmError>> {
        if truth.len() != self.arms.len() {
            return Err(Error::Dimension(format!(
                "{} truth matrices for {} arms",
                truth.len(),
                self.arms.len()
            )));
        }
        self.arms
            .iter()
            .zip(truth)
            .map(|(pair, m)| {
                if m.shape() != pair.dims() {
                    return Err(Error::Dimension("truth shape differs from estimate".into()));
                }
                let diff = pair.product() - m;
                let max = diff.amax();
                Ok(ArmError {
                    frobenius_sq: diff.norm_squared(),
                    max_sq: max * max,
                })
            })
            .collect()
    }
}

/// Convenience wrapper: `balanced_factorize` on each matrix.
pub fn factorize_all(init: &[Mat], r: usize) -> Result<Vec<FactorPair>> {
    init.iter().map(|m| balanced_factorize(m, r)).collect()
}
