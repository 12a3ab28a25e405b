//! Two-phase exploration / step-size schedules and the ε-greedy policy.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lowrank::FactorPair;

/// A request `X = e_row e_colᵀ`, zero-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

/// Known (non-uniform) request probabilities `p_X`, row-major over `d1 × d2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SamplingWeights {
    probs: Vec<f64>,
    index: WeightedIndex<f64>,
}

impl SamplingWeights {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Config("sampling weights are empty".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Config("sampling weights must be finite and nonnegative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("sampling weights sum to {total}, not 1")));
        }
        let index = WeightedIndex::new(&probs)
            .map_err(|e| Error::Config(format!("sampling weights: {e}")))?;
        Ok(Self { probs, index })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

impl TryFrom<Vec<f64>> for SamplingWeights {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<SamplingWeights> for Vec<f64> {
    fn from(w: SamplingWeights) -> Self {
        w.probs
    }
}

/// Every schedule constant of an ε-greedy matrix completion bandit run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BanditConfig {
    pub d1: usize,
    pub d2: usize,
    pub rank: usize,
    pub arms: usize,
    pub horizon: usize,
    /// `T0`: last step of the constant-exploration phase.
    pub phase1_len: usize,
    pub gamma: f64,
    /// Phase-1 exploration probability `ε`.
    pub epsilon: f64,
    /// Phase-2 exploration scale: `ε_t = min(ε, c2·t^{-γ})`.
    pub c2: f64,
    /// Phase-1 step size `η`; phase 2 uses `ε_t·η`.
    pub eta: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling_weights: Option<SamplingWeights>,
}

impl BanditConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.d1 == 0 || self.d2 == 0 {
            return bad("d1 and d2 must be positive".into());
        }
        if self.rank == 0 || self.rank > self.d1.min(self.d2) {
            return bad(format!("rank {} must lie in 1..={}", self.rank, self.d1.min(self.d2)));
        }
        if self.arms < 2 {
            return bad(format!("arms must be at least 2, got {}", self.arms));
        }
        if self.horizon == 0 {
            return bad("horizon must be positive".into());
        }
        if self.phase1_len == 0 || self.phase1_len >= self.horizon {
            return bad(format!(
                "phase1_len {} must lie in 1..{}",
                self.phase1_len, self.horizon
            ));
        }
        if !(self.gamma.is_finite() && (0.0..1.0).contains(&self.gamma)) {
            return bad(format!("gamma {} must lie in [0, 1)", self.gamma));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return bad(format!("epsilon {} must lie in (0, 1]", self.epsilon));
        }
        if !(self.c2.is_finite() && self.c2 > 0.0) {
            return bad(format!("c2 {} must be positive", self.c2));
        }
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return bad(format!("eta {} must be finite and nonnegative", self.eta));
        }
        if let Some(w) = &self.sampling_weights {
            if w.len() != self.d1 * self.d2 {
                return bad(format!(
                    "sampling_weights has {} entries, expected d1*d2 = {}",
                    w.len(),
                    self.d1 * self.d2
                ));
            }
            if w.probs().iter().any(|p| *p <= 0.0) {
                return bad("sampling weights must be strictly positive".into());
            }
        }
        Ok(())
    }

    pub fn phase(&self, t: usize) -> u8 {
        if t <= self.phase1_len {
            1
        } else {
            2
        }
    }

    /// `p_X` of a request.
    pub fn request_prob(&self, x: Cell) -> f64 {
        match &self.sampling_weights {
            Some(w) => w.probs()[x.row * self.d2 + x.col],
            None => 1.0 / (self.d1 * self.d2) as f64,
        }
    }

    /// Loss-weight multiplier `1/(p_X·d1·d2)`; exactly 1 under uniform sampling.
    pub fn request_weight(&self, x: Cell) -> f64 {
        match &self.sampling_weights {
            Some(_) => 1.0 / (self.request_prob(x) * (self.d1 * self.d2) as f64),
            None => 1.0,
        }
    }

    /// `C_γ = K / (c2 (1 + γ))`.
    pub fn c_gamma(&self) -> f64 {
        self.arms as f64 / (self.c2 * (1.0 + self.gamma))
    }
}

/// Phase-1 step size `c1·d1·d2·log(d1) / (T^{1−γ}·λ_max)`.
pub fn scaled_step_size(c1: f64, d1: usize, d2: usize, horizon: usize, gamma: f64, lambda_max: f64) -> f64 {
    c1 * (d1 * d2) as f64 * (d1 as f64).ln() / ((horizon as f64).powf(1.0 - gamma) * lambda_max)
}

fn check_step(config: &BanditConfig, t: usize) -> Result<()> {
    if t == 0 || t > config.horizon {
        return Err(Error::StepOutOfRange {
            t,
            horizon: config.horizon,
        });
    }
    Ok(())
}

/// `ε_t`: constant `ε` through `T0`, then `min(ε, c2·t^{-γ})`.
pub fn epsilon_at(config: &BanditConfig, t: usize) -> Result<f64> {
    check_step(config, t)?;
    if t <= config.phase1_len {
        Ok(config.epsilon)
    } else {
        Ok(config.epsilon.min(config.c2 * (t as f64).powf(-config.gamma)))
    }
}

/// `η_t`: `η` through `T0`, then `ε_t·η`.
pub fn eta_at(config: &BanditConfig, t: usize) -> Result<f64> {
    check_step(config, t)?;
    if t <= config.phase1_len {
        Ok(config.eta)
    } else {
        Ok(epsilon_at(config, t)? * config.eta)
    }
}

/// ε-greedy action probabilities for one request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityVector {
    pub probs: Vec<f64>,
    pub greedy_arm: usize,
}

impl PropensityVector {
    pub fn prob(&self, arm: usize) -> f64 {
        self.probs[arm]
    }
}

/// Index of the largest prediction; ties go to the lowest index.
pub fn greedy_arm(estimates: &[FactorPair], x: Cell) -> usize {
    let mut best = 0;
    let mut best_val = estimates[0].entry(x.row, x.col);
    for (a, est) in estimates.iter().enumerate().skip(1) {
        let val = est.entry(x.row, x.col);
        if val > best_val {
            best = a;
            best_val = val;
        }
    }
    best
}

/// `π_a = (1 − ε)·1{a = a*} + ε/K`.
pub fn propensities(estimates: &[FactorPair], x: Cell, eps: f64) -> PropensityVector {
    let k = estimates.len();
    let greedy = greedy_arm(estimates, x);
    let floor = eps / k as f64;
    let mut probs = vec![floor; k];
    probs[greedy] = (1.0 - eps) + floor;
    PropensityVector {
        probs,
        greedy_arm: greedy,
    }
}

/// Categorical draw from `pv.probs`.
pub fn sample_action<R: Rng + ?Sized>(pv: &PropensityVector, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (a, p) in pv.probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return a;
        }
    }
    // Rounding left `u` above the total; take the last arm with mass.
    pv.probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

/// Draws a request uniformly, or from `sampling_weights` when configured.
pub fn sample_request<R: Rng + ?Sized>(config: &BanditConfig, rng: &mut R) -> Cell {
    match &config.sampling_weights {
        Some(w) => {
            let flat = w.index.sample(rng);
            Cell::new(flat / config.d2, flat % config.d2)
        }
        None => Cell::new(rng.random_range(0..config.d1), rng.random_range(0..config.d2)),
    }
}

#[cfg(test)]
pub(crate) fn test_config(d1: usize, d2: usize) -> BanditConfig {
    BanditConfig {
        d1,
        d2,
        rank: 1,
        arms: 2,
        horizon: 100_000,
        phase1_len: 20_000,
        gamma: 1.0 / 3.0,
        epsilon: 0.6,
        c2: 10.0,
        eta: 0.05,
        seed: 0,
        sampling_weights: None,
    }
}
