//! Rank-capped Soft-Impute for building initial estimates from forced samples.
//!
//! Iterates `Z ← S_λ(P_Ω(Y) + P_Ω⊥(Z))` along a decreasing `λ` path with warm
//! starts, where `S_λ` soft-thresholds singular values and keeps the top `r`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::lowrank::Mat;
use crate::schedule::Cell;

/// A single forced-sampling observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub cell: Cell,
    pub arm: usize,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SoftImputeOptions {
    /// Shrinkage path, applied in order. `None` derives one from the data.
    #[serde(default)]
    pub lambdas: Option<Vec<f64>>,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn default_max_iters() -> usize {
    100
}

fn default_tol() -> f64 {
    1e-6
}

impl Default for SoftImputeOptions {
    fn default() -> Self {
        Self {
            lambdas: None,
            max_iters: default_max_iters(),
            tol: default_tol(),
        }
    }
}

/// Fractions of the top singular value of the zero-filled data used when no
/// explicit path is given. The path ends at zero: rank-capped hard impute.
const DEFAULT_PATH: [f64; 5] = [0.5, 0.25, 0.1, 0.03, 0.0];

struct Observed {
    values: Mat,
    mask: Vec<bool>,
}

fn average_by_cell(obs: &[Observation], arm: usize, d1: usize, d2: usize) -> Result<Observed> {
    let mut sums = Mat::zeros(d1, d2);
    let mut counts = vec![0u32; d1 * d2];
    for o in obs.iter().filter(|o| o.arm == arm) {
        if o.cell.row >= d1 || o.cell.col >= d2 {
            return Err(Error::Dimension(format!(
                "observation at ({}, {}) outside {d1}x{d2}",
                o.cell.row, o.cell.col
            )));
        }
        if !o.reward.is_finite() {
            return Err(Error::NonFinite("observation reward"));
        }
        sums[(o.cell.row, o.cell.col)] += o.reward;
        counts[o.cell.row * d2 + o.cell.col] += 1;
    }
    if counts.iter().all(|c| *c == 0) {
        return Err(Error::NoObservations(arm));
    }
    for i in 0..d1 {
        for j in 0..d2 {
            let c = counts[i * d2 + j];
            if c > 0 {
                sums[(i, j)] /= c as f64;
            }
        }
    }
    Ok(Observed {
        values: sums,
        mask: counts.iter().map(|c| *c > 0).collect(),
    })
}

fn shrink(m: &Mat, lambda: f64, r: usize) -> Result<Mat> {
    let svd = linalg::svd(m)?;
    let mut out = Mat::zeros(m.nrows(), m.ncols());
    for k in 0..r {
        let s = svd.s[k] - lambda;
        if s <= 0.0 {
            break;
        }
        out += svd.u.column(k) * svd.v.column(k).transpose() * s;
    }
    Ok(out)
}

fn complete_one(obs: &Observed, r: usize, lambdas: &[f64], opts: &SoftImputeOptions) -> Result<Mat> {
    let (d1, d2) = obs.values.shape();
    let mut z = Mat::zeros(d1, d2);
    for &lambda in lambdas {
        for _ in 0..opts.max_iters {
            let mut filled = z.clone();
            for i in 0..d1 {
                for j in 0..d2 {
                    if obs.mask[i * d2 + j] {
                        filled[(i, j)] = obs.values[(i, j)];
                    }
                }
            }
            let next = shrink(&filled, lambda, r)?;
            let change = (&next - &z).norm_squared();
            let scale = z.norm_squared().max(f64::MIN_POSITIVE);
            z = next;
            if change / scale < opts.tol {
                break;
            }
        }
    }
    Ok(z)
}

/// Completes each arm's partially observed mean-reward matrix.
///
/// Duplicate observations of a cell are averaged. Every arm needs at least one
/// observation.
pub fn soft_impute_init(
    observations: &[Observation],
    d1: usize,
    d2: usize,
    arms: usize,
    r: usize,
    opts: &SoftImputeOptions,
) -> Result<Vec<Mat>> {
    if r == 0 || r > d1.min(d2) {
        return Err(Error::RankTooLarge {
            rank: r,
            rows: d1,
            cols: d2,
        });
    }
    if let Some(o) = observations.iter().find(|o| o.arm >= arms) {
        return Err(Error::Dimension(format!("observation for arm {} of {arms}", o.arm)));
    }
    if let Some(l) = &opts.lambdas {
        if l.is_empty() || l.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Config("soft-impute lambdas must be nonnegative and nonempty".into()));
        }
    }
    (0..arms)
        .map(|a| {
            let obs = average_by_cell(observations, a, d1, d2)?;
            let lambdas = match &opts.lambdas {
                Some(l) => l.clone(),
                None => {
                    let top = linalg::singular_values(&obs.values)?[0];
                    DEFAULT_PATH.iter().map(|f| f * top).collect()
                }
            };
            complete_one(&obs, r, &lambdas, opts)
        })
        .collect()
}
