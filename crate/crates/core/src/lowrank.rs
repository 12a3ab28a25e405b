//! Low-rank factor algebra shared by the learner and the inference code.
//!
//! Every arm estimate is kept as a balanced pair `M = U Vᵀ` with `UᵀU = VᵀV`.
//! Rebalancing never forms the `d1 × d2` product: it works on the two `r × r`
//! Gram matrices and one `r × r` core, so its cost is `O((d1 + d2) r² + r³)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

pub type Mat = DMatrix<f64>;

/// Relative floor applied to Gram eigenvalues before taking inverse square roots.
pub const GRAM_FLOOR: f64 = 1e-12;

/// Balanced low-rank factors `(U, V)` of one arm's estimate `M = U Vᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "crate::io::FactorPairRecord", into = "crate::io::FactorPairRecord")]
pub struct FactorPair {
    pub(crate) u: Mat,
    pub(crate) v: Mat,
}

impl FactorPair {
    pub fn new(u: Mat, v: Mat) -> Result<Self> {
        if u.ncols() != v.ncols() {
            return Err(Error::Dimension(format!(
                "factor ranks differ: U has {} columns, V has {}",
                u.ncols(),
                v.ncols()
            )));
        }
        if u.ncols() == 0 {
            return Err(Error::Config("rank must be positive".into()));
        }
        if !u.iter().chain(v.iter()).all(|x| x.is_finite()) {
            return Err(Error::NonFinite("factor pair"));
        }
        Ok(Self { u, v })
    }

    pub fn zeros(d1: usize, d2: usize, r: usize) -> Self {
        Self {
            u: Mat::zeros(d1, r),
            v: Mat::zeros(d2, r),
        }
    }

    pub fn u(&self) -> &Mat {
        &self.u
    }

    pub fn v(&self) -> &Mat {
        &self.v
    }

    pub fn rank(&self) -> usize {
        self.u.ncols()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.u.nrows(), self.v.nrows())
    }

    /// `⟨U Vᵀ, e_i e_jᵀ⟩`, computed in `O(r)`.
    #[inline]
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        let r = self.u.ncols();
        let mut s = 0.0;
        for k in 0..r {
            s += self.u[(i, k)] * self.v[(j, k)];
        }
        s
    }

    pub fn product(&self) -> Mat {
        &self.u * self.v.transpose()
    }

    /// `‖UᵀU − VᵀV‖_F`.
    pub fn balance_defect(&self) -> f64 {
        (self.u.tr_mul(&self.u) - self.v.tr_mul(&self.v)).norm()
    }

    pub fn is_zero(&self) -> bool {
        self.u.iter().chain(self.v.iter()).all(|&x| x == 0.0)
    }

    /// Multiplies the product by `c > 0`, splitting the scale evenly between factors.
    pub fn scaled(&self, c: f64) -> Self {
        let s = c.sqrt();
        Self {
            u: &self.u * s,
            v: &self.v * s,
        }
    }

    /// Thin SVD of `U Vᵀ` from `r × r` decompositions only.
    pub fn svd(&self) -> ThinSvd {
        GramSplit::new(self).thin_svd(self)
    }
}

/// Rank-`r` singular triplets of a `d1 × d2` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ThinSvd {
    pub left: Mat,
    pub singular_values: DVector<f64>,
    pub right: Mat,
}

impl ThinSvd {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    pub fn reconstruct(&self) -> Mat {
        let mut scaled = self.left.clone();
        for (k, s) in self.singular_values.iter().enumerate() {
            scaled.column_mut(k).scale_mut(*s);
        }
        scaled * self.right.transpose()
    }

    pub fn lambda_max(&self) -> f64 {
        self.singular_values.iter().copied().fold(0.0, f64::max)
    }

    pub fn lambda_min(&self) -> f64 {
        self.singular_values
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    /// Condition number `λ_max / λ_min` (infinite when rank deficient).
    pub fn condition_number(&self) -> f64 {
        self.lambda_max() / self.lambda_min()
    }

    /// `U = L Λ^{1/2}`, `V = R Λ^{1/2}`.
    pub fn balanced_factors(&self) -> FactorPair {
        let mut u = self.left.clone();
        let mut v = self.right.clone();
        for (k, s) in self.singular_values.iter().enumerate() {
            let root = s.max(0.0).sqrt();
            u.column_mut(k).scale_mut(root);
            v.column_mut(k).scale_mut(root);
        }
        FactorPair { u, v }
    }
}

/// Incoherence `μ(M)` and the row norms it is built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncoherenceReport {
    pub mu: f64,
    pub row_norms_left: Vec<f64>,
    pub row_norms_right: Vec<f64>,
}

fn check_finite(m: &Mat, what: &'static str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Full dense SVD truncated to the top `r` triplets, sorted nonincreasing.
pub fn thin_svd(m: &Mat, r: usize) -> Result<ThinSvd> {
    let (d1, d2) = m.shape();
    if r == 0 || r > d1.min(d2) {
        return Err(Error::RankTooLarge {
            rank: r,
            rows: d1,
            cols: d2,
        });
    }
    check_finite(m, "matrix")?;
    let svd = linalg::svd(m)?;
    Ok(ThinSvd {
        left: svd.u.columns(0, r).into_owned(),
        singular_values: DVector::from_fn(r, |k, _| svd.s[k]),
        right: svd.v.columns(0, r).into_owned(),
    })
}

/// Balanced rank-`r` factorization from the truncated SVD of `m`.
pub fn balanced_factorize(m: &Mat, r: usize) -> Result<FactorPair> {
    Ok(thin_svd(m, r)?.balanced_factors())
}

/// Best rank-`r` approximation `L̂L̂ᵀ m R̂R̂ᵀ`, together with its SVD.
pub fn rank_r_project(m: &Mat, r: usize) -> Result<(Mat, ThinSvd)> {
    let svd = thin_svd(m, r)?;
    Ok((svd.reconstruct(), svd))
}

/// Tangent-space projection `P_M(Q) = LLᵀQ + QRRᵀ − LLᵀQRRᵀ`.
pub fn tangent_project(q: &Mat, svd: &ThinSvd) -> Result<Mat> {
    let (d1, d2) = q.shape();
    if svd.left.nrows() != d1 || svd.right.nrows() != d2 {
        return Err(Error::Dimension(format!(
            "Q is {}x{} but singular vectors are {}x{} and {}x{}",
            d1,
            d2,
            svd.left.nrows(),
            svd.left.ncols(),
            svd.right.nrows(),
            svd.right.ncols()
        )));
    }
    let l = &svd.left;
    let r = &svd.right;
    let lt_q = l.tr_mul(q); // r × d2
    let q_r = q * r; // d1 × r
    let lt_q_r = &lt_q * r; // r × r
    Ok(l * &lt_q + &q_r * r.transpose() - l * lt_q_r * r.transpose())
}

fn max_row_norm(m: &Mat) -> (f64, Vec<f64>) {
    let norms: Vec<f64> = m.row_iter().map(|row| row.norm()).collect();
    let max = norms.iter().copied().fold(0.0, f64::max);
    (max, norms)
}

/// `μ = max(√(d1/r)·‖L‖_{2,∞}, √(d2/r)·‖R‖_{2,∞})`.
pub fn incoherence(svd: &ThinSvd) -> IncoherenceReport {
    let r = svd.rank() as f64;
    let (max_l, row_norms_left) = max_row_norm(&svd.left);
    let (max_r, row_norms_right) = max_row_norm(&svd.right);
    let mu_l = (svd.left.nrows() as f64 / r).sqrt() * max_l;
    let mu_r = (svd.right.nrows() as f64 / r).sqrt() * max_r;
    IncoherenceReport {
        mu: mu_l.max(mu_r),
        row_norms_left,
        row_norms_right,
    }
}

/// Result of a clamped rebalance.
#[derive(Debug, Clone)]
pub struct Rebalanced {
    pub pair: FactorPair,
    /// True when some Gram eigenvalue sat below the floor and was clamped.
    pub clamped: bool,
}

/// Rebalances `pair` so that `UᵀU = VᵀV` without changing `U Vᵀ`.
///
/// Fails with [`Error::RankDeficient`] when either Gram matrix has an eigenvalue
/// below `GRAM_FLOOR · λ_max`; use [`rebalance_clamped`] to continue through it.
pub fn rebalance_fast(pair: &FactorPair) -> Result<FactorPair> {
    let split = GramSplit::new(pair);
    if let Some((smallest, floor)) = split.deficiency {
        return Err(Error::RankDeficient { smallest, floor });
    }
    Ok(split.thin_svd(pair).balanced_factors())
}

/// Like [`rebalance_fast`] but clamps tiny Gram eigenvalues to the floor.
/// An all-zero pair is returned unchanged.
pub fn rebalance_clamped(pair: &FactorPair) -> Rebalanced {
    let split = GramSplit::new(pair);
    if split.zero {
        return Rebalanced {
            pair: pair.clone(),
            clamped: true,
        };
    }
    Rebalanced {
        pair: split.thin_svd(pair).balanced_factors(),
        clamped: split.deficiency.is_some(),
    }
}

/// The `r × r` pieces of the fast SVD:
/// `UᵀU = R_U D_U R_Uᵀ`, `VᵀV = R_V D_V R_Vᵀ`, `D_U^{1/2} R_Uᵀ R_V D_V^{1/2} = Q_U D Q_Vᵀ`.
pub(crate) struct GramSplit {
    r_u: Mat,
    d_u: DVector<f64>,
    r_v: Mat,
    d_v: DVector<f64>,
    q_u: Mat,
    d: DVector<f64>,
    q_v: Mat,
    zero: bool,
    deficiency: Option<(f64, f64)>,
}

fn clamped_eigen(g: Mat) -> (Mat, DVector<f64>, f64, f64) {
    let (vals, vecs) = linalg::symmetric_eigen(&g).expect("finite r x r Gram matrix");
    let max = vals.iter().copied().fold(0.0, f64::max);
    let smallest = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let floor = GRAM_FLOOR * max;
    let d = DVector::from_iterator(vals.len(), vals.iter().map(|x| x.max(floor)));
    (vecs, d, smallest, floor)
}

impl GramSplit {
    pub(crate) fn new(pair: &FactorPair) -> Self {
        let r = pair.rank();
        let (r_u, d_u, small_u, floor_u) = clamped_eigen(pair.u.tr_mul(&pair.u));
        let (r_v, d_v, small_v, floor_v) = clamped_eigen(pair.v.tr_mul(&pair.v));
        let zero = !(floor_u > 0.0 && floor_v > 0.0);
        if zero {
            let id = Mat::identity(r, r);
            return Self {
                r_u: id.clone(),
                d_u: DVector::from_element(r, 1.0),
                r_v: id.clone(),
                d_v: DVector::from_element(r, 1.0),
                q_u: id.clone(),
                d: DVector::zeros(r),
                q_v: id,
                zero: true,
                deficiency: Some((0.0, 0.0)),
            };
        }
        let deficiency = if small_u < floor_u {
            Some((small_u, floor_u))
        } else if small_v < floor_v {
            Some((small_v, floor_v))
        } else {
            None
        };
        let mut core = r_u.transpose() * &r_v;
        for i in 0..r {
            for j in 0..r {
                core[(i, j)] *= d_u[i].sqrt() * d_v[j].sqrt();
            }
        }
        let svd = linalg::svd(&core).expect("finite r x r core");
        let (q_u, q_v) = (svd.u, svd.v);
        let d = DVector::from_vec(svd.s);
        Self {
            r_u,
            d_u,
            r_v,
            d_v,
            q_u,
            d,
            q_v,
            zero: false,
            deficiency,
        }
    }

    /// `A = R_U D_U^{-1/2} Q_U`, so that `U A` holds the left singular vectors.
    fn left_map(&self) -> Mat {
        scale_cols(&self.r_u, &self.d_u, -0.5) * &self.q_u
    }

    fn right_map(&self) -> Mat {
        scale_cols(&self.r_v, &self.d_v, -0.5) * &self.q_v
    }

    pub(crate) fn thin_svd(&self, pair: &FactorPair) -> ThinSvd {
        if self.zero {
            let (d1, d2) = pair.dims();
            let r = pair.rank();
            let left = Mat::identity(d1, r);
            let right = Mat::identity(d2, r);
            return ThinSvd {
                left,
                singular_values: DVector::zeros(r),
                right,
            };
        }
        ThinSvd {
            left: &pair.u * self.left_map(),
            singular_values: self.d.clone(),
            right: &pair.v * self.right_map(),
        }
    }

    /// Right-multipliers applied to the gradient rows in the fast update:
    /// the `U` row uses `R_V D_V^{-1/2} Q_V Q_Uᵀ D_U^{1/2} R_Uᵀ`,
    /// the `V` row uses `R_U D_U^{-1/2} Q_U Q_Vᵀ D_V^{1/2} R_Vᵀ`.
    pub(crate) fn gradient_maps(&self) -> (Mat, Mat) {
        if self.zero {
            let r = self.d.len();
            return (Mat::identity(r, r), Mat::identity(r, r));
        }
        let u_half = scale_cols(&self.r_u, &self.d_u, 0.5).transpose();
        let v_half = scale_cols(&self.r_v, &self.d_v, 0.5).transpose();
        let for_u = scale_cols(&self.r_v, &self.d_v, -0.5) * &self.q_v * self.q_u.transpose() * u_half;
        let for_v = scale_cols(&self.r_u, &self.d_u, -0.5) * &self.q_u * self.q_v.transpose() * v_half;
        (for_u, for_v)
    }

    pub(crate) fn is_deficient(&self) -> bool {
        self.deficiency.is_some()
    }
}

fn scale_cols(m: &Mat, d: &DVector<f64>, power: f64) -> Mat {
    let mut out = m.clone();
    for (k, x) in d.iter().enumerate() {
        out.column_mut(k).scale_mut(x.powf(power));
    }
    out
}
