//! Reference implementations used as oracles. Nothing here calls into the
//! library's decompositions: SVDs are one-sided Jacobi, projections are built
//! densely from explicit complements.
#![allow(dead_code)]

pub mod props;
pub mod scenarios;

use mcb_core::Mat;

/// `m = U diag(s) Vᵀ` with `s` nonincreasing; thin, `min(d1, d2)` columns.
pub struct Svd {
    pub u: Mat,
    pub s: Vec<f64>,
    pub v: Mat,
}

/// One-sided Jacobi (Hestenes) SVD.
pub fn jacobi_svd(m: &Mat) -> Svd {
    if m.nrows() < m.ncols() {
        let t = jacobi_svd(&m.transpose());
        return Svd { u: t.v, s: t.s, v: t.u };
    }
    let (rows, n) = m.shape();
    let mut a = m.clone();
    let mut v = Mat::identity(n, n);
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha: f64 = a.column(p).norm_squared();
                let beta: f64 = a.column(q).norm_squared();
                let gamma: f64 = a.column(p).dot(&a.column(q));
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for k in 0..rows {
                    let (x, y) = (a[(k, p)], a[(k, q)]);
                    a[(k, p)] = c * x - s * y;
                    a[(k, q)] = s * x + c * y;
                }
                for k in 0..n {
                    let (x, y) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * x - s * y;
                    v[(k, q)] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut order: Vec<(f64, usize)> = (0..n).map(|j| (a.column(j).norm(), j)).collect();
    order.sort_by(|x, y| y.0.total_cmp(&x.0));
    let mut u = Mat::zeros(rows, n);
    let mut vv = Mat::zeros(n, n);
    let mut s = Vec::with_capacity(n);
    for (k, &(sv, j)) in order.iter().enumerate() {
        s.push(sv);
        if sv > 0.0 {
            u.set_column(k, &(a.column(j) / sv));
        }
        vv.set_column(k, &v.column(j));
    }
    Svd { u, s, v: vv }
}

/// Best rank-`r` approximation and its leading singular vectors.
pub fn truncate(m: &Mat, r: usize) -> (Mat, Mat, Vec<f64>, Mat) {
    let svd = jacobi_svd(m);
    let l = svd.u.columns(0, r).into_owned();
    let rr = svd.v.columns(0, r).into_owned();
    let s = svd.s[..r].to_vec();
    let mut p = Mat::zeros(m.nrows(), m.ncols());
    for k in 0..r {
        p += s[k] * l.column(k) * rr.column(k).transpose();
    }
    (p, l, s, rr)
}

/// `(L Λ^{1/2}, R Λ^{1/2})` of the rank-`r` truncation.
pub fn balanced(m: &Mat, r: usize) -> (Mat, Mat) {
    let (_, l, s, rr) = truncate(m, r);
    let mut u = l;
    let mut v = rr;
    for k in 0..r {
        let root = s[k].sqrt();
        u.column_mut(k).scale_mut(root);
        v.column_mut(k).scale_mut(root);
    }
    (u, v)
}

/// One step of the dense reference learner for arm factors `(u, v)`: the
/// plain gradient step on both factors, then a full SVD of `ŨṼᵀ` and a
/// balanced re-factorization.
pub fn dense_step(u: &Mat, v: &Mat, row: usize, col: usize, reward: f64, step: f64) -> (Mat, Mat) {
    let r = u.ncols();
    let resid = u.row(row).dot(&v.row(col)) - reward;
    let mut u2 = u.clone();
    let mut v2 = v.clone();
    for k in 0..r {
        u2[(row, k)] -= step * resid * v[(col, k)];
        v2[(col, k)] -= step * resid * u[(row, k)];
    }
    balanced(&(&u2 * v2.transpose()), r)
}

/// `ε_t` recomputed from the schedule's definition.
pub fn epsilon(t: usize, t0: usize, eps: f64, c2: f64, gamma: f64) -> f64 {
    if t <= t0 {
        eps
    } else {
        eps.min(c2 * (t as f64).powf(-gamma))
    }
}

/// Greedy arm (lowest index wins ties) and the taken arm's propensity.
pub fn greedy_and_probs(values: &[f64], eps: f64) -> (usize, Vec<f64>) {
    let k = values.len();
    let mut best = 0;
    for a in 1..k {
        if values[a] > values[best] {
            best = a;
        }
    }
    let mut p = vec![eps / k as f64; k];
    p[best] += 1.0 - eps;
    (best, p)
}

/// Categorical draw from a uniform variate.
pub fn pick(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (a, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return a;
        }
    }
    probs.len() - 1
}

/// `P_M(Q) = Q − (I − LLᵀ) Q (I − RRᵀ)` from explicit complements.
pub fn tangent_dense(q: &Mat, l: &Mat, r: &Mat) -> Mat {
    let pl = Mat::identity(l.nrows(), l.nrows()) - l * l.transpose();
    let pr = Mat::identity(r.nrows(), r.nrows()) - r * r.transpose();
    q - pl * q * pr
}

/// `Ŝ²` from its definition under uniform sampling.
#[allow(clippy::too_many_arguments)]
pub fn s_sq_dense(
    q: &Mat,
    m_hat: &Mat,
    rank: usize,
    finals: &[Mat],
    arm: usize,
    t: usize,
    t0: usize,
    gamma: f64,
    c2: f64,
) -> f64 {
    let (_, l, _, r) = truncate(m_hat, rank);
    let p = tangent_dense(q, &l, &r);
    let k = finals.len();
    let (mut own, mut cross) = (0.0, 0.0);
    for i in 0..q.nrows() {
        for j in 0..q.ncols() {
            let mut best = 0;
            for a in 1..k {
                if finals[a][(i, j)] > finals[best][(i, j)] {
                    best = a;
                }
            }
            let v = p[(i, j)] * p[(i, j)];
            if best == arm {
                own += v;
            } else {
                cross += v;
            }
        }
    }
    let c_gamma = k as f64 / (c2 * (1.0 + gamma));
    let b_t = t as f64 / (t - t0) as f64;
    ((t as f64).powf(-gamma) * own + c_gamma * cross) * b_t
}

/// Standard normal CDF, accurate to about 1e-7.
pub fn phi(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn erfc(x: f64) -> f64 {
    // Numerical Recipes erfcc, fractional error < 1.2e-7.
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let ans = t * (-z * z - 1.26551223
        + t * (1.00002368
            + t * (0.37409196
                + t * (0.09678418
                    + t * (-0.18628806
                        + t * (0.27886807
                            + t * (-1.13520398 + t * (1.48851587 + t * (-0.82215223 + t * 0.17087277)))))))))
        .exp();
    if x >= 0.0 {
        ans
    } else {
        2.0 - ans
    }
}

/// Two-sided KS distance of a sample to `N(0, 1)`.
pub fn ks_distance(sample: &[f64]) -> f64 {
    let mut x = sample.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = phi(v);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Ordinary least squares `y ≈ a + b x`; returns `(a, b, R²)`.
pub fn ols(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let b = sxy / sxx;
    (my - b * mx, b, sxy * sxy / (sxx * syy))
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    (a - b).amax()
}
