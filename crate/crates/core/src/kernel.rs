//! Squared-exponential covariance on the projected indices `t_ij = a_jᵀ x_i`
//! and the derivative matrices of the noisy Gram matrices.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{Dataset, DesignMatrix, FactorScores, Hyperparams, Loadings};

/// Jitter multipliers of `tau` tried when a Gram matrix fails to factor.
const JITTER_STEPS: [f64; 5] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

/// `tau * exp(-w (t - t')^2 / 2)`.
#[inline]
pub fn se_kernel(t: f64, t_prime: f64, h: &Hyperparams) -> f64 {
    let d = t - t_prime;
    h.tau * (-0.5 * h.w * d * d).exp()
}

/// Covariance matrix of one item's link values at its indices.
pub fn covariance(t: &DVector<f64>, h: &Hyperparams) -> DMatrix<f64> {
    let n = t.len();
    let mut c = DMatrix::zeros(n, n);
    for l in 0..n {
        c[(l, l)] = h.tau;
        for i in (l + 1)..n {
            let v = se_kernel(t[i], t[l], h);
            c[(i, l)] = v;
            c[(l, i)] = v;
        }
    }
    c
}

/// Factored Gram matrix of a single item.
#[derive(Debug, Clone)]
pub struct ItemGram {
    pub t: DVector<f64>,
    /// Noise-free covariance `C_j`.
    pub c: DMatrix<f64>,
    /// Cholesky factor of `K_j = sigma2 I + C_j` (plus any jitter).
    pub chol: Cholesky<f64, Dyn>,
    pub alpha: DVector<f64>,
    /// Diagonal jitter that was needed, 0 in the normal case.
    pub jitter: f64,
}

impl ItemGram {
    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    /// Noisy Gram matrix `K_j` as factored.
    pub fn k(&self, h: &Hyperparams) -> DMatrix<f64> {
        let mut k = self.c.clone();
        for i in 0..k.nrows() {
            k[(i, i)] += h.sigma2 + self.jitter;
        }
        k
    }

    /// `(max L_ii / min L_ii)^2`, a cheap lower estimate of the condition number.
    pub fn condition_estimate(&self) -> f64 {
        let l = self.chol.l_dirty();
        let d = l.diagonal();
        let (lo, hi) = d.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        (hi / lo).powi(2)
    }
}

/// Per-item covariances and factorizations for one `(X, A, theta)` state.
#[derive(Debug, Clone)]
pub struct GramSet {
    pub h: Hyperparams,
    pub items: Vec<ItemGram>,
}

impl GramSet {
    pub fn n(&self) -> usize {
        self.items.first().map_or(0, |g| g.t.len())
    }

    pub fn max_condition(&self) -> f64 {
        self.items.iter().map(ItemGram::condition_estimate).fold(0.0, f64::max)
    }
}

/// Index matrix `T = X Aᵀ` (N×J).
pub fn indices(x: &DMatrix<f64>, a: &DMatrix<f64>) -> DMatrix<f64> {
    x * a.transpose()
}

pub fn build_gram_set(x: &FactorScores, a: &Loadings, h: &Hyperparams, y: &Dataset) -> Result<GramSet> {
    build_from_indices(&indices(&x.x, &a.a), h, &y.y)
}

/// Builds the Gram set from a precomputed index matrix `t` (N×J).
pub fn build_from_indices(t: &DMatrix<f64>, h: &Hyperparams, y: &DMatrix<f64>) -> Result<GramSet> {
    if t.shape() != y.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", y.nrows(), y.ncols()),
            got: format!("{}x{}", t.nrows(), t.ncols()),
        });
    }
    let items = (0..t.ncols())
        .into_par_iter()
        .map(|j| build_item(j, t.column(j).into_owned(), h, y.column(j).into_owned()))
        .collect::<Result<Vec<_>>>()?;
    Ok(GramSet { h: *h, items })
}

fn build_item(j: usize, t: DVector<f64>, h: &Hyperparams, y: DVector<f64>) -> Result<ItemGram> {
    let c = covariance(&t, h);
    let mut k = c.clone();
    for i in 0..k.nrows() {
        k[(i, i)] += h.sigma2;
    }
    let mut jitter = 0.0;
    let mut chol = Cholesky::new(k.clone());
    for eps in JITTER_STEPS {
        if chol.is_some() {
            break;
        }
        let extra = eps * h.tau;
        let mut kj = k.clone();
        for i in 0..kj.nrows() {
            kj[(i, i)] += extra;
        }
        jitter = extra;
        log::debug!("item {j}: Gram factorization needed jitter {extra:e}");
        chol = Cholesky::new(kj);
    }
    let chol = chol.ok_or(Error::FactorizationFailed { item: j })?;
    if chol.l_dirty().iter().any(|v| !v.is_finite()) {
        return Err(Error::FactorizationFailed { item: j });
    }
    let alpha = chol.solve(&y);
    Ok(ItemGram { t, c, chol, alpha, jitter })
}

/// `(dK/dw, dK/dtau, dK/dsigma2)` for every item.
pub fn dk_dtheta(g: &GramSet, h: &Hyperparams) -> Vec<[DMatrix<f64>; 3]> {
    g.items
        .iter()
        .map(|it| {
            let n = it.t.len();
            let dw = DMatrix::from_fn(n, n, |i, l| {
                let d = it.t[i] - it.t[l];
                -0.5 * d * d * it.c[(i, l)]
            });
            let dtau = &it.c / h.tau;
            [dw, dtau, DMatrix::identity(n, n)]
        })
        .collect()
}

/// `dK_j/dx_ik` for every item `j`; nonzero only on row and column `i`.
pub fn dk_dx(
    g: &GramSet,
    h: &Hyperparams,
    a: &Loadings,
    x: &FactorScores,
    i: usize,
    k: usize,
) -> Result<Vec<DMatrix<f64>>> {
    let n = x.x.nrows();
    if i >= n {
        return Err(Error::IndexOutOfRange { index: i, len: n });
    }
    if k >= x.x.ncols() {
        return Err(Error::FactorIndexOutOfRange { index: k, k: x.x.ncols() });
    }
    Ok(g.items
        .iter()
        .enumerate()
        .map(|(j, it)| {
            let mut m = DMatrix::zeros(n, n);
            let ajk = a.a[(j, k)];
            if ajk != 0.0 {
                for l in 0..n {
                    if l == i {
                        continue;
                    }
                    let v = -h.w * (it.t[i] - it.t[l]) * ajk * it.c[(i, l)];
                    m[(i, l)] = v;
                    m[(l, i)] = v;
                }
            }
            m
        })
        .collect())
}

/// `dK_m/da_mk`; the Gram matrices of all other items do not depend on `a_mk`.
pub fn dk_da(
    g: &GramSet,
    h: &Hyperparams,
    x: &FactorScores,
    q: &DesignMatrix,
    m: usize,
    k: usize,
) -> Result<DMatrix<f64>> {
    if m >= g.items.len() {
        return Err(Error::IndexOutOfRange { index: m, len: g.items.len() });
    }
    if k >= q.factors() {
        return Err(Error::FactorIndexOutOfRange { index: k, k: q.factors() });
    }
    if !q.get(m, k) {
        return Err(Error::ConstrainedLoading { item: m, factor: k });
    }
    let it = &g.items[m];
    let n = it.t.len();
    Ok(DMatrix::from_fn(n, n, |i, l| {
        -h.w * (it.t[i] - it.t[l]) * (x.x[(i, k)] - x.x[(l, k)]) * it.c[(i, l)]
    }))
}
