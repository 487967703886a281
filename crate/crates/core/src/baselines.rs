//! Comparison methods: constrained linear factor analysis, the
//! unconstrained nonlinear fit, and varimax rotation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{fit_joint_map, pca_init, FitConfig};
use crate::model::{apply_zero_pattern, Dataset, DesignMatrix, FitResult};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinearFaConfig {
    /// Ridge on the scores, making each score subproblem strictly convex.
    pub lambda: f64,
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for LinearFaConfig {
    fn default() -> Self {
        LinearFaConfig { lambda: 1e-6, tol: 1e-8, max_iters: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFaFit {
    #[serde(with = "crate::serde_rows")]
    pub x_hat: DMatrix<f64>,
    #[serde(with = "crate::serde_rows")]
    pub a_hat: DMatrix<f64>,
    pub sigma2_hat: f64,
    /// Objective after each half-step.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn ls_objective(y: &DMatrix<f64>, x: &DMatrix<f64>, a: &DMatrix<f64>, lambda: f64) -> f64 {
    (y - x * a.transpose()).norm_squared() + lambda * x.norm_squared()
}

/// Scores step: `X = Y A (AᵀA + λI)⁻¹`.
fn solve_scores(y: &DMatrix<f64>, a: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    let k = a.ncols();
    let gram = a.transpose() * a + DMatrix::identity(k, k) * lambda;
    let chol = gram.cholesky().ok_or(Error::SingularSubproblem)?;
    Ok(chol.solve(&(a.transpose() * y.transpose())).transpose())
}

/// Loadings step: least squares for each item over its free coordinates.
fn solve_loadings(y: &DMatrix<f64>, x: &DMatrix<f64>, q: &DesignMatrix) -> Result<DMatrix<f64>> {
    let mut a = DMatrix::zeros(q.items(), q.factors());
    for j in 0..q.items() {
        let free = q.free_factors(j);
        let xf = x.select_columns(&free);
        let chol = (xf.transpose() * &xf).cholesky().ok_or(Error::SingularSubproblem)?;
        let coef: DVector<f64> = chol.solve(&(xf.transpose() * y.column(j)));
        for (c, &k) in free.iter().enumerate() {
            a[(j, k)] = coef[c];
        }
    }
    Ok(a)
}

/// Minimizes `‖Y − XAᵀ‖²_F + λ‖X‖²_F` by alternating exact least-squares
/// solves on column-centred data, starting from the principal-component
/// initialization.
pub fn fit_linear_fa(y: &Dataset, q: &DesignMatrix, cfg: &LinearFaConfig) -> Result<LinearFaFit> {
    if y.j() != q.items() {
        return Err(Error::DimensionMismatch { data: y.j(), design: q.items() });
    }
    let (x0, a0) = pca_init(y, q)?;
    let (mut x, mut a) = (x0.x, a0.a);
    // item intercepts are profiled out by centring
    let mut yc = y.y.clone();
    for mut c in yc.column_iter_mut() {
        let m = c.mean();
        c.add_scalar_mut(-m);
    }
    let y = &Dataset::new(yc)?;
    let mut prev = ls_objective(&y.y, &x, &a, cfg.lambda);
    let mut trace = vec![prev];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        x = solve_scores(&y.y, &a, cfg.lambda)?;
        trace.push(ls_objective(&y.y, &x, &a, cfg.lambda));
        a = solve_loadings(&y.y, &x, q)?;
        let obj = ls_objective(&y.y, &x, &a, cfg.lambda);
        trace.push(obj);
        if (prev - obj).abs() <= cfg.tol * prev.abs() {
            converged = true;
            break;
        }
        prev = obj;
    }
    let sigma2_hat = (&y.y - &x * a.transpose()).norm_squared() / y.y.len() as f64;
    Ok(LinearFaFit { x_hat: x, a_hat: a, sigma2_hat, objective_trace: trace, iterations, converged })
}

/// Nonlinear fit with every loading free: joint MAP under an all-ones design.
pub fn fit_unconstrained(y: &Dataset, k: usize, cfg: &FitConfig) -> Result<FitResult> {
    let q = DesignMatrix::all_ones(y.j(), k)?;
    fit_joint_map(y, &q, &FitConfig { k, ..cfg.clone() })
}

/// Raw varimax criterion `Σ_k [Σ_j a⁴_jk − (Σ_j a²_jk)² / J]`.
pub fn varimax_criterion(a: &DMatrix<f64>) -> f64 {
    let j = a.nrows() as f64;
    a.column_iter()
        .map(|c| {
            let s2: f64 = c.iter().map(|v| v * v).sum();
            c.iter().map(|v| v.powi(4)).sum::<f64>() - s2 * s2 / j
        })
        .sum()
}

/// Orthogonal varimax rotation by pairwise planar rotations, swept until
/// the criterion gain is at most 1e-10 and no planar angle exceeds 1e-9.
/// Returns the rotated loadings `A R` and the rotation `R`.
pub fn varimax(a: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    varimax_traced(a).0
}

/// As [`varimax`], additionally returning the criterion after each sweep.
pub fn varimax_traced(a: &DMatrix<f64>) -> ((DMatrix<f64>, DMatrix<f64>), Vec<f64>) {
    let (jn, k) = a.shape();
    let mut l = a.clone();
    let mut r = DMatrix::identity(k, k);
    let mut crit = vec![varimax_criterion(&l)];
    if k < 2 || jn == 0 {
        return ((l, r), crit);
    }
    let j = jn as f64;
    for _ in 0..1000 {
        let mut max_phi: f64 = 0.0;
        for p in 0..k - 1 {
            for qq in p + 1..k {
                let (mut sa, mut sb, mut sc, mut sd) = (0.0, 0.0, 0.0, 0.0);
                for i in 0..jn {
                    let (x, y) = (l[(i, p)], l[(i, qq)]);
                    let u = x * x - y * y;
                    let v = 2.0 * x * y;
                    sa += u;
                    sb += v;
                    sc += u * u - v * v;
                    sd += 2.0 * u * v;
                }
                let num = sd - 2.0 * sa * sb / j;
                let den = sc - (sa * sa - sb * sb) / j;
                let phi = 0.25 * num.atan2(den);
                max_phi = max_phi.max(phi.abs());
                if phi.abs() < 1e-15 {
                    continue;
                }
                let (s, c) = phi.sin_cos();
                for m in [&mut l, &mut r] {
                    for i in 0..m.nrows() {
                        let (x, y) = (m[(i, p)], m[(i, qq)]);
                        m[(i, p)] = c * x + s * y;
                        m[(i, qq)] = -s * x + c * y;
                    }
                }
            }
        }
        let c = varimax_criterion(&l);
        let delta = c - crit.last().unwrap();
        crit.push(c);
        // the criterion flattens faster than the rotation settles
        if delta.abs() <= 1e-10 && max_phi <= 1e-9 {
            break;
        }
    }
    ((l, r), crit)
}

/// Design derived from loadings: entries below `threshold · max_k |a_jk|`
/// in their row are treated as structural zeros.
pub fn threshold_design(a: &DMatrix<f64>, threshold: f64) -> Result<DesignMatrix> {
    let rows: Vec<Vec<u8>> = a
        .row_iter()
        .map(|r| {
            let m = r.amax();
            r.iter().map(|v| u8::from(v.abs() >= threshold * m)).collect()
        })
        .collect();
    DesignMatrix::try_from(rows)
}

/// Masks loadings after a design has been derived from them.
pub fn mask_loadings(a: &DMatrix<f64>, q: &DesignMatrix) -> Result<DMatrix<f64>> {
    Ok(apply_zero_pattern(a, q)?.a)
}
