//! Marginal likelihood, joint log posterior and its gradient, posterior link
//! prediction, and the per-row / per-item objectives of the two-step
//! estimator.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{build_gram_set, GramSet, ItemGram};
use crate::model::{Dataset, DesignMatrix, FactorScores, Hyperparams, Loadings};

/// Prior placed on each factor-score row. Loadings and hyperparameters
/// always carry flat priors, which contribute nothing.
///
/// The flat prior is the default: the likelihood is invariant under
/// `X → cX, A → A/c`, so a standard-normal prior has no maximizer and
/// pulls the joint fit towards `X → 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum XPrior {
    StandardNormal,
    #[default]
    Uniform,
}

impl std::str::FromStr for XPrior {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" | "standard-normal" => Ok(XPrior::StandardNormal),
            "uniform" => Ok(XPrior::Uniform),
            _ => Err(Error::InvalidConfig(format!("unknown x prior `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorSpec {
    pub x_prior: XPrior,
}

impl PriorSpec {
    pub fn log_density(&self, x: &DMatrix<f64>) -> f64 {
        match self.x_prior {
            XPrior::StandardNormal => -0.5 * x.norm_squared(),
            XPrior::Uniform => 0.0,
        }
    }

    pub fn gradient(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match self.x_prior {
            XPrior::StandardNormal => -x,
            XPrior::Uniform => DMatrix::zeros(x.nrows(), x.ncols()),
        }
    }
}

/// `-½ log|K_j| - ½ Y_jᵀ K_j⁻¹ Y_j` for one item.
fn item_loglik(it: &ItemGram, y: &DVector<f64>) -> f64 {
    -0.5 * it.log_det() - 0.5 * y.dot(&it.alpha)
}

/// Sum over items of the Gaussian marginal log-likelihood, including the
/// `-(N/2) log 2π` constant.
pub fn marginal_loglik(y: &Dataset, g: &GramSet) -> f64 {
    let n = y.n() as f64;
    g.items
        .iter()
        .enumerate()
        .map(|(j, it)| -0.5 * n * (2.0 * PI).ln() + item_loglik(it, &y.y.column(j).into_owned()))
        .sum()
}

fn check_pattern(a: &Loadings, q: &DesignMatrix) -> Result<()> {
    if a.a.nrows() != q.items() || a.a.ncols() != q.factors() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", q.items(), q.factors()),
            got: format!("{}x{}", a.a.nrows(), a.a.ncols()),
        });
    }
    for j in 0..q.items() {
        for k in 0..q.factors() {
            if !q.get(j, k) && a.a[(j, k)] != 0.0 {
                return Err(Error::ZeroPatternViolated { item: j, factor: k });
            }
        }
    }
    Ok(())
}

/// Joint log posterior `Σ_j [-½ log|K_j| - ½ tr(K_j⁻¹ Y_j Y_jᵀ)] + log p(X)`.
pub fn joint_log_posterior(
    x: &FactorScores,
    a: &Loadings,
    h: &Hyperparams,
    y: &Dataset,
    q: &DesignMatrix,
    prior: &PriorSpec,
) -> Result<f64> {
    check_pattern(a, q)?;
    let g = build_gram_set(x, a, h, y)?;
    Ok(joint_from_gram(&g, y, &x.x, prior))
}

pub(crate) fn joint_from_gram(g: &GramSet, y: &Dataset, x: &DMatrix<f64>, prior: &PriorSpec) -> f64 {
    let lik: f64 = g
        .items
        .iter()
        .enumerate()
        .map(|(j, it)| item_loglik(it, &y.y.column(j).into_owned()))
        .sum();
    lik + prior.log_density(x)
}

/// Value and gradient of the joint log posterior.
#[derive(Debug, Clone)]
pub struct JointGradient {
    pub value: f64,
    pub grad_x: DMatrix<f64>,
    /// Zero at every constrained position.
    pub grad_a: DMatrix<f64>,
    /// With respect to `(ln w, ln tau, ln sigma2)`.
    pub grad_log_theta: [f64; 3],
}

/// Per-item gradient pieces: `∂ℓ_j/∂θ` (natural scale) and `∂ℓ_j/∂t_ij`.
///
/// Every block is `½ tr(W_j ∂K_j/∂·)` with `W_j = α_j α_jᵀ - K_j⁻¹`. The
/// score and loading blocks go through the index `t_ij = a_jᵀ x_i`, which
/// is the sparse row/column trace of the score derivative summed over `k`.
fn item_gradient(it: &ItemGram, h: &Hyperparams) -> ([f64; 3], DVector<f64>) {
    let n = it.t.len();
    let kinv = it.inverse();
    let mut dw = 0.0;
    let mut dtau = 0.0;
    let mut dsig = 0.0;
    let mut gt = DVector::zeros(n);
    for l in 0..n {
        let al = it.alpha[l];
        let wll = al * al - kinv[(l, l)];
        dsig += wll;
        dtau += wll * it.c[(l, l)];
        for i in (l + 1)..n {
            let wil = it.alpha[i] * al - kinv[(i, l)];
            let c = it.c[(i, l)];
            let d = it.t[i] - it.t[l];
            dw += 2.0 * wil * (-0.5 * d * d * c);
            dtau += 2.0 * wil * c;
            // ∂K(i,l)/∂t_i = -w d c, ∂K(i,l)/∂t_l = +w d c
            let v = wil * (-h.w * d * c);
            gt[i] += v;
            gt[l] -= v;
        }
    }
    ([0.5 * dw, 0.5 * dtau / h.tau, 0.5 * dsig], gt)
}

/// Gradient of the joint log posterior from an already built Gram set.
pub fn grad_from_gram(
    g: &GramSet,
    y: &Dataset,
    x: &DMatrix<f64>,
    a: &DMatrix<f64>,
    q: &DesignMatrix,
    prior: &PriorSpec,
) -> JointGradient {
    let h = g.h;
    let n = x.nrows();
    let jn = a.nrows();
    let parts: Vec<([f64; 3], DVector<f64>)> = g.items.iter().map(|it| item_gradient(it, &h)).collect();
    let mut gt = DMatrix::zeros(n, jn);
    let mut dtheta = [0.0; 3];
    for (j, (dth, col)) in parts.into_iter().enumerate() {
        for p in 0..3 {
            dtheta[p] += dth[p];
        }
        gt.set_column(j, &col);
    }
    let grad_x = &gt * a + prior.gradient(x);
    let mut grad_a = gt.transpose() * x;
    for j in 0..jn {
        for k in 0..a.ncols() {
            if !q.get(j, k) {
                grad_a[(j, k)] = 0.0;
            }
        }
    }
    JointGradient {
        value: joint_from_gram(g, y, x, prior),
        grad_x,
        grad_a,
        grad_log_theta: [dtheta[0] * h.w, dtheta[1] * h.tau, dtheta[2] * h.sigma2],
    }
}

pub fn grad_joint(
    x: &FactorScores,
    a: &Loadings,
    h: &Hyperparams,
    y: &Dataset,
    q: &DesignMatrix,
    prior: &PriorSpec,
) -> Result<JointGradient> {
    check_pattern(a, q)?;
    let g = build_gram_set(x, a, h, y)?;
    Ok(grad_from_gram(&g, y, &x.x, &a.a, q, prior))
}

/// Gradient of [`marginal_loglik`] with respect to the log hyperparameters.
pub fn grad_marginal_log_theta(g: &GramSet) -> [f64; 3] {
    let h = g.h;
    let mut d = [0.0; 3];
    for it in &g.items {
        let (dth, _) = item_gradient(it, &h);
        for p in 0..3 {
            d[p] += dth[p];
        }
    }
    [d[0] * h.w, d[1] * h.tau, d[2] * h.sigma2]
}

/// Posterior mean of item `j`'s link at a new index `t_star`.
pub fn posterior_f_mean(t_star: f64, j: usize, g: &GramSet) -> f64 {
    LinkEvaluator::from_item(&g.items[j], g.h).value(t_star)
}

/// Posterior link means at the training indices, `C_j K_j⁻¹ Y_j`.
pub fn posterior_f_train(j: usize, g: &GramSet) -> DVector<f64> {
    let it = &g.items[j];
    &it.c * &it.alpha
}

/// Posterior covariance of the training link values, `σ² C_j K_j⁻¹`.
pub fn posterior_f_cov_train(j: usize, g: &GramSet) -> DMatrix<f64> {
    let it = &g.items[j];
    // C K⁻¹ = (K⁻¹ C)ᵀ since both factors are symmetric
    let m = it.chol.solve(&it.c).transpose() * g.h.sigma2;
    (&m + m.transpose()) * 0.5
}

/// Posterior link mean of one item, frozen at a given state.
#[derive(Debug, Clone)]
pub struct LinkEvaluator {
    pub t: DVector<f64>,
    pub alpha: DVector<f64>,
    pub h: Hyperparams,
}

impl LinkEvaluator {
    pub fn from_item(it: &ItemGram, h: Hyperparams) -> Self {
        LinkEvaluator { t: it.t.clone(), alpha: it.alpha.clone(), h }
    }

    pub fn from_gram(g: &GramSet) -> Vec<Self> {
        g.items.iter().map(|it| Self::from_item(it, g.h)).collect()
    }

    pub fn value(&self, t_star: f64) -> f64 {
        self.value_and_derivative(t_star).0
    }

    /// `ψ(t*)ᵀα` and its derivative `Σ_l -w (t* - t_l) k(t*, t_l) α_l`.
    pub fn value_and_derivative(&self, t_star: f64) -> (f64, f64) {
        let mut f = 0.0;
        let mut df = 0.0;
        for (tl, al) in self.t.iter().zip(self.alpha.iter()) {
            let d = t_star - tl;
            let k = self.h.tau * (-0.5 * self.h.w * d * d).exp();
            f += k * al;
            df -= self.h.w * d * k * al;
        }
        (f, df)
    }
}

/// `ℓ_i(x) = Σ_j Y_ij f_j(a_jᵀx) - ½ f_j(a_jᵀx)²` and its gradient in `x`.
pub fn step2_scores(
    x_cand: &[f64],
    i: usize,
    links: &[LinkEvaluator],
    a: &DMatrix<f64>,
    y: &Dataset,
) -> (f64, Vec<f64>) {
    let kn = x_cand.len();
    let mut val = 0.0;
    let mut grad = vec![0.0; kn];
    for (j, link) in links.iter().enumerate() {
        let t: f64 = (0..kn).map(|k| a[(j, k)] * x_cand[k]).sum();
        let (f, df) = link.value_and_derivative(t);
        let yij = y.y[(i, j)];
        val += yij * f - 0.5 * f * f;
        let s = (yij - f) * df;
        for k in 0..kn {
            grad[k] += s * a[(j, k)];
        }
    }
    (val, grad)
}

pub fn step2_objective_scores(
    x_cand: &[f64],
    i: usize,
    links: &[LinkEvaluator],
    a: &DMatrix<f64>,
    y: &Dataset,
) -> f64 {
    step2_scores(x_cand, i, links, a, y).0
}

/// `ℓ_j(a) = Σ_i Y_ij f_j(aᵀx_i) - ½ f_j(aᵀx_i)²` and its gradient,
/// zeroed at constrained coordinates.
pub fn step2_loadings(
    a_cand: &[f64],
    j: usize,
    link: &LinkEvaluator,
    x: &DMatrix<f64>,
    y: &Dataset,
    q: &DesignMatrix,
) -> Result<(f64, Vec<f64>)> {
    let kn = a_cand.len();
    if let Some(k) = (0..kn).find(|&k| !q.get(j, k) && a_cand[k] != 0.0) {
        return Err(Error::ZeroPatternViolated { item: j, factor: k });
    }
    let mut val = 0.0;
    let mut grad = vec![0.0; kn];
    for i in 0..x.nrows() {
        let t: f64 = (0..kn).map(|k| a_cand[k] * x[(i, k)]).sum();
        let (f, df) = link.value_and_derivative(t);
        let yij = y.y[(i, j)];
        val += yij * f - 0.5 * f * f;
        let s = (yij - f) * df;
        for k in 0..kn {
            if q.get(j, k) {
                grad[k] += s * x[(i, k)];
            }
        }
    }
    Ok((val, grad))
}

pub fn step2_objective_loadings(
    a_cand: &[f64],
    j: usize,
    link: &LinkEvaluator,
    x: &DMatrix<f64>,
    y: &Dataset,
    q: &DesignMatrix,
) -> Result<f64> {
    Ok(step2_loadings(a_cand, j, link, x, y, q)?.0)
}
