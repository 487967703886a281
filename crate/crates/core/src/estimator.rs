//! Fitting procedures: joint MAP over `(X, A, θ)` and the iterative scheme
//! alternating hyperparameter estimation (Step 1) with per-row score and
//! per-item loading updates against frozen link estimates (Step 2).

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{fit_linear_fa, LinearFaConfig};
use crate::error::{Error, Result};
use crate::inference::{
    grad_from_gram, grad_marginal_log_theta, joint_from_gram, marginal_loglik, posterior_f_train, step2_loadings,
    step2_scores, LinkEvaluator, PriorSpec,
};
use crate::kernel::{build_from_indices, indices, GramSet};
use crate::model::{
    apply_zero_pattern, Convergence, Dataset, DesignMatrix, FactorScores, FitResult, Hyperparams, Loadings,
    DEFAULT_NORM_BOUND,
};
use crate::optim::{minimize, Objective, OptimOptions, Optimizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    JointMap,
    #[default]
    Iterative,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint-map" | "joint" => Ok(Method::JointMap),
            "iterative" => Ok(Method::Iterative),
            _ => Err(Error::InvalidConfig(format!("unknown fit method `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub method: Method,
    pub k: usize,
    pub prior: PriorSpec,
    pub optimizer: Optimizer,
    pub optim: OptimOptions,
    /// Outer loops of the iterative method.
    pub outer_max: usize,
    /// Relative change of the marginal log-likelihood that ends the outer loop.
    pub outer_tol: f64,
    /// `None` starts from `w = 1` and splits `var(Y)` equally between `tau` and `sigma2`.
    pub theta_init: Option<Hyperparams>,
    pub init: Init,
    /// `sigma2` never drops below this multiple of `var(Y)`.
    pub sigma2_floor: f64,
    /// Random restarts per Step 2 subproblem in addition to the current point.
    pub step2_restarts: usize,
    pub step2_max_iters: usize,
    /// Step 2 only accepts candidates whose indices stay within the range
    /// of the frozen link's training indices, widened by this fraction of
    /// the range on each side. Beyond the data the posterior mean decays to
    /// the prior mean, which would otherwise attract poorly fitted rows.
    pub support_margin: f64,
    pub norm_bound: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            method: Method::Iterative,
            k: 2,
            prior: PriorSpec::default(),
            optimizer: Optimizer::Scg,
            optim: OptimOptions::default(),
            outer_max: 50,
            outer_tol: 1e-6,
            theta_init: None,
            init: Init::LinearFa,
            sigma2_floor: 1e-6,
            step2_restarts: 4,
            step2_max_iters: 100,
            support_margin: 0.0,
            norm_bound: DEFAULT_NORM_BOUND,
            seed: 0,
        }
    }
}

fn check_inputs(y: &Dataset, q: &DesignMatrix, cfg: &FitConfig) -> Result<()> {
    if y.j() != q.items() {
        return Err(Error::DimensionMismatch { data: y.j(), design: q.items() });
    }
    if cfg.k != q.factors() {
        return Err(Error::InvalidConfig(format!("K = {} but the design matrix has {} columns", cfg.k, q.factors())));
    }
    if cfg.k == 0 || cfg.k > y.j() {
        return Err(Error::InvalidConfig(format!("K = {} must lie in 1..={}", cfg.k, y.j())));
    }
    cfg.optim.validate()
}

/// Principal-component initialization.
///
/// Scores are the leading `K` principal components of column-centred `Y`,
/// scaled to unit sample variance and signed so that each column's
/// largest-magnitude entry is positive; loadings are the matching
/// least-squares coefficients, masked by `q`, with free entries that are
/// exactly zero moved to 0.1.
pub fn pca_init(y: &Dataset, q: &DesignMatrix) -> Result<(FactorScores, Loadings)> {
    let k = q.factors();
    let n = y.n();
    if n <= k {
        return Err(Error::TooFewRows { min: k + 1, got: n });
    }
    if y.j() != q.items() {
        return Err(Error::DimensionMismatch { data: y.j(), design: q.items() });
    }
    let mut yc = y.y.clone();
    for mut col in yc.column_iter_mut() {
        let m = col.mean();
        col.add_scalar_mut(-m);
    }
    // Eigendecomposition of the J×J cross-product; scores follow as Yc v / s.
    let eig = SymmetricEigen::new(yc.transpose() * &yc);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let sv = |i: usize| eig.eigenvalues[i].max(0.0).sqrt();
    let smax = sv(order[0]);
    let rank = order.iter().filter(|&&i| smax > 1e-150 && sv(i) > smax * 1e-7).count();
    if rank < k {
        return Err(Error::RankDeficient { k });
    }
    let scale = ((n - 1) as f64).sqrt();
    let mut x = DMatrix::zeros(n, k);
    let mut a = DMatrix::zeros(y.j(), k);
    for (c, &idx) in order.iter().take(k).enumerate() {
        let v = eig.eigenvectors.column(idx);
        let s = sv(idx);
        let mut score = &yc * v * (scale / s);
        let mut load = v * (s / scale);
        let imax = score.iamax();
        if score[imax] < 0.0 {
            score = -score;
            load = -load;
        }
        x.set_column(c, &score);
        a.set_column(c, &load);
    }
    let mut a = apply_zero_pattern(&a, q)?;
    for j in 0..q.items() {
        for kk in q.free_factors(j) {
            if a.a[(j, kk)].abs() < 1e-12 {
                a.a[(j, kk)] = 0.1;
            }
        }
    }
    Ok((FactorScores::new(x), a))
}

/// Rescales loadings so that the indices `X Aᵀ` have unit root mean square.
///
/// The likelihood is unchanged under `t → c t, w → w / c²`, so the overall
/// index scale is a convention; fixing it at the start keeps the
/// lengthscale `w = 1` of the initial hyperparameters commensurate with the
/// data.
pub fn normalize_index_scale(x: &FactorScores, a: &Loadings) -> Loadings {
    let t = indices(&x.x, &a.a);
    let rms = (t.norm_squared() / t.len().max(1) as f64).sqrt();
    if rms > 0.0 && rms.is_finite() {
        Loadings { a: &a.a / rms, bound: a.bound }
    } else {
        a.clone()
    }
}

/// Starting point of the nonlinear fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    /// Principal components, masked.
    Pca,
    /// Principal components refined by the constrained linear factor fit,
    /// which realigns the components with the zero pattern that masking
    /// alone breaks.
    #[default]
    LinearFa,
}

impl std::str::FromStr for Init {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pca" => Ok(Init::Pca),
            "linear-fa" | "lfa" => Ok(Init::LinearFa),
            _ => Err(Error::InvalidConfig(format!("unknown initialization `{s}`"))),
        }
    }
}

/// Starting scores and loadings, with unit-variance score columns and
/// unit-RMS indices.
pub fn initialize(y: &Dataset, q: &DesignMatrix, init: Init) -> Result<(FactorScores, Loadings)> {
    let (x0, a0) = pca_init(y, q)?;
    let (x0, a0) = match init {
        Init::Pca => (x0, a0),
        Init::LinearFa => match fit_linear_fa(y, q, &LinearFaConfig::default()) {
            Ok(lfa) => {
                let (mut x, mut a) = (lfa.x_hat, lfa.a_hat);
                for k in 0..x.ncols() {
                    let sd = x.column(k).variance().sqrt() * (y.n() as f64 / (y.n() - 1) as f64).sqrt();
                    if sd > 0.0 {
                        x.column_mut(k).scale_mut(1.0 / sd);
                        a.column_mut(k).scale_mut(sd);
                    }
                }
                (FactorScores::new(x), Loadings { a, bound: a0.bound })
            }
            Err(e) => {
                log::warn!("linear initialization failed ({e}); using principal components");
                (x0, a0)
            }
        },
    };
    let a0 = normalize_index_scale(&x0, &a0);
    Ok((x0, a0))
}

fn initial_theta(y: &Dataset, cfg: &FitConfig) -> Hyperparams {
    cfg.theta_init.unwrap_or_else(|| {
        let v = y.variance().max(1e-12);
        Hyperparams { w: 1.0, tau: 0.5 * v, sigma2: 0.5 * v }
    })
}

/// Maps the unconstrained coordinates `s` to hyperparameters; `sigma2`
/// is `floor + exp(s_2)`.
#[derive(Debug, Clone, Copy)]
struct ThetaMap {
    floor: f64,
}

impl ThetaMap {
    fn decode(&self, s: &[f64]) -> Hyperparams {
        Hyperparams { w: s[0].exp(), tau: s[1].exp(), sigma2: self.floor + s[2].exp() }
    }

    fn encode(&self, h: &Hyperparams) -> [f64; 3] {
        [h.w.ln(), h.tau.ln(), (h.sigma2 - self.floor).max(self.floor * 1e-3).max(1e-300).ln()]
    }

    /// Converts a gradient in log coordinates to one in `s`.
    fn chain(&self, g_log: [f64; 3], h: &Hyperparams) -> [f64; 3] {
        [g_log[0], g_log[1], g_log[2] * (h.sigma2 - self.floor) / h.sigma2]
    }
}

fn unpack_scores(v: &[f64], n: usize, k: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(n, k, &v[..n * k])
}

fn unpack_loadings(v: &[f64], n: usize, j: usize, k: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(j, k, &v[n * k..n * k + j * k])
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().iter().copied().collect()
}

/// Negative joint log posterior over the packed vector `[X, A, s]`.
struct JointObjective<'a> {
    y: &'a Dataset,
    q: &'a DesignMatrix,
    prior: PriorSpec,
    map: ThetaMap,
    cache: Option<(Vec<f64>, GramSet)>,
}

impl JointObjective<'_> {
    fn dims(&self) -> (usize, usize, usize) {
        (self.y.n(), self.y.j(), self.q.factors())
    }

    fn gram(&mut self, v: &[f64]) -> Option<&GramSet> {
        let hit = matches!(&self.cache, Some((cv, _)) if cv.as_slice() == v);
        if !hit {
            let (n, j, k) = self.dims();
            let x = unpack_scores(v, n, k);
            let a = unpack_loadings(v, n, j, k);
            let h = self.map.decode(&v[n * k + j * k..]);
            match build_from_indices(&indices(&x, &a), &h, &self.y.y) {
                Ok(g) => self.cache = Some((v.to_vec(), g)),
                Err(_) => {
                    self.cache = None;
                    return None;
                }
            }
        }
        self.cache.as_ref().map(|(_, g)| g)
    }
}

impl Objective for JointObjective<'_> {
    fn value(&mut self, v: &[f64]) -> f64 {
        let (n, _, k) = self.dims();
        let prior = self.prior;
        let y = self.y;
        match self.gram(v) {
            Some(g) => -joint_from_gram(g, y, &unpack_scores(v, n, k), &prior),
            None => f64::NAN,
        }
    }

    fn gradient(&mut self, v: &[f64]) -> Vec<f64> {
        let (n, j, k) = self.dims();
        let (prior, y, q, map) = (self.prior, self.y, self.q, self.map);
        let Some(g) = self.gram(v) else {
            return vec![f64::NAN; v.len()];
        };
        let x = unpack_scores(v, n, k);
        let a = unpack_loadings(v, n, j, k);
        let jg = grad_from_gram(g, y, &x, &a, q, &prior);
        let gs = map.chain(jg.grad_log_theta, &g.h);
        let mut out = Vec::with_capacity(v.len());
        out.extend(row_major(&jg.grad_x).into_iter().map(|d| -d));
        out.extend(row_major(&jg.grad_a).into_iter().map(|d| -d));
        out.extend(gs.iter().map(|d| -d));
        out
    }
}

fn finish(
    y: &Dataset,
    x: DMatrix<f64>,
    a: DMatrix<f64>,
    h: Hyperparams,
    norm_bound: f64,
    trace: Vec<(usize, f64)>,
    converged: Convergence,
    iterations: usize,
) -> Result<FitResult> {
    let g = build_from_indices(&indices(&x, &a), &h, &y.y)?;
    let mut f_hat = DMatrix::zeros(y.n(), y.j());
    let mut alpha = DMatrix::zeros(y.n(), y.j());
    for j in 0..y.j() {
        f_hat.set_column(j, &posterior_f_train(j, &g));
        alpha.set_column(j, &g.items[j].alpha);
    }
    let x_hat = FactorScores { x, bound: norm_bound };
    let a_hat = Loadings { a, bound: norm_bound };
    if x_hat.max_row_norm() > norm_bound || a_hat.max_row_norm() > norm_bound {
        log::debug!(
            "estimates exceed the norm bound {norm_bound}: max |x_i| = {:.3}, max |a_j| = {:.3}",
            x_hat.max_row_norm(),
            a_hat.max_row_norm()
        );
    }
    Ok(FitResult {
        x_hat,
        a_hat,
        theta_hat: h,
        f_hat,
        alpha,
        objective_trace: trace,
        marginal_loglik: marginal_loglik(y, &g),
        converged,
        iterations,
        max_gram_condition: g.max_condition(),
    })
}

/// Fits with the method selected in `cfg`.
pub fn fit(y: &Dataset, q: &DesignMatrix, cfg: &FitConfig) -> Result<FitResult> {
    match cfg.method {
        Method::JointMap => fit_joint_map(y, q, cfg),
        Method::Iterative => fit_iterative(y, q, cfg),
    }
}

/// Joint MAP estimation from the configured initialization.
pub fn fit_joint_map(y: &Dataset, q: &DesignMatrix, cfg: &FitConfig) -> Result<FitResult> {
    check_inputs(y, q, cfg)?;
    let (x0, a0) = initialize(y, q, cfg.init)?;
    fit_joint_map_from(y, q, cfg, &x0, &a0, &initial_theta(y, cfg))
}

/// Joint MAP estimation from a given starting point.
pub fn fit_joint_map_from(
    y: &Dataset,
    q: &DesignMatrix,
    cfg: &FitConfig,
    x0: &FactorScores,
    a0: &Loadings,
    theta0: &Hyperparams,
) -> Result<FitResult> {
    check_inputs(y, q, cfg)?;
    let (n, j, k) = (y.n(), y.j(), q.factors());
    let map = ThetaMap { floor: cfg.sigma2_floor * y.variance() };
    let mut v0 = row_major(&x0.x);
    v0.extend(row_major(&apply_zero_pattern(&a0.a, q)?.a));
    v0.extend(map.encode(theta0));
    let mut mask = vec![true; n * k];
    mask.extend((0..j).flat_map(|jj| (0..k).map(move |kk| (jj, kk))).map(|(jj, kk)| q.get(jj, kk)));
    mask.extend([true; 3]);

    let mut obj = JointObjective { y, q, prior: cfg.prior, map, cache: None };
    let f0 = obj.value(&v0);
    let out = minimize(cfg.optimizer, &mut obj, &v0, &mask, &cfg.optim)?;
    let mut trace = vec![(0, f0)];
    trace.extend(out.trace.iter().enumerate().map(|(i, &f)| (i + 1, f)));
    let x = unpack_scores(&out.x_final, n, k);
    let a = unpack_loadings(&out.x_final, n, j, k);
    let h = map.decode(&out.x_final[n * k + j * k..]);
    let res = finish(y, x, a, h, cfg.norm_bound, trace, out.converged, out.iterations)?;
    log::debug!("joint MAP: {} iterations, max Gram condition {:.3e}", res.iterations, res.max_gram_condition);
    Ok(res)
}

/// Step 1: maximizes the marginal log-likelihood over `θ` with `(X, A)` fixed.
pub fn estimate_hyperparams(
    y: &Dataset,
    x: &DMatrix<f64>,
    a: &DMatrix<f64>,
    theta0: &Hyperparams,
    cfg: &FitConfig,
) -> Result<(Hyperparams, GramSet)> {
    let t = indices(x, a);
    let map = ThetaMap { floor: cfg.sigma2_floor * y.variance() };
    struct Step1<'a> {
        t: &'a DMatrix<f64>,
        y: &'a Dataset,
        map: ThetaMap,
        cache: Option<(Vec<f64>, GramSet)>,
    }
    impl Step1<'_> {
        fn gram(&mut self, s: &[f64]) -> Option<&GramSet> {
            if !matches!(&self.cache, Some((c, _)) if c.as_slice() == s) {
                self.cache = build_from_indices(self.t, &self.map.decode(s), &self.y.y).ok().map(|g| (s.to_vec(), g));
            }
            self.cache.as_ref().map(|(_, g)| g)
        }
    }
    impl Objective for Step1<'_> {
        fn value(&mut self, s: &[f64]) -> f64 {
            let y = self.y;
            self.gram(s).map_or(f64::NAN, |g| -marginal_loglik(y, g))
        }
        fn gradient(&mut self, s: &[f64]) -> Vec<f64> {
            let map = self.map;
            match self.gram(s) {
                Some(g) => map.chain(grad_marginal_log_theta(g), &g.h).iter().map(|d| -d).collect(),
                None => vec![f64::NAN; 3],
            }
        }
    }
    let mut obj = Step1 { t: &t, y, map, cache: None };
    let out = minimize(cfg.optimizer, &mut obj, &map.encode(theta0), &[true; 3], &cfg.optim)?;
    let h = map.decode(&out.x_final);
    let g = build_from_indices(&t, &h, &y.y)?;
    Ok((h, g))
}

fn subproblem_opts(cfg: &FitConfig) -> OptimOptions {
    OptimOptions { max_iters: cfg.step2_max_iters, grad_tol: 1e-6, obj_tol: 1e-10, ..cfg.optim }
}

fn column_scales(x: &DMatrix<f64>) -> Vec<f64> {
    x.column_iter().map(|c| c.variance().sqrt().max(1e-3)).collect()
}

/// Maximizes `obj` (given as value-and-gradient of the quantity to
/// maximize) from `start` and from `restarts` Gaussian perturbations of it.
fn multistart<F>(mut objective: F, start: &[f64], mask: &[bool], scales: &[f64], restarts: usize, seed: u64, cfg: &FitConfig) -> Vec<f64>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    // value and gradient come from one evaluation; remember the last one
    struct Neg<'f, F> {
        f: &'f mut F,
        last: Option<(Vec<f64>, f64, Vec<f64>)>,
    }
    impl<F: FnMut(&[f64]) -> (f64, Vec<f64>)> Neg<'_, F> {
        fn eval(&mut self, x: &[f64]) -> (f64, &[f64]) {
            if !matches!(&self.last, Some((lx, _, _)) if lx.as_slice() == x) {
                let (v, g) = (self.f)(x);
                self.last = Some((x.to_vec(), -v, g.into_iter().map(|d| -d).collect()));
            }
            let (_, v, g) = self.last.as_ref().unwrap();
            (*v, g)
        }
    }
    impl<F: FnMut(&[f64]) -> (f64, Vec<f64>)> Objective for Neg<'_, F> {
        fn value(&mut self, x: &[f64]) -> f64 {
            self.eval(x).0
        }
        fn gradient(&mut self, x: &[f64]) -> Vec<f64> {
            self.eval(x).1.to_vec()
        }
    }
    let opts = subproblem_opts(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = (-(objective)(start).0, start.to_vec());
    for r in 0..=restarts {
        let x0: Vec<f64> = if r == 0 {
            start.to_vec()
        } else {
            start
                .iter()
                .zip(mask)
                .zip(scales)
                .map(|((&v, &free), &s)| if free { v + Normal::new(0.0, 0.5 * s).unwrap().sample(&mut rng) } else { v })
                .collect()
        };
        if let Ok(out) = minimize(cfg.optimizer, &mut Neg { f: &mut objective, last: None }, &x0, mask, &opts) {
            if out.objective_final < best.0 || (best.0.is_nan() && out.objective_final.is_finite()) {
                best = (out.objective_final, out.x_final);
            }
        }
    }
    best.1
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Step 2: updates every row of `X`, then every row of `A`, against the
/// links frozen at the current Gram set.
pub fn update_scores_and_loadings(
    y: &Dataset,
    q: &DesignMatrix,
    x: &DMatrix<f64>,
    a: &DMatrix<f64>,
    g: &GramSet,
    cfg: &FitConfig,
    round: usize,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let links = LinkEvaluator::from_gram(g);
    let support: Vec<(f64, f64)> = links
        .iter()
        .map(|l| {
            let (lo, hi) = (l.t.min(), l.t.max());
            let m = cfg.support_margin * (hi - lo);
            (lo - m, hi + m)
        })
        .collect();
    let inside = |t: f64, j: usize| t >= support[j].0 && t <= support[j].1;
    let k = q.factors();
    let x_scales = column_scales(x);
    let free = vec![true; k];
    let rows: Vec<Vec<f64>> = (0..y.n())
        .into_par_iter()
        .map(|i| {
            let start: Vec<f64> = x.row(i).iter().copied().collect();
            multistart(
                |v| {
                    let ok = (0..y.j()).all(|j| inside((0..k).map(|kk| a[(j, kk)] * v[kk]).sum(), j));
                    if ok {
                        step2_scores(v, i, &links, a, y)
                    } else {
                        (f64::NAN, vec![f64::NAN; k])
                    }
                },
                &start,
                &free,
                &x_scales,
                cfg.step2_restarts,
                mix_seed(cfg.seed, round as u64, i as u64),
                cfg,
            )
        })
        .collect();
    let mut x_new = x.clone();
    for (i, r) in rows.iter().enumerate() {
        for kk in 0..k {
            x_new[(i, kk)] = r[kk];
        }
    }
    let a_scales = column_scales(a);
    let item_rows: Vec<Vec<f64>> = (0..y.j())
        .into_par_iter()
        .map(|j| {
            let start: Vec<f64> = a.row(j).iter().copied().collect();
            let mask: Vec<bool> = (0..k).map(|kk| q.get(j, kk)).collect();
            multistart(
                |v| {
                    let ok = (0..y.n()).all(|i| inside((0..k).map(|kk| x_new[(i, kk)] * v[kk]).sum(), j));
                    if ok {
                        step2_loadings(v, j, &links[j], &x_new, y, q).unwrap_or((f64::NAN, vec![f64::NAN; k]))
                    } else {
                        (f64::NAN, vec![f64::NAN; k])
                    }
                },
                &start,
                &mask,
                &a_scales,
                cfg.step2_restarts,
                mix_seed(cfg.seed, round as u64, (y.n() + j) as u64),
                cfg,
            )
        })
        .collect();
    let mut a_new = a.clone();
    for (j, r) in item_rows.iter().enumerate() {
        for kk in 0..k {
            a_new[(j, kk)] = r[kk];
        }
    }
    (x_new, a_new)
}

/// Iterative two-step estimation from the configured initialization.
pub fn fit_iterative(y: &Dataset, q: &DesignMatrix, cfg: &FitConfig) -> Result<FitResult> {
    check_inputs(y, q, cfg)?;
    let (x0, a0) = initialize(y, q, cfg.init)?;
    fit_iterative_from(y, q, cfg, &x0, &a0, &initial_theta(y, cfg))
}

pub fn fit_iterative_from(
    y: &Dataset,
    q: &DesignMatrix,
    cfg: &FitConfig,
    x0: &FactorScores,
    a0: &Loadings,
    theta0: &Hyperparams,
) -> Result<FitResult> {
    check_inputs(y, q, cfg)?;
    let mut x = x0.x.clone();
    let mut a = apply_zero_pattern(&a0.a, q)?.a;
    let mut h = *theta0;
    let mut trace = Vec::new();
    let mut prev: Option<f64> = None;
    let mut converged = Convergence::MaxIters;
    let mut iterations = 0;
    for round in 1..=cfg.outer_max {
        iterations = round;
        let (h_new, g) = estimate_hyperparams(y, &x, &a, &h, cfg)?;
        h = h_new;
        let ml = marginal_loglik(y, &g);
        trace.push((round, -ml));
        log::debug!("round {round}: marginal loglik {ml:.6}, theta {h:?}, max Gram condition {:.3e}", g.max_condition());
        if let Some(p) = prev {
            if (ml - p).abs() <= cfg.outer_tol * p.abs().max(1.0) {
                converged = Convergence::ObjTol;
                break;
            }
        }
        prev = Some(ml);
        let (xn, an) = update_scores_and_loadings(y, q, &x, &a, &g, cfg, round);
        x = xn;
        a = an;
    }
    finish(y, x, a, h, cfg.norm_bound, trace, converged, iterations)
}

/// Posterior link mean of item `j` on a grid of index values.
pub fn predict_links(fit: &FitResult, grid: &[f64], j: usize) -> Result<Vec<f64>> {
    let jn = fit.a_hat.a.nrows();
    if j >= jn {
        return Err(Error::IndexOutOfRange { index: j, len: jn });
    }
    let t: DVector<f64> = &fit.x_hat.x * fit.a_hat.a.row(j).transpose();
    let link = LinkEvaluator { t, alpha: fit.alpha.column(j).into_owned(), h: fit.theta_hat };
    Ok(grid.iter().map(|&s| link.value(s)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::validate_design;
    use rand::Rng;

    fn logistic_data(seed: u64, n: usize, q: &DesignMatrix) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, q.factors(), |_, _| rng.random_range(-1.5..1.5));
        let a = DMatrix::from_fn(q.items(), q.factors(), |j, k| if q.get(j, k) { rng.random_range(0.5..2.0) } else { 0.0 });
        let noise = Normal::new(0.0, 0.2).unwrap();
        let y = (x * a.transpose()).map(|t: f64| 1.0 / (1.0 + (-t).exp()) + noise.sample(&mut rng));
        Dataset::new(y).unwrap()
    }

    #[test]
    fn pca_recovers_exact_rank_span() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 30;
        let xs = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0));
        let mut xs_c = xs.clone();
        for mut c in xs_c.column_iter_mut() {
            let m = c.mean();
            c.add_scalar_mut(-m);
        }
        let a = DMatrix::from_fn(6, 2, |_, _| rng.random_range(-1.0..1.0));
        let y = Dataset::new(&xs_c * a.transpose()).unwrap();
        let q = DesignMatrix::all_ones(6, 2).unwrap();
        let (x0, a0) = pca_init(&y, &q).unwrap();
        // every true score column lies in span(X0)
        let proj = &x0.x * (x0.x.transpose() * &x0.x).try_inverse().unwrap() * x0.x.transpose();
        for k in 0..2 {
            let v = xs_c.column(k);
            let resid = v - &proj * v;
            assert!(resid.norm() / v.norm() <= 1e-6, "{} {}", resid.norm(), v.norm());
        }
        for c in x0.x.column_iter() {
            assert!((c.variance() * n as f64 / (n - 1) as f64 - 1.0).abs() < 1e-10);
            assert!(c[c.iamax()] > 0.0);
        }
        // X0 A0ᵀ reproduces the centred data exactly
        assert!((&x0.x * a0.a.transpose() - &y.y).amax() < 1e-10);

        let flipped = Dataset::new(-&y.y).unwrap();
        let (x1, _) = pca_init(&flipped, &q).unwrap();
        assert!((x1.x - x0.x).amax() < 1e-10);
    }

    #[test]
    fn pca_rank_deficient() {
        let y = Dataset::new(DMatrix::from_fn(5, 3, |_, j| j as f64)).unwrap();
        let q = DesignMatrix::all_ones(3, 1).unwrap();
        assert_eq!(pca_init(&y, &q).unwrap_err(), Error::RankDeficient { k: 1 });
    }

    #[test]
    fn pca_masks_and_perturbs() {
        let q = validate_design(&[vec![1, 0], vec![1, 1], vec![0, 1]]).unwrap();
        let y = logistic_data(2, 20, &q);
        let (_, a0) = pca_init(&y, &q).unwrap();
        assert!(a0.respects(&q));
    }

    #[test]
    fn outer_max_zero_returns_initialization() {
        let q = validate_design(&[vec![1, 0], vec![1, 0], vec![0, 1], vec![0, 1]]).unwrap();
        let y = logistic_data(4, 15, &q);
        let cfg = FitConfig { outer_max: 0, ..Default::default() };
        let fit = fit_iterative(&y, &q, &cfg).unwrap();
        let (x0, a0) = initialize(&y, &q, cfg.init).unwrap();
        assert_eq!(fit.x_hat.x, x0.x);
        assert_eq!(fit.a_hat.a, a0.a);
        assert_eq!(fit.converged, Convergence::MaxIters);
        assert_eq!(fit.iterations, 0);
        assert_eq!(fit.f_hat.shape(), (15, 4));
    }

    #[test]
    fn fits_respect_mask_and_descend() {
        let q = validate_design(&[vec![1, 0], vec![1, 0], vec![0, 1], vec![1, 1]]).unwrap();
        let y = logistic_data(6, 16, &q);
        for method in [Method::JointMap, Method::Iterative] {
            let cfg = FitConfig {
                method,
                outer_max: 4,
                optim: OptimOptions { max_iters: 60, ..Default::default() },
                ..Default::default()
            };
            let fit = fit(&y, &q, &cfg).unwrap();
            assert!(fit.a_hat.respects(&q));
            if method == Method::JointMap {
                let first = fit.objective_trace.first().unwrap().1;
                let last = fit.objective_trace.last().unwrap().1;
                assert!(last <= first);
                assert!(fit.objective_trace.windows(2).all(|w| w[1].1 <= w[0].1));
            }
        }
    }

    #[test]
    fn predict_on_training_indices() {
        let q = validate_design(&[vec![1, 0], vec![0, 1], vec![1, 1]]).unwrap();
        let y = logistic_data(8, 12, &q);
        let cfg = FitConfig { method: Method::JointMap, optim: OptimOptions { max_iters: 30, ..Default::default() }, ..Default::default() };
        let fit = fit_joint_map(&y, &q, &cfg).unwrap();
        for j in 0..3 {
            let t: Vec<f64> = (&fit.x_hat.x * fit.a_hat.a.row(j).transpose()).iter().copied().collect();
            let p = predict_links(&fit, &t, j).unwrap();
            for (i, v) in p.iter().enumerate() {
                assert!((v - fit.f_hat[(i, j)]).abs() <= 1e-9 * fit.f_hat.column(j).amax().max(1.0));
            }
        }
        assert!(predict_links(&fit, &[], 0).unwrap().is_empty());
        assert!(predict_links(&fit, &[0.0], 3).is_err());
    }

    #[test]
    fn mismatched_inputs() {
        let q = validate_design(&[vec![1, 0], vec![0, 1]]).unwrap();
        let y = Dataset::new(DMatrix::from_fn(6, 3, |i, j| (i * j) as f64)).unwrap();
        assert_eq!(fit(&y, &q, &FitConfig::default()).unwrap_err(), Error::DimensionMismatch { data: 3, design: 2 });
    }
}
