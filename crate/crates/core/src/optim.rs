//! First-order minimizers with coordinate masking: scaled conjugate
//! gradient (Møller 1993) and backtracking gradient descent.
//!
//! Masked coordinates never move and their gradient entries are ignored,
//! which confines the search to an axis-aligned subspace. Objectives report
//! failure by returning a non-finite value; such trial points are rejected.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Convergence;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimOptions {
    pub max_iters: usize,
    /// Infinity norm of the masked gradient.
    pub grad_tol: f64,
    /// Relative objective change between accepted steps.
    pub obj_tol: f64,
    pub gd_step: f64,
    pub gd_backtrack: f64,
    pub armijo_c: f64,
    pub scg_sigma0: f64,
    pub scg_lambda0: f64,
    pub seed: u64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        OptimOptions {
            max_iters: 500,
            grad_tol: 1e-5,
            obj_tol: 1e-9,
            gd_step: 1e-2,
            gd_backtrack: 0.5,
            armijo_c: 1e-4,
            scg_sigma0: 1e-4,
            scg_lambda0: 1e-6,
            seed: 0,
        }
    }
}

impl OptimOptions {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.grad_tol, self.obj_tol, self.gd_step, self.armijo_c, self.scg_sigma0, self.scg_lambda0];
        if self.max_iters == 0 || positive.iter().any(|v| !(*v > 0.0)) || !(self.gd_backtrack > 0.0 && self.gd_backtrack < 1.0) {
            return Err(Error::InvalidConfig(format!("invalid optimizer options: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimOutcome {
    pub x_final: Vec<f64>,
    pub objective_final: f64,
    pub iterations: usize,
    pub converged: Convergence,
    /// Objective after every iteration; only accepted values appear.
    pub trace: Vec<f64>,
}

/// A differentiable objective. `gradient` is usually called right after
/// `value` at the same point, which implementations may cache.
pub trait Objective {
    fn value(&mut self, x: &[f64]) -> f64;
    fn gradient(&mut self, x: &[f64]) -> Vec<f64>;
}

/// Adapter turning a pair of closures into an [`Objective`].
pub struct FnObjective<F, G> {
    pub f: F,
    pub g: G,
}

impl<F, G> Objective for FnObjective<F, G>
where
    F: FnMut(&[f64]) -> f64,
    G: FnMut(&[f64]) -> Vec<f64>,
{
    fn value(&mut self, x: &[f64]) -> f64 {
        (self.f)(x)
    }

    fn gradient(&mut self, x: &[f64]) -> Vec<f64> {
        (self.g)(x)
    }
}

// consecutive rejected trial points tolerated when the objective is not finite
const MAX_NONFINITE: usize = 60;

fn masked(mut g: Vec<f64>, mask: &[bool]) -> Vec<f64> {
    for (v, &free) in g.iter_mut().zip(mask) {
        if !free {
            *v = 0.0;
        }
    }
    g
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn step(x: &[f64], d: &[f64], s: f64, mask: &[bool]) -> Vec<f64> {
    x.iter()
        .zip(d)
        .zip(mask)
        .map(|((xi, di), &free)| if free { xi + s * di } else { *xi })
        .collect()
}

fn check_inputs(x0: &[f64], mask: &[bool], opts: &OptimOptions) -> Result<()> {
    opts.validate()?;
    if x0.len() != mask.len() {
        return Err(Error::ShapeMismatch { expected: format!("mask of length {}", x0.len()), got: mask.len().to_string() });
    }
    Ok(())
}

fn trivial(x0: &[f64], f0: f64) -> OptimOutcome {
    OptimOutcome { x_final: x0.to_vec(), objective_final: f0, iterations: 0, converged: Convergence::GradTol, trace: vec![] }
}

pub fn scg_minimize<F, G>(obj: F, grad: G, x0: &[f64], mask: &[bool], opts: &OptimOptions) -> Result<OptimOutcome>
where
    F: FnMut(&[f64]) -> f64,
    G: FnMut(&[f64]) -> Vec<f64>,
{
    scg(&mut FnObjective { f: obj, g: grad }, x0, mask, opts)
}

pub fn gd_minimize<F, G>(obj: F, grad: G, x0: &[f64], mask: &[bool], opts: &OptimOptions) -> Result<OptimOutcome>
where
    F: FnMut(&[f64]) -> f64,
    G: FnMut(&[f64]) -> Vec<f64>,
{
    gd(&mut FnObjective { f: obj, g: grad }, x0, mask, opts)
}

/// Scaled conjugate gradient on an [`Objective`].
pub fn scg<O: Objective + ?Sized>(obj: &mut O, x0: &[f64], mask: &[bool], opts: &OptimOptions) -> Result<OptimOutcome> {
    check_inputs(x0, mask, opts)?;
    let nfree = mask.iter().filter(|&&m| m).count();
    let mut x = x0.to_vec();
    let mut fold = obj.value(&x);
    if !fold.is_finite() {
        return Err(Error::NonFiniteObjective);
    }
    if nfree == 0 {
        return Ok(trivial(x0, fold));
    }
    let mut gnew = masked(obj.gradient(&x), mask);
    if gnew.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteObjective);
    }
    if inf_norm(&gnew) <= opts.grad_tol {
        return Ok(trivial(x0, fold));
    }
    let mut gold = gnew.clone();
    let mut d: Vec<f64> = gnew.iter().map(|v| -v).collect();
    let mut success = true;
    let mut nsuccess = 0usize;
    let mut beta = opts.scg_lambda0;
    let (beta_min, beta_max) = (1e-15, 1e100);
    let mut mu = 0.0;
    let mut kappa = 0.0;
    let mut theta = 0.0;
    let mut nonfinite = 0usize;
    let mut trace = Vec::new();
    let mut converged = Convergence::MaxIters;
    let mut iterations = 0;

    for it in 1..=opts.max_iters {
        iterations = it;
        if success {
            mu = dot(&d, &gnew);
            if mu >= 0.0 {
                d = gnew.iter().map(|v| -v).collect();
                mu = dot(&d, &gnew);
            }
            kappa = dot(&d, &d);
            if kappa < f64::EPSILON * f64::EPSILON {
                converged = Convergence::GradTol;
                trace.push(fold);
                break;
            }
            let sigma = opts.scg_sigma0 / kappa.sqrt();
            let xplus = step(&x, &d, sigma, mask);
            let gplus = masked(obj.gradient(&xplus), mask);
            if gplus.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteObjective);
            }
            theta = d.iter().zip(gplus.iter().zip(&gnew)).map(|(di, (gp, gn))| di * (gp - gn)).sum::<f64>() / sigma;
        }
        let mut delta = theta + beta * kappa;
        if delta <= 0.0 {
            delta = beta * kappa;
            beta -= theta / kappa;
        }
        let alpha = -mu / delta;
        let xnew = step(&x, &d, alpha, mask);
        let fnew = obj.value(&xnew);
        let ratio = if fnew.is_finite() { 2.0 * (fnew - fold) / (alpha * mu) } else { f64::NEG_INFINITY };
        if ratio >= 0.0 {
            success = true;
            nsuccess += 1;
            nonfinite = 0;
            let fprev = fold;
            x = xnew;
            fold = fnew;
            trace.push(fold);
            gold = gnew;
            gnew = masked(obj.gradient(&x), mask);
            if gnew.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteObjective);
            }
            if inf_norm(&gnew) <= opts.grad_tol {
                converged = Convergence::GradTol;
                break;
            }
            if (fprev - fold).abs() <= opts.obj_tol * fprev.abs().max(1.0) {
                converged = Convergence::ObjTol;
                break;
            }
        } else {
            success = false;
            trace.push(fold);
            if !fnew.is_finite() {
                nonfinite += 1;
                if nonfinite > MAX_NONFINITE {
                    return Err(Error::NonFiniteObjective);
                }
            }
        }
        if ratio < 0.25 {
            beta = (4.0 * beta).min(beta_max);
        }
        if ratio > 0.75 {
            beta = (0.5 * beta).max(beta_min);
        }
        if beta >= beta_max {
            // no acceptable step exists at any scale
            converged = Convergence::ObjTol;
            break;
        }
        if nsuccess == nfree {
            d = gnew.iter().map(|v| -v).collect();
            nsuccess = 0;
        } else if success {
            let gamma = gold.iter().zip(&gnew).map(|(go, gn)| (go - gn) * gn).sum::<f64>() / mu;
            d = d.iter().zip(&gnew).map(|(di, gn)| gamma * di - gn).collect();
        }
    }
    Ok(OptimOutcome { x_final: x, objective_final: fold, iterations, converged, trace })
}

/// Gradient descent with Armijo backtracking. The trial step starts at
/// `gd_step`, shrinks by `gd_backtrack` on rejection and doubles after each
/// accepted step.
pub fn gd<O: Objective + ?Sized>(obj: &mut O, x0: &[f64], mask: &[bool], opts: &OptimOptions) -> Result<OptimOutcome> {
    check_inputs(x0, mask, opts)?;
    let mut x = x0.to_vec();
    let mut f = obj.value(&x);
    if !f.is_finite() {
        return Err(Error::NonFiniteObjective);
    }
    if mask.iter().all(|m| !m) {
        return Ok(trivial(x0, f));
    }
    let mut g = masked(obj.gradient(&x), mask);
    let mut lr = opts.gd_step;
    let mut trace = Vec::new();
    let mut converged = Convergence::MaxIters;
    let mut iterations = 0;
    for it in 1..=opts.max_iters {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteObjective);
        }
        if inf_norm(&g) <= opts.grad_tol {
            converged = Convergence::GradTol;
            break;
        }
        iterations = it;
        let gg = dot(&g, &g);
        let accepted = loop {
            let xn = step(&x, &g, -lr, mask);
            let fnew = obj.value(&xn);
            if fnew.is_finite() && fnew <= f - opts.armijo_c * lr * gg {
                break Some((xn, fnew));
            }
            lr *= opts.gd_backtrack;
            if lr < 1e-300 {
                break None;
            }
        };
        let Some((xn, fnew)) = accepted else {
            converged = Convergence::ObjTol;
            break;
        };
        let fprev = f;
        x = xn;
        f = fnew;
        trace.push(f);
        g = masked(obj.gradient(&x), mask);
        if (fprev - f).abs() <= opts.obj_tol * fprev.abs().max(1.0) {
            converged = Convergence::ObjTol;
            break;
        }
        lr *= 2.0;
    }
    Ok(OptimOutcome { x_final: x, objective_final: f, iterations, converged, trace })
}

/// Which first-order method to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    #[default]
    Scg,
    GradientDescent,
}

impl std::str::FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scg" => Ok(Optimizer::Scg),
            "gd" | "gradient-descent" => Ok(Optimizer::GradientDescent),
            _ => Err(Error::InvalidConfig(format!("unknown optimizer `{s}`"))),
        }
    }
}

pub fn minimize<O: Objective + ?Sized>(
    method: Optimizer,
    obj: &mut O,
    x0: &[f64],
    mask: &[bool],
    opts: &OptimOptions,
) -> Result<OptimOutcome> {
    match method {
        Optimizer::Scg => scg(obj, x0, mask, opts),
        Optimizer::GradientDescent => gd(obj, x0, mask, opts),
    }
}
