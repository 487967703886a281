#![allow(dead_code)]

use nalgebra::DMatrix;
use nslfa::inference::{grad_joint, joint_log_posterior, step2_loadings, step2_scores, LinkEvaluator, PriorSpec};
use nslfa::kernel::build_gram_set;
use nslfa::{apply_zero_pattern, validate_design, Dataset, DesignMatrix, FactorScores, Hyperparams, Loadings};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// A small random joint-posterior configuration.
pub struct Config {
    pub x: FactorScores,
    pub a: Loadings,
    pub h: Hyperparams,
    pub y: Dataset,
    pub q: DesignMatrix,
}

pub fn random_config(seed: u64) -> Config {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(3..=12);
    let j = rng.random_range(1..=4);
    let k = rng.random_range(1..=3);
    let rows: Vec<Vec<i64>> = (0..j)
        .map(|_| loop {
            let r: Vec<i64> = (0..k).map(|_| i64::from(rng.random_bool(0.6))).collect();
            if r.contains(&1) {
                break r;
            }
        })
        .collect();
    let q = validate_design(&rows).unwrap();
    let x = DMatrix::from_fn(n, k, |_, _| rng.random_range(-1.5..1.5));
    let a = DMatrix::from_fn(j, k, |_, _| rng.random_range(-1.2..1.2));
    let y = DMatrix::from_fn(n, j, |_, _| StandardNormal.sample(&mut rng));
    let h = Hyperparams::new(rng.random_range(0.3..2.0), rng.random_range(0.5..2.0), rng.random_range(0.1..0.5)).unwrap();
    Config {
        x: FactorScores::new(x),
        a: apply_zero_pattern(&a, &q).unwrap(),
        h,
        y: Dataset::new(y).unwrap(),
        q,
    }
}

pub fn central_difference(f: impl Fn(f64) -> f64, at: f64) -> f64 {
    let step = 1e-5 * at.abs().max(1.0);
    (f(at + step) - f(at - step)) / (2.0 * step)
}

/// Relative agreement with a small absolute floor for entries that vanish.
pub fn close(analytic: f64, numeric: f64, rel: f64) -> bool {
    (analytic - numeric).abs() <= rel * analytic.abs().max(numeric.abs()) + 1e-8
}

/// Compares every analytic gradient component of the joint log posterior and
/// both Step-2 objectives with central differences; returns
/// `(failing, checked)`.
pub fn gradient_check(c: &Config, prior: &PriorSpec, rel: f64) -> (usize, usize) {
    let mut fails = 0;
    let mut total = 0;
    let mut check = |g: f64, fd: f64| {
        total += 1;
        if !close(g, fd, rel) {
            fails += 1;
        }
    };
    let g = grad_joint(&c.x, &c.a, &c.h, &c.y, &c.q, prior).unwrap();
    let obj = |x: &FactorScores, a: &Loadings, h: &Hyperparams| joint_log_posterior(x, a, h, &c.y, &c.q, prior).unwrap();

    let log = c.h.to_log();
    for p in 0..3 {
        let fd = central_difference(
            |v| {
                let mut l = log;
                l[p] = v;
                obj(&c.x, &c.a, &Hyperparams::from_log(&l))
            },
            log[p],
        );
        check(g.grad_log_theta[p], fd);
    }
    for i in 0..c.x.x.nrows() {
        for k in 0..c.x.x.ncols() {
            let fd = central_difference(
                |v| {
                    let mut x = c.x.clone();
                    x.x[(i, k)] = v;
                    obj(&x, &c.a, &c.h)
                },
                c.x.x[(i, k)],
            );
            check(g.grad_x[(i, k)], fd);
        }
    }
    for j in 0..c.q.items() {
        for k in 0..c.q.factors() {
            if !c.q.get(j, k) {
                assert_eq!(g.grad_a[(j, k)], 0.0);
                continue;
            }
            let fd = central_difference(
                |v| {
                    let mut a = c.a.clone();
                    a.a[(j, k)] = v;
                    obj(&c.x, &a, &c.h)
                },
                c.a.a[(j, k)],
            );
            check(g.grad_a[(j, k)], fd);
        }
    }

    let gram = build_gram_set(&c.x, &c.a, &c.h, &c.y).unwrap();
    let links = LinkEvaluator::from_gram(&gram);
    for i in 0..c.x.x.nrows() {
        let x0: Vec<f64> = c.x.x.row(i).iter().copied().collect();
        let (_, grad) = step2_scores(&x0, i, &links, &c.a.a, &c.y);
        for k in 0..x0.len() {
            let fd = central_difference(
                |v| {
                    let mut xv = x0.clone();
                    xv[k] = v;
                    step2_scores(&xv, i, &links, &c.a.a, &c.y).0
                },
                x0[k],
            );
            check(grad[k], fd);
        }
    }
    for j in 0..c.q.items() {
        let a0: Vec<f64> = c.a.a.row(j).iter().copied().collect();
        let (_, grad) = step2_loadings(&a0, j, &links[j], &c.x.x, &c.y, &c.q).unwrap();
        for k in c.q.free_factors(j) {
            let fd = central_difference(
                |v| {
                    let mut av = a0.clone();
                    av[k] = v;
                    step2_loadings(&av, j, &links[j], &c.x.x, &c.y, &c.q).unwrap().0
                },
                a0[k],
            );
            check(grad[k], fd);
        }
    }
    (fails, total)
}

/// Negates column `k` of both scores and loadings.
pub fn flip_column(x: &FactorScores, a: &Loadings, k: usize) -> (FactorScores, Loadings) {
    let mut x = x.clone();
    let mut a = a.clone();
    x.x.column_mut(k).neg_mut();
    a.a.column_mut(k).neg_mut();
    (x, a)
}
