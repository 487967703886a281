//! Evaluation measures comparing estimates against the generating truth.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sine of the angle between two vectors, in `[0, 1]`.
pub fn sin_angle(u: &[f64], v: &[f64]) -> Result<f64> {
    same_len(u, v)?;
    let uu: f64 = u.iter().map(|a| a * a).sum();
    let vv: f64 = v.iter().map(|a| a * a).sum();
    if uu == 0.0 || vv == 0.0 {
        return Err(Error::ZeroVector);
    }
    let uv: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let cos2 = (uv * uv / (uu * vv)).clamp(0.0, 1.0);
    Ok((1.0 - cos2).sqrt())
}

/// Absolute Pearson correlation.
pub fn abs_corr(u: &[f64], v: &[f64]) -> Result<f64> {
    same_len(u, v)?;
    let n = u.len() as f64;
    let mu = u.iter().sum::<f64>() / n;
    let mv = v.iter().sum::<f64>() / n;
    let (mut suv, mut suu, mut svv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        let (da, db) = (a - mu, b - mv);
        suv += da * db;
        suu += da * da;
        svv += db * db;
    }
    if suu <= 0.0 || svv <= 0.0 {
        return Err(Error::DegenerateVariance);
    }
    Ok((suv / (suu * svv).sqrt()).abs().min(1.0))
}

fn same_len(u: &[f64], v: &[f64]) -> Result<()> {
    if u.len() != v.len() {
        return Err(Error::ShapeMismatch { expected: u.len().to_string(), got: v.len().to_string() });
    }
    Ok(())
}

fn same_shape(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", a.shape()),
            got: format!("{:?}", b.shape()),
        });
    }
    Ok(())
}

/// `‖X* A*ᵀ − X̂ Âᵀ‖²_F / (NJ)`.
pub fn d_xa(x_true: &DMatrix<f64>, a_true: &DMatrix<f64>, x_hat: &DMatrix<f64>, a_hat: &DMatrix<f64>) -> Result<f64> {
    same_shape(x_true, x_hat)?;
    same_shape(a_true, a_hat)?;
    if x_true.ncols() != a_true.ncols() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} loading columns", x_true.ncols()),
            got: a_true.ncols().to_string(),
        });
    }
    let p = x_true * a_true.transpose() - x_hat * a_hat.transpose();
    Ok(p.norm_squared() / p.len() as f64)
}

/// Mean squared link error over all N×J entries.
pub fn d_f(f_hat: &DMatrix<f64>, f_true: &DMatrix<f64>) -> Result<f64> {
    same_shape(f_hat, f_true)?;
    Ok((f_hat - f_true).norm_squared() / f_hat.len() as f64)
}

/// Leave-one-out nearest-neighbour classification errors in a latent space.
/// Ties go to the lowest index.
pub fn nn_class_error<L: PartialEq>(z: &DMatrix<f64>, labels: Option<&[L]>) -> Result<usize> {
    let labels = labels.ok_or(Error::MissingLabels)?;
    let n = z.nrows();
    if labels.len() != n {
        return Err(Error::ShapeMismatch { expected: n.to_string(), got: labels.len().to_string() });
    }
    if n < 2 {
        return Err(Error::TooFewRows { min: 2, got: n });
    }
    let mut errors = 0;
    for i in 0..n {
        let mut best = (f64::INFINITY, usize::MAX);
        for l in (0..n).filter(|&l| l != i) {
            let d = (z.row(i) - z.row(l)).norm_squared();
            if d < best.0 {
                best = (d, l);
            }
        }
        if labels[best.1] != labels[i] {
            errors += 1;
        }
    }
    Ok(errors)
}

/// Per-replication evaluation of one fit against the truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub corr: Vec<f64>,
    pub sin: Vec<f64>,
    pub d_xa: f64,
    pub d_f: Option<f64>,
    pub nn_error: Option<usize>,
}

pub fn evaluate(
    x_true: &DMatrix<f64>,
    a_true: &DMatrix<f64>,
    f_true: &DMatrix<f64>,
    x_hat: &DMatrix<f64>,
    a_hat: &DMatrix<f64>,
    f_hat: Option<&DMatrix<f64>>,
) -> Result<EvalSummary> {
    same_shape(x_true, x_hat)?;
    let col = |m: &DMatrix<f64>, k: usize| -> Vec<f64> { m.column(k).iter().copied().collect() };
    let mut corr = Vec::new();
    let mut sin = Vec::new();
    for k in 0..x_true.ncols() {
        let (t, e) = (col(x_true, k), col(x_hat, k));
        corr.push(abs_corr(&t, &e)?);
        sin.push(sin_angle(&t, &e)?);
    }
    Ok(EvalSummary {
        corr,
        sin,
        d_xa: d_xa(x_true, a_true, x_hat, a_hat)?,
        d_f: f_hat.map(|f| d_f(f, f_true)).transpose()?,
        nn_error: None,
    })
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
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

/// Sample standard deviation.
pub fn std_dev(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn sin_basics() {
        assert_eq!(sin_angle(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(sin_angle(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 1.0);
        assert_eq!(sin_angle(&[0.0, 0.0], &[1.0, 3.0]), Err(Error::ZeroVector));
    }

    // Two parameterizations producing the same law with X̃_[k] = (1,0,1,0,..)
    // and X'_[k] = (1,1,1,1,..) at every even truncation: sin = 1/√2.
    #[test]
    fn non_identifiable_construction() {
        for n in [2usize, 4, 10, 50] {
            let u: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }).collect();
            let v = vec![1.0; n];
            assert_relative_eq!(sin_angle(&u, &v).unwrap(), std::f64::consts::FRAC_1_SQRT_2, max_relative = 1e-14);
        }
    }

    #[test]
    fn corr_basics() {
        let u = [0.3, -1.0, 2.0, 4.5];
        let v: Vec<f64> = u.iter().map(|x| 2.0 * x + 3.0).collect();
        assert_relative_eq!(abs_corr(&u, &v).unwrap(), 1.0, max_relative = 1e-14);
        let w: Vec<f64> = u.iter().map(|x| -x).collect();
        assert_relative_eq!(abs_corr(&u, &w).unwrap(), 1.0, max_relative = 1e-14);
        assert_eq!(abs_corr(&u, &[1.0; 4]), Err(Error::DegenerateVariance));

        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let a: Vec<f64> = (0..10_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..10_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        assert!(abs_corr(&a, &b).unwrap() <= 0.05);
    }

    #[test]
    fn d_xa_cases() {
        let x = DMatrix::from_fn(4, 2, |i, k| (i + k) as f64 * 0.5 - 1.0);
        let a = DMatrix::from_fn(3, 2, |j, k| (j * 2 + k) as f64 * 0.3);
        assert_eq!(d_xa(&x, &a, &x, &a).unwrap(), 0.0);
        assert_relative_eq!(d_xa(&x, &a, &(&x * 2.0), &(&a / 2.0)).unwrap(), 0.0, epsilon = 1e-28);
        // perturb a single product entry through a rank-one change of x: only
        // entry (0, 0) of XAᵀ moves when a_0 is the sole loading on factor 0
        let x1 = DMatrix::from_fn(4, 1, |i, _| i as f64 + 1.0);
        let a1 = DMatrix::from_vec(3, 1, vec![1.0, 0.0, 0.0]);
        let mut x2 = x1.clone();
        x2[(0, 0)] += 0.3;
        assert_relative_eq!(d_xa(&x1, &a1, &x2, &a1).unwrap(), 0.09 / 12.0, max_relative = 1e-12);
        assert!(matches!(d_xa(&x, &a, &x1, &a1), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn d_f_cases() {
        let f = DMatrix::from_fn(5, 3, |i, j| (i * j) as f64 * 0.1);
        assert_eq!(d_f(&f, &f).unwrap(), 0.0);
        assert_relative_eq!(d_f(&f.add_scalar(0.1), &f).unwrap(), 0.01, max_relative = 1e-12);
        assert_eq!(d_f(&DMatrix::from_element(1, 1, 0.5), &DMatrix::zeros(1, 1)).unwrap(), 0.25);
    }

    #[test]
    fn nn_cases() {
        let z = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 0.1, 0.0, 10.0, 10.0, 10.1, 10.0]);
        assert_eq!(nn_class_error(&z, Some(&[1, 1, 2, 2])).unwrap(), 0);
        let z2 = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(nn_class_error(&z2, Some(&["a", "b"])).unwrap(), 2);
        let line = DMatrix::from_fn(7, 2, |i, k| if k == 0 { i as f64 } else { 0.0 });
        let alt: Vec<u8> = (0..7).map(|i| (i % 2) as u8).collect();
        assert_eq!(nn_class_error(&line, Some(&alt)).unwrap(), 7);
        assert_eq!(nn_class_error::<u8>(&line, None), Err(Error::MissingLabels));
    }

    #[test]
    fn nn_ties_go_to_lowest_index() {
        // point 1 is equidistant from 0 and 2
        let z = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 0.0, 2.0, 0.0]);
        assert_eq!(nn_class_error(&z, Some(&[0, 0, 1])).unwrap(), 1);
        assert_eq!(nn_class_error(&z, Some(&[1, 0, 0])).unwrap(), 2);
    }
}
