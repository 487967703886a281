//! Domain types shared by every estimation path: the binary design matrix,
//! loadings and factor scores, kernel hyperparameters, the observed data
//! matrix and fit results.

use std::io::Read;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default row-norm bound for scores and loadings.
pub const DEFAULT_NORM_BOUND: f64 = 2.5;

/// Binary J×K matrix declaring which factors may load on which items.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<u8>>", into = "Vec<Vec<u8>>")]
pub struct DesignMatrix {
    items: usize,
    factors: usize,
    q: Vec<u8>,
}

impl DesignMatrix {
    pub fn items(&self) -> usize {
        self.items
    }

    pub fn factors(&self) -> usize {
        self.factors
    }

    pub fn get(&self, j: usize, k: usize) -> bool {
        self.q[j * self.factors + k] == 1
    }

    pub fn row(&self, j: usize) -> &[u8] {
        &self.q[j * self.factors..(j + 1) * self.factors]
    }

    /// Row `j` as a bitmask with bit `k` set when factor `k` loads on item `j`.
    pub fn row_mask(&self, j: usize) -> u64 {
        self.row(j)
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1)
            .fold(0u64, |m, (k, _)| m | (1 << k))
    }

    /// Indices of the free (unconstrained) factors of item `j`.
    pub fn free_factors(&self, j: usize) -> Vec<usize> {
        (0..self.factors).filter(|&k| self.get(j, k)).collect()
    }

    /// The J×K mask as a 0/1 real matrix.
    pub fn mask_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.items, self.factors, |j, k| if self.get(j, k) { 1.0 } else { 0.0 })
    }

    pub fn all_ones(items: usize, factors: usize) -> Result<Self> {
        validate_design(&vec![vec![1; factors]; items])
    }

    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        (0..self.items).map(|j| self.row(j).to_vec()).collect()
    }

    /// Reads a headerless or headed CSV of 0/1 entries, J rows by K columns.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(reader);
        let mut rows: Vec<Vec<i64>> = Vec::new();
        for (r, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.iter().all(|f| f.is_empty()) {
                continue;
            }
            let parsed: std::result::Result<Vec<i64>, _> =
                rec.iter().map(|f| f.parse::<i64>()).collect();
            match parsed {
                Ok(v) => rows.push(v),
                Err(_) if r == 0 => continue,
                Err(_) => {
                    return Err(Error::Parse(format!(
                        "design matrix row {} is not integer-valued",
                        r + 1
                    )))
                }
            }
        }
        validate_design(&rows)
    }
}

impl TryFrom<Vec<Vec<u8>>> for DesignMatrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<u8>>) -> Result<Self> {
        let rows: Vec<Vec<i64>> = rows
            .into_iter()
            .map(|r| r.into_iter().map(i64::from).collect())
            .collect();
        validate_design(&rows)
    }
}

impl From<DesignMatrix> for Vec<Vec<u8>> {
    fn from(q: DesignMatrix) -> Self {
        q.to_rows()
    }
}

/// Checks a raw integer matrix and builds a [`DesignMatrix`].
pub fn validate_design<T: AsRef<[i64]>>(raw: &[T]) -> Result<DesignMatrix> {
    if raw.is_empty() || raw[0].as_ref().is_empty() {
        return Err(Error::EmptyMatrix);
    }
    let factors = raw[0].as_ref().len();
    let mut q = Vec::with_capacity(raw.len() * factors);
    for (j, row) in raw.iter().enumerate() {
        let row = row.as_ref();
        if row.len() != factors {
            return Err(Error::RaggedMatrix);
        }
        for (k, &v) in row.iter().enumerate() {
            if v != 0 && v != 1 {
                return Err(Error::NonBinaryEntry { row: j, col: k, value: v });
            }
            q.push(v as u8);
        }
        if row.iter().all(|&v| v == 0) {
            return Err(Error::AllZeroRow(j));
        }
    }
    Ok(DesignMatrix { items: raw.len(), factors, q })
}

/// Loading matrix A (J×K) whose zero pattern follows a design matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Loadings {
    #[serde(with = "crate::serde_rows")]
    pub a: DMatrix<f64>,
    pub bound: f64,
}

impl Loadings {
    /// Largest row norm, reported against `bound` but never enforced.
    pub fn max_row_norm(&self) -> f64 {
        max_row_norm(&self.a)
    }

    pub fn respects(&self, q: &DesignMatrix) -> bool {
        self.a.nrows() == q.items()
            && self.a.ncols() == q.factors()
            && (0..q.items()).all(|j| (0..q.factors()).all(|k| q.get(j, k) || self.a[(j, k)] == 0.0))
    }
}

/// Factor scores X (N×K).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorScores {
    #[serde(with = "crate::serde_rows")]
    pub x: DMatrix<f64>,
    pub bound: f64,
}

impl FactorScores {
    pub fn new(x: DMatrix<f64>) -> Self {
        FactorScores { x, bound: DEFAULT_NORM_BOUND }
    }

    pub fn max_row_norm(&self) -> f64 {
        max_row_norm(&self.x)
    }
}

fn max_row_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter().map(|r| r.norm()).fold(0.0, f64::max)
}

/// Returns `a` with every entry at a zero of `q` set to exactly 0.
pub fn apply_zero_pattern(a: &DMatrix<f64>, q: &DesignMatrix) -> Result<Loadings> {
    if a.nrows() != q.items() || a.ncols() != q.factors() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", q.items(), q.factors()),
            got: format!("{}x{}", a.nrows(), a.ncols()),
        });
    }
    let a = DMatrix::from_fn(a.nrows(), a.ncols(), |j, k| if q.get(j, k) { a[(j, k)] } else { 0.0 });
    Ok(Loadings { a, bound: DEFAULT_NORM_BOUND })
}

/// Squared-exponential kernel hyperparameters `(w, tau, sigma2)`:
/// inverse squared lengthscale, signal variance and noise variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub w: f64,
    pub tau: f64,
    pub sigma2: f64,
}

impl Hyperparams {
    pub fn new(w: f64, tau: f64, sigma2: f64) -> Result<Self> {
        let h = Hyperparams { w, tau, sigma2 };
        if !(w >= 0.0 && tau > 0.0 && sigma2 > 0.0) || !(w.is_finite() && tau.is_finite() && sigma2.is_finite()) {
            return Err(Error::InvalidConfig(format!("hyperparameters must be positive: {h:?}")));
        }
        Ok(h)
    }

    pub fn to_log(self) -> [f64; 3] {
        [self.w.ln(), self.tau.ln(), self.sigma2.ln()]
    }

    pub fn from_log(v: &[f64]) -> Self {
        Hyperparams { w: v[0].exp(), tau: v[1].exp(), sigma2: v[2].exp() }
    }
}

/// Whether a data CSV carries a trailing label column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelColumn {
    /// Labels present when the last column is non-numeric.
    Auto,
    /// The last column always holds labels.
    Last,
    None,
}

/// Observed N×J data matrix with optional class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    #[serde(with = "crate::serde_rows")]
    pub y: DMatrix<f64>,
    pub labels: Option<Vec<String>>,
    pub names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(y: DMatrix<f64>) -> Result<Self> {
        Self::with_labels(y, None)
    }

    pub fn with_labels(y: DMatrix<f64>, labels: Option<Vec<String>>) -> Result<Self> {
        if y.nrows() < 2 {
            return Err(Error::TooFewRows { min: 2, got: y.nrows() });
        }
        if let Some((idx, _)) = y.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            // column-major storage
            return Err(Error::NonFiniteData { row: idx % y.nrows(), col: idx / y.nrows() });
        }
        if let Some(l) = &labels {
            if l.len() != y.nrows() {
                return Err(Error::ShapeMismatch {
                    expected: format!("{} labels", y.nrows()),
                    got: format!("{}", l.len()),
                });
            }
        }
        Ok(Dataset { y, labels, names: None })
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn j(&self) -> usize {
        self.y.ncols()
    }

    /// Pooled sample variance of all entries.
    pub fn variance(&self) -> f64 {
        let n = self.y.len() as f64;
        let mean = self.y.sum() / n;
        self.y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)
    }

    /// Keeps the given rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let y = self.y.select_rows(rows);
        let labels = self.labels.as_ref().map(|l| rows.iter().map(|&i| l[i].clone()).collect());
        let mut d = Dataset::with_labels(y, labels)?;
        d.names = self.names.clone();
        Ok(d)
    }

    pub fn read_csv<R: Read>(reader: R, labels: LabelColumn) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(reader);
        let mut records: Vec<Vec<String>> = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            if rec.iter().all(|f| f.is_empty()) {
                continue;
            }
            records.push(rec.iter().map(str::to_owned).collect());
        }
        if records.is_empty() {
            return Err(Error::TooFewRows { min: 2, got: 0 });
        }
        let width = records[0].len();
        let numeric = |s: &str| s.parse::<f64>().is_ok();
        let has_labels = match labels {
            LabelColumn::Last => true,
            LabelColumn::None => false,
            LabelColumn::Auto => records.iter().skip(1).any(|r| !r.last().is_some_and(|s| numeric(s))),
        };
        if has_labels && width < 2 {
            return Err(Error::MissingLabels);
        }
        let n_feat = if has_labels { width - 1 } else { width };
        let header = !records[0][..n_feat].iter().all(|s| numeric(s));
        let names = header.then(|| records[0][..n_feat].to_vec());
        let body = if header { &records[1..] } else { &records[..] };
        let mut vals = Vec::with_capacity(body.len() * n_feat);
        let mut labs = Vec::new();
        for (r, rec) in body.iter().enumerate() {
            if rec.len() != width {
                return Err(Error::WrongColumnCount { expected: width, got: rec.len() });
            }
            for f in &rec[..n_feat] {
                vals.push(f.parse::<f64>().map_err(|_| {
                    Error::Parse(format!("row {}: `{f}` is not a number", r + 1))
                })?);
            }
            if has_labels {
                if rec[n_feat].is_empty() {
                    return Err(Error::MissingLabels);
                }
                labs.push(rec[n_feat].clone());
            }
        }
        let y = DMatrix::from_row_slice(body.len(), n_feat, &vals);
        let mut d = Dataset::with_labels(y, has_labels.then_some(labs))?;
        d.names = names;
        Ok(d)
    }
}

/// Why an optimization or fitting loop stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convergence {
    GradTol,
    ObjTol,
    MaxIters,
}

/// Estimated scores, loadings, hyperparameters and link values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub x_hat: FactorScores,
    pub a_hat: Loadings,
    pub theta_hat: Hyperparams,
    /// Posterior link means at the training indices, N×J.
    #[serde(with = "crate::serde_rows")]
    pub f_hat: DMatrix<f64>,
    /// Posterior weights `K_j^{-1} Y_j` per item, N×J; with the scores,
    /// loadings and hyperparameters they reproduce every link estimate.
    #[serde(with = "crate::serde_rows")]
    pub alpha: DMatrix<f64>,
    /// `(iteration, objective)` pairs; negative log posterior for joint
    /// MAP, negative marginal log-likelihood after each Step 1 otherwise.
    pub objective_trace: Vec<(usize, f64)>,
    pub marginal_loglik: f64,
    pub converged: Convergence,
    pub iterations: usize,
    /// Largest condition-number estimate over all item Gram matrices at
    /// the returned state.
    pub max_gram_condition: f64,
}
