//! Two-dimensional embedding pipeline for labelled multiphase-flow data:
//! a linear fit derives the design, then linear and nonlinear embeddings
//! are compared by nearest-neighbour classification error.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{fit_linear_fa, threshold_design, varimax, LinearFaConfig};
use crate::error::{Error, Result};
use crate::estimator::{fit, FitConfig};
use crate::metrics::nn_class_error;
use crate::model::{Dataset, DesignMatrix};

pub const OIL_FEATURES: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OilConfig {
    /// Rows kept after seeded sampling without replacement; `None` keeps all.
    pub subsample: Option<usize>,
    pub threshold: f64,
    pub k: usize,
    pub seed: u64,
    pub fit: FitConfig,
    pub lfa: LinearFaConfig,
}

impl Default for OilConfig {
    fn default() -> Self {
        OilConfig { subsample: Some(100), threshold: 0.3, k: 2, seed: 0, fit: FitConfig::default(), lfa: LinearFaConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OilReport {
    pub rows: Vec<usize>,
    pub labels: Vec<String>,
    pub design: DesignMatrix,
    #[serde(with = "crate::serde_rows")]
    pub lfa_embedding: DMatrix<f64>,
    #[serde(with = "crate::serde_rows")]
    pub nslfa_embedding: DMatrix<f64>,
    pub lfa_errors: usize,
    pub nslfa_errors: usize,
}

/// Seeded sorted sample of `n` distinct row indices out of `total`.
pub fn subsample_rows(total: usize, n: usize, seed: u64) -> Vec<usize> {
    if n >= total {
        return (0..total).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = rand::seq::index::sample(&mut rng, total, n).into_vec();
    rows.sort_unstable();
    rows
}

/// Linear fit with all loadings free, varimax, thresholding.
pub fn derive_design(y: &Dataset, k: usize, threshold: f64, lfa: &LinearFaConfig) -> Result<DesignMatrix> {
    let full = DesignMatrix::all_ones(y.j(), k)?;
    let unconstrained = fit_linear_fa(y, &full, lfa)?;
    let (rotated, _) = varimax(&unconstrained.a_hat);
    threshold_design(&rotated, threshold)
}

pub fn run_oil(data: &Dataset, cfg: &OilConfig) -> Result<OilReport> {
    if data.j() != OIL_FEATURES {
        return Err(Error::WrongColumnCount { expected: OIL_FEATURES, got: data.j() });
    }
    if data.labels.is_none() {
        return Err(Error::MissingLabels);
    }
    let rows = subsample_rows(data.n(), cfg.subsample.unwrap_or(data.n()), cfg.seed);
    let sub = data.select_rows(&rows)?;
    let labels = sub.labels.clone().ok_or(Error::MissingLabels)?;

    let design = derive_design(&sub, cfg.k, cfg.threshold, &cfg.lfa)?;
    let lfa = fit_linear_fa(&sub, &design, &cfg.lfa)?;
    let nslfa = fit(&sub, &design, &FitConfig { k: cfg.k, seed: cfg.seed, ..cfg.fit.clone() })?;

    Ok(OilReport {
        lfa_errors: nn_class_error(&lfa.x_hat, Some(&labels))?,
        nslfa_errors: nn_class_error(&nslfa.x_hat.x, Some(&labels))?,
        rows,
        labels,
        design,
        lfa_embedding: lfa.x_hat,
        nslfa_embedding: nslfa.x_hat.x,
    })
}
